#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "implab/scm.hpp"

namespace implab {

struct PanelEnvironment {
  std::string name;
  Eigen::MatrixXd x;  // n_e x d
  Eigen::VectorXd y;  // n_e
};

// Multi-environment regression data with a shared feature layout.
struct PanelDataset {
  std::vector<PanelEnvironment> envs;

  int d() const { return envs.empty() ? 0 : static_cast<int>(envs[0].x.cols()); }
  int n_envs() const { return static_cast<int>(envs.size()); }
  Eigen::Index total_rows() const;
  Eigen::Index min_rows() const;
  std::vector<int> pooled_labels() const;  // env index per pooled row
  Eigen::MatrixXd pooled_x() const;
  Eigen::VectorXd pooled_y() const;
  void validate() const;  // throws std::invalid_argument on inconsistency
};

// Draws n_per_env rows from every (discrete) environment of the model.
PanelDataset simulate_panel(const LinearScm& scm, int n_per_env,
                            std::uint64_t seed);

// Column mapping for CSV panels. Feature columns keep their listed order.
// Discrete panels name an environment column; continuous samples name a
// numeric u column instead.
struct PanelSchema {
  std::string env_col;
  std::string u_col;
  std::string y_col;
  std::vector<std::string> feature_cols;
};

// Reads a long-format CSV (header row required). Rows with non-numeric or
// missing values in mapped columns are dropped; the count is reported.
struct PanelLoadResult {
  PanelDataset panel;
  long dropped_rows{0};
};

PanelLoadResult load_panel_csv(const std::string& path,
                               const PanelSchema& schema);

void save_panel_csv(const std::string& path, const PanelDataset& panel,
                    const PanelSchema& schema);

// Continuous-regime CSV: schema.u_col maps the numeric environment input.
// Rows keep their file order; rows with non-numeric or missing mapped cells
// are dropped and counted.
struct ContinuousLoadResult {
  ContinuousSample sample;
  long dropped_rows{0};
};

ContinuousLoadResult load_continuous_csv(const std::string& path,
                                         const PanelSchema& schema);

void save_continuous_csv(const std::string& path,
                         const ContinuousSample& sample,
                         const PanelSchema& schema);

}  // namespace implab
