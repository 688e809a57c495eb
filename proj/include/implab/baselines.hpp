#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "implab/panel.hpp"

namespace implab {

// Fitted linear predictor y = x * coefficients + intercept.
struct LinearModel {
  Eigen::VectorXd coefficients;  // d, aligned with panel feature columns
  double intercept{0.0};
  std::string method;            // "ols" or "anchor"
  std::optional<double> gamma;   // present iff method == "anchor"

  std::string tag() const;       // "ols" or "anchor(<gamma>)"
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
  double mse(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) const;
};

// OLS of y on all features over the pooled panel, intercept included.
// Throws std::runtime_error on a rank-deficient pooled design.
LinearModel pooled_ols(const PanelDataset& panel);

// Anchor regression with environment one-hot indicators as the anchor: each
// column of (X, y) is shifted by (sqrt(gamma) - 1) times its per-environment
// mean, then fitted by OLS with an intercept. gamma = 1 leaves the data
// untouched (pooled OLS); gamma = 0 removes all between-environment mean
// variation (the within estimator).
LinearModel anchor_regression(const PanelDataset& panel, double gamma);

// Grid used by the replication experiments: {0, 0.05, 0.1, ..., 0.5}.
std::vector<double> anchor_default_grid();

// Mean held-out MSE per grid entry under seeded k-fold cross-validation.
// Folds are stratified by environment: each environment's rows are shuffled
// once (per-environment substream of 'seed') and dealt round-robin, so every
// fold sees every environment. Requires every environment to have at least
// 'folds' rows.
std::vector<double> anchor_cv_mse(const PanelDataset& panel,
                                  const std::vector<double>& grid, int folds,
                                  std::uint64_t seed);

// Full-panel refit at the grid entry with the smallest CV MSE; exact ties go
// to the smaller gamma.
LinearModel anchor_cv(const PanelDataset& panel,
                      const std::vector<double>& grid = anchor_default_grid(),
                      int folds = 5, std::uint64_t seed = 0);

}  // namespace implab
