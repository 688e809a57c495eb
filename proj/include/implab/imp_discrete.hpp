#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "implab/panel.hpp"

namespace implab {

// Subset of predictor indices {0..d-1}, d <= 30.
struct NodeSet {
  std::uint32_t mask{0};

  static NodeSet from_indices(const std::vector<int>& idx);
  std::vector<int> indices() const;
  bool contains(int i) const { return (mask >> i) & 1u; }
  int size() const;
  bool operator==(const NodeSet& o) const { return mask == o.mask; }
};

// Matching-candidate triple: regress y on X_S, match against the fitted
// values of X_k regressed on X_R, where R is a subset of S \ {k}. S may be
// empty and need not contain k.
struct ImpCandidate {
  int k{0};   // matched node, 0-based
  NodeSet r;  // regressors for the k-side fit
  NodeSet s;  // regressors for the y-side fit
};

struct EnumerationLimits {
  int max_s_size{-1};        // <0: no limit
  long max_candidates{-1};   // <0: no limit; otherwise prefix of full order
};

// All (k, R, S) with k in S and R subset of S\{k}, in lexicographic order:
// k ascending, S bitmask ascending, R bitmask ascending.
std::vector<ImpCandidate> enumerate_candidates(
    int d, const EnumerationLimits& limits = {});

// Single-candidate fit with all intermediate artifacts materialized.
struct DiscreteImpFit {
  ImpCandidate cand;
  bool with_intercept{true};
  bool feasible{false};
  std::string infeasible_reason;

  Eigen::VectorXd eta;  // d entries, zero outside S (matching regression)
  double lambda{0.0};   // coefficient on the k-side fitted values
  double b{0.0};        // intercept of the matching regression

  // Predictor coefficients: pooled regression of y on [X_S, L2, 1].
  Eigen::VectorXd f_eta;  // d entries, zero outside S
  double f_lambda{0.0};
  double f_b{0.0};

  std::vector<Eigen::VectorXd> l1_by_env;  // per-env fitted y | X_S
  std::vector<Eigen::VectorXd> l2_by_env;  // per-env fitted x_k | X_R
  Eigen::VectorXd residual;                // pooled matching residual
  double t_score{0.0};                     // mean squared matching residual
  double p_inv{0.0};   // invariance p-value of the predictor residuals
  double s_pred{0.0};  // pooled in-sample MSE of the predictor
  double design_condition{0.0};  // SVD condition of the pooled design
};

// Preconditions: >= 1 environment and n_e > max(|S|,|R|) + 2 everywhere.
// Rank deficiency anywhere marks the fit infeasible instead of throwing.
DiscreteImpFit fit_candidate_discrete(const PanelDataset& panel,
                                      const ImpCandidate& cand,
                                      bool with_intercept = true);

// Pooled mean squared error of the fitted predictor on a panel.
double prediction_score(const DiscreteImpFit& fit, const PanelDataset& panel);

// Batch scores computed from per-environment cross-moment matrices; agrees
// with fit_candidate_discrete (intercept on) up to numerical round-off.
struct ScoreTable {
  std::vector<ImpCandidate> candidates;
  std::vector<char> feasible;
  std::vector<double> t_score;
  std::vector<double> p_inv;  // NaN when skipped
  std::vector<double> s_pred;
  std::vector<char> selected_i;      // filled by select_imps
  std::vector<char> selected_ipred;  // filled by select_imps
};

ScoreTable score_candidates(const PanelDataset& panel,
                            const std::vector<ImpCandidate>& candidates,
                            bool with_p_inv = true);

enum class ScoreKind { kResidual, kInvariance };

struct SelectionConfig {
  ScoreKind score_kind{ScoreKind::kResidual};
  std::optional<double> c_imp;   // fixed cutoff override
  std::optional<double> c_pred;  // fixed cutoff override
  int bootstrap_rounds{50};
  double quantile{0.9};
  double invariance_level{0.05};  // cutoff on p_inv for kInvariance
  bool preselect_median{true};    // drop s_pred above the median first
  std::uint64_t seed{0};
};

struct Cutoffs {
  double c_imp{0.0};
  double c_pred{0.0};
};

// Nonparametric-bootstrap cutoffs: each round resamples min_e n_e rows per
// environment with replacement, rescores the given candidates, and records
// the minimum t_score and s_pred across them; cutoffs are the configured
// quantile of those per-round minima.
Cutoffs bootstrap_cutoffs(const PanelDataset& panel,
                          const std::vector<ImpCandidate>& candidates,
                          const SelectionConfig& config);

struct Selection {
  std::vector<int> i_hat;   // indices into the score table
  std::vector<int> i_pred;  // subset of i_hat used for prediction
  bool found{false};        // false: no candidate passed the cutoff
  Cutoffs cutoffs;
};

// Applies cutoffs to a score table and marks the selected flags. When the
// predictive set would be empty, it falls back to the best-s_pred member of
// i_hat. An empty i_hat reports found = false.
Selection select_imps(ScoreTable& table, const SelectionConfig& config,
                      const std::optional<Cutoffs>& bootstrap = std::nullopt);

// Pre-selection mask shared by both environment regimes: feasible candidates
// whose s_pred lies at or below the feasible median (when enabled).
std::vector<char> preselection_mask(const std::vector<char>& feasible,
                                    const std::vector<double>& s_pred,
                                    const SelectionConfig& config);

// Score-level core of select_imps, shared with the continuous pipeline.
// p_inv is consulted only for invariance-kind selection and may be empty
// otherwise; the two flag vectors are resized and filled.
Selection select_from_scores(const std::vector<char>& feasible,
                             const std::vector<double>& t_score,
                             const std::vector<double>& p_inv,
                             const std::vector<double>& s_pred,
                             const SelectionConfig& config,
                             const std::optional<Cutoffs>& bootstrap,
                             std::vector<char>& selected_i,
                             std::vector<char>& selected_ipred);

// Full pipeline: enumerate, score, preselect, bootstrap, select, and fit the
// selected candidates on the training panel.
struct DiscreteImpModel {
  int d{0};
  SelectionConfig config;
  ScoreTable table;
  Selection selection;
  std::vector<DiscreteImpFit> fits;  // one per selection.i_pred entry
};

DiscreteImpModel fit_discrete_imp(const PanelDataset& panel,
                                  const EnumerationLimits& limits = {},
                                  const SelectionConfig& config = {});

// Averages the fitted predictors over new data. Fits whose k-side test
// regression is rank-deficient are dropped and reported; throws
// std::runtime_error if every fit is dropped or none is given.
struct DiscretePrediction {
  Eigen::VectorXd y_hat;
  std::vector<int> dropped;  // indices of dropped fits
};

DiscretePrediction predict_discrete(const std::vector<DiscreteImpFit>& fits,
                                    const Eigen::MatrixXd& x_test);

DiscretePrediction predict_discrete(const DiscreteImpModel& model,
                                    const Eigen::MatrixXd& x_test);

// CSV with one row per candidate: k,R,S,feasible,T,p_inv,s_pred,
// selected_I,selected_Ipred. Sets print 1-based as {i;j}; floats use
// max-precision round-trip formatting.
void write_score_table_csv(std::ostream& out, const ScoreTable& table);

}  // namespace implab
