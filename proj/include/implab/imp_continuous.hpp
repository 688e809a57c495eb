#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "implab/imp_discrete.hpp"
#include "implab/scm.hpp"

namespace implab {

inline constexpr double kDefaultBandwidth = 0.1;

// Candidate tuple for continuous environments. W = X_P carries the
// environment-varying coefficients and appears in both regressions, so the
// constraints are: P nonempty, P subset of R subset of S\{k}, P subset of S.
struct ContCandidate {
  int k{0};
  NodeSet p;
  NodeSet r;
  NodeSet s;
};

// All candidate tuples for d predictors, ordered by k ascending, then S, R,
// and P in ascending mask order. Total count is 2d(4^{d-1} - 3^{d-1}).
std::vector<ContCandidate> enumerate_candidates_cont(
    int d, const EnumerationLimits& limits = {});

// One candidate's fitted matching relation. The response-side semiparametric
// fit of y on (W, Z = X_{S\P}) gives (beta_hat, m_hat); the k-side fit of
// X_k on (W, Z_V = X_{R\P}) gives (beta_v_hat, m_v_hat); the matching
// parameter w_hat regresses m_hat on [W, m_v_hat].
struct ContImpFit {
  ContCandidate cand;
  double h{kDefaultBandwidth};
  bool feasible{false};
  std::string infeasible_reason;

  Eigen::VectorXd w_hat;       // |P|+1; the last entry multiplies m_v_hat
  Eigen::VectorXd beta_hat;    // |S\P|
  Eigen::VectorXd beta_v_hat;  // |R\P|
  Eigen::VectorXd m_hat;       // n
  Eigen::VectorXd m_v_hat;     // n
  Eigen::VectorXd residual;    // m_hat - [W, m_v_hat] * w_hat
  double t_score{0.0};         // squared norm of residual / n
  double s_pred{0.0};          // in-sample MSE of the assembled prediction
  double matching_condition{0.0};  // column condition of [W, m_v_hat]
  bool low_heterogeneity{false};   // m_v_hat nearly a fixed map of W
};

// Fits one candidate at bandwidth h. Malformed data or candidates throw
// std::invalid_argument; smoother failures (empty kernel windows, singular
// profiled blocks, collinear matching designs) surface as infeasible fits.
ContImpFit fit_candidate_continuous(const ContinuousSample& data,
                                    const ContCandidate& cand,
                                    double h = kDefaultBandwidth);

// Out-of-sample prediction: the k-side varying part is re-estimated on the
// test rows alone (same bandwidth unless overridden), then combined with the
// trained w_hat and beta_hat. Smoother failures on the test rows throw
// std::runtime_error naming the offending point.
Eigen::VectorXd predict_continuous(
    const ContImpFit& fit, const Eigen::VectorXd& u_test,
    const Eigen::MatrixXd& x_test,
    std::optional<double> h_override = std::nullopt);

struct ContScoreTable {
  std::vector<ContCandidate> candidates;
  std::vector<char> feasible;
  std::vector<double> t_score;
  std::vector<double> s_pred;
  std::vector<char> selected_i;      // filled by selection
  std::vector<char> selected_ipred;  // filled by selection
};

// Scores every candidate, computing the smoother products once per distinct
// P and reusing them across candidates that share it.
ContScoreTable score_candidates_cont(const ContinuousSample& data,
                                     const std::vector<ContCandidate>& cands,
                                     double h = kDefaultBandwidth);

// Residual/prediction cutoffs from resampling rows i.i.d. with replacement
// (rows are exchangeable over the draw of U, so no block structure applies).
Cutoffs bootstrap_cutoffs_cont(const ContinuousSample& data,
                               const std::vector<ContCandidate>& candidates,
                               const SelectionConfig& config,
                               double h = kDefaultBandwidth);

// Full continuous pipeline: enumerate, score, preselect on s_pred, calibrate
// cutoffs, select with the residual score, and average the selected
// candidates' predictions on the test rows. Selected candidates whose test-
// side smoother fails are dropped and reported; if every one fails, throws
// std::runtime_error. Only residual-score selection is supported: the
// invariance score needs repeated environments.
struct ContSelectionReport {
  int d{0};
  double h{kDefaultBandwidth};
  SelectionConfig config;
  ContScoreTable table;
  Selection selection;
  Eigen::VectorXd y_hat;      // empty when selection.found is false
  std::vector<int> used;      // candidate indices contributing to y_hat
  std::vector<int> dropped;   // selected but unusable on the test rows
};

ContSelectionReport select_and_predict_cont(
    const ContinuousSample& train, const Eigen::VectorXd& u_test,
    const Eigen::MatrixXd& x_test, const EnumerationLimits& limits = {},
    const SelectionConfig& config = {}, double h = kDefaultBandwidth);

// Training-side half of the pipeline: enumerate, score, calibrate cutoffs,
// and mark the selection. y_hat, used, and dropped stay empty.
ContSelectionReport select_cont(const ContinuousSample& train,
                                const EnumerationLimits& limits = {},
                                const SelectionConfig& config = {},
                                double h = kDefaultBandwidth);

// Averages predict_continuous over several fitted candidates; fits whose
// test-side regression is rank-deficient are dropped and reported. Throws
// std::runtime_error when none is given or every fit is dropped.
struct ContPrediction {
  Eigen::VectorXd y_hat;
  std::vector<int> dropped;  // indices into 'fits'
};

ContPrediction predict_continuous_average(
    const std::vector<ContImpFit>& fits, const Eigen::VectorXd& u_test,
    const Eigen::MatrixXd& x_test,
    std::optional<double> h_override = std::nullopt);

// CSV with one row per candidate: P,k,R,S,feasible,T_c,s_pred,selected_I,
// selected_Ipred. Sets are 1-based "{i;j}" lists, k is 1-based, floats are
// shortest round-trip decimal.
void write_cont_score_table_csv(std::ostream& os, const ContScoreTable& table);

}  // namespace implab
