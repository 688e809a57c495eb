#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

namespace implab {

struct OlsFit {
  Eigen::VectorXd coef;              // aligned with design columns
  std::optional<double> intercept;   // present iff fitted with an intercept
  Eigen::VectorXd fitted;
  Eigen::VectorXd residuals;
  double gram_condition{0.0};        // squared design condition estimate
};

// Least squares of response on design (a constant column is appended when
// with_intercept). Throws std::invalid_argument when n is too small and
// std::runtime_error (carrying the condition estimate) on rank deficiency.
OlsFit ols_fit(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
               bool with_intercept);

// Two-sample invariance test of residuals across environments: for each
// environment, a Welch t-test and a two-sided variance F-test against the
// pooled complement; the combined p-value is min(1, 2|E| * min p). Labels are
// arbitrary ints; every environment needs at least 3 points.
double residual_invariance_pvalue(const Eigen::VectorXd& residuals,
                                  const std::vector<int>& env_labels);

// Sufficient statistics of one environment's residuals.
struct GroupMoments {
  double n{0.0};
  double sum{0.0};
  double sumsq{0.0};
};

// Same test computed from per-environment sufficient statistics.
double invariance_pvalue_moments(const std::vector<GroupMoments>& groups);

inline double epanechnikov(double u) {
  const double v = 1.0 - u * u;
  return v > 0.0 ? 0.75 * v : 0.0;
}

// Varying-coefficient fit Y = alpha(U)'W + beta'Z + noise via profile least
// squares with a local-linear Epanechnikov smoother at bandwidth h.
struct SvcFit {
  Eigen::MatrixXd a;          // n x n smoother; row i evaluates at U_i
  Eigen::VectorXd beta_hat;   // q (empty when q = 0)
  Eigen::VectorXd m_hat;      // n, equals a * (y - z * beta_hat)
  double h{0.0};
  Eigen::MatrixXd alpha_hat;  // n x p, local varying-coefficient estimates
  int ridged_count{0};        // local Grams that needed regularization
  bool ridged() const { return ridged_count > 0; }
};

// Cost is O(n^2 p^3) time and O(n^2) memory for the materialized smoother.
// Near-singular local Grams (condition > 1e12) get a ridge of
// 1e-10 * trace/dim and are counted in ridged_count; a window whose kernel
// mass is zero raises an error naming the point.
SvcFit svc_profile_fit(const Eigen::VectorXd& u, const Eigen::MatrixXd& w,
                       const Eigen::MatrixXd& z, const Eigen::VectorXd& y,
                       double h);

// Smoother applied to fresh data only (no reuse of any training fit): the
// varying part of 'response' on (u, w) after profiling out z.
Eigen::VectorXd svc_predict_m(const Eigen::VectorXd& u,
                              const Eigen::MatrixXd& w,
                              const Eigen::MatrixXd& z,
                              const Eigen::VectorXd& response, double h);

// Product of the local-linear smoother determined by (u, w, h) with each
// column of 'cols', streamed row by row so the n x n smoother is never
// materialized. Equals svc_profile_fit(...).a * cols up to roundoff.
Eigen::MatrixXd svc_smooth_columns(const Eigen::VectorXd& u,
                                   const Eigen::MatrixXd& w,
                                   const Eigen::MatrixXd& cols, double h);

}  // namespace implab
