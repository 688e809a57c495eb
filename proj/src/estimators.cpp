#include "implab/estimators.hpp"

#include <algorithm>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace implab {

namespace {

constexpr double kLocalGramConditionCap = 1e12;
constexpr double kLocalGramRidgeScale = 1e-10;

}  // namespace

OlsFit ols_fit(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
               bool with_intercept) {
  const int n = static_cast<int>(design.rows());
  if (response.size() != n)
    throw std::invalid_argument("design and response row counts differ");
  const int p = static_cast<int>(design.cols()) + (with_intercept ? 1 : 0);
  if (n <= p)
    throw std::invalid_argument("ols_fit needs more rows than columns");

  Eigen::MatrixXd x(n, p);
  x.leftCols(design.cols()) = design;
  if (with_intercept) x.col(p - 1).setOnes();

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  Eigen::VectorXd rdiag = qr.matrixR().diagonal().cwiseAbs();
  const double cond =
      rdiag.minCoeff() > 0.0 ? rdiag.maxCoeff() / rdiag.minCoeff()
                             : std::numeric_limits<double>::infinity();
  if (qr.rank() < p) {
    std::ostringstream msg;
    msg << "ols_fit: rank-deficient design (" << qr.rank() << " < " << p
        << ", condition estimate " << cond << ")";
    throw std::runtime_error(msg.str());
  }

  OlsFit fit;
  Eigen::VectorXd full = qr.solve(response);
  if (with_intercept) {
    fit.coef = full.head(p - 1);
    fit.intercept = full(p - 1);
  } else {
    fit.coef = full;
  }
  fit.fitted = x * full;
  fit.residuals = response - fit.fitted;
  fit.gram_condition = cond * cond;
  return fit;
}

double residual_invariance_pvalue(const Eigen::VectorXd& residuals,
                                  const std::vector<int>& env_labels) {
  const int n = static_cast<int>(residuals.size());
  if (static_cast<int>(env_labels.size()) != n)
    throw std::invalid_argument("labels and residuals differ in length");
  std::map<int, GroupMoments> groups;
  for (int i = 0; i < n; ++i) {
    GroupMoments& g = groups[env_labels[i]];
    g.n += 1.0;
    g.sum += residuals(i);
    g.sumsq += residuals(i) * residuals(i);
  }
  std::vector<GroupMoments> flat;
  flat.reserve(groups.size());
  for (const auto& [label, g] : groups) {
    if (g.n < 3.0)
      throw std::invalid_argument("environment " + std::to_string(label) +
                                  " has fewer than 3 residuals");
    flat.push_back(g);
  }
  return invariance_pvalue_moments(flat);
}

double invariance_pvalue_moments(const std::vector<GroupMoments>& groups) {
  if (groups.size() < 2)
    throw std::invalid_argument("invariance test needs at least 2 environments");
  double total_n = 0.0, total_sum = 0.0, total_sq = 0.0;
  for (const GroupMoments& g : groups) {
    if (g.n < 3.0)
      throw std::invalid_argument("invariance test needs >= 3 points per group");
    total_n += g.n;
    total_sum += g.sum;
    total_sq += g.sumsq;
  }

  double min_p = 1.0;
  for (const GroupMoments& g : groups) {
    const double n1 = g.n;
    const double n2 = total_n - n1;
    const double sum1 = g.sum, sq1 = g.sumsq;
    const double mean1 = sum1 / n1;
    const double mean2 = (total_sum - sum1) / n2;
    const double var1 = std::max(0.0, (sq1 - n1 * mean1 * mean1) / (n1 - 1.0));
    const double var2 = std::max(
        0.0, ((total_sq - sq1) - n2 * mean2 * mean2) / (n2 - 1.0));

    // Welch t-test on the means.
    double p_t = 1.0;
    const double se2 = var1 / n1 + var2 / n2;
    if (se2 > 0.0) {
      const double t = (mean1 - mean2) / std::sqrt(se2);
      const double dof =
          se2 * se2 /
          (var1 * var1 / (n1 * n1 * (n1 - 1.0)) +
           var2 * var2 / (n2 * n2 * (n2 - 1.0)));
      boost::math::students_t_distribution<double> dist(dof);
      p_t = 2.0 * boost::math::cdf(dist, -std::abs(t));
    } else if (mean1 != mean2) {
      p_t = 0.0;
    }

    // Two-sided F-test on the variance ratio.
    double p_f = 1.0;
    if (var1 > 0.0 && var2 > 0.0) {
      boost::math::fisher_f_distribution<double> dist(n1 - 1.0, n2 - 1.0);
      const double c = boost::math::cdf(dist, var1 / var2);
      p_f = 2.0 * std::min(c, 1.0 - c);
    } else if (var1 != var2) {
      p_f = 0.0;
    }

    min_p = std::min({min_p, p_t, p_f});
  }
  return std::min(1.0, 2.0 * static_cast<double>(groups.size()) * min_p);
}

namespace {

// Local weighted Gram and response products at one evaluation point. The
// local design row for sample j is [w_j', ((u_j - at)/h) w_j'].
struct LocalSystem {
  Eigen::MatrixXd gram;   // 2p x 2p, ridged when near singular
  std::vector<int> window;
  Eigen::VectorXd weights;  // kernel weights on the window
  bool ridged{false};
};

LocalSystem local_system(const Eigen::VectorXd& u, const Eigen::MatrixXd& w,
                         double at, double h, int point_index) {
  const int n = static_cast<int>(u.size());
  const int p = static_cast<int>(w.cols());
  LocalSystem sys;
  sys.gram = Eigen::MatrixXd::Zero(2 * p, 2 * p);
  Eigen::VectorXd b(2 * p);
  std::vector<double> weights;
  for (int j = 0; j < n; ++j) {
    const double t = (u(j) - at) / h;
    const double k = epanechnikov(t) / h;
    if (k == 0.0) continue;
    sys.window.push_back(j);
    weights.push_back(k);
    b.head(p) = w.row(j);
    b.tail(p) = t * w.row(j).transpose();
    sys.gram.selfadjointView<Eigen::Lower>().rankUpdate(b, k);
  }
  if (sys.window.empty()) {
    std::ostringstream msg;
    msg << "svc_profile_fit: no data within bandwidth " << h << " of U="
        << at << " (point " << point_index << ")";
    throw std::runtime_error(msg.str());
  }
  sys.gram = sys.gram.selfadjointView<Eigen::Lower>();
  sys.weights = Eigen::Map<Eigen::VectorXd>(weights.data(), weights.size());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sys.gram);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kLocalGramConditionCap) {
    const double ridge =
        kLocalGramRidgeScale * sys.gram.trace() / sys.gram.rows();
    sys.gram.diagonal().array() += ridge;
    sys.ridged = true;
  }
  return sys;
}

}  // namespace

SvcFit svc_profile_fit(const Eigen::VectorXd& u, const Eigen::MatrixXd& w,
                       const Eigen::MatrixXd& z, const Eigen::VectorXd& y,
                       double h) {
  const int n = static_cast<int>(u.size());
  const int p = static_cast<int>(w.cols());
  const int q = static_cast<int>(z.cols());
  if (h <= 0.0) throw std::invalid_argument("bandwidth must be positive");
  if (p < 1) throw std::invalid_argument("w needs at least one column");
  if (w.rows() != n || z.rows() != n || y.size() != n)
    throw std::invalid_argument("svc_profile_fit: inconsistent row counts");

  SvcFit fit;
  fit.h = h;
  fit.a = Eigen::MatrixXd::Zero(n, n);
  std::vector<LocalSystem> systems;
  systems.reserve(n);
  for (int i = 0; i < n; ++i) {
    LocalSystem sys = local_system(u, w, u(i), h, i);
    if (sys.ridged) ++fit.ridged_count;
    Eigen::VectorXd e(2 * p);
    e.head(p) = w.row(i);
    e.tail(p).setZero();
    Eigen::VectorXd t = sys.gram.ldlt().solve(e);
    if (!t.allFinite())
      throw std::runtime_error("svc_profile_fit: singular local Gram at point " +
                               std::to_string(i));
    // Row of the smoother: entries k_j * b_j't over the window.
    for (std::size_t s = 0; s < sys.window.size(); ++s) {
      const int j = sys.window[s];
      const double tj = (u(j) - u(i)) / h;
      const double dot =
          (w.row(j) * (t.head(p) + tj * t.tail(p)).eval()).value();
      fit.a(i, j) = sys.weights(s) * dot;
    }
    systems.push_back(std::move(sys));
  }

  if (q > 0) {
    Eigen::MatrixXd iaz = z - fit.a * z;
    Eigen::VectorXd iay = y - fit.a * y;
    Eigen::MatrixXd gram = iaz.transpose() * iaz;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (!(lo > 0.0) || hi / lo > kLocalGramConditionCap)
      throw std::runtime_error(
          "svc_profile_fit: profiled covariate block is singular");
    fit.beta_hat = gram.ldlt().solve(iaz.transpose() * iay);
    fit.m_hat = fit.a * (y - z * fit.beta_hat);
  } else {
    fit.beta_hat = Eigen::VectorXd(0);
    fit.m_hat = fit.a * y;
  }

  // Local coefficient estimates against the profiled response.
  Eigen::VectorXd r = q > 0 ? Eigen::VectorXd(y - z * fit.beta_hat) : y;
  fit.alpha_hat.resize(n, p);
  Eigen::VectorXd rhs(2 * p);
  for (int i = 0; i < n; ++i) {
    const LocalSystem& sys = systems[i];
    rhs.setZero();
    for (std::size_t s = 0; s < sys.window.size(); ++s) {
      const int j = sys.window[s];
      const double tj = (u(j) - u(i)) / h;
      Eigen::VectorXd b(2 * p);
      b.head(p) = w.row(j);
      b.tail(p) = tj * w.row(j).transpose();
      rhs += sys.weights(s) * r(j) * b;
    }
    Eigen::VectorXd c = sys.gram.ldlt().solve(rhs);
    fit.alpha_hat.row(i) = c.head(p);
  }
  return fit;
}

Eigen::VectorXd svc_predict_m(const Eigen::VectorXd& u,
                              const Eigen::MatrixXd& w,
                              const Eigen::MatrixXd& z,
                              const Eigen::VectorXd& response, double h) {
  return svc_profile_fit(u, w, z, response, h).m_hat;
}

Eigen::MatrixXd svc_smooth_columns(const Eigen::VectorXd& u,
                                   const Eigen::MatrixXd& w,
                                   const Eigen::MatrixXd& cols, double h) {
  const int n = static_cast<int>(u.size());
  const int p = static_cast<int>(w.cols());
  const int c = static_cast<int>(cols.cols());
  if (h <= 0.0) throw std::invalid_argument("bandwidth must be positive");
  if (p < 1) throw std::invalid_argument("w needs at least one column");
  if (w.rows() != n || cols.rows() != n)
    throw std::invalid_argument("svc_smooth_columns: inconsistent row counts");

  Eigen::MatrixXd out(n, c);
  Eigen::VectorXd e(2 * p);
  Eigen::RowVectorXd acc(c);
  for (int i = 0; i < n; ++i) {
    LocalSystem sys = local_system(u, w, u(i), h, i);
    e.head(p) = w.row(i);
    e.tail(p).setZero();
    Eigen::VectorXd t = sys.gram.ldlt().solve(e);
    if (!t.allFinite())
      throw std::runtime_error(
          "svc_smooth_columns: singular local Gram at point " +
          std::to_string(i));
    acc.setZero();
    for (std::size_t s = 0; s < sys.window.size(); ++s) {
      const int j = sys.window[s];
      const double tj = (u(j) - u(i)) / h;
      const double dot =
          (w.row(j) * (t.head(p) + tj * t.tail(p)).eval()).value();
      acc += sys.weights(s) * dot * cols.row(j);
    }
    out.row(i) = acc;
  }
  return out;
}

}  // namespace implab
