#include "implab/imp_continuous.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

#include "implab/estimators.hpp"
#include "implab/rng.hpp"

namespace implab {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
// Matching-Gram pivots below this ratio of the largest mark a candidate
// infeasible; identical to the discrete engine's rule.
constexpr double kPivotRatioFloor = 1e-12;
// When a fixed linear function of W explains more than this share of
// m_v_hat's variance, the matching parameter is barely identified: the
// k-side coefficients carry almost no environment variation.
constexpr double kLowHeterogeneityShare = 0.99;

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf);
}

std::string set_string(const NodeSet& s) {
  std::string out = "{";
  bool first = true;
  for (int i : s.indices()) {
    if (!first) out += ';';
    out += std::to_string(i + 1);
    first = false;
  }
  out += '}';
  return out;
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x,
                               const std::vector<int>& cols) {
  Eigen::MatrixXd out(x.rows(), cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(j) = x.col(cols[j]);
  return out;
}

void validate_continuous(const ContinuousSample& data) {
  const Eigen::Index n = data.u.size();
  if (n < 50)
    throw std::invalid_argument(
        "continuous fits need at least 50 rows for the kernel smoother");
  if (data.x.rows() != n || data.y.size() != n)
    throw std::invalid_argument("u, x, and y row counts differ");
  if (data.x.cols() < 1)
    throw std::invalid_argument("data has no predictors");
  if (!data.u.allFinite() || !data.x.allFinite() || !data.y.allFinite())
    throw std::invalid_argument("continuous data contains non-finite values");
}

void check_candidate_cont(const ContCandidate& cand, int d) {
  if (cand.k < 0 || cand.k >= d)
    throw std::invalid_argument("candidate k outside [0, d)");
  if (cand.p.size() == 0)
    throw std::invalid_argument(
        "candidate P is empty: no varying part to match");
  if ((cand.r.mask & cand.p.mask) != cand.p.mask)
    throw std::invalid_argument("candidate has P not contained in R");
  if ((cand.s.mask & cand.r.mask) != cand.r.mask)
    throw std::invalid_argument("candidate has R not contained in S");
  if (cand.r.contains(cand.k))
    throw std::invalid_argument("candidate has k inside R");
  if ((cand.s.mask >> d) != 0)
    throw std::invalid_argument("candidate S references nodes beyond d");
}

// Rows of the smoother applied once per distinct P: ax = A_P * x, ay = A_P*y.
struct SmoothCache {
  bool ok{false};
  std::string error;
  Eigen::MatrixXd ax;
  Eigen::VectorXd ay;
};

const SmoothCache& products_for(std::map<std::uint32_t, SmoothCache>& cache,
                                const ContinuousSample& data,
                                std::uint32_t pmask, double h) {
  auto it = cache.find(pmask);
  if (it != cache.end()) return it->second;
  SmoothCache out;
  try {
    Eigen::MatrixXd w = select_columns(data.x, NodeSet{pmask}.indices());
    Eigen::MatrixXd cols(data.x.rows(), data.x.cols() + 1);
    cols.leftCols(data.x.cols()) = data.x;
    cols.col(data.x.cols()) = data.y;
    Eigen::MatrixXd sm = svc_smooth_columns(data.u, w, cols, h);
    out.ax = sm.leftCols(data.x.cols());
    out.ay = sm.col(data.x.cols());
    out.ok = true;
  } catch (const std::runtime_error& err) {
    out.error = err.what();
  }
  return cache.emplace(pmask, std::move(out)).first->second;
}

bool psd_solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
               Eigen::MatrixXd* out) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  if (ldlt.info() != Eigen::Success) return false;
  const Eigen::VectorXd dvec = ldlt.vectorD();
  const double dmax = dvec.maxCoeff();
  const double dmin = dvec.minCoeff();
  if (!(dmax > 0.0) || dmin < kPivotRatioFloor * dmax) return false;
  *out = ldlt.solve(b);
  return out->allFinite();
}

// Profile step shared by the response side and the k side: regresses the
// profiled response on the profiled invariant block and reassembles the
// varying part. z_idx may be empty, in which case m is the smoothed response.
bool profiled_fit(const ContinuousSample& data, const SmoothCache& pr,
                  const std::vector<int>& z_idx, const Eigen::VectorXd& resp,
                  const Eigen::VectorXd& a_resp, Eigen::VectorXd* beta,
                  Eigen::VectorXd* m) {
  if (z_idx.empty()) {
    *beta = Eigen::VectorXd(0);
    *m = a_resp;
    return true;
  }
  Eigen::MatrixXd z = select_columns(data.x, z_idx);
  Eigen::MatrixXd az = select_columns(pr.ax, z_idx);
  Eigen::MatrixXd iz = z - az;
  Eigen::MatrixXd gram = iz.transpose() * iz;
  Eigen::MatrixXd rhs = iz.transpose() * (resp - a_resp);
  Eigen::MatrixXd sol;
  if (!psd_solve(gram, rhs, &sol)) return false;
  *beta = sol.col(0);
  *m = a_resp - az * sol.col(0);
  return true;
}

struct ContScoreOut {
  bool feasible{false};
  std::string reason;
  Eigen::VectorXd w_hat, beta_hat, beta_v_hat, m_hat, m_v_hat, residual;
  double t{kNan};
  double s_pred{kNan};
  double cond{0.0};
  bool low_het{false};
};

ContScoreOut score_with_products(const ContinuousSample& data,
                                 const SmoothCache& pr,
                                 const ContCandidate& cand) {
  ContScoreOut out;
  if (!pr.ok) {
    out.reason = pr.error;
    return out;
  }
  const std::vector<int> p_idx = cand.p.indices();
  const std::vector<int> z_idx =
      NodeSet{cand.s.mask & ~cand.p.mask}.indices();
  const std::vector<int> zv_idx =
      NodeSet{cand.r.mask & ~cand.p.mask}.indices();
  const Eigen::Index n = data.u.size();

  if (!profiled_fit(data, pr, z_idx, data.y, pr.ay, &out.beta_hat,
                    &out.m_hat)) {
    out.reason = "profiled covariate block of the response fit is singular";
    return out;
  }
  if (!profiled_fit(data, pr, zv_idx, data.x.col(cand.k), pr.ax.col(cand.k),
                    &out.beta_v_hat, &out.m_v_hat)) {
    out.reason = "profiled covariate block of the k-side fit is singular";
    return out;
  }

  const int p = static_cast<int>(p_idx.size());
  Eigen::MatrixXd dw(n, p + 1);
  dw.leftCols(p) = select_columns(data.x, p_idx);
  dw.col(p) = out.m_v_hat;

  Eigen::BDCSVD<Eigen::MatrixXd> svd(dw);
  const double smin = svd.singularValues().minCoeff();
  out.cond = smin > 0.0 ? svd.singularValues().maxCoeff() / smin
                        : std::numeric_limits<double>::infinity();

  // Heterogeneity check: how much of m_v_hat a fixed coefficient on W
  // explains. A share near one leaves the matching parameter unidentified.
  const double mv_energy = out.m_v_hat.squaredNorm();
  if (mv_energy <= static_cast<double>(n) * 1e-12) {
    out.low_het = true;
  } else {
    Eigen::MatrixXd wgram = dw.leftCols(p).transpose() * dw.leftCols(p);
    Eigen::MatrixXd wrhs = dw.leftCols(p).transpose() * out.m_v_hat;
    Eigen::MatrixXd wc;
    if (psd_solve(wgram, wrhs, &wc)) {
      const double rss =
          (out.m_v_hat - dw.leftCols(p) * wc.col(0)).squaredNorm();
      out.low_het = rss < (1.0 - kLowHeterogeneityShare) * mv_energy;
    }
  }

  Eigen::MatrixXd gram = dw.transpose() * dw;
  Eigen::MatrixXd rhs = dw.transpose() * out.m_hat;
  Eigen::MatrixXd sol;
  if (!psd_solve(gram, rhs, &sol)) {
    out.reason = "matching design is rank-deficient";
    return out;
  }
  out.w_hat = sol.col(0);
  out.residual = out.m_hat - dw * out.w_hat;
  out.t = out.residual.squaredNorm() / static_cast<double>(n);

  Eigen::VectorXd pred = dw * out.w_hat;
  if (!z_idx.empty()) pred += select_columns(data.x, z_idx) * out.beta_hat;
  out.s_pred = (data.y - pred).squaredNorm() / static_cast<double>(n);
  out.feasible = true;
  return out;
}

ContImpFit fit_from_score(const ContCandidate& cand, double h,
                          ContScoreOut&& s) {
  ContImpFit fit;
  fit.cand = cand;
  fit.h = h;
  fit.feasible = s.feasible;
  fit.infeasible_reason = std::move(s.reason);
  fit.w_hat = std::move(s.w_hat);
  fit.beta_hat = std::move(s.beta_hat);
  fit.beta_v_hat = std::move(s.beta_v_hat);
  fit.m_hat = std::move(s.m_hat);
  fit.m_v_hat = std::move(s.m_v_hat);
  fit.residual = std::move(s.residual);
  fit.t_score = s.t;
  fit.s_pred = s.s_pred;
  fit.matching_condition = s.cond;
  fit.low_heterogeneity = s.low_het;
  return fit;
}

long ceil_quantile_index(double q, long count) {
  long idx = static_cast<long>(std::ceil(q * static_cast<double>(count))) - 1;
  return std::clamp(idx, 0L, count - 1);
}

}  // namespace

std::vector<ContCandidate> enumerate_candidates_cont(
    int d, const EnumerationLimits& limits) {
  if (d < 2 || d > 20)
    throw std::invalid_argument(
        "continuous enumeration needs d between 2 and 20");
  std::vector<ContCandidate> out;
  const std::uint32_t full = (1u << d) - 1u;
  for (int k = 0; k < d; ++k) {
    for (std::uint32_t s = 0;; s = ((s - full) & full)) {
      const std::uint32_t base = s & ~(1u << k);
      for (std::uint32_t r = 0;; r = ((r - base) & base)) {
        for (std::uint32_t p = 0;; p = ((p - r) & r)) {
          if (p != 0) {
            ContCandidate cand;
            cand.k = k;
            cand.p = NodeSet{p};
            cand.r = NodeSet{r};
            cand.s = NodeSet{s};
            if (limits.max_s_size < 0 ||
                cand.s.size() <= limits.max_s_size)
              out.push_back(cand);
            if (limits.max_candidates >= 0 &&
                static_cast<long>(out.size()) >= limits.max_candidates)
              return out;
          }
          if (p == r) break;
        }
        if (r == base) break;
      }
      if (s == full) break;
    }
  }
  return out;
}

ContImpFit fit_candidate_continuous(const ContinuousSample& data,
                                    const ContCandidate& cand, double h) {
  validate_continuous(data);
  if (h <= 0.0) throw std::invalid_argument("bandwidth must be positive");
  check_candidate_cont(cand, static_cast<int>(data.x.cols()));
  std::map<std::uint32_t, SmoothCache> cache;
  const SmoothCache& pr = products_for(cache, data, cand.p.mask, h);
  return fit_from_score(cand, h, score_with_products(data, pr, cand));
}

Eigen::VectorXd predict_continuous(const ContImpFit& fit,
                                   const Eigen::VectorXd& u_test,
                                   const Eigen::MatrixXd& x_test,
                                   std::optional<double> h_override) {
  if (!fit.feasible)
    throw std::invalid_argument("cannot predict from an infeasible fit");
  const Eigen::Index m = u_test.size();
  if (m < 50)
    throw std::invalid_argument(
        "continuous prediction needs at least 50 test rows");
  if (x_test.rows() != m)
    throw std::invalid_argument("u_test and x_test row counts differ");
  const std::uint32_t needed = fit.cand.s.mask | (1u << fit.cand.k);
  const int test_cols = static_cast<int>(x_test.cols());
  if (test_cols < 31 && (needed >> test_cols) != 0)
    throw std::invalid_argument("x_test has too few columns for the fit");
  if (!u_test.allFinite() || !x_test.allFinite())
    throw std::invalid_argument("test data contains non-finite values");
  const double h = h_override.value_or(fit.h);
  if (h <= 0.0) throw std::invalid_argument("bandwidth must be positive");

  const std::vector<int> p_idx = fit.cand.p.indices();
  const std::vector<int> z_idx =
      NodeSet{fit.cand.s.mask & ~fit.cand.p.mask}.indices();
  const std::vector<int> zv_idx =
      NodeSet{fit.cand.r.mask & ~fit.cand.p.mask}.indices();
  const int p = static_cast<int>(p_idx.size());

  // k-side varying part re-estimated on the test rows alone.
  Eigen::MatrixXd w_test = select_columns(x_test, p_idx);
  Eigen::MatrixXd cols(m, zv_idx.size() + 1);
  cols.leftCols(zv_idx.size()) = select_columns(x_test, zv_idx);
  cols.col(zv_idx.size()) = x_test.col(fit.cand.k);
  Eigen::MatrixXd sm = svc_smooth_columns(u_test, w_test, cols, h);

  Eigen::VectorXd m_v;
  if (zv_idx.empty()) {
    m_v = sm.col(0);
  } else {
    Eigen::MatrixXd iz = cols.leftCols(zv_idx.size()) -
                         sm.leftCols(zv_idx.size());
    Eigen::MatrixXd gram = iz.transpose() * iz;
    Eigen::MatrixXd rhs =
        iz.transpose() *
        (cols.col(zv_idx.size()) - sm.col(zv_idx.size())).eval();
    Eigen::MatrixXd sol;
    if (!psd_solve(gram, rhs, &sol))
      throw std::runtime_error(
          "profiled covariate block is singular on the test rows");
    m_v = sm.col(zv_idx.size()) - sm.leftCols(zv_idx.size()) * sol.col(0);
  }

  Eigen::VectorXd y_hat =
      w_test * fit.w_hat.head(p) + fit.w_hat(p) * m_v;
  if (!z_idx.empty())
    y_hat += select_columns(x_test, z_idx) * fit.beta_hat;
  return y_hat;
}

ContScoreTable score_candidates_cont(const ContinuousSample& data,
                                     const std::vector<ContCandidate>& cands,
                                     double h) {
  validate_continuous(data);
  if (h <= 0.0) throw std::invalid_argument("bandwidth must be positive");
  const int d = static_cast<int>(data.x.cols());
  for (const auto& cand : cands) check_candidate_cont(cand, d);

  ContScoreTable table;
  table.candidates = cands;
  const std::size_t count = cands.size();
  table.feasible.assign(count, 0);
  table.t_score.assign(count, kNan);
  table.s_pred.assign(count, kNan);
  table.selected_i.assign(count, 0);
  table.selected_ipred.assign(count, 0);

  std::map<std::uint32_t, SmoothCache> cache;
  for (std::size_t i = 0; i < count; ++i) {
    const SmoothCache& pr = products_for(cache, data, cands[i].p.mask, h);
    ContScoreOut s = score_with_products(data, pr, cands[i]);
    table.feasible[i] = s.feasible ? 1 : 0;
    table.t_score[i] = s.t;
    table.s_pred[i] = s.s_pred;
  }
  return table;
}

Cutoffs bootstrap_cutoffs_cont(const ContinuousSample& data,
                               const std::vector<ContCandidate>& candidates,
                               const SelectionConfig& config, double h) {
  validate_continuous(data);
  if (candidates.empty())
    throw std::invalid_argument("bootstrap_cutoffs_cont needs candidates");
  if (config.bootstrap_rounds < 1)
    throw std::invalid_argument("bootstrap needs at least one round");
  if (!(config.quantile > 0.0 && config.quantile <= 1.0))
    throw std::invalid_argument("bootstrap quantile must lie in (0, 1]");
  const int d = static_cast<int>(data.x.cols());
  for (const auto& cand : candidates) check_candidate_cont(cand, d);

  const Eigen::Index n = data.u.size();
  std::vector<double> min_t, min_s;
  for (int round = 1; round <= config.bootstrap_rounds; ++round) {
    auto rng = make_stream(config.seed, Stream::kBootstrap,
                           static_cast<std::uint64_t>(round));
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    ContinuousSample boot;
    boot.u.resize(n);
    boot.x.resize(n, d);
    boot.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index j = pick(rng);
      boot.u(i) = data.u(j);
      boot.x.row(i) = data.x.row(j);
      boot.y(i) = data.y(j);
    }

    std::map<std::uint32_t, SmoothCache> cache;
    double best_t = kNan, best_s = kNan;
    for (const auto& cand : candidates) {
      const SmoothCache& pr = products_for(cache, boot, cand.p.mask, h);
      ContScoreOut s = score_with_products(boot, pr, cand);
      if (!s.feasible) continue;
      if (std::isnan(best_t) || s.t < best_t) best_t = s.t;
      if (std::isnan(best_s) || s.s_pred < best_s) best_s = s.s_pred;
    }
    if (!std::isnan(best_t)) min_t.push_back(best_t);
    if (!std::isnan(best_s)) min_s.push_back(best_s);
  }
  if (min_t.empty())
    throw std::runtime_error(
        "bootstrap found no feasible candidate in any round");

  std::sort(min_t.begin(), min_t.end());
  std::sort(min_s.begin(), min_s.end());
  Cutoffs cut;
  cut.c_imp = min_t[ceil_quantile_index(config.quantile,
                                        static_cast<long>(min_t.size()))];
  cut.c_pred = min_s[ceil_quantile_index(config.quantile,
                                         static_cast<long>(min_s.size()))];
  return cut;
}

ContSelectionReport select_cont(const ContinuousSample& train,
                                const EnumerationLimits& limits,
                                const SelectionConfig& config, double h) {
  validate_continuous(train);
  if (h <= 0.0) throw std::invalid_argument("bandwidth must be positive");
  if (config.score_kind != ScoreKind::kResidual)
    throw std::invalid_argument(
        "continuous selection supports the residual score only");

  ContSelectionReport report;
  report.d = static_cast<int>(train.x.cols());
  report.h = h;
  report.config = config;

  std::vector<ContCandidate> cands =
      enumerate_candidates_cont(report.d, limits);
  report.table = score_candidates_cont(train, cands, h);
  ContScoreTable& table = report.table;

  std::optional<Cutoffs> cutoffs;
  if (config.c_imp && config.c_pred) {
    cutoffs = Cutoffs{*config.c_imp, *config.c_pred};
  } else {
    std::vector<char> eligible =
        preselection_mask(table.feasible, table.s_pred, config);
    std::vector<ContCandidate> pool;
    for (std::size_t i = 0; i < cands.size(); ++i)
      if (eligible[i]) pool.push_back(cands[i]);
    if (pool.empty()) {
      report.selection.found = false;
      return report;
    }
    cutoffs = bootstrap_cutoffs_cont(train, pool, config, h);
  }

  std::vector<double> no_p_inv;
  report.selection =
      select_from_scores(table.feasible, table.t_score, no_p_inv,
                         table.s_pred, config, cutoffs, table.selected_i,
                         table.selected_ipred);
  return report;
}

ContSelectionReport select_and_predict_cont(const ContinuousSample& train,
                                            const Eigen::VectorXd& u_test,
                                            const Eigen::MatrixXd& x_test,
                                            const EnumerationLimits& limits,
                                            const SelectionConfig& config,
                                            double h) {
  if (x_test.cols() != train.x.cols())
    throw std::invalid_argument("test data has a different predictor count");
  if (u_test.size() != x_test.rows())
    throw std::invalid_argument("u_test and x_test row counts differ");
  if (u_test.size() < 50)
    throw std::invalid_argument(
        "continuous prediction needs at least 50 test rows");
  if (!u_test.allFinite() || !x_test.allFinite())
    throw std::invalid_argument("test data contains non-finite values");

  ContSelectionReport report = select_cont(train, limits, config, h);
  const std::vector<ContCandidate>& cands = report.table.candidates;
  if (!report.selection.found) return report;

  // Train-side coefficients for the selected candidates, then test-side
  // varying parts; both sides reuse one smoother pass per distinct P.
  std::map<std::uint32_t, SmoothCache> train_cache;
  ContinuousSample test_view;
  test_view.u = u_test;
  test_view.x = x_test;
  test_view.y = Eigen::VectorXd::Zero(u_test.size());
  std::map<std::uint32_t, SmoothCache> test_cache;

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(u_test.size());
  for (int idx : report.selection.i_pred) {
    const ContCandidate& cand = cands[static_cast<std::size_t>(idx)];
    const SmoothCache& tr = products_for(train_cache, train, cand.p.mask, h);
    ContScoreOut s = score_with_products(train, tr, cand);
    if (!s.feasible) {
      report.dropped.push_back(idx);
      continue;
    }
    const SmoothCache& te =
        products_for(test_cache, test_view, cand.p.mask, h);
    if (!te.ok) {
      report.dropped.push_back(idx);
      continue;
    }
    const std::vector<int> zv_idx =
        NodeSet{cand.r.mask & ~cand.p.mask}.indices();
    Eigen::VectorXd beta_v, m_v;
    if (!profiled_fit(test_view, te, zv_idx, x_test.col(cand.k),
                      te.ax.col(cand.k), &beta_v, &m_v)) {
      report.dropped.push_back(idx);
      continue;
    }
    const std::vector<int> p_idx = cand.p.indices();
    const std::vector<int> z_idx =
        NodeSet{cand.s.mask & ~cand.p.mask}.indices();
    const int p = static_cast<int>(p_idx.size());
    Eigen::VectorXd y_hat =
        select_columns(x_test, p_idx) * s.w_hat.head(p) + s.w_hat(p) * m_v;
    if (!z_idx.empty())
      y_hat += select_columns(x_test, z_idx) * s.beta_hat;
    sum += y_hat;
    report.used.push_back(idx);
  }
  if (report.used.empty())
    throw std::runtime_error(
        "every selected candidate failed on the test rows");
  report.y_hat = sum / static_cast<double>(report.used.size());
  return report;
}

ContPrediction predict_continuous_average(const std::vector<ContImpFit>& fits,
                                          const Eigen::VectorXd& u_test,
                                          const Eigen::MatrixXd& x_test,
                                          std::optional<double> h_override) {
  if (fits.empty())
    throw std::runtime_error(
        "predict_continuous_average has no fitted candidates");
  ContPrediction out;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(u_test.size());
  int kept = 0;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    try {
      sum += predict_continuous(fits[i], u_test, x_test, h_override);
      ++kept;
    } catch (const std::runtime_error&) {
      out.dropped.push_back(static_cast<int>(i));
    }
  }
  if (kept == 0)
    throw std::runtime_error(
        "every candidate was dropped: test-side regressions failed");
  out.y_hat = sum / static_cast<double>(kept);
  return out;
}

void write_cont_score_table_csv(std::ostream& out,
                                const ContScoreTable& table) {
  out << "P,k,R,S,feasible,T_c,s_pred,selected_I,selected_Ipred\n";
  for (std::size_t i = 0; i < table.candidates.size(); ++i) {
    const ContCandidate& c = table.candidates[i];
    out << set_string(c.p) << ',' << (c.k + 1) << ',' << set_string(c.r)
        << ',' << set_string(c.s) << ',' << int(table.feasible[i]) << ','
        << format_double(table.t_score[i]) << ','
        << format_double(table.s_pred[i]) << ','
        << int(table.selected_i[i]) << ',' << int(table.selected_ipred[i])
        << '\n';
  }
}

}  // namespace implab
