#include "implab/imp_discrete.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "implab/estimators.hpp"
#include "implab/rng.hpp"

namespace implab {

namespace {

// Relative LDLT pivot floor below which a pooled system counts as singular.
constexpr double kPivotRatioFloor = 1e-12;

const double kNan = std::numeric_limits<double>::quiet_NaN();

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

NodeSet NodeSet::from_indices(const std::vector<int>& idx) {
  NodeSet s;
  for (int i : idx) {
    if (i < 0 || i >= 30)
      throw std::invalid_argument("node index out of range: " +
                                  std::to_string(i));
    s.mask |= 1u << i;
  }
  return s;
}

std::vector<int> NodeSet::indices() const {
  std::vector<int> out;
  for (int i = 0; i < 30; ++i)
    if (contains(i)) out.push_back(i);
  return out;
}

int NodeSet::size() const { return std::popcount(mask); }

std::vector<ImpCandidate> enumerate_candidates(
    int d, const EnumerationLimits& limits) {
  if (d < 1 || d > 20)
    throw std::invalid_argument("enumerate_candidates supports 1 <= d <= 20");
  std::vector<ImpCandidate> out;
  const std::uint32_t full = (1u << d) - 1u;
  for (int k = 0; k < d; ++k) {
    for (std::uint32_t s = 0; s <= full; ++s) {
      if (limits.max_s_size >= 0 &&
          std::popcount(s) > limits.max_s_size)
        continue;
      const std::uint32_t base = s & ~(1u << k);
      // Submasks of 'base' in ascending order.
      std::uint32_t r = 0;
      while (true) {
        if (limits.max_candidates >= 0 &&
            static_cast<long>(out.size()) >= limits.max_candidates)
          return out;
        out.push_back({k, NodeSet{r}, NodeSet{s}});
        if (r == base) break;
        r = (r - base) & base;
      }
    }
  }
  return out;
}

namespace {

// Per-environment cross-moment matrix of [X, 1, y]; columns 0..d-1 carry the
// predictors, column d the constant, column d+1 the response.
struct GramEnv {
  Eigen::MatrixXd g;
  double n{0.0};
};

std::vector<GramEnv> build_grams(const PanelDataset& panel) {
  const int d = panel.d();
  std::vector<GramEnv> grams;
  grams.reserve(panel.envs.size());
  for (const auto& env : panel.envs) {
    const Eigen::Index n = env.x.rows();
    Eigen::MatrixXd z(n, d + 2);
    z.leftCols(d) = env.x;
    z.col(d).setOnes();
    z.col(d + 1) = env.y;
    GramEnv ge;
    ge.g.noalias() = z.transpose() * z;
    ge.n = static_cast<double>(n);
    grams.push_back(std::move(ge));
  }
  return grams;
}

std::vector<GramEnv> build_resampled_grams(const PanelDataset& panel,
                                           std::mt19937_64& rng,
                                           Eigen::Index n_boot) {
  const int d = panel.d();
  std::vector<GramEnv> grams;
  grams.reserve(panel.envs.size());
  Eigen::MatrixXd z(n_boot, d + 2);
  for (const auto& env : panel.envs) {
    std::uniform_int_distribution<Eigen::Index> pick(0, env.x.rows() - 1);
    for (Eigen::Index i = 0; i < n_boot; ++i) {
      const Eigen::Index j = pick(rng);
      z.block(i, 0, 1, d) = env.x.row(j);
      z(i, d) = 1.0;
      z(i, d + 1) = env.y(j);
    }
    GramEnv ge;
    ge.g.noalias() = z.transpose() * z;
    ge.n = static_cast<double>(n_boot);
    grams.push_back(std::move(ge));
  }
  return grams;
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& g, const std::vector<int>& rows,
                       const std::vector<int>& cols) {
  Eigen::MatrixXd out(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      out(i, j) = g(rows[i], cols[j]);
  return out;
}

// LDLT solve that reports near-singularity via the relative pivot floor.
bool psd_solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
               Eigen::MatrixXd* out) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  if (ldlt.info() != Eigen::Success) return false;
  const Eigen::VectorXd dv = ldlt.vectorD();
  const double hi = dv.maxCoeff();
  const double lo = dv.minCoeff();
  if (!(lo > 0.0) || lo < kPivotRatioFloor * hi) return false;
  *out = ldlt.solve(b);
  return out->allFinite();
}

struct EngineScore {
  bool feasible{false};
  double t{kNan};
  double s_pred{kNan};
  double p_inv{kNan};
};

// Scores one candidate from per-environment cross-moments alone; every
// quantity is a solve or quadratic form on index-gathered blocks, so the
// cost does not depend on the number of rows.
EngineScore score_one(const std::vector<GramEnv>& grams, int d,
                      const ImpCandidate& cand, bool with_p_inv) {
  EngineScore score;
  const std::vector<int> s_idx = cand.s.indices();
  const std::vector<int> r_idx = cand.r.indices();
  const int p = static_cast<int>(s_idx.size());
  const int q = static_cast<int>(r_idx.size());
  const int n_envs = static_cast<int>(grams.size());

  for (const GramEnv& ge : grams)
    if (ge.n <= static_cast<double>(std::max(p, q) + 2)) return score;

  // Union layout: sorted(S u R), then the constant, then y.
  NodeSet u{cand.s.mask | cand.r.mask};
  const std::vector<int> u_idx = u.indices();
  const int m = static_cast<int>(u_idx.size());
  std::vector<int> udy = u_idx;
  udy.push_back(d);      // constant at local position m
  udy.push_back(d + 1);  // response at local position m + 1
  std::vector<int> pos(d + 2, -1);
  for (int i = 0; i < m + 2; ++i) pos[udy[i]] = i;

  std::vector<int> sc = s_idx, rc = r_idx;
  sc.push_back(d);
  rc.push_back(d);
  const std::vector<int> kcol = {cand.k};

  // Pooled matching system over columns [X_S, L2, 1].
  Eigen::MatrixXd mat = Eigen::MatrixXd::Zero(p + 2, p + 2);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(p + 2, 2);  // matching | y

  std::vector<Eigen::VectorXd> theta1(n_envs), theta2(n_envs);
  std::vector<Eigen::MatrixXd> gu(n_envs);
  for (int e = 0; e < n_envs; ++e) {
    const Eigen::MatrixXd& g = grams[e].g;
    gu[e] = gather(g, udy, udy);

    Eigen::MatrixXd a_sc = gather(g, sc, sc);
    Eigen::MatrixXd a_rc = gather(g, rc, rc);
    Eigen::MatrixXd t1, t2;
    if (!psd_solve(a_sc, gather(g, sc, {d + 1}), &t1)) return score;
    if (!psd_solve(a_rc, gather(g, rc, kcol), &t2)) return score;
    theta1[e] = t1.col(0);
    theta2[e] = t2.col(0);

    Eigen::VectorXd v = gather(g, sc, rc) * theta2[e];  // X_sc' L2
    Eigen::VectorXd w = a_sc * theta1[e];               // X_sc' L1
    Eigen::VectorXd gy = gather(g, sc, {d + 1}).col(0);

    mat.topLeftCorner(p, p) += a_sc.topLeftCorner(p, p);
    mat.block(0, p, p, 1) += v.head(p);
    mat.block(0, p + 1, p, 1) += a_sc.block(0, p, p, 1);
    mat(p, p) += theta2[e].dot(a_rc * theta2[e]);
    mat(p, p + 1) += v(p);
    mat(p + 1, p + 1) += grams[e].n;

    rhs.block(0, 0, p, 1) += w.head(p);
    rhs(p, 0) += v.dot(theta1[e]);
    rhs(p + 1, 0) += w(p);
    rhs.block(0, 1, p, 1) += gy.head(p);
    rhs(p, 1) += theta2[e].dot(gather(g, rc, {d + 1}).col(0));
    rhs(p + 1, 1) += gy(p);
  }
  mat = mat.selfadjointView<Eigen::Upper>();

  Eigen::MatrixXd coefs;
  if (!psd_solve(mat, rhs, &coefs)) return score;
  const Eigen::VectorXd theta = coefs.col(0);  // eta, lambda, b
  const Eigen::VectorXd fhat = coefs.col(1);

  double total_n = 0.0, t_sum = 0.0, s_sum = 0.0;
  std::vector<GroupMoments> groups;
  groups.reserve(n_envs);
  for (int e = 0; e < n_envs; ++e) {
    total_n += grams[e].n;

    // Matching residual as X-coefficients over the union layout.
    Eigen::VectorXd psi = Eigen::VectorXd::Zero(m + 2);
    for (int i = 0; i < p; ++i) psi(pos[s_idx[i]]) += theta1[e](i) - theta(i);
    psi(pos[d]) += theta1[e](p) - theta(p + 1);
    for (int i = 0; i < q; ++i) psi(pos[r_idx[i]]) -= theta(p) * theta2[e](i);
    psi(pos[d]) -= theta(p) * theta2[e](q);
    t_sum += std::max(0.0, psi.dot(gu[e] * psi));

    // Predictor residual y - [X_S, L2, 1] fhat, including the response.
    Eigen::VectorXd c = Eigen::VectorXd::Zero(m + 2);
    c(pos[d + 1]) = 1.0;
    for (int i = 0; i < p; ++i) c(pos[s_idx[i]]) -= fhat(i);
    for (int i = 0; i < q; ++i) c(pos[r_idx[i]]) -= fhat(p) * theta2[e](i);
    c(pos[d]) -= fhat(p) * theta2[e](q) + fhat(p + 1);
    const double rss = std::max(0.0, c.dot(gu[e] * c));
    s_sum += rss;

    GroupMoments gm;
    gm.n = grams[e].n;
    gm.sum = gu[e].row(pos[d]).dot(c);  // constant row picks up the sum
    gm.sumsq = rss;
    groups.push_back(gm);
  }

  score.feasible = true;
  score.t = t_sum / total_n;
  score.s_pred = s_sum / total_n;
  if (with_p_inv && n_envs >= 2) {
    try {
      score.p_inv = invariance_pvalue_moments(groups);
    } catch (const std::exception&) {
      score.p_inv = kNan;
    }
  }
  return score;
}

void check_candidate(const ImpCandidate& cand, int d) {
  if (cand.k < 0 || cand.k >= d)
    throw std::invalid_argument("candidate k out of range");
  if (cand.r.contains(cand.k))
    throw std::invalid_argument("candidate has k inside R");
  if ((cand.r.mask & ~cand.s.mask) != 0)
    throw std::invalid_argument("candidate has R not contained in S");
  if ((cand.s.mask >> d) != 0)
    throw std::invalid_argument("candidate S references nodes beyond d");
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x,
                               const std::vector<int>& cols) {
  Eigen::MatrixXd out(x.rows(), cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(j) = x.col(cols[j]);
  return out;
}

}  // namespace

ScoreTable score_candidates(const PanelDataset& panel,
                            const std::vector<ImpCandidate>& candidates,
                            bool with_p_inv) {
  panel.validate();
  const int d = panel.d();
  for (const auto& cand : candidates) check_candidate(cand, d);
  std::vector<GramEnv> grams = build_grams(panel);

  ScoreTable table;
  const std::size_t m = candidates.size();
  table.candidates = candidates;
  table.feasible.assign(m, 0);
  table.t_score.assign(m, kNan);
  table.p_inv.assign(m, kNan);
  table.s_pred.assign(m, kNan);
  table.selected_i.assign(m, 0);
  table.selected_ipred.assign(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    EngineScore s = score_one(grams, d, candidates[i], with_p_inv);
    table.feasible[i] = s.feasible ? 1 : 0;
    table.t_score[i] = s.t;
    table.p_inv[i] = s.p_inv;
    table.s_pred[i] = s.s_pred;
  }
  return table;
}

DiscreteImpFit fit_candidate_discrete(const PanelDataset& panel,
                                      const ImpCandidate& cand,
                                      bool with_intercept) {
  panel.validate();
  const int d = panel.d();
  check_candidate(cand, d);

  DiscreteImpFit fit;
  fit.cand = cand;
  fit.with_intercept = with_intercept;
  fit.eta = Eigen::VectorXd::Zero(d);
  fit.f_eta = Eigen::VectorXd::Zero(d);
  fit.design_condition = std::numeric_limits<double>::infinity();

  const std::vector<int> s_idx = cand.s.indices();
  const std::vector<int> r_idx = cand.r.indices();
  const int p = static_cast<int>(s_idx.size());
  const int q = static_cast<int>(r_idx.size());
  for (const auto& env : panel.envs)
    if (env.x.rows() <= std::max(p, q) + 2)
      throw std::invalid_argument(
          "environment '" + env.name +
          "' needs more than max(|S|,|R|) + 2 rows");

  const int n_envs = panel.n_envs();
  const Eigen::Index total = panel.total_rows();
  const int width = p + 1 + (with_intercept ? 1 : 0);
  if (!with_intercept && (p == 0 || q == 0)) {
    fit.infeasible_reason = "empty first-stage design without an intercept";
    return fit;
  }

  // Per-environment first-stage fits.
  fit.l1_by_env.resize(n_envs);
  fit.l2_by_env.resize(n_envs);
  Eigen::VectorXd l1(total), y(total);
  Eigen::MatrixXd design(total, width);
  Eigen::Index at = 0;
  for (int e = 0; e < n_envs; ++e) {
    const auto& env = panel.envs[e];
    const Eigen::Index n = env.x.rows();
    Eigen::MatrixXd xs = select_columns(env.x, s_idx);
    Eigen::MatrixXd xr = select_columns(env.x, r_idx);
    try {
      fit.l1_by_env[e] = ols_fit(xs, env.y, with_intercept).fitted;
      fit.l2_by_env[e] = ols_fit(xr, env.x.col(cand.k), with_intercept).fitted;
    } catch (const std::runtime_error& err) {
      fit.infeasible_reason =
          "first-stage regression in environment '" + env.name +
          "' is rank-deficient: " + err.what();
      return fit;
    }
    l1.segment(at, n) = fit.l1_by_env[e];
    y.segment(at, n) = env.y;
    design.block(at, 0, n, p) = xs;
    design.col(p).segment(at, n) = fit.l2_by_env[e];
    if (with_intercept) design.col(p + 1).segment(at, n).setOnes();
    at += n;
  }

  // Condition of the pooled matching design, from its singular values.
  Eigen::BDCSVD<Eigen::MatrixXd> svd(design);
  const double smax = svd.singularValues().maxCoeff();
  const double smin = svd.singularValues().minCoeff();
  fit.design_condition =
      smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();

  // Pooled solves share the feasibility rule with the batch engine.
  Eigen::MatrixXd gram = design.transpose() * design;
  Eigen::MatrixXd rhs(width, 2);
  rhs.col(0) = design.transpose() * l1;
  rhs.col(1) = design.transpose() * y;
  Eigen::MatrixXd coefs;
  if (!psd_solve(gram, rhs, &coefs)) {
    fit.infeasible_reason = "pooled matching design is rank-deficient";
    return fit;
  }
  const Eigen::VectorXd theta = coefs.col(0);
  const Eigen::VectorXd fhat = coefs.col(1);

  for (int i = 0; i < p; ++i) {
    fit.eta(s_idx[i]) = theta(i);
    fit.f_eta(s_idx[i]) = fhat(i);
  }
  fit.lambda = theta(p);
  fit.f_lambda = fhat(p);
  fit.b = with_intercept ? theta(p + 1) : 0.0;
  fit.f_b = with_intercept ? fhat(p + 1) : 0.0;

  fit.residual = l1 - design * theta;
  fit.t_score = fit.residual.squaredNorm() / static_cast<double>(total);
  Eigen::VectorXd pred_residual = y - design * fhat;
  fit.s_pred = pred_residual.squaredNorm() / static_cast<double>(total);
  if (n_envs >= 2) {
    try {
      fit.p_inv = residual_invariance_pvalue(pred_residual,
                                             panel.pooled_labels());
    } catch (const std::exception&) {
      fit.p_inv = kNan;
    }
  } else {
    fit.p_inv = kNan;
  }
  fit.feasible = true;
  return fit;
}

double prediction_score(const DiscreteImpFit& fit, const PanelDataset& panel) {
  panel.validate();
  if (!fit.feasible)
    throw std::invalid_argument("prediction_score needs a feasible fit");
  const std::vector<int> r_idx = fit.cand.r.indices();
  double sq = 0.0, n_total = 0.0;
  for (const auto& env : panel.envs) {
    Eigen::MatrixXd xr = select_columns(env.x, r_idx);
    Eigen::VectorXd l2 =
        ols_fit(xr, env.x.col(fit.cand.k), fit.with_intercept).fitted;
    Eigen::VectorXd pred =
        ((env.x * fit.f_eta + fit.f_lambda * l2).array() + fit.f_b).matrix();
    sq += (env.y - pred).squaredNorm();
    n_total += static_cast<double>(env.x.rows());
  }
  return sq / n_total;
}

Cutoffs bootstrap_cutoffs(const PanelDataset& panel,
                          const std::vector<ImpCandidate>& candidates,
                          const SelectionConfig& config) {
  panel.validate();
  if (candidates.empty())
    throw std::invalid_argument("bootstrap_cutoffs needs candidates");
  if (config.bootstrap_rounds < 1)
    throw std::invalid_argument("bootstrap needs at least one round");
  if (!(config.quantile > 0.0 && config.quantile <= 1.0))
    throw std::invalid_argument("bootstrap quantile must lie in (0, 1]");
  const int d = panel.d();
  for (const auto& cand : candidates) check_candidate(cand, d);

  const Eigen::Index n_boot = panel.min_rows();
  std::vector<double> min_t, min_s;
  for (int round = 1; round <= config.bootstrap_rounds; ++round) {
    auto rng = make_stream(config.seed, Stream::kBootstrap,
                           static_cast<std::uint64_t>(round));
    std::vector<GramEnv> grams = build_resampled_grams(panel, rng, n_boot);
    double best_t = kNan, best_s = kNan;
    for (const auto& cand : candidates) {
      EngineScore s = score_one(grams, d, cand, false);
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

  auto quantile_of = [&](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const long count = static_cast<long>(v.size());
    long idx = static_cast<long>(
                   std::ceil(config.quantile * static_cast<double>(count))) -
               1;
    idx = std::clamp(idx, 0L, count - 1);
    return v[idx];
  };
  Cutoffs cut;
  cut.c_imp = quantile_of(min_t);
  cut.c_pred = quantile_of(min_s);
  return cut;
}

namespace {

// Median of s_pred over feasible candidates (mean of the middle pair).
double feasible_median(const std::vector<char>& feasible,
                       const std::vector<double>& s_pred) {
  std::vector<double> vals;
  for (std::size_t i = 0; i < s_pred.size(); ++i)
    if (feasible[i]) vals.push_back(s_pred[i]);
  if (vals.empty()) return kNan;
  std::sort(vals.begin(), vals.end());
  const std::size_t n = vals.size();
  return n % 2 == 1 ? vals[n / 2]
                    : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
}

}  // namespace

std::vector<char> preselection_mask(const std::vector<char>& feasible,
                                    const std::vector<double>& s_pred,
                                    const SelectionConfig& config) {
  const std::size_t m = feasible.size();
  std::vector<char> eligible(m, 0);
  const double median =
      config.preselect_median ? feasible_median(feasible, s_pred) : kNan;
  for (std::size_t i = 0; i < m; ++i) {
    if (!feasible[i]) continue;
    if (config.preselect_median && !(s_pred[i] <= median)) continue;
    eligible[i] = 1;
  }
  return eligible;
}

Selection select_from_scores(const std::vector<char>& feasible,
                             const std::vector<double>& t_score,
                             const std::vector<double>& p_inv,
                             const std::vector<double>& s_pred,
                             const SelectionConfig& config,
                             const std::optional<Cutoffs>& bootstrap,
                             std::vector<char>& selected_i,
                             std::vector<char>& selected_ipred) {
  const std::size_t m = feasible.size();
  if (t_score.size() != m || s_pred.size() != m ||
      (config.score_kind == ScoreKind::kInvariance && p_inv.size() != m))
    throw std::invalid_argument("score table columns have mismatched sizes");
  selected_i.assign(m, 0);
  selected_ipred.assign(m, 0);

  Selection sel;
  double c_imp = 0.0;
  if (config.score_kind == ScoreKind::kResidual) {
    if (config.c_imp)
      c_imp = *config.c_imp;
    else if (bootstrap)
      c_imp = bootstrap->c_imp;
    else
      throw std::invalid_argument(
          "residual selection needs c_imp or bootstrap cutoffs");
  } else {
    c_imp = config.invariance_level;
  }
  double c_pred = 0.0;
  if (config.c_pred)
    c_pred = *config.c_pred;
  else if (bootstrap)
    c_pred = bootstrap->c_pred;
  else
    throw std::invalid_argument(
        "selection needs c_pred or bootstrap cutoffs");
  sel.cutoffs = {c_imp, c_pred};

  std::vector<char> eligible = preselection_mask(feasible, s_pred, config);
  for (std::size_t i = 0; i < m; ++i) {
    if (!eligible[i]) continue;
    const bool invariant =
        config.score_kind == ScoreKind::kResidual
            ? t_score[i] < c_imp
            : p_inv[i] > c_imp;  // NaN compares false
    if (invariant) sel.i_hat.push_back(static_cast<int>(i));
  }
  sel.found = !sel.i_hat.empty();
  if (!sel.found) return sel;

  for (int i : sel.i_hat)
    if (s_pred[i] < c_pred) sel.i_pred.push_back(i);
  if (sel.i_pred.empty()) {
    int best = sel.i_hat.front();
    for (int i : sel.i_hat)
      if (s_pred[i] < s_pred[best]) best = i;
    sel.i_pred.push_back(best);
  }

  for (int i : sel.i_hat) selected_i[i] = 1;
  for (int i : sel.i_pred) selected_ipred[i] = 1;
  return sel;
}

Selection select_imps(ScoreTable& table, const SelectionConfig& config,
                      const std::optional<Cutoffs>& bootstrap) {
  const std::size_t m = table.candidates.size();
  if (table.feasible.size() != m || table.t_score.size() != m ||
      table.p_inv.size() != m || table.s_pred.size() != m)
    throw std::invalid_argument("score table columns have mismatched sizes");
  return select_from_scores(table.feasible, table.t_score, table.p_inv,
                            table.s_pred, config, bootstrap, table.selected_i,
                            table.selected_ipred);
}

DiscreteImpModel fit_discrete_imp(const PanelDataset& panel,
                                  const EnumerationLimits& limits,
                                  const SelectionConfig& config) {
  panel.validate();
  DiscreteImpModel model;
  model.d = panel.d();
  model.config = config;

  std::vector<ImpCandidate> cands = enumerate_candidates(model.d, limits);
  model.table = score_candidates(panel, cands, true);

  std::optional<Cutoffs> cutoffs;
  const bool need_c_imp =
      config.score_kind == ScoreKind::kResidual && !config.c_imp;
  const bool need_c_pred = !config.c_pred;
  if (need_c_imp || need_c_pred) {
    std::vector<char> eligible = preselection_mask(
        model.table.feasible, model.table.s_pred, config);
    std::vector<ImpCandidate> pool;
    for (std::size_t i = 0; i < cands.size(); ++i)
      if (eligible[i]) pool.push_back(cands[i]);
    if (pool.empty()) {
      model.selection.found = false;
      return model;
    }
    cutoffs = bootstrap_cutoffs(panel, pool, config);
  }

  model.selection = select_imps(model.table, config, cutoffs);
  for (int i : model.selection.i_pred) {
    DiscreteImpFit fit = fit_candidate_discrete(panel, cands[i]);
    if (fit.feasible) model.fits.push_back(std::move(fit));
  }
  return model;
}

DiscretePrediction predict_discrete(const std::vector<DiscreteImpFit>& fits,
                                    const Eigen::MatrixXd& x_test) {
  if (fits.empty())
    throw std::runtime_error("predict_discrete has no fitted candidates");
  DiscretePrediction out;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(x_test.rows());
  int kept = 0;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    const DiscreteImpFit& fit = fits[i];
    if (!fit.feasible || fit.f_eta.size() != x_test.cols())
      throw std::invalid_argument("fit " + std::to_string(i) +
                                  " does not match the test data");
    Eigen::MatrixXd xr = select_columns(x_test, fit.cand.r.indices());
    Eigen::VectorXd l2;
    try {
      l2 = ols_fit(xr, x_test.col(fit.cand.k), fit.with_intercept).fitted;
    } catch (const std::runtime_error&) {
      out.dropped.push_back(static_cast<int>(i));
      continue;
    }
    sum +=
        ((x_test * fit.f_eta + fit.f_lambda * l2).array() + fit.f_b).matrix();
    ++kept;
  }
  if (kept == 0)
    throw std::runtime_error(
        "every candidate was dropped: test-side regressions are "
        "rank-deficient");
  out.y_hat = sum / static_cast<double>(kept);
  return out;
}

DiscretePrediction predict_discrete(const DiscreteImpModel& model,
                                    const Eigen::MatrixXd& x_test) {
  if (!model.selection.found)
    throw std::runtime_error("no invariant matching candidate was selected");
  return predict_discrete(model.fits, x_test);
}

namespace {

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

}  // namespace

void write_score_table_csv(std::ostream& out, const ScoreTable& table) {
  out << "k,R,S,feasible,T,p_inv,s_pred,selected_I,selected_Ipred\n";
  for (std::size_t i = 0; i < table.candidates.size(); ++i) {
    const ImpCandidate& c = table.candidates[i];
    out << (c.k + 1) << ',' << set_string(c.r) << ',' << set_string(c.s)
        << ',' << int(table.feasible[i]) << ','
        << format_double(table.t_score[i]) << ','
        << format_double(table.p_inv[i]) << ','
        << format_double(table.s_pred[i]) << ','
        << int(table.selected_i[i]) << ',' << int(table.selected_ipred[i])
        << '\n';
  }
}

}  // namespace implab
