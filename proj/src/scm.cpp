#include "implab/scm.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "implab/rng.hpp"

namespace implab {

namespace {

constexpr double kSolveRelTol = 1e-10;

std::string node_name(int node) {
  return node == kYNode ? std::string("y") : "x" + std::to_string(node + 1);
}

// Joint (d+1)-dimensional coefficient matrix with Y last: v = A v + eps.
Eigen::MatrixXd joint_matrix(const EnvParams& p) {
  const int d = static_cast<int>(p.gamma.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d + 1, d + 1);
  a.topLeftCorner(d, d) = p.b;
  a.topRightCorner(d, 1) = p.gamma;
  a.bottomLeftCorner(1, d) = p.beta_total.transpose();
  return a;
}

// Kahn's algorithm on the joint graph; returns empty when a cycle exists.
// Indices are 0..d-1 for X and d for Y.
std::vector<int> topo_sort(const Eigen::MatrixXd& a) {
  const int n = static_cast<int>(a.rows());
  std::vector<int> indegree(n, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (a(i, j) != 0.0) ++indegree[i];
  std::deque<int> ready;
  for (int i = 0; i < n; ++i)
    if (indegree[i] == 0) ready.push_back(i);
  std::vector<int> order;
  while (!ready.empty()) {
    int j = ready.front();
    ready.pop_front();
    order.push_back(j);
    for (int i = 0; i < n; ++i)
      if (a(i, j) != 0.0 && --indegree[i] == 0) ready.push_back(i);
  }
  if (static_cast<int>(order.size()) != n) order.clear();
  return order;
}

void check_env_index(const LinearScm& scm, int env) {
  if (env < 0 || env >= scm.n_envs())
    throw std::invalid_argument("environment index " + std::to_string(env) +
                                " out of range");
}

std::vector<int> sorted_unique(std::set<int> s) {
  return std::vector<int>(s.begin(), s.end());
}

}  // namespace

double eval_payload(const Payload& p, double u) {
  if (const double* c = std::get_if<double>(&p)) return *c;
  const Sinusoid& s = std::get<Sinusoid>(p);
  return s.amp * std::sin(2.0 * std::numbers::pi * s.freq * u);
}

bool InterventionSpec::continuous() const {
  return std::any_of(edits.begin(), edits.end(), [](const Edit& e) {
    return std::holds_alternative<Sinusoid>(e.payload);
  });
}

ValidationReport validate_scm(const LinearScm& scm) {
  ValidationReport r;
  auto fail = [&r](const std::string& msg) {
    r.ok = false;
    r.violations.push_back(msg);
  };
  const int d = scm.d;
  if (d <= 0) fail("d must be positive");
  if (scm.gamma.size() != d || scm.beta.size() != d || scm.b.rows() != d ||
      scm.b.cols() != d || static_cast<int>(scm.noise_x.size()) != d) {
    fail("parameter dimensions do not match d");
    return r;
  }
  if (!scm.gamma.allFinite() || !scm.beta.allFinite() || !scm.b.allFinite())
    fail("coefficients must be finite");
  for (int j = 0; j < d; ++j)
    if (!(scm.noise_x[j].var > 0.0) || !std::isfinite(scm.noise_x[j].var) ||
        !std::isfinite(scm.noise_x[j].mean))
      fail("noise variance of " + node_name(j) + " must be positive and finite");
  if (!(scm.noise_y.var > 0.0) || !std::isfinite(scm.noise_y.var) ||
      !std::isfinite(scm.noise_y.mean))
    fail("noise variance of y must be positive and finite");
  if (scm.envs.empty()) fail("at least one environment is required");

  EnvParams base;
  base.gamma = scm.gamma;
  base.b = scm.b;
  base.beta_total = scm.beta;
  std::vector<int> order = topo_sort(joint_matrix(base));
  if (order.empty()) {
    fail("graph must be acyclic (cycle found)");
  } else {
    for (int idx : order) r.topo_order.push_back(idx == d ? kYNode : idx);
  }
  return r;
}

EnvParams materialize(const LinearScm& scm, int env, double u) {
  check_env_index(scm, env);
  EnvParams p;
  p.gamma = scm.gamma;
  p.b = scm.b;
  p.beta_total = scm.beta;
  p.noise_x = scm.noise_x;
  p.noise_y = scm.noise_y;
  const int d = scm.d;
  auto check_node = [&](int node) {
    if (node != kYNode && (node < 0 || node >= d))
      throw std::invalid_argument("edit references unknown node " +
                                  std::to_string(node));
  };
  for (const Edit& e : scm.envs[env].edits) {
    check_node(e.target);
    const double v = eval_payload(e.payload, u);
    switch (e.kind) {
      case EditKind::kShift:
        if (e.target == kYNode)
          p.noise_y.mean += v;
        else
          p.noise_x[e.target].mean += v;
        break;
      case EditKind::kNoiseVariance: {
        double& var = e.target == kYNode ? p.noise_y.var : p.noise_x[e.target].var;
        if (!(v > 0.0))
          throw std::invalid_argument("noise variance edit on " +
                                      node_name(e.target) +
                                      " must stay positive");
        var = v;
        break;
      }
      case EditKind::kCoefficient: {
        check_node(e.parent);
        double* slot = nullptr;
        if (e.target == kYNode && e.parent != kYNode &&
            scm.beta(e.parent) != 0.0)
          slot = &p.beta_total(e.parent);
        else if (e.target != kYNode && e.parent == kYNode &&
                 scm.gamma(e.target) != 0.0)
          slot = &p.gamma(e.target);
        else if (e.target != kYNode && e.parent != kYNode &&
                 scm.b(e.target, e.parent) != 0.0)
          slot = &p.b(e.target, e.parent);
        if (slot == nullptr)
          throw std::invalid_argument("coefficient edit on missing edge " +
                                      node_name(e.parent) + " -> " +
                                      node_name(e.target));
        *slot += v;
        break;
      }
    }
  }
  p.alpha = p.beta_total - scm.beta;
  return p;
}

Moments population_moments(const LinearScm& scm, const EnvParams& p) {
  const int d = scm.d;
  Eigen::MatrixXd ia =
      Eigen::MatrixXd::Identity(d + 1, d + 1) - joint_matrix(p);
  Eigen::VectorXd mu(d + 1);
  Eigen::VectorXd dvar(d + 1);
  for (int j = 0; j < d; ++j) {
    mu(j) = p.noise_x[j].mean;
    dvar(j) = p.noise_x[j].var;
  }
  mu(d) = p.noise_y.mean;
  dvar(d) = p.noise_y.var;

  Eigen::PartialPivLU<Eigen::MatrixXd> lu(ia);
  Moments m;
  m.mean = lu.solve(mu);
  Eigen::MatrixXd inv = lu.solve(Eigen::MatrixXd::Identity(d + 1, d + 1));
  m.cov = inv * dvar.asDiagonal() * inv.transpose();
  return m;
}

Moments population_moments(const LinearScm& scm, int env, double u) {
  return population_moments(scm, materialize(scm, env, u));
}

Lmmse population_lmmse(const Moments& m, int target,
                       const std::vector<int>& predictors) {
  const int p = static_cast<int>(predictors.size());
  Eigen::MatrixXd sub(p, p);
  Eigen::VectorXd rhs(p);
  for (int i = 0; i < p; ++i) {
    rhs(i) = m.cov(predictors[i], target);
    for (int j = 0; j < p; ++j) sub(i, j) = m.cov(predictors[i], predictors[j]);
  }
  Lmmse out;
  if (p == 0) {
    out.coef = Eigen::VectorXd(0);
    out.intercept = m.mean(target);
    return out;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(sub,
                                        Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv(0) <= 0.0 || sv(p - 1) < kSolveRelTol * sv(0)) {
    std::ostringstream msg;
    msg << "population_lmmse: singular covariance for predictor set {";
    for (int i = 0; i < p; ++i)
      msg << (i ? "," : "")
          << (predictors[i] == static_cast<int>(m.mean.size()) - 1
                  ? "y"
                  : node_name(predictors[i]));
    msg << "}";
    throw std::runtime_error(msg.str());
  }
  out.coef = svd.solve(rhs);
  double dot = 0.0;
  for (int i = 0; i < p; ++i) dot += out.coef(i) * m.mean(predictors[i]);
  out.intercept = m.mean(target) - dot;
  return out;
}

namespace {

// Shared sampling core: evaluates nodes in topological order. For continuous
// environments, coefficient and shift adjustments are per-row sinusoid values.
Eigen::MatrixXd sample_core(const LinearScm& scm, int env, int n,
                            std::uint64_t seed, const Eigen::VectorXd* u) {
  check_env_index(scm, env);
  ValidationReport vr = validate_scm(scm);
  if (!vr.ok)
    throw std::invalid_argument("cannot sample from invalid model: " +
                                vr.violations.front());
  const int d = scm.d;
  const bool continuous = u != nullptr;
  EnvParams base = continuous ? materialize(scm, env, 0.0)  // validates edits
                              : materialize(scm, env);

  // Per-row payload values for the continuous case, aligned with edits.
  const auto& edits = scm.envs[env].edits;
  std::vector<Eigen::ArrayXd> values;
  if (continuous) {
    values.reserve(edits.size());
    for (const Edit& e : edits) {
      Eigen::ArrayXd v(n);
      for (int i = 0; i < n; ++i) v(i) = eval_payload(e.payload, (*u)(i));
      values.push_back(std::move(v));
    }
  }

  std::mt19937_64 rng = make_stream(seed, Stream::kNoise, env);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd data(n, d + 1);  // columns x1..xd, y

  auto column = [&](int node) { return data.col(node == kYNode ? d : node); };

  for (int node : vr.topo_order) {
    const NoiseSpec& ns =
        node == kYNode ? scm.noise_y : scm.noise_x[node];
    Eigen::ArrayXd mean = Eigen::ArrayXd::Constant(n, ns.mean);
    Eigen::ArrayXd var = Eigen::ArrayXd::Constant(n, ns.var);
    if (continuous) {
      for (std::size_t t = 0; t < edits.size(); ++t) {
        if (edits[t].target != node) continue;
        if (edits[t].kind == EditKind::kShift) mean += values[t];
        if (edits[t].kind == EditKind::kNoiseVariance) {
          if ((values[t] <= 0.0).any())
            throw std::invalid_argument("noise variance edit on " +
                                        node_name(node) +
                                        " must stay positive");
          var = values[t];
        }
      }
    } else {
      const NoiseSpec& m =
          node == kYNode ? base.noise_y : base.noise_x[node];
      mean.setConstant(m.mean);
      var.setConstant(m.var);
    }
    Eigen::ArrayXd z(n);
    for (int i = 0; i < n; ++i) z(i) = normal(rng);
    Eigen::ArrayXd col = mean + var.sqrt() * z;

    // Structural part: base coefficients, then per-row coefficient edits.
    if (node == kYNode) {
      const Eigen::VectorXd& coef = continuous ? scm.beta : base.beta_total;
      for (int j = 0; j < d; ++j)
        if (coef(j) != 0.0) col += coef(j) * data.col(j).array();
    } else {
      const Eigen::MatrixXd& bmat = continuous ? scm.b : base.b;
      Eigen::VectorXd coef = bmat.row(node).transpose();
      for (int j = 0; j < d; ++j)
        if (coef(j) != 0.0) col += coef(j) * data.col(j).array();
      const double g = continuous ? scm.gamma(node) : base.gamma(node);
      if (g != 0.0) col += g * data.col(d).array();
    }
    if (continuous) {
      for (std::size_t t = 0; t < edits.size(); ++t) {
        const Edit& e = edits[t];
        if (e.kind != EditKind::kCoefficient || e.target != node) continue;
        col += values[t] * column(e.parent).array();
      }
    }
    column(node) = col.matrix();
  }
  return data;
}

}  // namespace

Eigen::MatrixXd sample(const LinearScm& scm, int env, int n,
                       std::uint64_t seed) {
  check_env_index(scm, env);
  if (scm.envs[env].continuous())
    throw std::invalid_argument(
        "environment has sinusoid payloads; use sample_continuous");
  return sample_core(scm, env, n, seed, nullptr);
}

ContinuousSample sample_continuous(const LinearScm& scm, int env, int n,
                                   double u_lo, double u_hi,
                                   std::uint64_t seed) {
  check_env_index(scm, env);
  std::mt19937_64 rng = make_stream(seed, Stream::kEnvInput, env);
  std::uniform_real_distribution<double> unif(u_lo, u_hi);
  Eigen::VectorXd u(n);
  for (int i = 0; i < n; ++i) u(i) = unif(rng);
  Eigen::MatrixXd data = sample_core(scm, env, n, seed, &u);
  ContinuousSample cs;
  cs.u = std::move(u);
  cs.x = data.leftCols(scm.d);
  cs.y = data.col(scm.d);
  return cs;
}

std::vector<int> GraphView::descendants(int node) const {
  // BFS over the joint graph; Y participates as an internal hop but only
  // predictor indices are reported.
  std::set<int> seen;
  std::deque<int> queue{node};
  auto push_children = [&](int cur) {
    if (cur == kYNode) {
      for (int c : ch_y)
        if (!seen.count(c)) {
          seen.insert(c);
          queue.push_back(c);
        }
      return;
    }
    for (int i = 0; i < d; ++i)
      for (int par : parents[i])
        if (par == cur && !seen.count(i)) {
          seen.insert(i);
          queue.push_back(i);
        }
    bool parent_of_y =
        std::find(pa_y.begin(), pa_y.end(), cur) != pa_y.end();
    if (parent_of_y && !seen.count(kYNode)) {
      seen.insert(kYNode);
      queue.push_back(kYNode);
    }
  };
  while (!queue.empty()) {
    int cur = queue.front();
    queue.pop_front();
    push_children(cur);
  }
  seen.erase(kYNode);
  seen.erase(node);
  return sorted_unique(std::move(seen));
}

std::vector<int> GraphView::x_int(int node) const {
  std::set<int> out;
  std::vector<int> children;
  if (node == kYNode) {
    children = ch_y;
  } else {
    for (int i = 0; i < d; ++i)
      for (int par : parents[i])
        if (par == node) children.push_back(i);
  }
  for (int c : children) {
    if (std::find(intervened.begin(), intervened.end(), c) ==
        intervened.end())
      continue;
    out.insert(c);
    for (int de : descendants(c)) out.insert(de);
  }
  return sorted_unique(std::move(out));
}

bool GraphView::assumption1() const { return !ch_y.empty(); }

bool GraphView::assumption2() const {
  for (int c : ch_y)
    if (std::find(x_int_y.begin(), x_int_y.end(), c) == x_int_y.end())
      return true;
  return false;
}

GraphView graph_sets(const LinearScm& scm, const std::vector<int>& intervened) {
  GraphView g;
  g.d = scm.d;
  g.parents.resize(scm.d);
  for (int i = 0; i < scm.d; ++i) {
    for (int j = 0; j < scm.d; ++j)
      if (scm.b(i, j) != 0.0) g.parents[i].push_back(j);
    if (scm.gamma(i) != 0.0) {
      g.parents[i].push_back(kYNode);
      g.ch_y.push_back(i);
    }
  }
  for (int j = 0; j < scm.d; ++j)
    if (scm.beta(j) != 0.0) g.pa_y.push_back(j);

  std::set<int> pe;
  for (const InterventionSpec& spec : scm.envs)
    for (const Edit& e : spec.edits) {
      if (e.kind != EditKind::kCoefficient || e.target != kYNode) continue;
      bool nonzero = std::holds_alternative<Sinusoid>(e.payload)
                         ? std::get<Sinusoid>(e.payload).amp != 0.0
                         : std::get<double>(e.payload) != 0.0;
      if (nonzero) pe.insert(e.parent);
    }
  g.pe = sorted_unique(std::move(pe));
  g.intervened = intervened;
  std::sort(g.intervened.begin(), g.intervened.end());

  g.de_y = g.descendants(kYNode);
  std::set<int> mb(g.pa_y.begin(), g.pa_y.end());
  for (int c : g.ch_y) {
    mb.insert(c);
    for (int par : g.parents[c])
      if (par != kYNode) mb.insert(par);
  }
  g.mb_y = sorted_unique(std::move(mb));
  g.x_int_y = g.x_int(kYNode);
  return g;
}

LinearScm random_scm(const RandomScmConfig& cfg, std::uint64_t seed) {
  const int n = cfg.num_nodes;
  if (n < 3) throw std::invalid_argument("num_nodes must be at least 3");
  std::mt19937_64 rng = make_stream(seed, Stream::kGraph);
  std::bernoulli_distribution edge(cfg.edge_prob);
  std::bernoulli_distribution sign(0.5);
  std::uniform_real_distribution<double> mag(cfg.coef_lo, cfg.coef_hi);

  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    // coef(i, j) = weight of node j -> node i, j < i.
    Eigen::MatrixXd coef = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < i; ++j)
        if (edge(rng)) coef(i, j) = (sign(rng) ? 1.0 : -1.0) * mag(rng);

    std::vector<int> eligible;
    for (int v = 0; v < n; ++v) {
      bool has_parent = coef.row(v).head(v).cwiseAbs().sum() > 0.0;
      bool has_child = coef.col(v).tail(n - v - 1).cwiseAbs().sum() > 0.0;
      if (has_parent && has_child) eligible.push_back(v);
    }
    if (eligible.empty()) continue;
    std::uniform_int_distribution<int> pick(0,
                                            static_cast<int>(eligible.size()) - 1);
    const int y = eligible[pick(rng)];

    std::vector<int> xs;
    for (int v = 0; v < n; ++v)
      if (v != y) xs.push_back(v);

    LinearScm scm;
    scm.d = n - 1;
    scm.gamma = Eigen::VectorXd::Zero(scm.d);
    scm.beta = Eigen::VectorXd::Zero(scm.d);
    scm.b = Eigen::MatrixXd::Zero(scm.d, scm.d);
    scm.noise_x.assign(scm.d, NoiseSpec{});
    scm.noise_y = NoiseSpec{};
    for (int i = 0; i < scm.d; ++i) {
      for (int j = 0; j < scm.d; ++j) scm.b(i, j) = coef(xs[i], xs[j]);
      scm.gamma(i) = xs[i] > y ? coef(xs[i], y) : 0.0;
      scm.beta(i) = xs[i] < y ? coef(y, xs[i]) : 0.0;
    }
    scm.envs.push_back({"obs", {}});
    return scm;
  }
  throw std::runtime_error("random_scm: no eligible response after " +
                           std::to_string(cfg.max_attempts) + " attempts");
}

}  // namespace implab
