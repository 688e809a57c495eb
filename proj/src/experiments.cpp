#include "implab/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "implab/estimators.hpp"
#include "implab/rng.hpp"

namespace implab {
namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
constexpr int kGenerationAttempts = 10;  // model redraws per replicate
constexpr std::uint64_t kAttemptStride = 16;

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_number(double v) {
  return std::isnan(v) ? std::string() : format_double(v);
}

double draw(const Range& r, std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

// k distinct values from 'pool', ascending.
std::vector<int> sample_subset(std::vector<int> pool, int k,
                               std::mt19937_64& rng) {
  const int n = static_cast<int>(pool.size());
  if (k > n)
    throw std::invalid_argument("cannot draw " + std::to_string(k) +
                                " targets from " + std::to_string(n));
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(pool[i], pool[static_cast<std::size_t>(pick(rng))]);
  }
  pool.resize(static_cast<std::size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::vector<int> iota_vector(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

Edit shift_edit(int target, const Payload& payload) {
  Edit e;
  e.target = target;
  e.kind = EditKind::kShift;
  e.payload = payload;
  return e;
}

Edit coef_edit(int target, int parent, const Payload& payload) {
  Edit e;
  e.target = target;
  e.kind = EditKind::kCoefficient;
  e.parent = parent;
  e.payload = payload;
  return e;
}

Edit var_edit(int target, double value) {
  Edit e;
  e.target = target;
  e.kind = EditKind::kNoiseVariance;
  e.payload = value;
  return e;
}

// Parents of a variable as edit targets: predictor indices and possibly
// kYNode, read off the nonzero coefficients.
std::vector<int> edit_parents(const LinearScm& scm, int node) {
  std::vector<int> parents;
  if (node == kYNode) {
    for (int j = 0; j < scm.d; ++j)
      if (scm.beta(j) != 0.0) parents.push_back(j);
  } else {
    for (int j = 0; j < scm.d; ++j)
      if (scm.b(node, j) != 0.0) parents.push_back(j);
    if (scm.gamma(node) != 0.0) parents.push_back(kYNode);
  }
  return parents;
}

double mean_rss(const Eigen::VectorXd& y, const Eigen::VectorXd& y_hat) {
  return (y - y_hat).squaredNorm() / static_cast<double>(y.size());
}

// Population E[Y|X] of one test environment applied to its sample; NaN when
// the population solve is singular.
double oracle_rss_discrete(const LinearScm& scm_test, int env,
                           const PanelEnvironment& data) {
  try {
    Moments m = population_moments(scm_test, env);
    Lmmse o = population_lmmse(m, scm_test.d, iota_vector(scm_test.d));
    Eigen::VectorXd y_hat =
        ((data.x * o.coef).array() + o.intercept).matrix();
    return mean_rss(data.y, y_hat);
  } catch (const std::exception&) {
    return kNan;
  }
}

// Row-wise population E[Y|X, U=u] for a continuous test environment.
double oracle_rss_continuous(const LinearScm& scm_test,
                             const ContinuousSample& data) {
  try {
    const std::vector<int> all = iota_vector(scm_test.d);
    Eigen::VectorXd y_hat(data.u.size());
    for (Eigen::Index i = 0; i < data.u.size(); ++i) {
      Moments m = population_moments(scm_test, 0, data.u(i));
      Lmmse o = population_lmmse(m, scm_test.d, all);
      y_hat(i) = data.x.row(i).dot(o.coef) + o.intercept;
    }
    return mean_rss(data.y, y_hat);
  } catch (const std::exception&) {
    return kNan;
  }
}

const std::vector<std::string>& allowed_methods(ExperimentKind kind) {
  static const std::vector<std::string> discrete = {"imp", "imp_inv", "ols",
                                                    "anchor_cv"};
  static const std::vector<std::string> continuous = {"imp", "ols"};
  return kind == ExperimentKind::kContinuousXy ? continuous : discrete;
}

void check_methods(ExperimentKind kind,
                   const std::vector<std::string>& methods) {
  const std::vector<std::string>& allowed = allowed_methods(kind);
  for (std::size_t i = 0; i < methods.size(); ++i) {
    if (std::find(allowed.begin(), allowed.end(), methods[i]) ==
        allowed.end())
      throw std::invalid_argument("method '" + methods[i] +
                                  "' is not available for kind " +
                                  experiment_kind_name(kind));
    for (std::size_t j = i + 1; j < methods.size(); ++j)
      if (methods[i] == methods[j])
        throw std::invalid_argument("duplicate method '" + methods[i] + "'");
  }
}

// ---- discrete recipe builders -------------------------------------------

// Per-environment shift interventions on 'count' predictors drawn from
// 'pool'; one spec per environment is appended to scm.envs.
void add_x_shift_envs(LinearScm& scm, const std::vector<int>& pool, int count,
                      int n_envs, const Range& range, const char* prefix,
                      std::mt19937_64& rng) {
  for (int e = 0; e < n_envs; ++e) {
    InterventionSpec spec;
    spec.name = prefix + std::to_string(e + 1);
    for (int t : sample_subset(pool, count, rng))
      spec.edits.push_back(shift_edit(t, draw(range, rng)));
    scm.envs.push_back(std::move(spec));
  }
}

// Per-environment response interventions: coefficient perturbations on the
// chosen varying parents plus a mean shift on Y.
void add_y_envs(LinearScm& scm, const std::vector<int>& varying_parents,
                int n_envs, const Range& coef_range, const Range& shift_range,
                const char* prefix, std::mt19937_64& rng) {
  for (int e = 0; e < n_envs; ++e) {
    InterventionSpec spec;
    spec.name = prefix + std::to_string(e + 1);
    for (int j : varying_parents)
      spec.edits.push_back(coef_edit(kYNode, j, draw(coef_range, rng)));
    spec.edits.push_back(shift_edit(kYNode, draw(shift_range, rng)));
    scm.envs.push_back(std::move(spec));
  }
}

// Merges the edits of parallel environment lists (same length) in 'extra'
// into 'scm', keeping names from scm.
void merge_env_edits(LinearScm& scm, const LinearScm& extra) {
  for (std::size_t e = 0; e < scm.envs.size(); ++e)
    scm.envs[e].edits.insert(scm.envs[e].edits.end(),
                             extra.envs[e].edits.begin(),
                             extra.envs[e].edits.end());
}

struct GeneratedPair {
  LinearScm train;
  LinearScm test;
};

// Shared skeleton: a random base model whose response has at least one
// parent and one child, with per-phase environment lists.
LinearScm base_model(const ExperimentConfig& c, std::mt19937_64& rng) {
  RandomScmConfig rc;
  rc.num_nodes = c.num_nodes;
  rc.edge_prob = c.edge_prob;
  LinearScm scm = random_scm(rc, rng());
  scm.envs.clear();
  return scm;
}

GeneratedPair generate_discrete(const ExperimentConfig& c,
                                std::mt19937_64& rng) {
  LinearScm base = base_model(c, rng);
  GeneratedPair out{base, base};

  GraphView g = graph_sets(base, {});
  std::vector<int> x_pool = iota_vector(base.d);
  std::vector<int> varying_parents;
  if (c.kind == ExperimentKind::kDiscreteXy) {
    // Keep the child of Y with the highest causal ordering free of
    // interventions so an invariant matching relation can survive.
    x_pool.erase(std::remove(x_pool.begin(), x_pool.end(), g.ch_y.back()),
                 x_pool.end());
  }
  if (c.kind == ExperimentKind::kDiscreteY ||
      c.kind == ExperimentKind::kDiscreteXy) {
    const int n_parents = static_cast<int>(g.pa_y.size());
    std::uniform_int_distribution<int> pick(1, n_parents);
    varying_parents = sample_subset(g.pa_y, pick(rng), rng);
  }

  // Draw order: all predictor-shift environments (train phase then test),
  // then all response-edit environments.
  if (c.kind == ExperimentKind::kDiscreteX ||
      c.kind == ExperimentKind::kDiscreteXy) {
    add_x_shift_envs(out.train, x_pool, c.intervened_predictors, c.train_envs,
                     c.train_shift, "train", rng);
    add_x_shift_envs(out.test, x_pool, c.intervened_predictors, c.test_envs,
                     c.test_shift, "test", rng);
  }
  if (c.kind == ExperimentKind::kDiscreteY ||
      c.kind == ExperimentKind::kDiscreteXy) {
    LinearScm y_train = base, y_test = base;
    add_y_envs(y_train, varying_parents, c.train_envs, c.train_coef,
               c.train_shift, "train", rng);
    add_y_envs(y_test, varying_parents, c.test_envs, c.test_coef,
               c.test_shift, "test", rng);
    if (out.train.envs.empty()) {
      out.train.envs = std::move(y_train.envs);
      out.test.envs = std::move(y_test.envs);
    } else {
      merge_env_edits(out.train, y_train);
      merge_env_edits(out.test, y_test);
    }
  }
  return out;
}

GeneratedPair generate_continuous(const ExperimentConfig& c,
                                  std::mt19937_64& rng) {
  LinearScm base = base_model(c, rng);
  GraphView g = graph_sets(base, {});

  // Intervened predictors avoid the highest-ordered child of Y; frequencies
  // are drawn once and shared between the phases, only amplitudes differ.
  std::vector<int> x_pool = iota_vector(base.d);
  x_pool.erase(std::remove(x_pool.begin(), x_pool.end(), g.ch_y.back()),
               x_pool.end());
  const std::vector<int> targets =
      sample_subset(x_pool, c.intervened_predictors, rng);
  const int n_parents = static_cast<int>(g.pa_y.size());
  std::uniform_int_distribution<int> pick(1, n_parents);
  const std::vector<int> varying_parents =
      sample_subset(g.pa_y, pick(rng), rng);

  std::vector<double> freq_x;
  for (std::size_t i = 0; i < targets.size(); ++i)
    freq_x.push_back(draw(c.sin_freq, rng));
  std::vector<double> freq_coef;
  for (std::size_t i = 0; i < varying_parents.size(); ++i)
    freq_coef.push_back(draw(c.sin_freq, rng));
  const double freq_y_shift = draw(c.sin_freq, rng);

  auto build = [&](double amp, const char* name) {
    InterventionSpec spec;
    spec.name = name;
    for (std::size_t i = 0; i < targets.size(); ++i)
      spec.edits.push_back(shift_edit(targets[i], Sinusoid{amp, freq_x[i]}));
    for (std::size_t i = 0; i < varying_parents.size(); ++i)
      spec.edits.push_back(
          coef_edit(kYNode, varying_parents[i], Sinusoid{amp, freq_coef[i]}));
    spec.edits.push_back(shift_edit(kYNode, Sinusoid{amp, freq_y_shift}));
    return spec;
  };
  GeneratedPair out{base, base};
  out.train.envs.push_back(build(c.train_amp, "train"));
  out.test.envs.push_back(build(c.test_amp, "test"));
  return out;
}

// Full-strength draws for the robustness sweep. Every variable except the
// protected child gets a shift, a perturbation on each incoming coefficient,
// and a replaced noise variance; the protected child's full-strength draws
// are stored separately and interpolated toward the identity by lambda.
struct SweepEnvDraws {
  std::vector<Edit> fixed;          // all non-protected variables
  double child_shift{0.0};          // full-strength protected-child draws
  std::vector<double> child_coef;   // aligned with child_parents
  double child_var{1.0};
};

struct SweepDraws {
  LinearScm base;
  int child{0};
  std::vector<int> child_parents;
  std::vector<SweepEnvDraws> train;
  std::vector<SweepEnvDraws> test;
};

SweepDraws generate_sweep(const ExperimentConfig& c, std::mt19937_64& rng) {
  SweepDraws out;
  out.base = base_model(c, rng);
  GraphView g = graph_sets(out.base, {});
  out.child = g.ch_y.back();
  out.child_parents = edit_parents(out.base, out.child);

  auto draw_env = [&](const Range& shift, const Range& coef,
                      const Range& noise_var) {
    SweepEnvDraws env;
    for (int v = 0; v <= out.base.d; ++v) {
      const int node = v == out.base.d ? kYNode : v;
      if (node == out.child) continue;
      env.fixed.push_back(shift_edit(node, draw(shift, rng)));
      for (int parent : edit_parents(out.base, node))
        env.fixed.push_back(coef_edit(node, parent, draw(coef, rng)));
      env.fixed.push_back(var_edit(node, draw(noise_var, rng)));
    }
    env.child_shift = draw(shift, rng);
    for (std::size_t i = 0; i < out.child_parents.size(); ++i)
      env.child_coef.push_back(draw(coef, rng));
    env.child_var = draw(noise_var, rng);
    return env;
  };
  for (int e = 0; e < c.train_envs; ++e)
    out.train.push_back(
        draw_env(c.train_shift, c.train_coef, c.train_noise_var));
  for (int e = 0; e < c.test_envs; ++e)
    out.test.push_back(draw_env(c.test_shift, c.test_coef, c.test_noise_var));
  return out;
}

// Environment specs at one lambda: the protected child's interventions are
// its full-strength draws scaled by lambda (variances interpolate toward 1).
LinearScm sweep_scm_at(const SweepDraws& draws, bool test, double lambda) {
  LinearScm scm = draws.base;
  scm.envs.clear();
  const std::vector<SweepEnvDraws>& envs = test ? draws.test : draws.train;
  for (std::size_t e = 0; e < envs.size(); ++e) {
    InterventionSpec spec;
    spec.name = (test ? "test" : "train") + std::to_string(e + 1);
    spec.edits = envs[e].fixed;
    if (lambda > 0.0) {
      spec.edits.push_back(
          shift_edit(draws.child, lambda * envs[e].child_shift));
      for (std::size_t i = 0; i < draws.child_parents.size(); ++i)
        spec.edits.push_back(coef_edit(draws.child, draws.child_parents[i],
                                       lambda * envs[e].child_coef[i]));
      spec.edits.push_back(var_edit(
          draws.child, 1.0 + lambda * (envs[e].child_var - 1.0)));
    }
    scm.envs.push_back(std::move(spec));
  }
  return scm;
}

// ---- method evaluation ----------------------------------------------------

// Runs every configured method on one discrete train/test panel pair and
// appends rows (and selection logs for the IMP variants). scm_test may be
// null (CSV panels) in which case the oracle column stays NaN.
void eval_discrete(const ExperimentConfig& c,
                   const std::vector<std::string>& methods,
                   const PanelDataset& train, const PanelDataset& test,
                   const LinearScm* scm_test, int replicate, double lambda,
                   std::uint64_t method_seed, std::vector<EvalRow>* rows,
                   std::vector<SelectionLog>* logs) {
  const std::size_t n_test = test.envs.size();
  std::vector<double> oracle(n_test, kNan);
  if (scm_test != nullptr)
    for (std::size_t e = 0; e < n_test; ++e)
      oracle[e] = oracle_rss_discrete(*scm_test, static_cast<int>(e),
                                      test.envs[e]);

  LinearModel fallback_model;
  bool have_fallback = false;
  auto fallback = [&]() -> const LinearModel& {
    if (!have_fallback) {
      fallback_model = pooled_ols(train);
      have_fallback = true;
    }
    return fallback_model;
  };

  for (const std::string& method : methods) {
    std::vector<double> rss(n_test, kNan);
    if (method == "ols") {
      LinearModel m = pooled_ols(train);
      for (std::size_t e = 0; e < n_test; ++e)
        rss[e] = m.mse(test.envs[e].x, test.envs[e].y);
    } else if (method == "anchor_cv") {
      LinearModel m = anchor_cv(train, anchor_default_grid(), 5, method_seed);
      for (std::size_t e = 0; e < n_test; ++e)
        rss[e] = m.mse(test.envs[e].x, test.envs[e].y);
    } else {  // imp | imp_inv
      SelectionConfig sel = c.selection;
      sel.score_kind = method == "imp_inv" ? ScoreKind::kInvariance
                                           : ScoreKind::kResidual;
      sel.seed = method_seed;
      DiscreteImpModel model = fit_discrete_imp(train, c.limits, sel);
      SelectionLog log;
      log.method = method;
      log.replicate = replicate;
      log.lambda = lambda;
      log.found = model.selection.found;
      log.n_selected = static_cast<int>(model.selection.i_hat.size());
      log.n_pred = static_cast<int>(model.selection.i_pred.size());
      const bool usable = model.selection.found && !model.fits.empty();
      for (std::size_t e = 0; e < n_test; ++e) {
        if (usable) {
          try {
            DiscretePrediction pred =
                predict_discrete(model.fits, test.envs[e].x);
            rss[e] = mean_rss(test.envs[e].y, pred.y_hat);
            continue;
          } catch (const std::runtime_error&) {
            // every candidate dropped on this environment: fall through
          }
        }
        log.fallback = true;
        rss[e] = fallback().mse(test.envs[e].x, test.envs[e].y);
      }
      logs->push_back(log);
    }
    for (std::size_t e = 0; e < n_test; ++e)
      rows->push_back(EvalRow{method, replicate, test.envs[e].name, lambda,
                              rss[e], oracle[e]});
  }
}

void eval_continuous(const ExperimentConfig& c,
                     const std::vector<std::string>& methods,
                     const ContinuousSample& train,
                     const ContinuousSample& test, const LinearScm& scm_test,
                     int replicate, std::uint64_t method_seed,
                     std::vector<EvalRow>* rows,
                     std::vector<SelectionLog>* logs) {
  const double oracle = oracle_rss_continuous(scm_test, test);
  PanelDataset pooled;
  pooled.envs.push_back(PanelEnvironment{"train", train.x, train.y});

  for (const std::string& method : methods) {
    double rss = kNan;
    if (method == "ols") {
      LinearModel m = pooled_ols(pooled);
      rss = m.mse(test.x, test.y);
    } else {  // imp
      SelectionConfig sel = c.selection;
      sel.score_kind = ScoreKind::kResidual;
      sel.seed = method_seed;
      SelectionLog log;
      log.method = method;
      log.replicate = replicate;
      log.lambda = kNan;
      try {
        ContSelectionReport out = select_and_predict_cont(
            train, test.u, test.x, c.limits, sel, c.bandwidth);
        log.found = out.selection.found;
        log.n_selected = static_cast<int>(out.selection.i_hat.size());
        log.n_pred = static_cast<int>(out.selection.i_pred.size());
        if (out.selection.found) rss = mean_rss(test.y, out.y_hat);
      } catch (const std::runtime_error&) {
        // every selected candidate failed on the test rows
      }
      if (std::isnan(rss)) {
        log.fallback = true;
        rss = pooled_ols(pooled).mse(test.x, test.y);
      }
      logs->push_back(log);
    }
    rows->push_back(
        EvalRow{method, replicate, "test", kNan, rss, oracle});
  }
}

// ---- replicate drivers ------------------------------------------------

struct ReplicateOut {
  std::vector<EvalRow> rows;
  std::vector<SelectionLog> logs;
};

ReplicateOut run_replicate(const ExperimentConfig& c,
                           const std::vector<std::string>& methods,
                           int replicate, std::mt19937_64& rng) {
  ReplicateOut out;
  switch (c.kind) {
    case ExperimentKind::kDiscreteX:
    case ExperimentKind::kDiscreteY:
    case ExperimentKind::kDiscreteXy: {
      GeneratedPair pair = generate_discrete(c, rng);
      const std::uint64_t train_seed = rng();
      const std::uint64_t test_seed = rng();
      const std::uint64_t method_seed = rng();
      PanelDataset train = simulate_panel(pair.train, c.n_per_env, train_seed);
      PanelDataset test = simulate_panel(pair.test, c.n_per_env, test_seed);
      eval_discrete(c, methods, train, test, &pair.test, replicate, kNan,
                    method_seed, &out.rows, &out.logs);
      break;
    }
    case ExperimentKind::kContinuousXy: {
      GeneratedPair pair = generate_continuous(c, rng);
      const std::uint64_t train_seed = rng();
      const std::uint64_t test_seed = rng();
      const std::uint64_t method_seed = rng();
      ContinuousSample train = sample_continuous(
          pair.train, 0, c.n_train, c.u_train.lo, c.u_train.hi, train_seed);
      ContinuousSample test = sample_continuous(
          pair.test, 0, c.m_test, c.u_test.lo, c.u_test.hi, test_seed);
      eval_continuous(c, methods, train, test, pair.test, replicate,
                      method_seed, &out.rows, &out.logs);
      break;
    }
    case ExperimentKind::kRobustnessSweep: {
      SweepDraws draws = generate_sweep(c, rng);
      const std::uint64_t train_seed = rng();
      const std::uint64_t test_seed = rng();
      const std::uint64_t method_seed = rng();
      for (double lambda : c.lambda_grid) {
        LinearScm scm_train = sweep_scm_at(draws, false, lambda);
        LinearScm scm_test = sweep_scm_at(draws, true, lambda);
        PanelDataset train = simulate_panel(scm_train, c.n_per_env, train_seed);
        PanelDataset test = simulate_panel(scm_test, c.n_per_env, test_seed);
        eval_discrete(c, methods, train, test, &scm_test, replicate, lambda,
                      method_seed, &out.rows, &out.logs);
      }
      break;
    }
    case ExperimentKind::kCsvPanel:
      throw std::logic_error("csv_panel replicates are not simulated");
  }
  return out;
}

void run_csv_panel(const ExperimentConfig& c,
                   const std::vector<std::string>& methods,
                   EvalReport* report) {
  PanelLoadResult loaded = load_panel_csv(c.csv_path, c.schema);
  PanelDataset train, test;
  for (const PanelEnvironment& env : loaded.panel.envs) {
    const bool is_train =
        std::find(c.train_env_names.begin(), c.train_env_names.end(),
                  env.name) != c.train_env_names.end();
    (is_train ? train : test).envs.push_back(env);
  }
  for (const std::string& name : c.train_env_names) {
    bool present = false;
    for (const PanelEnvironment& env : train.envs) present |= env.name == name;
    if (!present)
      throw std::invalid_argument("training environment '" + name +
                                  "' is not in " + c.csv_path);
  }
  if (train.envs.size() < 2)
    throw std::invalid_argument(
        "discrete panels need at least two training environments");
  if (test.envs.empty())
    throw std::invalid_argument("no test environments remain in " +
                                c.csv_path);
  eval_discrete(c, methods, train, test, nullptr, 0, kNan,
                c.selection.seed, &report->rows, &report->selections);
}

struct Group {
  std::string method;
  double lambda;
  // replicate -> (sum of env rss, env count)
  std::vector<std::pair<int, std::pair<double, long>>> by_replicate;
};

bool same_lambda(double a, double b) {
  return (std::isnan(a) && std::isnan(b)) || a == b;
}

// Replicate-level mean RSS (averaged over that replicate's test
// environments) per (method, lambda); methods keep first-appearance order,
// lambdas ascend.
std::vector<Group> group_rows(const std::vector<EvalRow>& rows) {
  std::vector<Group> groups;
  for (const EvalRow& row : rows) {
    if (std::isnan(row.mean_rss)) continue;
    Group* g = nullptr;
    for (Group& cand : groups)
      if (cand.method == row.method && same_lambda(cand.lambda, row.lambda)) {
        g = &cand;
        break;
      }
    if (g == nullptr) {
      groups.push_back(Group{row.method, row.lambda, {}});
      g = &groups.back();
    }
    std::pair<double, long>* acc = nullptr;
    for (auto& entry : g->by_replicate)
      if (entry.first == row.replicate) {
        acc = &entry.second;
        break;
      }
    if (acc == nullptr) {
      g->by_replicate.push_back({row.replicate, {0.0, 0}});
      acc = &g->by_replicate.back().second;
    }
    acc->first += row.mean_rss;
    acc->second += 1;
  }
  // Sort by (first appearance of the method, lambda); NaN lambdas first.
  std::vector<std::string> method_order;
  auto rank = [&](const std::string& m) {
    for (std::size_t i = 0; i < method_order.size(); ++i)
      if (method_order[i] == m) return i;
    method_order.push_back(m);
    return method_order.size() - 1;
  };
  for (const Group& g : groups) rank(g.method);
  std::sort(groups.begin(), groups.end(),
            [&](const Group& a, const Group& b) {
              const std::size_t ra = rank(a.method), rb = rank(b.method);
              if (ra != rb) return ra < rb;
              if (std::isnan(a.lambda)) return !std::isnan(b.lambda);
              return !std::isnan(b.lambda) && a.lambda < b.lambda;
            });
  return groups;
}

std::vector<double> replicate_means(const Group& g) {
  std::vector<double> means;
  for (const auto& entry : g.by_replicate)
    means.push_back(entry.second.first /
                    static_cast<double>(entry.second.second));
  return means;
}

}  // namespace

std::string experiment_kind_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kDiscreteX: return "discrete_x";
    case ExperimentKind::kDiscreteY: return "discrete_y";
    case ExperimentKind::kDiscreteXy: return "discrete_xy";
    case ExperimentKind::kContinuousXy: return "continuous_xy";
    case ExperimentKind::kRobustnessSweep: return "robustness_sweep";
    case ExperimentKind::kCsvPanel: return "csv_panel";
  }
  throw std::logic_error("unreachable experiment kind");
}

ExperimentKind experiment_kind_from_name(const std::string& name) {
  for (ExperimentKind kind :
       {ExperimentKind::kDiscreteX, ExperimentKind::kDiscreteY,
        ExperimentKind::kDiscreteXy, ExperimentKind::kContinuousXy,
        ExperimentKind::kRobustnessSweep, ExperimentKind::kCsvPanel})
    if (experiment_kind_name(kind) == name) return kind;
  throw std::invalid_argument("unknown experiment kind '" + name + "'");
}

std::vector<std::string> default_methods(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kContinuousXy:
      return {"imp", "ols"};
    case ExperimentKind::kRobustnessSweep:
      return {"imp"};
    default:
      return {"imp", "imp_inv", "ols", "anchor_cv"};
  }
}

void ExperimentConfig::validate() const {
  auto check_range = [](const Range& r, const char* name) {
    if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi))
      throw std::invalid_argument(std::string(name) +
                                  " range must satisfy lo <= hi");
  };
  check_range(u_train, "u_train");
  check_range(u_test, "u_test");
  check_range(sin_freq, "sin_freq");
  check_range(train_shift, "train_shift");
  check_range(test_shift, "test_shift");
  check_range(train_coef, "train_coef");
  check_range(test_coef, "test_coef");
  check_range(train_noise_var, "train_noise_var");
  check_range(test_noise_var, "test_noise_var");
  if (replicates < 1) throw std::invalid_argument("replicates must be >= 1");
  if (bandwidth <= 0.0)
    throw std::invalid_argument("bandwidth must be positive");
  if (kind == ExperimentKind::kCsvPanel) {
    if (csv_path.empty())
      throw std::invalid_argument("csv_panel needs csv_path");
    if (schema.env_col.empty() || schema.y_col.empty() ||
        schema.feature_cols.empty())
      throw std::invalid_argument(
          "csv_panel needs env_col, y_col and feature_cols");
    if (train_env_names.empty())
      throw std::invalid_argument("csv_panel needs train_env_names");
    return;
  }
  if (num_nodes < 3)
    throw std::invalid_argument(
        "need at least 3 variables (a parent, the response, a child)");
  if (train_envs < 1 || test_envs < 1)
    throw std::invalid_argument("need at least one environment per phase");
  if (n_per_env < 10) throw std::invalid_argument("n_per_env is too small");
  if (kind == ExperimentKind::kContinuousXy && (n_train < 50 || m_test < 50))
    throw std::invalid_argument("continuous phases need at least 50 rows");
  const int d = num_nodes - 1;
  const bool protects_child = kind == ExperimentKind::kDiscreteXy ||
                              kind == ExperimentKind::kContinuousXy;
  const int pool = protects_child ? d - 1 : d;
  if (kind != ExperimentKind::kDiscreteY &&
      kind != ExperimentKind::kRobustnessSweep &&
      (intervened_predictors < 1 || intervened_predictors > pool))
    throw std::invalid_argument(
        "intervened_predictors must lie in [1, " + std::to_string(pool) +
        "]");
  if (kind == ExperimentKind::kRobustnessSweep) {
    if (lambda_grid.empty())
      throw std::invalid_argument("lambda_grid must not be empty");
    for (double l : lambda_grid)
      if (!(l >= 0.0) || !std::isfinite(l))
        throw std::invalid_argument("lambda values must be >= 0");
  }
}

double quantile_linear(std::vector<double> values, double p) {
  if (values.empty())
    throw std::invalid_argument("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0))
    throw std::invalid_argument("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = p * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = h - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

std::vector<MethodSummary> summarize(const std::vector<EvalRow>& rows) {
  std::vector<MethodSummary> out;
  for (const Group& g : group_rows(rows)) {
    std::vector<double> means = replicate_means(g);
    MethodSummary s;
    s.method = g.method;
    s.lambda = g.lambda;
    s.replicates = static_cast<long>(means.size());
    s.mean = std::accumulate(means.begin(), means.end(), 0.0) /
             static_cast<double>(means.size());
    s.median = quantile_linear(means, 0.5);
    s.iqr = quantile_linear(means, 0.75) - quantile_linear(means, 0.25);
    out.push_back(std::move(s));
  }
  return out;
}

EvalReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  EvalReport report;
  report.kind = config.kind;
  report.methods =
      config.methods.empty() ? default_methods(config.kind) : config.methods;
  check_methods(config.kind, report.methods);

  if (config.kind == ExperimentKind::kCsvPanel) {
    run_csv_panel(config, report.methods, &report);
  } else {
    for (int rep = 0; rep < config.replicates; ++rep) {
      bool done = false;
      for (int attempt = 0; attempt < kGenerationAttempts && !done;
           ++attempt) {
        auto rng = make_stream(
            config.seed, Stream::kRecipe,
            static_cast<std::uint64_t>(rep) * kAttemptStride +
                static_cast<std::uint64_t>(attempt));
        try {
          ReplicateOut out = run_replicate(config, report.methods, rep, rng);
          report.rows.insert(report.rows.end(), out.rows.begin(),
                             out.rows.end());
          report.selections.insert(report.selections.end(), out.logs.begin(),
                                   out.logs.end());
          done = true;
        } catch (const std::exception&) {
          // infeasible draw; retry with the next substream
        }
      }
      if (!done) ++report.skipped_replicates;
    }
  }
  report.summaries = summarize(report.rows);
  return report;
}

std::vector<std::string> emit_report(const EvalReport& report,
                                     const std::string& out_dir,
                                     const EmitOptions& options) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  auto open = [&](const std::string& name) {
    fs::path path = fs::path(out_dir) / name;
    std::ofstream out(path);
    if (!out)
      throw std::runtime_error("cannot write report file: " + path.string());
    written.push_back(path.string());
    return out;
  };

  if (options.rows_csv) {
    std::ofstream out = open("rows.csv");
    out << "method,replicate,test_env,lambda,mean_rss,oracle_rss\n";
    for (const EvalRow& row : report.rows)
      out << row.method << ',' << row.replicate << ',' << row.test_env << ','
          << csv_number(row.lambda) << ',' << csv_number(row.mean_rss) << ','
          << csv_number(row.oracle_rss) << '\n';
  }
  if (options.selections_csv) {
    std::ofstream out = open("selections.csv");
    out << "method,replicate,lambda,found,n_selected,n_pred,fallback\n";
    for (const SelectionLog& log : report.selections)
      out << log.method << ',' << log.replicate << ','
          << csv_number(log.lambda) << ',' << int(log.found) << ','
          << log.n_selected << ',' << log.n_pred << ',' << int(log.fallback)
          << '\n';
  }
  if (options.quantiles_csv) {
    std::ofstream out = open("quantiles.csv");
    out << "method,lambda,replicates,q10,q25,q50,q75,q90\n";
    for (const Group& g : group_rows(report.rows)) {
      std::vector<double> means = replicate_means(g);
      out << g.method << ',' << csv_number(g.lambda) << ',' << means.size();
      for (double p : {0.1, 0.25, 0.5, 0.75, 0.9})
        out << ',' << format_double(quantile_linear(means, p));
      out << '\n';
    }
  }
  if (options.summary_json) {
    nlohmann::json j;
    j["kind"] = experiment_kind_name(report.kind);
    j["methods"] = report.methods;
    j["skipped_replicates"] = report.skipped_replicates;
    j["rows"] = report.rows.size();
    nlohmann::json summaries = nlohmann::json::array();
    for (const MethodSummary& s : report.summaries) {
      nlohmann::json entry;
      entry["method"] = s.method;
      if (std::isnan(s.lambda))
        entry["lambda"] = nullptr;
      else
        entry["lambda"] = s.lambda;
      entry["replicates"] = s.replicates;
      entry["mean"] = s.mean;
      entry["median"] = s.median;
      entry["iqr"] = s.iqr;
      summaries.push_back(entry);
    }
    j["summaries"] = summaries;
    std::ofstream out = open("summary.json");
    out << j.dump(2) << '\n';
  }
  return written;
}

namespace {

Range range_from_json(const nlohmann::json& j, const char* name) {
  if (!j.is_array() || j.size() != 2)
    throw std::invalid_argument(std::string(name) +
                                " must be a [lo, hi] array");
  return Range{j[0].get<double>(), j[1].get<double>()};
}

nlohmann::json range_to_json(const Range& r) {
  return nlohmann::json::array({r.lo, r.hi});
}

void check_keys(const nlohmann::json& j, const char* where,
                const std::vector<std::string>& allowed) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw std::invalid_argument(std::string("unknown key '") + it.key() +
                                  "' in " + where);
}

}  // namespace

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object())
    throw std::invalid_argument("experiment config must be a JSON object");
  check_keys(j, "experiment config",
             {"kind", "num_nodes", "edge_prob", "train_envs", "test_envs",
              "n_per_env", "n_train", "m_test", "u_train", "u_test",
              "sin_freq", "train_amp", "test_amp", "intervened_predictors",
              "train_shift", "test_shift", "train_coef", "test_coef",
              "train_noise_var", "test_noise_var", "lambda_grid",
              "replicates", "seed", "methods", "limits", "selection",
              "bandwidth", "csv"});
  ExperimentConfig c;
  if (!j.contains("kind"))
    throw std::invalid_argument("experiment config needs a 'kind'");
  c.kind = experiment_kind_from_name(j.at("kind").get<std::string>());
  if (c.kind == ExperimentKind::kContinuousXy) c.intervened_predictors = 2;
  if (c.kind == ExperimentKind::kRobustnessSweep) {
    // The sweep perturbs every edge of every variable, so the wide shift
    // ranges of the predictor-shift kinds would blow up the test variance.
    c.test_shift = Range{-5.0, 5.0};
    c.test_coef = Range{-5.0, 5.0};
  }

  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
  };
  get("num_nodes", c.num_nodes);
  get("edge_prob", c.edge_prob);
  get("train_envs", c.train_envs);
  get("test_envs", c.test_envs);
  get("n_per_env", c.n_per_env);
  get("n_train", c.n_train);
  get("m_test", c.m_test);
  get("train_amp", c.train_amp);
  get("test_amp", c.test_amp);
  get("intervened_predictors", c.intervened_predictors);
  get("replicates", c.replicates);
  get("seed", c.seed);
  get("bandwidth", c.bandwidth);
  get("methods", c.methods);
  get("lambda_grid", c.lambda_grid);
  auto get_range = [&](const char* key, Range& slot) {
    if (j.contains(key)) slot = range_from_json(j.at(key), key);
  };
  get_range("u_train", c.u_train);
  get_range("u_test", c.u_test);
  get_range("sin_freq", c.sin_freq);
  get_range("train_shift", c.train_shift);
  get_range("test_shift", c.test_shift);
  get_range("train_coef", c.train_coef);
  get_range("test_coef", c.test_coef);
  get_range("train_noise_var", c.train_noise_var);
  get_range("test_noise_var", c.test_noise_var);

  if (j.contains("limits")) {
    const nlohmann::json& l = j.at("limits");
    check_keys(l, "limits", {"max_s_size", "max_candidates"});
    if (l.contains("max_s_size")) c.limits.max_s_size = l.at("max_s_size");
    if (l.contains("max_candidates"))
      c.limits.max_candidates = l.at("max_candidates");
  }
  if (j.contains("selection")) {
    const nlohmann::json& s = j.at("selection");
    check_keys(s, "selection",
               {"score", "c_imp", "c_pred", "bootstrap_rounds", "quantile",
                "invariance_level", "preselect_median", "seed"});
    if (s.contains("score")) {
      const std::string score = s.at("score").get<std::string>();
      if (score == "residual")
        c.selection.score_kind = ScoreKind::kResidual;
      else if (score == "invariance")
        c.selection.score_kind = ScoreKind::kInvariance;
      else
        throw std::invalid_argument("unknown score '" + score + "'");
    }
    if (s.contains("c_imp") && !s.at("c_imp").is_null())
      c.selection.c_imp = s.at("c_imp").get<double>();
    if (s.contains("c_pred") && !s.at("c_pred").is_null())
      c.selection.c_pred = s.at("c_pred").get<double>();
    if (s.contains("bootstrap_rounds"))
      c.selection.bootstrap_rounds = s.at("bootstrap_rounds");
    if (s.contains("quantile")) c.selection.quantile = s.at("quantile");
    if (s.contains("invariance_level"))
      c.selection.invariance_level = s.at("invariance_level");
    if (s.contains("preselect_median"))
      c.selection.preselect_median = s.at("preselect_median");
    if (s.contains("seed"))
      c.selection.seed = s.at("seed").get<std::uint64_t>();
  }
  if (j.contains("csv")) {
    const nlohmann::json& p = j.at("csv");
    check_keys(p, "csv",
               {"path", "env_col", "u_col", "y_col", "feature_cols",
                "train_envs"});
    if (p.contains("path")) c.csv_path = p.at("path").get<std::string>();
    if (p.contains("env_col"))
      c.schema.env_col = p.at("env_col").get<std::string>();
    if (p.contains("u_col")) c.schema.u_col = p.at("u_col").get<std::string>();
    if (p.contains("y_col")) c.schema.y_col = p.at("y_col").get<std::string>();
    if (p.contains("feature_cols"))
      c.schema.feature_cols =
          p.at("feature_cols").get<std::vector<std::string>>();
    if (p.contains("train_envs"))
      c.train_env_names = p.at("train_envs").get<std::vector<std::string>>();
  }
  c.validate();
  return c;
}

nlohmann::json experiment_config_to_json(const ExperimentConfig& config) {
  nlohmann::json j;
  j["kind"] = experiment_kind_name(config.kind);
  j["num_nodes"] = config.num_nodes;
  j["edge_prob"] = config.edge_prob;
  j["train_envs"] = config.train_envs;
  j["test_envs"] = config.test_envs;
  j["n_per_env"] = config.n_per_env;
  j["n_train"] = config.n_train;
  j["m_test"] = config.m_test;
  j["u_train"] = range_to_json(config.u_train);
  j["u_test"] = range_to_json(config.u_test);
  j["sin_freq"] = range_to_json(config.sin_freq);
  j["train_amp"] = config.train_amp;
  j["test_amp"] = config.test_amp;
  j["intervened_predictors"] = config.intervened_predictors;
  j["train_shift"] = range_to_json(config.train_shift);
  j["test_shift"] = range_to_json(config.test_shift);
  j["train_coef"] = range_to_json(config.train_coef);
  j["test_coef"] = range_to_json(config.test_coef);
  j["train_noise_var"] = range_to_json(config.train_noise_var);
  j["test_noise_var"] = range_to_json(config.test_noise_var);
  j["lambda_grid"] = config.lambda_grid;
  j["replicates"] = config.replicates;
  j["seed"] = config.seed;
  j["methods"] = config.methods;
  j["bandwidth"] = config.bandwidth;
  j["limits"] = {{"max_s_size", config.limits.max_s_size},
                 {"max_candidates", config.limits.max_candidates}};
  nlohmann::json sel;
  sel["score"] = config.selection.score_kind == ScoreKind::kInvariance
                     ? "invariance"
                     : "residual";
  sel["c_imp"] = config.selection.c_imp
                     ? nlohmann::json(*config.selection.c_imp)
                     : nlohmann::json(nullptr);
  sel["c_pred"] = config.selection.c_pred
                      ? nlohmann::json(*config.selection.c_pred)
                      : nlohmann::json(nullptr);
  sel["bootstrap_rounds"] = config.selection.bootstrap_rounds;
  sel["quantile"] = config.selection.quantile;
  sel["invariance_level"] = config.selection.invariance_level;
  sel["preselect_median"] = config.selection.preselect_median;
  sel["seed"] = config.selection.seed;
  j["selection"] = sel;
  if (config.kind == ExperimentKind::kCsvPanel) {
    nlohmann::json p;
    p["path"] = config.csv_path;
    p["env_col"] = config.schema.env_col;
    p["u_col"] = config.schema.u_col;
    p["y_col"] = config.schema.y_col;
    p["feature_cols"] = config.schema.feature_cols;
    p["train_envs"] = config.train_env_names;
    j["csv"] = p;
  }
  return j;
}

}  // namespace implab
