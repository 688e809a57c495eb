#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "implab/baselines.hpp"
#include "implab/imp_continuous.hpp"
#include "implab/imp_discrete.hpp"
#include "implab/panel.hpp"
#include "implab/scm.hpp"

namespace implab {

// Simulation-study recipes plus generic CSV-panel evaluation.
enum class ExperimentKind {
  kDiscreteX,        // shift interventions on 4 predictors per environment
  kDiscreteY,        // varying coefficients on parents of Y plus a Y shift
  kDiscreteXy,       // both, keeping one child of Y free of interventions
  kContinuousXy,     // sinusoidal interventions driven by a continuous input
  kRobustnessSweep,  // everything intervened; a lambda-scaled child sweep
  kCsvPanel,         // evaluate methods on a panel loaded from disk
};

std::string experiment_kind_name(ExperimentKind kind);
ExperimentKind experiment_kind_from_name(const std::string& name);

// Closed interval for recipe draws; lo == hi pins the value.
struct Range {
  double lo{0.0};
  double hi{0.0};
};

struct ExperimentConfig {
  ExperimentKind kind{ExperimentKind::kDiscreteY};

  // Model generation for the simulated kinds.
  int num_nodes{9};   // total variables including the response
  double edge_prob{0.5};
  int train_envs{5};
  int test_envs{5};
  int n_per_env{300};  // rows per discrete environment

  // Continuous kind: one training and one test environment.
  int n_train{800};
  int m_test{800};
  Range u_train{0.0, 1.0};
  Range u_test{1.0, 2.0};
  Range sin_freq{0.5, 2.0};  // per-term frequency, shared train/test
  double train_amp{2.0};
  double test_amp{5.0};

  // Intervention draws.
  int intervened_predictors{4};  // per discrete env; the continuous kind uses 2
  Range train_shift{-2.0, 2.0};
  Range test_shift{-10.0, 10.0};
  Range train_coef{-2.0, 2.0};
  Range test_coef{-10.0, 10.0};
  Range train_noise_var{0.75, 1.25};  // robustness sweep only
  Range test_noise_var{0.5, 1.5};
  std::vector<double> lambda_grid{0.0, 0.25, 0.5, 0.75, 1.0};

  int replicates{50};
  std::uint64_t seed{0};
  std::vector<std::string> methods;  // empty: kind-specific default
  EnumerationLimits limits;
  SelectionConfig selection;
  double bandwidth{0.1};

  // csv_panel kind: environments named in train_env_names form the training
  // panel; every other environment is a test environment.
  std::string csv_path;
  PanelSchema schema;
  std::vector<std::string> train_env_names;

  void validate() const;  // throws std::invalid_argument
};

// Methods: "imp" (residual score), "imp_inv" (invariance score), "ols",
// "anchor_cv". The continuous kind supports "imp" and "ols".
std::vector<std::string> default_methods(ExperimentKind kind);

// JSON round-trip for configs; unknown top-level keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json experiment_config_to_json(const ExperimentConfig& config);

// One evaluated (method, replicate, test environment); lambda is NaN except
// in the robustness sweep. oracle_rss is the mean RSS of the population
// E[Y|X] predictor for the test environment (NaN when no model is known).
struct EvalRow {
  std::string method;
  int replicate{0};
  std::string test_env;
  double lambda;
  double mean_rss;
  double oracle_rss;
};

// Selection outcome of one IMP run; fallback flags a replicate predicted by
// pooled OLS because no candidate was selected or usable.
struct SelectionLog {
  std::string method;
  int replicate{0};
  double lambda;
  bool found{false};
  int n_selected{0};
  int n_pred{0};
  bool fallback{false};
};

// Per-(method, lambda) aggregate of replicate-level mean RSS, where each
// replicate first averages its test environments. Quartiles use linear
// interpolation on the sorted values.
struct MethodSummary {
  std::string method;
  double lambda;
  long replicates{0};
  double mean{0.0};
  double median{0.0};
  double iqr{0.0};
};

struct EvalReport {
  ExperimentKind kind{ExperimentKind::kDiscreteY};
  std::vector<std::string> methods;
  std::vector<EvalRow> rows;
  std::vector<SelectionLog> selections;
  std::vector<MethodSummary> summaries;  // recomputable from rows
  int skipped_replicates{0};
};

// Linear-interpolation quantile of the values (p in [0,1]); the vector is
// copied and sorted.
double quantile_linear(std::vector<double> values, double p);

// Aggregates rows into per-(method, lambda) summaries; methods keep first-
// appearance order, lambdas ascend within a method.
std::vector<MethodSummary> summarize(const std::vector<EvalRow>& rows);

EvalReport run_experiment(const ExperimentConfig& config);

// Files written into out_dir (created if needed): rows.csv, summary.json,
// quantiles.csv, selections.csv. Byte-stable for a given report. Returns the
// paths written.
struct EmitOptions {
  bool rows_csv{true};
  bool summary_json{true};
  bool quantiles_csv{true};
  bool selections_csv{true};
};

std::vector<std::string> emit_report(const EvalReport& report,
                                     const std::string& out_dir,
                                     const EmitOptions& options = {});

}  // namespace implab
