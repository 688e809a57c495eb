// imp-lab: simulate panels from linear SCMs, fit and apply invariant
// matching predictors, and run the built-in simulation studies.
//
// Subcommands:
//   simulate   --config cfg.json [--seed S]
//   fit        --train data.csv --schema schema.json --mode discrete|continuous
//   predict    --model model.json --test test.csv [--out dir]
//   experiment --config cfg.json --out dir [--seed S]
//
// All JSON artifacts are emitted with sorted keys and all CSV floats with
// round-trip precision, so a rerun with the same inputs and seed is
// byte-identical. Predictor indices in model files are 0-based.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "implab/experiments.hpp"
#include "implab/imp_continuous.hpp"
#include "implab/imp_discrete.hpp"
#include "implab/json_io.hpp"
#include "implab/panel.hpp"
#include "implab/scm.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  return j;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

void check_keys(const json& j, const char* where,
                const std::vector<std::string>& allowed) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw std::invalid_argument(std::string("unknown key '") + it.key() +
                                  "' in " + where);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(),
                                           static_cast<Eigen::Index>(v.size()));
}

// ---- schema ---------------------------------------------------------------

implab::PanelSchema schema_from_json(const json& j) {
  check_keys(j, "schema", {"env_col", "u_col", "y_col", "feature_cols"});
  implab::PanelSchema s;
  if (j.contains("env_col")) s.env_col = j.at("env_col").get<std::string>();
  if (j.contains("u_col")) s.u_col = j.at("u_col").get<std::string>();
  if (j.contains("y_col")) s.y_col = j.at("y_col").get<std::string>();
  if (j.contains("feature_cols"))
    s.feature_cols = j.at("feature_cols").get<std::vector<std::string>>();
  if (s.y_col.empty() || s.feature_cols.empty())
    throw std::invalid_argument("schema needs y_col and feature_cols");
  return s;
}

json schema_to_json(const implab::PanelSchema& s) {
  json j;
  j["env_col"] = s.env_col;
  j["u_col"] = s.u_col;
  j["y_col"] = s.y_col;
  j["feature_cols"] = s.feature_cols;
  return j;
}

implab::PanelSchema default_schema(int d, bool continuous) {
  implab::PanelSchema s;
  if (continuous)
    s.u_col = "u";
  else
    s.env_col = "env";
  s.y_col = "y";
  for (int i = 1; i <= d; ++i) s.feature_cols.push_back("x" + std::to_string(i));
  return s;
}

// ---- simulate -------------------------------------------------------------

void run_simulate(const std::string& config_path,
                  std::optional<std::uint64_t> seed_flag) {
  json cfg = load_json(config_path);
  check_keys(cfg, "simulate config",
             {"scm", "mode", "n", "env", "u_range", "out", "schema", "seed"});
  for (const char* key : {"scm", "mode", "out"})
    if (!cfg.contains(key))
      throw std::invalid_argument(std::string("simulate config needs '") +
                                  key + "'");

  implab::LinearScm scm;
  if (cfg.at("scm").is_string())
    scm = implab::scm_from_json(load_json(cfg.at("scm").get<std::string>()));
  else
    scm = implab::scm_from_json(cfg.at("scm"));

  const std::string mode = cfg.at("mode").get<std::string>();
  if (mode != "discrete" && mode != "continuous")
    throw std::invalid_argument("mode must be 'discrete' or 'continuous'");
  const bool continuous = mode == "continuous";
  const int n = cfg.value("n", 300);
  if (n < 1) throw std::invalid_argument("n must be positive");
  std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
  if (seed_flag) seed = *seed_flag;

  implab::PanelSchema schema = cfg.contains("schema")
                                   ? schema_from_json(cfg.at("schema"))
                                   : default_schema(scm.d, continuous);
  const std::string out = cfg.at("out").get<std::string>();

  if (continuous) {
    const int env = cfg.value("env", 0);
    double u_lo = 0.0, u_hi = 1.0;
    if (cfg.contains("u_range")) {
      const json& r = cfg.at("u_range");
      if (!r.is_array() || r.size() != 2)
        throw std::invalid_argument("u_range must be a [lo, hi] array");
      u_lo = r[0].get<double>();
      u_hi = r[1].get<double>();
    }
    implab::ContinuousSample sample =
        implab::sample_continuous(scm, env, n, u_lo, u_hi, seed);
    implab::save_continuous_csv(out, sample, schema);
    std::printf("wrote %d rows to %s\n", n, out.c_str());
  } else {
    implab::PanelDataset panel = implab::simulate_panel(scm, n, seed);
    implab::save_panel_csv(out, panel, schema);
    std::printf("wrote %d environments x %d rows to %s\n", panel.n_envs(), n,
                out.c_str());
  }
}

// ---- fit ------------------------------------------------------------------

json indices_json(const implab::NodeSet& set) {
  return json(set.indices());
}

implab::NodeSet indices_from_json(const json& j) {
  return implab::NodeSet::from_indices(j.get<std::vector<int>>());
}

struct FitOptions {
  std::string train_path;
  std::string schema_path;
  std::string mode;
  std::string out_path{"model.json"};
  std::string scores_path;
  std::string score{"residual"};
  int bootstrap_rounds{50};
  double quantile{0.9};
  std::optional<double> c_imp;
  std::optional<double> c_pred;
  int max_s{-1};
  long max_candidates{-1};
  double bandwidth{implab::kDefaultBandwidth};
  std::uint64_t seed{0};
};

implab::SelectionConfig selection_from(const FitOptions& opt) {
  implab::SelectionConfig sel;
  if (opt.score == "residual")
    sel.score_kind = implab::ScoreKind::kResidual;
  else if (opt.score == "invariance")
    sel.score_kind = implab::ScoreKind::kInvariance;
  else
    throw std::invalid_argument("score must be 'residual' or 'invariance'");
  sel.c_imp = opt.c_imp;
  sel.c_pred = opt.c_pred;
  sel.bootstrap_rounds = opt.bootstrap_rounds;
  sel.quantile = opt.quantile;
  sel.seed = opt.seed;
  return sel;
}

void run_fit(const FitOptions& opt) {
  implab::PanelSchema schema = schema_from_json(load_json(opt.schema_path));
  implab::EnumerationLimits limits;
  limits.max_s_size = opt.max_s;
  limits.max_candidates = opt.max_candidates;
  implab::SelectionConfig sel = selection_from(opt);

  json model;
  model["schema"] = schema_to_json(schema);

  if (opt.mode == "discrete") {
    implab::PanelLoadResult loaded =
        implab::load_panel_csv(opt.train_path, schema);
    if (loaded.dropped_rows > 0)
      std::fprintf(stderr, "dropped %ld unparsable rows\n",
                   loaded.dropped_rows);
    implab::DiscreteImpModel fitted =
        implab::fit_discrete_imp(loaded.panel, limits, sel);

    model["mode"] = "discrete";
    model["d"] = fitted.d;
    model["score"] = opt.score;
    model["found"] = fitted.selection.found;
    model["cutoffs"] = {{"c_imp", fitted.selection.cutoffs.c_imp},
                        {"c_pred", fitted.selection.cutoffs.c_pred}};
    json fits = json::array();
    for (const implab::DiscreteImpFit& f : fitted.fits) {
      json jf;
      jf["k"] = f.cand.k;
      jf["r"] = indices_json(f.cand.r);
      jf["s"] = indices_json(f.cand.s);
      jf["with_intercept"] = f.with_intercept;
      jf["eta"] = to_std(f.eta);
      jf["lambda"] = f.lambda;
      jf["b"] = f.b;
      jf["f_eta"] = to_std(f.f_eta);
      jf["f_lambda"] = f.f_lambda;
      jf["f_b"] = f.f_b;
      jf["t_score"] = f.t_score;
      jf["p_inv"] = f.p_inv;
      jf["s_pred"] = f.s_pred;
      fits.push_back(jf);
    }
    model["fits"] = fits;

    if (!opt.scores_path.empty()) {
      std::ofstream out(opt.scores_path);
      if (!out) throw std::runtime_error("cannot write " + opt.scores_path);
      implab::write_score_table_csv(out, fitted.table);
    }
    std::printf("%s: %zu candidate(s) selected for prediction\n",
                fitted.selection.found ? "found" : "not found",
                fitted.fits.size());
  } else if (opt.mode == "continuous") {
    implab::ContinuousLoadResult loaded =
        implab::load_continuous_csv(opt.train_path, schema);
    if (loaded.dropped_rows > 0)
      std::fprintf(stderr, "dropped %ld unparsable rows\n",
                   loaded.dropped_rows);
    implab::ContSelectionReport report =
        implab::select_cont(loaded.sample, limits, sel, opt.bandwidth);

    model["mode"] = "continuous";
    model["d"] = report.d;
    model["h"] = report.h;
    model["found"] = report.selection.found;
    model["cutoffs"] = {{"c_imp", report.selection.cutoffs.c_imp},
                        {"c_pred", report.selection.cutoffs.c_pred}};
    json fits = json::array();
    for (int idx : report.selection.i_pred) {
      const implab::ContCandidate& cand = report.table.candidates[idx];
      implab::ContImpFit f =
          implab::fit_candidate_continuous(loaded.sample, cand, report.h);
      if (!f.feasible) continue;
      json jf;
      jf["k"] = f.cand.k;
      jf["p"] = indices_json(f.cand.p);
      jf["r"] = indices_json(f.cand.r);
      jf["s"] = indices_json(f.cand.s);
      jf["w_hat"] = to_std(f.w_hat);
      jf["beta_hat"] = to_std(f.beta_hat);
      jf["t_score"] = f.t_score;
      jf["s_pred"] = f.s_pred;
      fits.push_back(jf);
    }
    if (fits.empty()) model["found"] = false;
    model["fits"] = fits;

    if (!opt.scores_path.empty()) {
      std::ofstream out(opt.scores_path);
      if (!out) throw std::runtime_error("cannot write " + opt.scores_path);
      implab::write_cont_score_table_csv(out, report.table);
    }
    std::printf("%s: %zu candidate(s) selected for prediction\n",
                model["found"].get<bool>() ? "found" : "not found",
                fits.size());
  } else {
    throw std::invalid_argument("mode must be 'discrete' or 'continuous'");
  }

  write_json(opt.out_path, model);
  std::printf("model written to %s\n", opt.out_path.c_str());
}

// ---- predict --------------------------------------------------------------

void write_rss_table(const std::string& path,
                     const std::vector<std::string>& envs,
                     const std::vector<long>& counts,
                     const std::vector<double>& rss) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "env,n_rows,mean_rss\n";
  for (std::size_t i = 0; i < envs.size(); ++i)
    out << envs[i] << ',' << counts[i] << ',' << format_double(rss[i])
        << '\n';
}

void run_predict(const std::string& model_path, const std::string& test_path,
                 const std::string& out_dir) {
  json model = load_json(model_path);
  if (!model.value("found", false))
    throw std::runtime_error(
        "model has no usable candidates (found = false); nothing to predict");
  implab::PanelSchema schema = schema_from_json(model.at("schema"));
  const std::string mode = model.at("mode").get<std::string>();
  fs::create_directories(out_dir);
  const std::string pred_path = (fs::path(out_dir) / "predictions.csv").string();
  const std::string rss_path = (fs::path(out_dir) / "rss_by_env.csv").string();

  if (mode == "discrete") {
    std::vector<implab::DiscreteImpFit> fits;
    for (const json& jf : model.at("fits")) {
      implab::DiscreteImpFit f;
      f.cand.k = jf.at("k").get<int>();
      f.cand.r = indices_from_json(jf.at("r"));
      f.cand.s = indices_from_json(jf.at("s"));
      f.with_intercept = jf.at("with_intercept").get<bool>();
      f.feasible = true;
      f.eta = to_eigen(jf.at("eta").get<std::vector<double>>());
      f.lambda = jf.at("lambda").get<double>();
      f.b = jf.at("b").get<double>();
      f.f_eta = to_eigen(jf.at("f_eta").get<std::vector<double>>());
      f.f_lambda = jf.at("f_lambda").get<double>();
      f.f_b = jf.at("f_b").get<double>();
      fits.push_back(std::move(f));
    }
    if (fits.empty()) throw std::runtime_error("model has no fits");

    implab::PanelLoadResult loaded =
        implab::load_panel_csv(test_path, schema);
    if (loaded.dropped_rows > 0)
      std::fprintf(stderr, "dropped %ld unparsable rows\n",
                   loaded.dropped_rows);

    std::ofstream pred(pred_path);
    if (!pred) throw std::runtime_error("cannot write " + pred_path);
    pred << "env,y,y_hat\n";
    std::vector<std::string> envs;
    std::vector<long> counts;
    std::vector<double> rss;
    for (const implab::PanelEnvironment& env : loaded.panel.envs) {
      implab::DiscretePrediction p = implab::predict_discrete(fits, env.x);
      for (Eigen::Index i = 0; i < env.y.size(); ++i)
        pred << env.name << ',' << format_double(env.y(i)) << ','
             << format_double(p.y_hat(i)) << '\n';
      envs.push_back(env.name);
      counts.push_back(env.y.size());
      rss.push_back((env.y - p.y_hat).squaredNorm() /
                    static_cast<double>(env.y.size()));
    }
    write_rss_table(rss_path, envs, counts, rss);
  } else if (mode == "continuous") {
    std::vector<implab::ContImpFit> fits;
    const double h = model.at("h").get<double>();
    for (const json& jf : model.at("fits")) {
      implab::ContImpFit f;
      f.cand.k = jf.at("k").get<int>();
      f.cand.p = indices_from_json(jf.at("p"));
      f.cand.r = indices_from_json(jf.at("r"));
      f.cand.s = indices_from_json(jf.at("s"));
      f.h = h;
      f.feasible = true;
      f.w_hat = to_eigen(jf.at("w_hat").get<std::vector<double>>());
      f.beta_hat = to_eigen(jf.at("beta_hat").get<std::vector<double>>());
      fits.push_back(std::move(f));
    }
    if (fits.empty()) throw std::runtime_error("model has no fits");

    implab::ContinuousLoadResult loaded =
        implab::load_continuous_csv(test_path, schema);
    if (loaded.dropped_rows > 0)
      std::fprintf(stderr, "dropped %ld unparsable rows\n",
                   loaded.dropped_rows);

    implab::ContPrediction p = implab::predict_continuous_average(
        fits, loaded.sample.u, loaded.sample.x);
    std::ofstream pred(pred_path);
    if (!pred) throw std::runtime_error("cannot write " + pred_path);
    pred << "u,y,y_hat\n";
    for (Eigen::Index i = 0; i < loaded.sample.y.size(); ++i)
      pred << format_double(loaded.sample.u(i)) << ','
           << format_double(loaded.sample.y(i)) << ','
           << format_double(p.y_hat(i)) << '\n';
    const double mean_rss = (loaded.sample.y - p.y_hat).squaredNorm() /
                            static_cast<double>(loaded.sample.y.size());
    write_rss_table(rss_path, {"all"}, {loaded.sample.y.size()}, {mean_rss});
  } else {
    throw std::runtime_error("model has unknown mode '" + mode + "'");
  }
  std::printf("wrote %s and %s\n", pred_path.c_str(), rss_path.c_str());
}

// ---- experiment -----------------------------------------------------------

void run_experiment_cmd(const std::string& config_path,
                        const std::string& out_dir,
                        std::optional<std::uint64_t> seed_flag) {
  implab::ExperimentConfig config =
      implab::experiment_config_from_json(load_json(config_path));
  if (seed_flag) config.seed = *seed_flag;
  implab::EvalReport report = implab::run_experiment(config);
  std::vector<std::string> written = implab::emit_report(report, out_dir);
  write_json((fs::path(out_dir) / "config.json").string(),
             implab::experiment_config_to_json(config));
  if (report.skipped_replicates > 0)
    std::fprintf(stderr, "skipped %d replicate(s) after repeated failures\n",
                 report.skipped_replicates);
  for (const implab::MethodSummary& s : report.summaries) {
    if (std::isnan(s.lambda))
      std::printf("%-10s median mean-RSS %.6g (IQR %.6g, %ld replicates)\n",
                  s.method.c_str(), s.median, s.iqr, s.replicates);
    else
      std::printf(
          "%-10s lambda=%-5g median mean-RSS %.6g (IQR %.6g, %ld replicates)\n",
          s.method.c_str(), s.lambda, s.median, s.iqr, s.replicates);
  }
  std::printf("report written to %s\n", out_dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"invariant matching for multi-environment regression"};
  app.require_subcommand(1);

  // simulate
  std::string sim_config;
  std::uint64_t sim_seed = 0;
  bool sim_seed_set = false;
  CLI::App* sim = app.add_subcommand(
      "simulate", "sample a CSV panel from a linear SCM described in JSON");
  sim->add_option("--config", sim_config, "simulation config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  sim->add_option("--seed", sim_seed, "RNG seed (overrides the config)")
      ->each([&](const std::string&) { sim_seed_set = true; });

  // fit
  FitOptions fit;
  double fit_c_imp = -1.0, fit_c_pred = -1.0;
  bool c_imp_set = false, c_pred_set = false;
  CLI::App* fitcmd = app.add_subcommand(
      "fit", "select matching candidates on a training CSV and write a model");
  fitcmd->add_option("--train", fit.train_path, "training CSV")
      ->required()
      ->check(CLI::ExistingFile);
  fitcmd->add_option("--schema", fit.schema_path, "column-mapping JSON")
      ->required()
      ->check(CLI::ExistingFile);
  fitcmd->add_option("--mode", fit.mode, "discrete or continuous")
      ->required();
  fitcmd->add_option("--out", fit.out_path, "model output path");
  fitcmd->add_option("--scores", fit.scores_path,
                     "also write the full candidate score table CSV");
  fitcmd->add_option("--score", fit.score,
                     "selection score: residual or invariance");
  fitcmd->add_option("--bootstrap", fit.bootstrap_rounds,
                     "bootstrap rounds for the cutoffs");
  fitcmd->add_option("--quantile", fit.quantile, "bootstrap cutoff quantile");
  fitcmd->add_option("--c-imp", fit_c_imp, "fixed matching cutoff")
      ->each([&](const std::string&) { c_imp_set = true; });
  fitcmd->add_option("--c-pred", fit_c_pred, "fixed prediction cutoff")
      ->each([&](const std::string&) { c_pred_set = true; });
  fitcmd->add_option("--max-s", fit.max_s, "largest |S| to enumerate");
  fitcmd->add_option("--max-candidates", fit.max_candidates,
                     "cap on enumerated candidates");
  fitcmd->add_option("--bandwidth", fit.bandwidth,
                     "kernel bandwidth (continuous mode)");
  fitcmd->add_option("--seed", fit.seed, "bootstrap RNG seed");

  // predict
  std::string pred_model, pred_test, pred_out = ".";
  CLI::App* pred = app.add_subcommand(
      "predict", "apply a fitted model to a test CSV and report mean RSS");
  pred->add_option("--model", pred_model, "model JSON from 'fit'")
      ->required()
      ->check(CLI::ExistingFile);
  pred->add_option("--test", pred_test, "test CSV")
      ->required()
      ->check(CLI::ExistingFile);
  pred->add_option("--out", pred_out, "output directory");

  // experiment
  std::string exp_config, exp_out;
  std::uint64_t exp_seed = 0;
  bool exp_seed_set = false;
  CLI::App* exp = app.add_subcommand(
      "experiment", "run a configured simulation study and emit reports");
  exp->add_option("--config", exp_config, "experiment config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  exp->add_option("--out", exp_out, "report output directory")->required();
  exp->add_option("--seed", exp_seed, "RNG seed (overrides the config)")
      ->each([&](const std::string&) { exp_seed_set = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed())
      run_simulate(sim_config, sim_seed_set
                                   ? std::optional<std::uint64_t>(sim_seed)
                                   : std::nullopt);
    if (fitcmd->parsed()) {
      if (c_imp_set) fit.c_imp = fit_c_imp;
      if (c_pred_set) fit.c_pred = fit_c_pred;
      run_fit(fit);
    }
    if (pred->parsed()) run_predict(pred_model, pred_test, pred_out);
    if (exp->parsed())
      run_experiment_cmd(exp_config, exp_out,
                         exp_seed_set ? std::optional<std::uint64_t>(exp_seed)
                                      : std::nullopt);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "imp-lab: %s\n", e.what());
    return 1;
  }
  return 0;
}
