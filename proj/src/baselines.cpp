#include "implab/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

#include "implab/estimators.hpp"
#include "implab/rng.hpp"

namespace implab {
namespace {

LinearModel from_ols(const OlsFit& fit, std::string method,
                     std::optional<double> gamma) {
  LinearModel model;
  model.coefficients = fit.coef;
  model.intercept = fit.intercept.value_or(0.0);
  model.method = std::move(method);
  model.gamma = gamma;
  if (!model.coefficients.allFinite() || !std::isfinite(model.intercept))
    throw std::runtime_error("linear model has non-finite entries");
  return model;
}

}  // namespace

std::string LinearModel::tag() const {
  if (!gamma) return method;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s(%g)", method.c_str(), *gamma);
  return buf;
}

Eigen::VectorXd LinearModel::predict(const Eigen::MatrixXd& x) const {
  if (x.cols() != coefficients.size())
    throw std::invalid_argument("predict: feature count mismatch");
  return (x * coefficients).array() + intercept;
}

double LinearModel::mse(const Eigen::MatrixXd& x,
                        const Eigen::VectorXd& y) const {
  if (y.size() != x.rows())
    throw std::invalid_argument("mse: row count mismatch");
  if (y.size() == 0) throw std::invalid_argument("mse: empty data");
  return (y - predict(x)).squaredNorm() / static_cast<double>(y.size());
}

LinearModel pooled_ols(const PanelDataset& panel) {
  panel.validate();
  OlsFit fit = ols_fit(panel.pooled_x(), panel.pooled_y(), true);
  return from_ols(fit, "ols", std::nullopt);
}

LinearModel anchor_regression(const PanelDataset& panel, double gamma) {
  panel.validate();
  if (!std::isfinite(gamma) || gamma < 0.0)
    throw std::invalid_argument(
        "anchor_regression: gamma must be finite and >= 0");
  const double scale = std::sqrt(gamma) - 1.0;
  Eigen::MatrixXd x = panel.pooled_x();
  Eigen::VectorXd y = panel.pooled_y();
  Eigen::Index row = 0;
  for (const auto& env : panel.envs) {
    const Eigen::Index n_e = env.y.size();
    const Eigen::RowVectorXd mx = x.middleRows(row, n_e).colwise().mean();
    const double my = y.segment(row, n_e).mean();
    x.middleRows(row, n_e).rowwise() += scale * mx;
    y.segment(row, n_e).array() += scale * my;
    row += n_e;
  }
  OlsFit fit = ols_fit(x, y, true);
  return from_ols(fit, "anchor", gamma);
}

std::vector<double> anchor_default_grid() {
  std::vector<double> grid(11);
  for (int i = 0; i < 11; ++i) grid[i] = 0.05 * i;
  return grid;
}

std::vector<double> anchor_cv_mse(const PanelDataset& panel,
                                  const std::vector<double>& grid, int folds,
                                  std::uint64_t seed) {
  panel.validate();
  if (grid.empty()) throw std::invalid_argument("anchor_cv: empty gamma grid");
  for (double g : grid)
    if (!std::isfinite(g) || g < 0.0)
      throw std::invalid_argument("anchor_cv: gamma must be finite and >= 0");
  if (folds < 2) throw std::invalid_argument("anchor_cv: folds must be >= 2");
  if (panel.min_rows() < folds)
    throw std::invalid_argument(
        "anchor_cv: every environment needs at least 'folds' rows");

  // Stratified fold split: shuffle each environment's rows once, deal them
  // round-robin. Train/held-out panels per fold are shared across the grid.
  std::vector<PanelDataset> train(folds);
  std::vector<PanelDataset> heldout(folds);
  for (std::size_t e = 0; e < panel.envs.size(); ++e) {
    const PanelEnvironment& env = panel.envs[e];
    const Eigen::Index n_e = env.y.size();
    std::vector<Eigen::Index> order(n_e);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    auto rng = make_stream(seed, Stream::kFolds, e);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<Eigen::Index>> by_fold(folds);
    for (Eigen::Index i = 0; i < n_e; ++i)
      by_fold[static_cast<std::size_t>(i % folds)].push_back(order[i]);
    for (int f = 0; f < folds; ++f) {
      PanelEnvironment tr_env{env.name, {}, {}};
      PanelEnvironment ho_env{env.name, {}, {}};
      const Eigen::Index n_ho = static_cast<Eigen::Index>(by_fold[f].size());
      tr_env.x.resize(n_e - n_ho, env.x.cols());
      tr_env.y.resize(n_e - n_ho);
      ho_env.x.resize(n_ho, env.x.cols());
      ho_env.y.resize(n_ho);
      Eigen::Index ti = 0, hi = 0;
      std::vector<char> held(n_e, 0);
      for (Eigen::Index r : by_fold[f]) held[r] = 1;
      for (Eigen::Index r = 0; r < n_e; ++r) {
        if (held[r]) {
          ho_env.x.row(hi) = env.x.row(r);
          ho_env.y(hi++) = env.y(r);
        } else {
          tr_env.x.row(ti) = env.x.row(r);
          tr_env.y(ti++) = env.y(r);
        }
      }
      train[f].envs.push_back(std::move(tr_env));
      heldout[f].envs.push_back(std::move(ho_env));
    }
  }

  std::vector<double> mse(grid.size(), 0.0);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    for (int f = 0; f < folds; ++f) {
      LinearModel model = anchor_regression(train[f], grid[g]);
      double sse = 0.0;
      Eigen::Index rows = 0;
      for (const auto& env : heldout[f].envs) {
        if (env.y.size() == 0) continue;
        sse += (env.y - model.predict(env.x)).squaredNorm();
        rows += env.y.size();
      }
      acc += sse / static_cast<double>(rows);
    }
    mse[g] = acc / folds;
  }
  return mse;
}

LinearModel anchor_cv(const PanelDataset& panel,
                      const std::vector<double>& grid, int folds,
                      std::uint64_t seed) {
  const std::vector<double> mse = anchor_cv_mse(panel, grid, folds, seed);
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g) {
    if (mse[g] < mse[best] || (mse[g] == mse[best] && grid[g] < grid[best]))
      best = g;
  }
  return anchor_regression(panel, grid[best]);
}

}  // namespace implab
