#include "implab/panel.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace implab {

Eigen::Index PanelDataset::total_rows() const {
  Eigen::Index total = 0;
  for (const auto& env : envs) total += env.x.rows();
  return total;
}

Eigen::Index PanelDataset::min_rows() const {
  Eigen::Index lo = 0;
  for (std::size_t e = 0; e < envs.size(); ++e)
    lo = e == 0 ? envs[e].x.rows() : std::min(lo, envs[e].x.rows());
  return lo;
}

std::vector<int> PanelDataset::pooled_labels() const {
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(total_rows()));
  for (std::size_t e = 0; e < envs.size(); ++e)
    labels.insert(labels.end(), envs[e].x.rows(), static_cast<int>(e));
  return labels;
}

Eigen::MatrixXd PanelDataset::pooled_x() const {
  Eigen::MatrixXd out(total_rows(), d());
  Eigen::Index at = 0;
  for (const auto& env : envs) {
    out.middleRows(at, env.x.rows()) = env.x;
    at += env.x.rows();
  }
  return out;
}

Eigen::VectorXd PanelDataset::pooled_y() const {
  Eigen::VectorXd out(total_rows());
  Eigen::Index at = 0;
  for (const auto& env : envs) {
    out.segment(at, env.y.size()) = env.y;
    at += env.y.size();
  }
  return out;
}

void PanelDataset::validate() const {
  if (envs.empty())
    throw std::invalid_argument("panel has no environments");
  const Eigen::Index width = envs[0].x.cols();
  for (const auto& env : envs) {
    if (env.x.cols() != width)
      throw std::invalid_argument("environment '" + env.name +
                                  "' has a different number of features");
    if (env.x.rows() != env.y.size())
      throw std::invalid_argument("environment '" + env.name +
                                  "' has mismatched X and y row counts");
    if (env.x.rows() == 0)
      throw std::invalid_argument("environment '" + env.name + "' is empty");
    if (!env.x.allFinite() || !env.y.allFinite())
      throw std::invalid_argument("environment '" + env.name +
                                  "' contains non-finite values");
  }
}

PanelDataset simulate_panel(const LinearScm& scm, int n_per_env,
                            std::uint64_t seed) {
  if (n_per_env < 1) throw std::invalid_argument("need n_per_env >= 1");
  PanelDataset panel;
  panel.envs.reserve(scm.envs.size());
  for (int e = 0; e < scm.n_envs(); ++e) {
    Eigen::MatrixXd joint = sample(scm, e, n_per_env, seed);
    PanelEnvironment env;
    env.name = scm.envs[e].name.empty() ? "env" + std::to_string(e)
                                        : scm.envs[e].name;
    env.x = joint.leftCols(scm.d);
    env.y = joint.col(scm.d);
    panel.envs.push_back(std::move(env));
  }
  return panel;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' '))
      field.pop_back();
    std::size_t start = field.find_first_not_of(' ');
    fields.push_back(start == std::string::npos ? "" : field.substr(start));
  }
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

bool parse_double(const std::string& s, double* out) {
  if (s.empty()) return false;
  char* end = nullptr;
  *out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(*out);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

PanelLoadResult load_panel_csv(const std::string& path,
                               const PanelSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open panel CSV: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("panel CSV is empty: " + path);

  std::vector<std::string> header = split_csv_line(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
      throw std::invalid_argument("panel CSV is missing column '" + name +
                                  "'");
    return static_cast<int>(it - header.begin());
  };
  const int env_idx = column(schema.env_col);
  const int y_idx = column(schema.y_col);
  std::vector<int> feat_idx;
  for (const std::string& name : schema.feature_cols)
    feat_idx.push_back(column(name));
  const int d = static_cast<int>(feat_idx.size());

  struct Rows {
    std::vector<double> y;
    std::vector<double> x;  // row-major d-wide
  };
  std::vector<std::string> env_order;
  std::map<std::string, Rows> by_env;
  PanelLoadResult result;

  std::vector<double> row(d);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> fields = split_csv_line(line);
    const int needed =
        std::max({env_idx, y_idx,
                  feat_idx.empty()
                      ? 0
                      : *std::max_element(feat_idx.begin(), feat_idx.end())});
    if (static_cast<int>(fields.size()) <= needed) {
      ++result.dropped_rows;
      continue;
    }
    double y = 0.0;
    bool ok = parse_double(fields[y_idx], &y);
    for (int j = 0; ok && j < d; ++j)
      ok = parse_double(fields[feat_idx[j]], &row[j]);
    if (!ok || fields[env_idx].empty()) {
      ++result.dropped_rows;
      continue;
    }
    const std::string& env = fields[env_idx];
    if (by_env.find(env) == by_env.end()) env_order.push_back(env);
    Rows& rows = by_env[env];
    rows.y.push_back(y);
    rows.x.insert(rows.x.end(), row.begin(), row.end());
  }

  for (const std::string& name : env_order) {
    const Rows& rows = by_env[name];
    const int n = static_cast<int>(rows.y.size());
    PanelEnvironment env;
    env.name = name;
    env.x = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                           Eigen::Dynamic, Eigen::RowMajor>>(
        rows.x.data(), n, d);
    env.y = Eigen::Map<const Eigen::VectorXd>(rows.y.data(), n);
    result.panel.envs.push_back(std::move(env));
  }
  result.panel.validate();
  return result;
}

ContinuousLoadResult load_continuous_csv(const std::string& path,
                                         const PanelSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open continuous CSV: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("continuous CSV is empty: " + path);

  std::vector<std::string> header = split_csv_line(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
      throw std::invalid_argument("continuous CSV is missing column '" +
                                  name + "'");
    return static_cast<int>(it - header.begin());
  };
  if (schema.u_col.empty())
    throw std::invalid_argument("continuous schema needs a u column");
  const int u_idx = column(schema.u_col);
  const int y_idx = column(schema.y_col);
  std::vector<int> feat_idx;
  for (const std::string& name : schema.feature_cols)
    feat_idx.push_back(column(name));
  const int d = static_cast<int>(feat_idx.size());

  ContinuousLoadResult result;
  std::vector<double> us, ys, xs;
  std::vector<double> row(d);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> fields = split_csv_line(line);
    const int needed =
        std::max({u_idx, y_idx,
                  feat_idx.empty()
                      ? 0
                      : *std::max_element(feat_idx.begin(), feat_idx.end())});
    if (static_cast<int>(fields.size()) <= needed) {
      ++result.dropped_rows;
      continue;
    }
    double u = 0.0, y = 0.0;
    bool ok = parse_double(fields[u_idx], &u) && parse_double(fields[y_idx], &y);
    for (int j = 0; ok && j < d; ++j)
      ok = parse_double(fields[feat_idx[j]], &row[j]);
    if (!ok) {
      ++result.dropped_rows;
      continue;
    }
    us.push_back(u);
    ys.push_back(y);
    xs.insert(xs.end(), row.begin(), row.end());
  }
  const int n = static_cast<int>(ys.size());
  if (n == 0)
    throw std::runtime_error("continuous CSV has no usable rows: " + path);
  result.sample.u = Eigen::Map<const Eigen::VectorXd>(us.data(), n);
  result.sample.y = Eigen::Map<const Eigen::VectorXd>(ys.data(), n);
  result.sample.x = Eigen::Map<const Eigen::Matrix<
      double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(xs.data(), n,
                                                                d);
  return result;
}

void save_continuous_csv(const std::string& path,
                         const ContinuousSample& sample,
                         const PanelSchema& schema) {
  if (static_cast<Eigen::Index>(schema.feature_cols.size()) !=
      sample.x.cols())
    throw std::invalid_argument("schema width does not match the sample");
  if (schema.u_col.empty())
    throw std::invalid_argument("continuous schema needs a u column");
  if (sample.u.size() != sample.x.rows() || sample.y.size() != sample.x.rows())
    throw std::invalid_argument("sample row counts disagree");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write continuous CSV: " + path);
  out << schema.u_col << ',' << schema.y_col;
  for (const std::string& name : schema.feature_cols) out << ',' << name;
  out << '\n';
  for (Eigen::Index i = 0; i < sample.x.rows(); ++i) {
    out << format_double(sample.u(i)) << ',' << format_double(sample.y(i));
    for (Eigen::Index j = 0; j < sample.x.cols(); ++j)
      out << ',' << format_double(sample.x(i, j));
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed while writing: " + path);
}

void save_panel_csv(const std::string& path, const PanelDataset& panel,
                    const PanelSchema& schema) {
  if (static_cast<int>(schema.feature_cols.size()) != panel.d())
    throw std::invalid_argument("schema width does not match the panel");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write panel CSV: " + path);
  out << schema.env_col << ',' << schema.y_col;
  for (const std::string& name : schema.feature_cols) out << ',' << name;
  out << '\n';
  for (const auto& env : panel.envs)
    for (Eigen::Index i = 0; i < env.x.rows(); ++i) {
      out << env.name << ',' << format_double(env.y(i));
      for (int j = 0; j < panel.d(); ++j)
        out << ',' << format_double(env.x(i, j));
      out << '\n';
    }
  if (!out) throw std::runtime_error("failed while writing: " + path);
}

}  // namespace implab
