#include "implab/json_io.hpp"

#include <stdexcept>

namespace implab {

namespace {

using nlohmann::json;

// Nodes are 1-based in JSON ("y" for the response), 0-based in code.
json node_to_json(int node) {
  if (node == kYNode) return json("y");
  return json(node + 1);
}

int node_from_json(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "y") return kYNode;
    throw std::invalid_argument("unknown node name " + j.get<std::string>());
  }
  return j.get<int>() - 1;
}

std::string kind_to_string(EditKind k) {
  switch (k) {
    case EditKind::kShift: return "shift";
    case EditKind::kCoefficient: return "coefficient";
    case EditKind::kNoiseVariance: return "noise_variance";
  }
  throw std::logic_error("unreachable");
}

EditKind kind_from_string(const std::string& s) {
  if (s == "shift") return EditKind::kShift;
  if (s == "coefficient") return EditKind::kCoefficient;
  if (s == "noise_variance") return EditKind::kNoiseVariance;
  throw std::invalid_argument("unknown edit kind " + s);
}

json payload_to_json(const Payload& p) {
  if (const double* c = std::get_if<double>(&p)) return json(*c);
  const Sinusoid& s = std::get<Sinusoid>(p);
  return json{{"amp", s.amp}, {"freq", s.freq}};
}

Payload payload_from_json(const json& j) {
  if (j.is_object()) return Sinusoid{j.at("amp").get<double>(), j.at("freq").get<double>()};
  return j.get<double>();
}

json noise_to_json(const NoiseSpec& n) {
  return json{{"mean", n.mean}, {"var", n.var}};
}

NoiseSpec noise_from_json(const json& j) {
  return NoiseSpec{j.at("mean").get<double>(), j.at("var").get<double>()};
}

// alpha entries are derivable only for purely discrete environments.
json alpha_entry(const LinearScm& scm, int env) {
  if (scm.envs[env].continuous()) return json(nullptr);
  Eigen::VectorXd alpha = materialize(scm, env).alpha;
  json arr = json::array();
  for (int j = 0; j < scm.d; ++j) arr.push_back(alpha(j));
  return arr;
}

}  // namespace

json scm_to_json(const LinearScm& scm) {
  json j;
  j["d"] = scm.d;
  j["gamma"] = std::vector<double>(scm.gamma.data(), scm.gamma.data() + scm.d);
  j["beta"] = std::vector<double>(scm.beta.data(), scm.beta.data() + scm.d);
  json rows = json::array();
  for (int i = 0; i < scm.d; ++i) {
    json row = json::array();
    for (int k = 0; k < scm.d; ++k) row.push_back(scm.b(i, k));
    rows.push_back(row);
  }
  j["B"] = rows;
  json nx = json::array();
  for (const NoiseSpec& n : scm.noise_x) nx.push_back(noise_to_json(n));
  j["noise_x"] = nx;
  j["noise_y"] = noise_to_json(scm.noise_y);

  json envs = json::array();
  for (const InterventionSpec& spec : scm.envs) {
    json edits = json::array();
    for (const Edit& e : spec.edits) {
      json je;
      je["target"] = node_to_json(e.target);
      je["kind"] = kind_to_string(e.kind);
      if (e.kind == EditKind::kCoefficient) je["parent"] = node_to_json(e.parent);
      je["value"] = payload_to_json(e.payload);
      edits.push_back(je);
    }
    envs.push_back(json{{"name", spec.name}, {"edits", edits}});
  }
  j["interventions"] = envs;

  json alpha = json::array();
  for (int e = 0; e < scm.n_envs(); ++e) alpha.push_back(alpha_entry(scm, e));
  j["alpha_by_env"] = alpha;
  return j;
}

LinearScm scm_from_json(const json& j) {
  LinearScm scm;
  scm.d = j.at("d").get<int>();
  auto gamma = j.at("gamma").get<std::vector<double>>();
  auto beta = j.at("beta").get<std::vector<double>>();
  if (static_cast<int>(gamma.size()) != scm.d ||
      static_cast<int>(beta.size()) != scm.d)
    throw std::invalid_argument("gamma/beta length must equal d");
  scm.gamma = Eigen::Map<Eigen::VectorXd>(gamma.data(), scm.d);
  scm.beta = Eigen::Map<Eigen::VectorXd>(beta.data(), scm.d);
  scm.b = Eigen::MatrixXd::Zero(scm.d, scm.d);
  const json& rows = j.at("B");
  if (static_cast<int>(rows.size()) != scm.d)
    throw std::invalid_argument("B must be d x d");
  for (int i = 0; i < scm.d; ++i) {
    if (static_cast<int>(rows[i].size()) != scm.d)
      throw std::invalid_argument("B must be d x d");
    for (int k = 0; k < scm.d; ++k) scm.b(i, k) = rows[i][k].get<double>();
  }
  for (const json& n : j.at("noise_x")) scm.noise_x.push_back(noise_from_json(n));
  if (static_cast<int>(scm.noise_x.size()) != scm.d)
    throw std::invalid_argument("noise_x length must equal d");
  scm.noise_y = noise_from_json(j.at("noise_y"));

  for (const json& spec : j.at("interventions")) {
    InterventionSpec s;
    s.name = spec.at("name").get<std::string>();
    for (const json& je : spec.at("edits")) {
      Edit e;
      e.target = node_from_json(je.at("target"));
      e.kind = kind_from_string(je.at("kind").get<std::string>());
      e.parent = je.contains("parent") ? node_from_json(je.at("parent")) : 0;
      e.payload = payload_from_json(je.at("value"));
      s.edits.push_back(e);
    }
    scm.envs.push_back(s);
  }

  if (j.contains("alpha_by_env")) {
    const json& alpha = j.at("alpha_by_env");
    if (static_cast<int>(alpha.size()) != scm.n_envs())
      throw std::invalid_argument("alpha_by_env length must match environments");
    for (int e = 0; e < scm.n_envs(); ++e)
      if (alpha_entry(scm, e) != alpha[e])
        throw std::invalid_argument(
            "alpha_by_env is inconsistent with the coefficient edits of " +
            scm.envs[e].name);
  }
  return scm;
}

}  // namespace implab
