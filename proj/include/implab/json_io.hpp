#pragma once

#include "json.hpp"

#include "implab/scm.hpp"

namespace implab {

// JSON schema (documented in README): objects carry d, gamma, B, beta,
// alpha_by_env, noise_x, noise_y and interventions. alpha_by_env is derived
// from the coefficient edits targeting Y (null for sinusoid payloads) and is
// checked for consistency when parsing.
nlohmann::json scm_to_json(const LinearScm& scm);
LinearScm scm_from_json(const nlohmann::json& j);

}  // namespace implab
