#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace implab {

// Linear structural causal model over predictors X_1..X_d and a response Y:
//   X = gamma * Y + B * X + eps_X,   Y = (beta + alpha^e)' X + eps_Y.
// Predictors are indexed 0..d-1 in code; Y is the pseudo-index kYNode.
// Environment-specific changes are stored as edit lists (interventions), and
// per-environment parameters are materialized on demand.

inline constexpr int kYNode = -1;

struct NoiseSpec {
  double mean{0.0};
  double var{1.0};
};

// Sinusoidal perturbation a*sin(2*pi*w*u) for continuous environments.
struct Sinusoid {
  double amp{0.0};
  double freq{1.0};
};

// A constant payload applies in discrete environments; a Sinusoid payload is
// evaluated at the per-sample environment value u.
using Payload = std::variant<double, Sinusoid>;

double eval_payload(const Payload& p, double u);

enum class EditKind { kShift, kCoefficient, kNoiseVariance };

// One parameter change. 'target' is the assigned variable (kYNode for Y).
// For kCoefficient, 'parent' names the existing edge being perturbed; it is
// unused otherwise. Shift edits add to the noise mean, coefficient edits add
// to the edge weight, noise-variance edits replace the variance.
struct Edit {
  int target{0};
  EditKind kind{EditKind::kShift};
  int parent{0};
  Payload payload{0.0};
};

struct InterventionSpec {
  std::string name;
  std::vector<Edit> edits;
  // True when any payload is sinusoidal; such environments are sampled with a
  // per-row u instead of a single discrete index.
  bool continuous() const;
};

struct LinearScm {
  int d{0};
  Eigen::VectorXd gamma;  // Y -> X_i edge weights
  Eigen::MatrixXd b;      // b(i, j) = weight of X_j -> X_i
  Eigen::VectorXd beta;   // invariant part of the Y assignment
  std::vector<NoiseSpec> noise_x;
  NoiseSpec noise_y;
  std::vector<InterventionSpec> envs;  // one entry per environment

  int n_envs() const { return static_cast<int>(envs.size()); }
};

struct ValidationReport {
  bool ok{true};
  std::vector<std::string> violations;
  // Topological order of the joint graph (entries 0..d-1 and kYNode), valid
  // only when the graph is acyclic.
  std::vector<int> topo_order;
};

ValidationReport validate_scm(const LinearScm& scm);

// Fully materialized parameters of one environment (at one u if continuous).
struct EnvParams {
  Eigen::VectorXd gamma;
  Eigen::MatrixXd b;
  Eigen::VectorXd beta_total;  // beta + alpha
  Eigen::VectorXd alpha;
  std::vector<NoiseSpec> noise_x;
  NoiseSpec noise_y;
};

// Applies the edits of environment 'env' to the base parameters. Throws
// std::invalid_argument if an edit references a missing edge or node, or if a
// resulting variance is not positive. 'u' only matters for sinusoid payloads.
EnvParams materialize(const LinearScm& scm, int env, double u = 0.0);

// First and second moments of the joint vector (X_1..X_d, Y).
struct Moments {
  Eigen::VectorXd mean;  // length d+1, Y last
  Eigen::MatrixXd cov;   // (d+1) x (d+1)
};

Moments population_moments(const LinearScm& scm, const EnvParams& p);
Moments population_moments(const LinearScm& scm, int env, double u = 0.0);

// Population linear MMSE of variable 'target' given 'predictors' (indices
// into the joint vector, Y = d). Errors if the predictor block of the
// covariance is singular past a 1e-10 relative tolerance, naming the set.
struct Lmmse {
  Eigen::VectorXd coef;  // aligned with 'predictors'
  double intercept{0.0};
};

Lmmse population_lmmse(const Moments& m, int target,
                       const std::vector<int>& predictors);

// Draws n joint samples from a discrete environment; columns X_1..X_d, Y.
Eigen::MatrixXd sample(const LinearScm& scm, int env, int n,
                       std::uint64_t seed);

struct ContinuousSample {
  Eigen::VectorXd u;
  Eigen::MatrixXd x;  // n x d
  Eigen::VectorXd y;
};

// Draws (U_i, X_i, Y_i) with U_i ~ Unif[u_lo, u_hi] and the environment's
// sinusoid edits evaluated at each U_i.
ContinuousSample sample_continuous(const LinearScm& scm, int env, int n,
                                   double u_lo, double u_hi,
                                   std::uint64_t seed);

// Graph relations derived from nonzero coefficients; 'intervened' lists the
// predictor nodes targeted by interventions in the regime under study.
struct GraphView {
  int d{0};
  std::vector<std::vector<int>> parents;   // per predictor, may contain kYNode
  std::vector<int> pa_y;
  std::vector<int> ch_y;
  std::vector<int> de_y;                   // predictor descendants of Y
  std::vector<int> mb_y;                   // Markov blanket of Y
  std::vector<int> pe;                     // parents of Y with varying coefficient
  std::vector<int> intervened;
  std::vector<int> x_int_y;                // intervened children of Y + their descendants

  std::vector<int> descendants(int node) const;  // node: predictor or kYNode
  std::vector<int> x_int(int node) const;
  bool assumption1() const;  // Y has a child
  bool assumption2() const;  // some child of Y is outside x_int_y
};

GraphView graph_sets(const LinearScm& scm, const std::vector<int>& intervened);

struct RandomScmConfig {
  int num_nodes{9};          // total variables; Y is drawn among them
  double edge_prob{0.5};
  double coef_lo{0.5};       // |coefficient| range
  double coef_hi{1.5};
  int max_attempts{1000};
};

// Random lower-triangular DAG with the response drawn uniformly among nodes
// having at least one parent and one child; predictors keep their relative
// order. The result has a single observational environment.
LinearScm random_scm(const RandomScmConfig& cfg, std::uint64_t seed);

}  // namespace implab
