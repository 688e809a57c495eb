#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <numbers>

#include "implab/json_io.hpp"
#include "implab/scm.hpp"
#include "toys.hpp"

using namespace implab;
using implab::testing::fig_toy;
using implab::testing::fig_toy_continuous;
using Catch::Approx;

namespace {

// Closed-form joint moments of the toy, solved by forward substitution:
//   Y = a X1 + X2 + N_Y,  X3 = (a+1) X1 + X2 + N_Y + N_3.
Eigen::MatrixXd toy_cov(double a) {
  Eigen::MatrixXd c(4, 4);
  const double vy = a * a + 2.0;
  c << 1.0, 0.0, a + 1.0, a,
       0.0, 1.0, 1.0, 1.0,
       a + 1.0, 1.0, (a + 1.0) * (a + 1.0) + 3.0, a * a + a + 2.0,
       a, 1.0, a * a + a + 2.0, vy;
  return c;
}

Eigen::MatrixXd sample_cov(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd centered = m.rowwise() - m.colwise().mean();
  return centered.transpose() * centered / static_cast<double>(m.rows() - 1);
}

}  // namespace

TEST_CASE("toy population moments match hand-solved forms", "[scm][moments]") {
  for (double a : {-1.0, 0.0, 1.0, 2.0, 5.0}) {
    LinearScm scm = fig_toy({a});
    Moments mom = population_moments(scm, 0);
    REQUIRE(mom.mean.norm() == Approx(0.0).margin(1e-12));
    Eigen::MatrixXd expected = toy_cov(a);
    REQUIRE((mom.cov - expected).cwiseAbs().maxCoeff() < 1e-10);
  }
  // a = 1 spot values: Var(Y) = 3, Cov(Y, X3) = 4, Var(X3) = 7.
  Moments mom = population_moments(fig_toy({1.0}), 0);
  REQUIRE(mom.cov(3, 3) == Approx(3.0));
  REQUIRE(mom.cov(3, 2) == Approx(4.0));
  REQUIRE(mom.cov(2, 2) == Approx(7.0));
}

TEST_CASE("shift and variance edits move moments as derived", "[scm][moments]") {
  LinearScm scm = fig_toy({2.0});
  // Shift X1's noise mean by s = 3: means become (3, 0, (a+1)s, a s).
  Edit shift{0, EditKind::kShift, 0, 3.0};
  scm.envs[0].edits.push_back(shift);
  Moments mom = population_moments(scm, 0);
  REQUIRE(mom.mean(0) == Approx(3.0));
  REQUIRE(mom.mean(1) == Approx(0.0).margin(1e-12));
  REQUIRE(mom.mean(2) == Approx(9.0));
  REQUIRE(mom.mean(3) == Approx(6.0));
  REQUIRE((mom.cov - toy_cov(2.0)).cwiseAbs().maxCoeff() < 1e-10);

  // Replace X2's noise variance with v: Var(Y) = a^2 + v + 1.
  LinearScm scm2 = fig_toy({2.0});
  Edit var{1, EditKind::kNoiseVariance, 0, 0.25};
  scm2.envs[0].edits.push_back(var);
  Moments mom2 = population_moments(scm2, 0);
  REQUIRE(mom2.cov(3, 3) == Approx(4.0 + 0.25 + 1.0));
  REQUIRE(mom2.cov(1, 3) == Approx(0.25));
}

TEST_CASE("population lmmse matches closed forms", "[scm][lmmse]") {
  for (double a : {-1.0, 0.0, 1.0, 2.0, 5.0}) {
    Moments mom = population_moments(fig_toy({a}), 0);
    Lmmse y_on_x = population_lmmse(mom, 3, {0, 1, 2});
    REQUIRE(y_on_x.coef(0) == Approx((a - 1.0) / 2.0).margin(1e-10));
    REQUIRE(y_on_x.coef(1) == Approx(0.5).margin(1e-10));
    REQUIRE(y_on_x.coef(2) == Approx(0.5).margin(1e-10));
    REQUIRE(y_on_x.intercept == Approx(0.0).margin(1e-10));

    Lmmse x3_on_12 = population_lmmse(mom, 2, {0, 1});
    REQUIRE(x3_on_12.coef(0) == Approx(a + 1.0).margin(1e-10));
    REQUIRE(x3_on_12.coef(1) == Approx(1.0).margin(1e-10));

    const double q = (a + 1.0) * (a + 1.0) + 2.0;
    Lmmse x1_on_23 = population_lmmse(mom, 0, {1, 2});
    REQUIRE(x1_on_23.coef(0) == Approx(-(a + 1.0) / q).margin(1e-10));
    REQUIRE(x1_on_23.coef(1) == Approx((a + 1.0) / q).margin(1e-10));

    Lmmse x2_on_13 = population_lmmse(mom, 1, {0, 2});
    REQUIRE(x2_on_13.coef(0) == Approx(-(a + 1.0) / 3.0).margin(1e-10));
    REQUIRE(x2_on_13.coef(1) == Approx(1.0 / 3.0).margin(1e-10));
  }
}

TEST_CASE("lmmse reports singular predictor sets by name", "[scm][lmmse]") {
  Moments m;
  m.mean = Eigen::VectorXd::Zero(3);
  m.cov = Eigen::MatrixXd::Ones(3, 3);  // rank one
  REQUIRE_THROWS_WITH(population_lmmse(m, 2, {0, 1}),
                      Catch::Matchers::ContainsSubstring("x1") &&
                          Catch::Matchers::ContainsSubstring("x2"));
}

TEST_CASE("sampling agrees with population moments", "[scm][sample]") {
  LinearScm scm = fig_toy({2.0});
  Edit shift{0, EditKind::kShift, 0, 1.5};
  Edit var{1, EditKind::kNoiseVariance, 0, 2.0};
  scm.envs[0].edits.push_back(shift);
  scm.envs[0].edits.push_back(var);

  const int n = 400000;
  Eigen::MatrixXd data = sample(scm, 0, n, 7);
  REQUIRE(data.rows() == n);
  REQUIRE(data.cols() == 4);

  Moments mom = population_moments(scm, 0);
  Eigen::VectorXd mean_err = data.colwise().mean().transpose() - mom.mean;
  for (int j = 0; j < 4; ++j) {
    double se = std::sqrt(mom.cov(j, j) / n);
    REQUIRE(std::abs(mean_err(j)) < 5.0 * se);
  }
  Eigen::MatrixXd cov_err = sample_cov(data) - mom.cov;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double scale = std::sqrt(mom.cov(i, i) * mom.cov(j, j));
      REQUIRE(std::abs(cov_err(i, j)) < 6.0 * scale / std::sqrt(double(n)));
    }
}

TEST_CASE("sampling is deterministic per seed and env", "[scm][sample]") {
  LinearScm scm = fig_toy({1.0, 2.0});
  Eigen::MatrixXd a = sample(scm, 0, 100, 42);
  Eigen::MatrixXd b = sample(scm, 0, 100, 42);
  REQUIRE(a == b);
  REQUIRE(sample(scm, 1, 100, 42) != a);
  REQUIRE(sample(scm, 0, 100, 43) != a);
}

TEST_CASE("continuous sampling follows the sinusoid", "[scm][sample]") {
  LinearScm scm = fig_toy({1.0});
  Edit shift{0, EditKind::kShift, 0, Sinusoid{2.0, 1.0}};
  scm.envs[0].edits = {shift};

  const int n = 200000;
  ContinuousSample cs = sample_continuous(scm, 0, n, 0.0, 1.0, 11);
  REQUIRE(cs.u.minCoeff() >= 0.0);
  REQUIRE(cs.u.maxCoeff() <= 1.0);
  // E[X1] = E[2 sin(2 pi U)] = 0 and E[X1 sin(2 pi U)] = E[2 sin^2] = 1.
  REQUIRE(std::abs(cs.x.col(0).mean()) < 0.02);
  Eigen::ArrayXd s = (2.0 * std::numbers::pi * cs.u.array()).sin();
  REQUIRE(std::abs((cs.x.col(0).array() * s).mean() - 1.0) < 0.02);

  ContinuousSample again = sample_continuous(scm, 0, n, 0.0, 1.0, 11);
  REQUIRE(cs.x == again.x);
  REQUIRE(cs.u == again.u);

  // Moments at a fixed u use the materialized coefficient a(u).
  Moments at_quarter = population_moments(scm, 0, 0.25);
  REQUIRE(at_quarter.mean(0) == Approx(2.0));  // shift = 2 sin(pi/2)
}

TEST_CASE("materialize validates edits", "[scm][edits]") {
  LinearScm scm = fig_toy({1.0});
  Edit bad_edge{kYNode, EditKind::kCoefficient, 2, 1.0};  // X3 is not a parent of Y
  scm.envs[0].edits = {bad_edge};
  REQUIRE_THROWS_AS(materialize(scm, 0), std::invalid_argument);

  LinearScm scm2 = fig_toy({1.0});
  Edit bad_var{0, EditKind::kNoiseVariance, 0, -1.0};
  scm2.envs[0].edits = {bad_var};
  REQUIRE_THROWS_AS(materialize(scm2, 0), std::invalid_argument);

  LinearScm scm3 = fig_toy({1.0});
  Edit bad_node{7, EditKind::kShift, 0, 1.0};
  scm3.envs[0].edits = {bad_node};
  REQUIRE_THROWS_AS(materialize(scm3, 0), std::invalid_argument);
}

TEST_CASE("validate_scm flags cycles and bad variances", "[scm][validate]") {
  LinearScm scm = fig_toy({1.0});
  REQUIRE(validate_scm(scm).ok);
  REQUIRE(validate_scm(scm).topo_order.size() == 4);

  LinearScm cyclic = fig_toy({1.0});
  cyclic.b(0, 2) = 1.0;  // X3 -> X1 closes X1 -> X3 -> X1
  ValidationReport r = validate_scm(cyclic);
  REQUIRE_FALSE(r.ok);
  REQUIRE_THAT(r.violations.at(0), Catch::Matchers::ContainsSubstring("cycl"));

  LinearScm bad = fig_toy({1.0});
  bad.noise_x[1].var = 0.0;
  REQUIRE_FALSE(validate_scm(bad).ok);
}

TEST_CASE("graph sets on the toy", "[scm][graph]") {
  LinearScm scm = fig_toy({1.0, 2.0});
  GraphView g = graph_sets(scm, {});
  REQUIRE(g.pa_y == std::vector<int>{0, 1});
  REQUIRE(g.ch_y == std::vector<int>{2});
  REQUIRE(g.de_y == std::vector<int>{2});
  REQUIRE(g.mb_y == std::vector<int>{0, 1, 2});
  REQUIRE(g.pe == std::vector<int>{0});  // only X1's Y-coefficient varies
  REQUIRE(g.descendants(0) == std::vector<int>{2});
  REQUIRE(g.assumption1());
  REQUIRE(g.assumption2());

  GraphView g3 = graph_sets(scm, {2});
  REQUIRE(g3.x_int_y == std::vector<int>{2});
  REQUIRE_FALSE(g3.assumption2());  // the only child of Y is intervened
}

TEST_CASE("x_int propagates through descendants", "[scm][graph]") {
  // Chain Y -> X1 -> X2 with X1 intervened.
  LinearScm scm;
  scm.d = 2;
  scm.gamma = Eigen::VectorXd::Zero(2);
  scm.gamma(0) = 1.0;
  scm.b = Eigen::MatrixXd::Zero(2, 2);
  scm.b(1, 0) = 1.0;
  scm.beta = Eigen::VectorXd::Zero(2);
  scm.noise_x.assign(2, NoiseSpec{});
  scm.envs.push_back({"obs", {}});
  GraphView g = graph_sets(scm, {0});
  REQUIRE(g.x_int_y == std::vector<int>{0, 1});
  REQUIRE_FALSE(g.assumption2());
}

TEST_CASE("random scm respects the recipe", "[scm][random]") {
  RandomScmConfig cfg;
  int total_edges = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    LinearScm scm = random_scm(cfg, seed);
    REQUIRE(scm.d == 8);
    REQUIRE(validate_scm(scm).ok);
    GraphView g = graph_sets(scm, {});
    REQUIRE_FALSE(g.pa_y.empty());
    REQUIRE_FALSE(g.ch_y.empty());
    for (int i = 0; i < scm.d; ++i) {
      for (int j = 0; j < scm.d; ++j)
        if (scm.b(i, j) != 0.0) {
          REQUIRE(std::abs(scm.b(i, j)) >= 0.5);
          REQUIRE(std::abs(scm.b(i, j)) <= 1.5);
          ++total_edges;
        }
      if (scm.gamma(i) != 0.0) {
        REQUIRE(std::abs(scm.gamma(i)) >= 0.5);
        REQUIRE(std::abs(scm.gamma(i)) <= 1.5);
        ++total_edges;
      }
      if (scm.beta(i) != 0.0) {
        REQUIRE(std::abs(scm.beta(i)) >= 0.5);
        REQUIRE(std::abs(scm.beta(i)) <= 1.5);
        ++total_edges;
      }
    }
  }
  // Bernoulli(1/2) over 36 pairs, 20 seeds: density well inside (0.35, 0.65).
  double density = total_edges / (20.0 * 36.0);
  REQUIRE(density > 0.35);
  REQUIRE(density < 0.65);

  LinearScm a = random_scm(cfg, 5);
  LinearScm b = random_scm(cfg, 5);
  REQUIRE(scm_to_json(a) == scm_to_json(b));
}

TEST_CASE("json round trip is exact", "[scm][json]") {
  LinearScm scm = fig_toy({1.0, 2.0});
  scm.envs[1].edits.push_back(Edit{0, EditKind::kShift, 0, 0.125});
  scm.envs[1].edits.push_back(Edit{1, EditKind::kNoiseVariance, 0, 1.75});
  LinearScm cont = fig_toy_continuous(2.0, 1.25);
  scm.envs.push_back(cont.envs[0]);

  nlohmann::json j = scm_to_json(scm);
  LinearScm back = scm_from_json(j);
  REQUIRE(scm_to_json(back) == j);
  REQUIRE(back.d == scm.d);
  REQUIRE(back.gamma == scm.gamma);
  REQUIRE(back.b == scm.b);
  REQUIRE(back.beta == scm.beta);
  REQUIRE(back.envs.size() == scm.envs.size());
  REQUIRE(j.contains("alpha_by_env"));
  // alpha_by_env reflects the coefficient edit on X1 -> Y in env 1.
  REQUIRE(j["alpha_by_env"][1][0].get<double>() == Approx(1.0));
}

TEST_CASE("moments are environment-invariant without alpha or noise edits",
          "[scm][moments]") {
  LinearScm scm = fig_toy({1.0, 1.0});
  Edit zero{kYNode, EditKind::kCoefficient, 0, 0.0};
  scm.envs[1].edits = {zero};
  Moments m0 = population_moments(scm, 0);
  Moments m1 = population_moments(scm, 1);
  REQUIRE((m0.cov - m1.cov).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE((m0.mean - m1.mean).cwiseAbs().maxCoeff() < 1e-14);

  LinearScm varying = fig_toy({1.0, 2.0});
  Moments v0 = population_moments(varying, 0);
  Moments v1 = population_moments(varying, 1);
  REQUIRE(std::abs(v0.cov(3, 3) - v1.cov(3, 3)) > 0.5);
}
