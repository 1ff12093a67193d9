#include <catch2/catch_amalgamated.hpp>

#include <etmpc/estimation.hpp>

#include "support/test_rng.hpp"

using namespace etmpc;
using testsupport::etmpc_rng;

namespace {

QuadraticBasisModel one_dim_model() {
  Matrix a(1, 1), b(1, 1);
  a << 0.5;
  b << 1.0;
  return QuadraticBasisModel(a, b, {0});
}

ParamSimplex interval(double lo, double hi) {
  Matrix shape(2, 1);
  shape << -1.0, 1.0;
  Vector offsets(2);
  offsets << -lo, hi;
  return ParamSimplex(shape, offsets);
}

}  // namespace

TEST_CASE("transition without information leaves the set unchanged") {
  const QuadraticBasisModel m = one_dim_model();
  const DisturbanceSet w(Matrix::Identity(1, 1), 0.05);
  SetMembershipEstimator sme(m, w, interval(0.1, 0.3));
  // Regressor f_1(x,u) = x^2 vanishes at x = 0; the residual only involves
  // the disturbance, so no facet can tighten beyond round-off.
  Vector x = Vector::Zero(1), u(1);
  u << 0.4;
  const double theta_star = 0.2;
  Vector x_plus = eval_f(m, x, u, Vector::Constant(1, theta_star));
  x_plus(0) += 0.01;  // admissible disturbance
  const Vector before = sme.parameter_set().offsets();
  sme.update(x, u, x_plus);
  CHECK((sme.parameter_set().offsets() - before).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("exact transition collapses the interval to the true parameter") {
  const QuadraticBasisModel m = one_dim_model();
  const DisturbanceSet w(Matrix::Identity(1, 1), 0.0);  // no disturbance
  SetMembershipEstimator sme(m, w, interval(0.1, 0.3));
  Vector x(1), u(1);
  x << 2.0;  // f_1 = 4
  u << -0.3;
  const double theta_star = 0.23;
  const Vector x_plus = eval_f(m, x, u, Vector::Constant(1, theta_star));
  const SmeReport rep = sme.update(x, u, x_plus);
  CHECK(rep.tightened);
  CHECK_FALSE(rep.inconsistent);
  const double closed_form = (x_plus(0) - (0.5 * x(0) + u(0))) / 4.0;
  CHECK(closed_form == Catch::Approx(theta_star).margin(1e-12));
  CHECK(sme.parameter_set().offsets()(1) == Catch::Approx(theta_star).margin(1e-6));
  CHECK(sme.parameter_set().offsets()(0) == Catch::Approx(-theta_star).margin(1e-6));
  CHECK(sme.theta_nominal()(0) == Catch::Approx(theta_star).margin(1e-6));
}

TEST_CASE("repeating the same transition is idempotent") {
  const QuadraticBasisModel m = one_dim_model();
  const DisturbanceSet w(Matrix::Identity(1, 1), 0.05);
  SetMembershipEstimator sme(m, w, interval(0.1, 0.3));
  Vector x(1), u(1);
  x << 1.5;
  u << 0.2;
  Vector x_plus = eval_f(m, x, u, Vector::Constant(1, 0.18));
  x_plus(0) += 0.02;
  sme.update(x, u, x_plus);
  const Vector after_first = sme.parameter_set().offsets();
  sme.update(x, u, x_plus);
  CHECK((sme.parameter_set().offsets() - after_first).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("history respects its capacity") {
  const QuadraticBasisModel m = one_dim_model();
  const DisturbanceSet w(Matrix::Identity(1, 1), 0.1);
  SmeSettings settings;
  settings.history_capacity = 5;
  SetMembershipEstimator sme(m, w, interval(0.0, 0.5), settings);
  Vector x(1), u(1);
  for (int t = 0; t < 8; ++t) {
    x << 0.1 * t;
    u << 0.0;
    Vector x_plus = eval_f(m, x, u, Vector::Constant(1, 0.25));
    sme.update(x, u, x_plus);
  }
  CHECK(sme.history().size() == 5);
}

TEST_CASE("inconsistent data are reported and ignored") {
  const QuadraticBasisModel m = one_dim_model();
  const DisturbanceSet w(Matrix::Identity(1, 1), 0.01);
  SetMembershipEstimator sme(m, w, interval(0.1, 0.3));
  Vector x(1), u(1);
  x << 2.0;
  u << 0.0;
  // Transition generated far outside the assumed parameter range.
  const Vector x_plus = eval_f(m, x, u, Vector::Constant(1, 5.0));
  const Vector before = sme.parameter_set().offsets();
  const SmeReport rep = sme.update(x, u, x_plus);
  CHECK(rep.inconsistent);
  CHECK((sme.parameter_set().offsets() - before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("simulated runs keep the true parameter inside") {
  Matrix a(2, 2), b(2, 1);
  a << 0.5, 0.1, -0.05, 0.45;
  b << 1.0, 0.4;
  const QuadraticBasisModel m(a, b, {0, 1});
  Matrix b_w(2, 1);
  b_w << 0.8, 0.4;
  const DisturbanceSet w(b_w, 0.02);
  Matrix theta_vertices(2, 3);
  theta_vertices << -0.05, 0.15, -0.05, -0.05, -0.05, 0.15;
  const ParamSimplex theta0_set = ParamSimplex::from_vertices(theta_vertices);

  etmpc_rng rng(20240818u);
  for (int run = 0; run < 5; ++run) {
    // Random true parameter strictly inside the initial simplex.
    const Vector weights = testsupport::random_simplex_weights(rng, 3);
    Vector theta_star = theta0_set.vertices() * weights;
    theta_star = 0.8 * theta_star + 0.2 * theta0_set.vertex_mean();

    SetMembershipEstimator sme(m, w, theta0_set);
    Vector x = testsupport::random_vector(rng, 2, 0.3);
    Vector prev_offsets = sme.parameter_set().offsets();
    for (int t = 0; t < 30; ++t) {
      const Vector u = testsupport::random_vector(rng, 1, 0.3);
      const Vector wv = testsupport::random_simplex_weights(rng, w.num_vertices());
      const Vector noise = w.vertices() * wv;
      const Vector x_plus = eval_f(m, x, u, theta_star) + noise;
      const SmeReport rep = sme.update(x, u, x_plus);
      REQUIRE_FALSE(rep.inconsistent);
      REQUIRE_FALSE(rep.solver_trouble);
      // Monotone offsets.
      REQUIRE(((sme.parameter_set().offsets() - prev_offsets).array() <= 0.0).all());
      prev_offsets = sme.parameter_set().offsets();
      // True parameter remains inside.
      REQUIRE(((sme.parameter_set().shape() * theta_star -
                sme.parameter_set().offsets()).array() <= 1e-9).all());
      x = x_plus;
    }
    // Nominal parameter lies inside the final set.
    CHECK(sme.parameter_set().contains(sme.theta_nominal(), 1e-9));
  }
}
