#include <catch2/catch_amalgamated.hpp>

#include <etmpc/geometry.hpp>

#include "support/test_rng.hpp"

using namespace etmpc;
using testsupport::etmpc_rng;

TEST_CASE("weighted vector norm matches closed forms") {
  Vector x(2);
  x << 3.0, 4.0;
  EllipsoidShape id(Matrix::Identity(2, 2));
  CHECK(weighted_vector_norm(x, id) == Catch::Approx(5.0).margin(1e-14));

  Matrix v(2, 2);
  v << 4.0, 0.0, 0.0, 1.0;
  EllipsoidShape diag(v);
  Vector y(2);
  y << 1.0, 2.0;
  CHECK(weighted_vector_norm(y, diag) == Catch::Approx(2.8284271247461903).margin(1e-12));
}

TEST_CASE("weighted norm squared equals quadratic form") {
  etmpc_rng g(20240801u);
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = 1 + static_cast<Index>(g() % 6);
    const Matrix v = testsupport::random_spd(g, n, 0.3, 3.0);
    EllipsoidShape shape(v);
    const Vector x = testsupport::random_vector(g, n, 2.0);
    const double lhs = weighted_vector_norm(x, shape);
    const double rhs = x.dot(v * x);
    CHECK(lhs * lhs == Catch::Approx(rhs).margin(1e-12 * std::max(1.0, rhs)));
  }
}

TEST_CASE("ellipsoid shape factors are consistent") {
  etmpc_rng g(77u);
  const Matrix v = testsupport::random_spd(g, 4, 0.2, 5.0);
  EllipsoidShape shape(v);
  CHECK((shape.sqrt_factor() * shape.sqrt_factor() - v).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((shape.sqrt_factor() * shape.inv_sqrt_factor() - Matrix::Identity(4, 4))
            .cwiseAbs()
            .maxCoeff() < 1e-12);
  CHECK((shape.inverse() * v - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("ellipsoid shape rejects invalid matrices") {
  Matrix bad(2, 2);
  bad << 1.0, 0.5, -0.5, 1.0;
  CHECK_THROWS_AS(EllipsoidShape(bad), std::invalid_argument);

  Matrix indef(2, 2);
  indef << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(EllipsoidShape(indef), std::invalid_argument);
}

TEST_CASE("induced matrix norm on diagonal data") {
  EllipsoidShape id(Matrix::Identity(2, 2));
  Matrix m(2, 2);
  m << 2.0, 0.0, 0.0, 0.5;
  CHECK(induced_matrix_norm(m, id) == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("induced matrix norm is submultiplicative against vectors") {
  etmpc_rng g(20240802u);
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = 1 + static_cast<Index>(g() % 5);
    EllipsoidShape shape(testsupport::random_spd(g, n, 0.3, 3.0));
    const Matrix m = testsupport::random_matrix(g, n, n, 2.0);
    const Vector x = testsupport::random_vector(g, n, 2.0);
    const double bound = induced_matrix_norm(m, shape) * weighted_vector_norm(x, shape);
    CHECK(weighted_vector_norm(m * x, shape) <= bound + 1e-9 * std::max(1.0, bound));
  }
}

TEST_CASE("q-weighted matrix norm") {
  Matrix v = 4.0 * Matrix::Identity(3, 3);
  EllipsoidShape shape(v);
  CHECK(q_weighted_matrix_norm(shape.inv_sqrt_factor(), Matrix::Identity(3, 3)) ==
        Catch::Approx(0.5).margin(1e-12));

  etmpc_rng g(3u);
  const Matrix m = testsupport::random_matrix(g, 3, 2);
  const Matrix q = testsupport::random_spd(g, 3, 0.5, 2.0);
  const double nrm = q_weighted_matrix_norm(m, q);
  for (int trial = 0; trial < 200; ++trial) {
    Vector x = testsupport::random_vector(g, 2);
    if (x.norm() < 1e-9) continue;
    x /= x.norm();
    const Vector y = m * x;
    CHECK(std::sqrt(y.dot(q * y)) <= nrm + 1e-10);
  }
}

TEST_CASE("tighten halfspace coefficient and exact maximizer") {
  Matrix v = 4.0 * Matrix::Identity(2, 2);
  EllipsoidShape shape(v);
  Vector row(2);
  row << 1.0, 0.0;
  const TightenedHalfspace t = tighten_halfspace(row, 1.0, shape);
  CHECK(t.beta_coeff == Catch::Approx(0.5).margin(1e-14));
  CHECK(t.offset == 1.0);

  etmpc_rng g(20240803u);
  for (int trial = 0; trial < 300; ++trial) {
    const Index n = 1 + static_cast<Index>(g() % 5);
    EllipsoidShape s(testsupport::random_spd(g, n, 0.3, 3.0));
    Vector r = testsupport::random_vector(g, n, 2.0);
    if (r.norm() < 1e-6) continue;
    const double beta = testsupport::uniform(g, 0.0, 2.0);
    const Vector c = testsupport::random_vector(g, n, 2.0);
    const TightenedHalfspace th = tighten_halfspace(r, 0.0, s);
    // The worst point of c + E(V, beta^2) along r attains the tightened value.
    const Vector inv_r = s.inverse() * r;
    const double denom = (s.inv_sqrt_factor() * r).norm();
    const Vector maximizer = c + beta * inv_r / denom;
    CHECK(weighted_vector_norm(maximizer - c, s) <= beta + 1e-9);
    CHECK(r.dot(maximizer) ==
          Catch::Approx(r.dot(c) + th.beta_coeff * beta).margin(1e-9));
  }
}

TEST_CASE("simplex vertices of an interval") {
  Matrix h_mat(2, 1);
  h_mat << 1.0, -1.0;
  Vector h_rhs(2);
  h_rhs << 0.3, -0.1;
  const VPolytope v = simplex_vertices(h_mat, h_rhs);
  REQUIRE(v.vertices.size() == 2);
  CHECK(v.vertices[0](0) == Catch::Approx(0.1).margin(1e-12));
  CHECK(v.vertices[1](0) == Catch::Approx(0.3).margin(1e-12));
}

TEST_CASE("simplex vertices of the perturbation simplex") {
  Matrix h_mat(3, 2);
  h_mat << -1.0, 0.0, 0.0, -1.0, 1.0, 1.0;
  const Vector h_rhs = Vector::Constant(3, 0.5);
  const VPolytope v = simplex_vertices(h_mat, h_rhs);
  REQUIRE(v.vertices.size() == 3);
  Vector expect0(2), expect1(2), expect2(2);
  expect0 << 1.0, -0.5;
  expect1 << -0.5, 1.0;
  expect2 << -0.5, -0.5;
  CHECK((v.vertices[0] - expect0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((v.vertices[1] - expect1).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((v.vertices[2] - expect2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("simplex vertices rejects degenerate and unbounded systems") {
  Matrix h_mat(3, 2);
  h_mat << 1.0, 0.0, 1.0, 0.0, 0.0, 1.0;  // two parallel rows
  const Vector h_rhs = Vector::Ones(3);
  CHECK_THROWS_AS(simplex_vertices(h_mat, h_rhs), std::invalid_argument);

  Matrix open(3, 2);
  open << 1.0, 0.0, 0.0, 1.0, 1.0, 1.0;  // all normals in one halfspace
  CHECK_THROWS_AS(simplex_vertices(open, Vector::Ones(3)), std::invalid_argument);
}

TEST_CASE("simplex membership round trip") {
  etmpc_rng g(20240804u);
  int done = 0;
  while (done < 1000) {
    const Index n = 1 + static_cast<Index>(g() % 4);
    Matrix h_mat(n + 1, n);
    h_mat.topRows(n) = -Matrix::Identity(n, n);
    h_mat.bottomRows(1).setOnes();
    h_mat += 0.15 * testsupport::random_matrix(g, n + 1, n);
    Vector h_rhs(n + 1);
    for (Index i = 0; i <= n; ++i) h_rhs(i) = testsupport::uniform(g, 0.3, 1.0);
    VPolytope vp;
    try {
      vp = simplex_vertices(h_mat, h_rhs);
    } catch (const std::invalid_argument&) {
      continue;  // perturbation broke the simplex; draw again
    }
    const Vector w = testsupport::random_simplex_weights(g, n + 1);
    Vector inside = Vector::Zero(n);
    Vector centroid = Vector::Zero(n);
    for (Index q = 0; q <= n; ++q) {
      inside += w(q) * vp.vertices[static_cast<size_t>(q)];
      centroid += vp.vertices[static_cast<size_t>(q)] / static_cast<double>(n + 1);
    }
    CHECK(((h_mat * inside - h_rhs).array() <= 1e-9).all());
    const size_t q = static_cast<size_t>(g() % static_cast<unsigned long>(n + 1));
    const Vector outside = centroid + 1.05 * (vp.vertices[q] - centroid);
    CHECK((h_mat * outside - h_rhs).maxCoeff() > 0.0);
    ++done;
  }
}

TEST_CASE("axis box polytope") {
  const HPolytope box = HPolytope::box(3, 1.5);
  CHECK(box.rows() == 6);
  Vector in(3), out(3);
  in << 1.49, -1.49, 0.0;
  out << 1.51, 0.0, 0.0;
  CHECK(box.contains(in));
  CHECK(!box.contains(out));
  CHECK(box.is_axis_box());
  CHECK(box.box_halfwidth(2) == Catch::Approx(1.5));
}

TEST_CASE("tube cross section membership") {
  auto shape = std::make_shared<EllipsoidShape>(4.0 * Matrix::Identity(2, 2));
  TubeCrossSection sec;
  sec.center = Vector::Ones(2);
  sec.beta = 1.0;
  sec.shape = shape;
  Vector x(2);
  x << 1.49, 1.0;  // ||(0.49,0)||_V = 0.98
  CHECK(sec.contains(x));
  x << 1.51, 1.0;
  CHECK(!sec.contains(x));
}
