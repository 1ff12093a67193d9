#pragma once

// Deterministic generators for property tests. Raw mt19937_64 draws are
// mapped manually so sequences do not depend on library distribution
// implementations.

#include <Eigen/Dense>

#include <cmath>
#include <random>

namespace testsupport {

using etmpc_rng = std::mt19937_64;

inline double uniform01(etmpc_rng& g) {
  return std::ldexp(static_cast<double>(g()), -64);
}

inline double uniform(etmpc_rng& g, double lo, double hi) {
  return lo + (hi - lo) * uniform01(g);
}

inline double gaussian(etmpc_rng& g) {
  double u1 = uniform01(g);
  while (u1 <= 1e-300) u1 = uniform01(g);
  const double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline Eigen::VectorXd random_vector(etmpc_rng& g, Eigen::Index n, double scale = 1.0) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * (2.0 * uniform01(g) - 1.0);
  return v;
}

inline Eigen::MatrixXd random_matrix(etmpc_rng& g, Eigen::Index r, Eigen::Index c,
                                     double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * (2.0 * uniform01(g) - 1.0);
  return m;
}

/// Symmetric positive definite matrix with eigenvalues in [lo, hi].
inline Eigen::MatrixXd random_spd(etmpc_rng& g, Eigen::Index n, double lo = 0.5,
                                  double hi = 2.0) {
  Eigen::MatrixXd a = random_matrix(g, n, n);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::VectorXd d(n);
  for (Eigen::Index i = 0; i < n; ++i) d(i) = uniform(g, lo, hi);
  return q * d.asDiagonal() * q.transpose();
}

/// Weights on the unit simplex (normalized exponentials).
inline Eigen::VectorXd random_simplex_weights(etmpc_rng& g, Eigen::Index n) {
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double u = uniform01(g);
    while (u <= 1e-300) u = uniform01(g);
    w(i) = -std::log(u);
  }
  return w / w.sum();
}

}  // namespace testsupport
