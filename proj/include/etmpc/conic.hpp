#pragma once

// Standard-form conic problem description consumed by the interior-point
// solver:
//
//   minimize    c'x
//   subject to  A x = b
//               G x + s = h,   s in K
//
// where K is a product of nonnegative orthants, second-order cones and
// (svec-packed) positive semidefinite cones, listed in row order of G.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cmath>
#include <stdexcept>
#include <vector>

#include <etmpc/geometry.hpp>

namespace etmpc::conic {

using etmpc::Index;
using etmpc::Matrix;
using etmpc::Vector;
using SparseMatrix = Eigen::SparseMatrix<double>;

enum class ConeClass { Nonnegative, SecondOrder, PositiveSemidefinite };

struct ConeSpec {
  ConeClass kind = ConeClass::Nonnegative;
  /// Component count for orthant/second-order blocks, matrix order for
  /// semidefinite blocks.
  Index size = 0;

  Index rows() const {
    return kind == ConeClass::PositiveSemidefinite ? size * (size + 1) / 2 : size;
  }
  Index degree() const {
    switch (kind) {
      case ConeClass::Nonnegative: return size;
      case ConeClass::SecondOrder: return 1;
      case ConeClass::PositiveSemidefinite: return size;
    }
    return 0;
  }
};

inline Index svec_size(Index n) { return n * (n + 1) / 2; }

/// Lower-triangle column-major packing with sqrt(2) on off-diagonal entries,
/// so plain dot products of packed vectors equal trace inner products.
inline Vector svec(const Matrix& s) {
  const Index n = s.rows();
  Vector out(svec_size(n));
  const double rt2 = std::sqrt(2.0);
  Index k = 0;
  for (Index j = 0; j < n; ++j) {
    out(k++) = s(j, j);
    for (Index i = j + 1; i < n; ++i) out(k++) = rt2 * s(i, j);
  }
  return out;
}

inline Matrix smat(const Vector& v, Index n) {
  if (v.size() != svec_size(n)) throw std::invalid_argument("smat: size mismatch");
  Matrix out(n, n);
  const double inv_rt2 = 1.0 / std::sqrt(2.0);
  Index k = 0;
  for (Index j = 0; j < n; ++j) {
    out(j, j) = v(k++);
    for (Index i = j + 1; i < n; ++i) {
      out(i, j) = inv_rt2 * v(k);
      out(j, i) = out(i, j);
      ++k;
    }
  }
  return out;
}

struct Problem {
  Index num_vars = 0;
  Vector cost;
  SparseMatrix eq;
  Vector eq_rhs;
  SparseMatrix ineq;
  Vector ineq_rhs;
  std::vector<ConeSpec> cones;

  Index cone_rows() const {
    Index total = 0;
    for (const ConeSpec& c : cones) total += c.rows();
    return total;
  }

  void validate() const {
    if (num_vars <= 0) throw std::invalid_argument("conic::Problem: no variables");
    if (cost.size() != num_vars)
      throw std::invalid_argument("conic::Problem: cost size mismatch");
    if (eq.rows() != eq_rhs.size() || (eq.rows() > 0 && eq.cols() != num_vars))
      throw std::invalid_argument("conic::Problem: equality block mismatch");
    if (ineq.rows() != ineq_rhs.size() || (ineq.rows() > 0 && ineq.cols() != num_vars))
      throw std::invalid_argument("conic::Problem: inequality block mismatch");
    for (const ConeSpec& c : cones)
      if (c.size <= 0) throw std::invalid_argument("conic::Problem: empty cone");
    if (cone_rows() != ineq.rows())
      throw std::invalid_argument("conic::Problem: cone rows disagree with G");
  }
};

enum class SolveStatus {
  Optimal,
  Infeasible,       // primal infeasibility certificate found
  Unbounded,        // dual infeasibility certificate found
  IterationLimit,
  TimeLimit,
  NumericalFailure,
};

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::Unbounded: return "unbounded";
    case SolveStatus::IterationLimit: return "iteration_limit";
    case SolveStatus::TimeLimit: return "time_limit";
    case SolveStatus::NumericalFailure: return "numerical_failure";
  }
  return "unknown";
}

struct Settings {
  double feas_tol = 1e-8;
  double gap_abs_tol = 1e-8;
  double gap_rel_tol = 1e-8;
  int max_iterations = 100;
  double time_limit_seconds = 30.0;
  double step_fraction = 0.99;
  double static_regularization = 1e-9;
  // A run that stalls (step collapse, scaling breakdown, iteration or time
  // limit) is still reported optimal when its best iterate meets these looser
  // tolerances; such solutions carry Solution::inaccurate = true.
  double reduced_feas_tol = 1e-6;
  double reduced_gap_tol = 1e-6;
  bool verbose = false;
};

struct Solution {
  Vector x, y, z, s;
  double primal_cost = 0.0;
  double dual_cost = 0.0;
  double gap = 0.0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  int iterations = 0;
  double solve_seconds = 0.0;
  bool inaccurate = false;
};

}  // namespace etmpc::conic
