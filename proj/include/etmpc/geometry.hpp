#pragma once

// Ellipsoid, polytope and weighted-norm primitives shared by the tube
// controller modules.

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace etmpc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Shape matrix of an ellipsoid {e : e'Ve <= beta^2}.
///
/// Wraps a symmetric positive definite V together with cached symmetric
/// factors V^{1/2} and V^{-1/2}. Instances are immutable after construction
/// and safe to share between threads.
class EllipsoidShape {
 public:
  explicit EllipsoidShape(const Matrix& v) {
    if (v.rows() != v.cols() || v.rows() == 0)
      throw std::invalid_argument("EllipsoidShape: matrix must be square and non-empty");
    const double scale = v.cwiseAbs().maxCoeff();
    if ((v - v.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, scale))
      throw std::invalid_argument("EllipsoidShape: matrix must be symmetric");
    v_ = 0.5 * (v + v.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(v_);
    const Vector& d = eig.eigenvalues();
    if (d.minCoeff() <= 1e-12 * std::max(1.0, d.maxCoeff()))
      throw std::invalid_argument("EllipsoidShape: matrix must be positive definite");
    const Matrix& u = eig.eigenvectors();
    sqrt_ = u * d.cwiseSqrt().asDiagonal() * u.transpose();
    inv_sqrt_ = u * d.cwiseSqrt().cwiseInverse().asDiagonal() * u.transpose();
    inverse_ = u * d.cwiseInverse().asDiagonal() * u.transpose();
  }

  Index dim() const { return v_.rows(); }
  const Matrix& matrix() const { return v_; }
  const Matrix& sqrt_factor() const { return sqrt_; }
  const Matrix& inv_sqrt_factor() const { return inv_sqrt_; }
  const Matrix& inverse() const { return inverse_; }

  /// ||x||_V = sqrt(x'Vx), evaluated as ||V^{1/2}x||_2 so the result is
  /// never NaN for tiny negative rounding.
  double norm(const Vector& x) const {
    if (x.size() != dim()) throw std::invalid_argument("EllipsoidShape::norm: dimension mismatch");
    return (sqrt_ * x).norm();
  }

  bool contains(const Vector& e, double beta, double tol = 0.0) const {
    return norm(e) <= beta + tol;
  }

 private:
  Matrix v_, sqrt_, inv_sqrt_, inverse_;
};

/// ||x||_V.
inline double weighted_vector_norm(const Vector& x, const EllipsoidShape& shape) {
  return shape.norm(x);
}

/// Induced norm ||M||_V = ||V^{1/2} M V^{-1/2}||_2, computed from the largest
/// eigenvalue of the symmetrized Gram product.
inline double induced_matrix_norm(const Matrix& m, const EllipsoidShape& shape) {
  if (m.rows() != shape.dim() || m.cols() != shape.dim())
    throw std::invalid_argument("induced_matrix_norm: dimension mismatch");
  const Matrix b = shape.sqrt_factor() * m * shape.inv_sqrt_factor();
  Matrix g = b.transpose() * b;
  g = 0.5 * (g + g.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(g);
  return std::sqrt(std::max(0.0, eig.eigenvalues().maxCoeff()));
}

/// ||M||_Q = sqrt(lambda_max(M'QM)) for symmetric positive semidefinite Q.
/// M may be rectangular.
inline double q_weighted_matrix_norm(const Matrix& m, const Matrix& q) {
  if (q.rows() != q.cols() || m.rows() != q.rows())
    throw std::invalid_argument("q_weighted_matrix_norm: dimension mismatch");
  Matrix g = m.transpose() * q * m;
  g = 0.5 * (g + g.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(g);
  return std::sqrt(std::max(0.0, eig.eigenvalues().maxCoeff()));
}

/// Coefficient form of a halfspace row tightened against an ellipsoidal
/// cross section: row'c + beta_coeff * beta <= offset holds exactly when
/// the halfspace contains c + E(V, beta^2).
struct TightenedHalfspace {
  Vector row;
  double beta_coeff = 0.0;
  double offset = 0.0;
};

inline TightenedHalfspace tighten_halfspace(const Vector& row, double offset,
                                            const EllipsoidShape& shape) {
  if (row.size() != shape.dim())
    throw std::invalid_argument("tighten_halfspace: dimension mismatch");
  TightenedHalfspace t;
  t.row = row;
  t.beta_coeff = (shape.inv_sqrt_factor() * row).norm();
  t.offset = offset;
  return t;
}

/// Polytope {x : Hx <= h}. Vertices are optional and, when present, are
/// trusted by callers; populate them only from exact constructions.
struct HPolytope {
  Matrix H;
  Vector h;
  std::optional<std::vector<Vector>> vertices;

  Index dim() const { return H.cols(); }
  Index rows() const { return H.rows(); }

  void validate() const {
    if (H.rows() != h.size())
      throw std::invalid_argument("HPolytope: row count mismatch between H and h");
    if (H.rows() == 0) throw std::invalid_argument("HPolytope: empty system");
  }

  bool contains(const Vector& x, double tol = 0.0) const {
    if (x.size() != dim()) throw std::invalid_argument("HPolytope::contains: dimension mismatch");
    return ((H * x - h).array() <= tol).all();
  }

  /// Axis-aligned box {|x_i| <= halfwidth} in normalized form (rows scaled so
  /// the right-hand side is 1).
  static HPolytope box(Index dim, double halfwidth) {
    if (dim <= 0 || halfwidth <= 0.0)
      throw std::invalid_argument("HPolytope::box: dimension and halfwidth must be positive");
    HPolytope p;
    p.H.setZero(2 * dim, dim);
    p.h.setOnes(2 * dim);
    for (Index i = 0; i < dim; ++i) {
      p.H(i, i) = 1.0 / halfwidth;
      p.H(dim + i, i) = -1.0 / halfwidth;
    }
    p.halfwidths_ = Vector::Constant(dim, halfwidth);
    return p;
  }

  bool is_axis_box() const { return halfwidths_.size() > 0; }

  /// Per-coordinate halfwidth of an axis box; errors for general polytopes.
  double box_halfwidth(Index coordinate) const {
    if (!is_axis_box()) throw std::logic_error("HPolytope: not an axis box");
    return halfwidths_(coordinate);
  }

 private:
  Vector halfwidths_;
};

/// Convex hull of an explicit vertex list.
struct VPolytope {
  std::vector<Vector> vertices;

  Index dim() const { return vertices.empty() ? 0 : vertices.front().size(); }
};

/// Vertices of a simplex given as {x : Hx <= h} with H of size (n+1) x n.
/// Vertex q is the solution of the n active rows obtained by dropping row q,
/// so the returned order pairs vertex q with facet q.
inline VPolytope simplex_vertices(const Matrix& H, const Vector& h) {
  const Index n = H.cols();
  if (H.rows() != n + 1 || h.size() != n + 1)
    throw std::invalid_argument("simplex_vertices: H must have exactly n+1 rows");
  VPolytope out;
  out.vertices.reserve(static_cast<size_t>(n + 1));
  for (Index q = 0; q <= n; ++q) {
    Matrix active(n, n);
    Vector rhs(n);
    Index r = 0;
    for (Index i = 0; i <= n; ++i) {
      if (i == q) continue;
      active.row(r) = H.row(i);
      rhs(r) = h(i);
      ++r;
    }
    Eigen::FullPivLU<Matrix> lu(active);
    lu.setThreshold(1e-10);
    if (lu.rank() < n)
      throw std::invalid_argument("simplex_vertices: facet system is degenerate");
    const Vector v = lu.solve(rhs);
    const double slack = H.row(q).dot(v) - h(q);
    if (slack > 1e-8 * std::max(1.0, std::abs(h(q))))
      throw std::invalid_argument("simplex_vertices: set is unbounded or inconsistent");
    out.vertices.push_back(v);
  }
  return out;
}

/// One tube cross section x0 + z + E(V, beta^2) at a fixed step.
struct TubeCrossSection {
  Vector center;
  double beta = 0.0;
  std::shared_ptr<const EllipsoidShape> shape;

  bool contains(const Vector& x, double tol = 0.0) const {
    return shape->contains(x - center, beta, tol);
  }
};

}  // namespace etmpc
