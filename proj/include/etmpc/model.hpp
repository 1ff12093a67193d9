#pragma once

// Uncertain discrete-time system model: the deterministic part of the
// dynamics is an affine combination f0(x,u) + sum_i theta_i f_i(x,u) of known
// basis functions with unknown weights theta, plus an additive disturbance
// from a polytopic set. This header provides the model contract, the
// quadratic-basis instance (linear nominal part plus squared-state terms),
// the disturbance set, and the simplex parameter set.

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <etmpc/geometry.hpp>

namespace etmpc {

/// Perturbation set for the control correction; either a polytope or all of
/// R^{n_u} (the control-affine case needs no bound).
struct ControlPerturbationSet {
  bool unbounded = true;
  std::optional<HPolytope> set;

  static ControlPerturbationSet all() { return ControlPerturbationSet{}; }
  static ControlPerturbationSet polytope(HPolytope p) {
    ControlPerturbationSet out;
    out.unbounded = false;
    out.set = std::move(p);
    return out;
  }
};

/// One vertex of the Jacobian-deviation set: state-Jacobian offset C and
/// input-Jacobian offset D relative to the nominal linearization.
struct JacobianDeviation {
  Matrix c;
  Matrix d;
};

/// Simplex parameter set {theta : H theta <= h} with cached vertices. The
/// facet normals are fixed for the lifetime of a run; estimation updates
/// tighten only the offsets and build a fresh instance.
class ParamSimplex {
 public:
  ParamSimplex(Matrix shape, Vector offsets)
      : shape_(std::move(shape)), offsets_(std::move(offsets)) {
    if (shape_.rows() != shape_.cols() + 1)
      throw std::invalid_argument("ParamSimplex: shape must have dim+1 facets");
    if (offsets_.size() != shape_.rows())
      throw std::invalid_argument("ParamSimplex: offset count mismatch");
    const VPolytope vtx = simplex_vertices(shape_, offsets_);
    vertices_.resize(shape_.cols(), shape_.rows());
    for (Index q = 0; q < shape_.rows(); ++q)
      vertices_.col(q) = vtx.vertices[static_cast<size_t>(q)];
  }

  /// Simplex through explicit vertex columns (n x (n+1)); derives the H-form.
  static ParamSimplex from_vertices(const Matrix& vertex_cols) {
    const Index n = vertex_cols.rows();
    if (vertex_cols.cols() != n + 1)
      throw std::invalid_argument("ParamSimplex: need dim+1 vertex columns");
    Matrix shape(n + 1, n);
    Vector offsets(n + 1);
    // Facet q is spanned by all vertices except q; orient away from vertex q.
    for (Index q = 0; q <= n; ++q) {
      Matrix basis(n, n - 1);
      Index col = 0;
      Index first = (q == 0) ? 1 : 0;
      for (Index j = 0; j <= n; ++j) {
        if (j == q || j == first) continue;
        basis.col(col++) = vertex_cols.col(j) - vertex_cols.col(first);
      }
      // Normal = any vector orthogonal to the facet directions.
      Eigen::FullPivLU<Matrix> lu(basis.transpose());
      const Matrix kernel = lu.kernel();
      if (kernel.cols() < 1)
        throw std::invalid_argument("ParamSimplex: degenerate vertex set");
      Vector normal = kernel.col(0);
      const double away = normal.dot(vertex_cols.col(q) - vertex_cols.col(first));
      if (std::abs(away) < 1e-12)
        throw std::invalid_argument("ParamSimplex: degenerate vertex set");
      if (away > 0.0) normal = -normal;
      normal /= normal.norm();
      shape.row(q) = normal.transpose();
      offsets(q) = normal.dot(vertex_cols.col(first));
    }
    return ParamSimplex(std::move(shape), std::move(offsets));
  }

  Index dim() const { return shape_.cols(); }
  const Matrix& shape() const { return shape_; }
  const Vector& offsets() const { return offsets_; }
  /// Vertices as columns, n_theta x (n_theta + 1).
  const Matrix& vertices() const { return vertices_; }
  Index num_vertices() const { return vertices_.cols(); }

  Vector vertex_mean() const { return vertices_.rowwise().mean(); }

  bool contains(const Vector& theta, double tol = 1e-9) const {
    return ((shape_ * theta - offsets_).array() <= tol).all();
  }

 private:
  Matrix shape_;
  Vector offsets_;
  Matrix vertices_;
};

/// Additive disturbance set {B_w what : ||what||_inf <= bound}; the matrix has
/// full column rank so membership can be tested through the pseudoinverse.
class DisturbanceSet {
 public:
  DisturbanceSet(Matrix b_w, double bound) : b_w_(std::move(b_w)), bound_(bound) {
    if (bound_ < 0.0) throw std::invalid_argument("DisturbanceSet: negative bound");
    const Index nw = b_w_.cols();
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(b_w_);
    if (cod.rank() < nw)
      throw std::invalid_argument("DisturbanceSet: matrix must have full column rank");
    pinv_ = cod.pseudoInverse();
    if (bound_ == 0.0) {
      vertices_ = Matrix::Zero(b_w_.rows(), 1);
      return;
    }
    const Index count = Index(1) << nw;
    vertices_.resize(b_w_.rows(), count);
    for (Index mask = 0; mask < count; ++mask) {
      Vector what(nw);
      for (Index i = 0; i < nw; ++i)
        what(i) = (mask >> i) & 1 ? bound_ : -bound_;
      vertices_.col(mask) = b_w_ * what;
    }
  }

  const Matrix& matrix() const { return b_w_; }
  const Matrix& pseudo_inverse() const { return pinv_; }
  double bound() const { return bound_; }
  /// Vertex columns; 2^{n_w} of them (a single zero column when bound = 0).
  const Matrix& vertices() const { return vertices_; }
  Index num_vertices() const { return vertices_.cols(); }

  bool contains(const Vector& w, double tol = 1e-8) const {
    const Vector what = pinv_ * w;
    if ((b_w_ * what - w).norm() > tol * std::max(1.0, w.norm())) return false;
    return what.size() == 0 || what.cwiseAbs().maxCoeff() <= bound_ + tol;
  }

 private:
  Matrix b_w_;
  double bound_ = 0.0;
  Matrix pinv_;
  Matrix vertices_;
};

/// Contract for basis-function models. Index 0 is the parameter-free term;
/// indices 1..n_theta carry the unknown weights.
class BasisModel {
 public:
  virtual ~BasisModel() = default;
  virtual Index state_dim() const = 0;
  virtual Index input_dim() const = 0;
  virtual Index param_dim() const = 0;
  virtual Vector eval_basis(Index i, const Vector& x, const Vector& u) const = 0;
  virtual Matrix basis_state_jacobian(Index i, const Vector& x, const Vector& u) const = 0;
  virtual Matrix basis_input_jacobian(Index i, const Vector& x, const Vector& u) const = 0;

  /// Vertices of the set of Jacobian deviations (relative to the nominal
  /// linearization at (x0, v0, theta0) under feedback u = K x + v) as the
  /// state ranges over x0 + S, the control correction over v0 + V, and the
  /// parameter over Theta. The convex hull of the returned pairs must contain
  /// every attainable deviation.
  virtual std::vector<JacobianDeviation> jacobian_deviation_vertices(
      const Vector& x0, const Vector& v0, const Matrix& k_gain,
      const VPolytope& s_set, const ControlPerturbationSet& v_set,
      const ParamSimplex& theta_set, const Vector& theta0) const = 0;
};

/// Full dynamics value f0(x,u) + sum_i theta_i f_i(x,u).
inline Vector eval_f(const BasisModel& model, const Vector& x, const Vector& u,
                     const Vector& theta) {
  if (x.size() != model.state_dim() || u.size() != model.input_dim() ||
      theta.size() != model.param_dim())
    throw std::invalid_argument("eval_f: dimension mismatch");
  Vector out = model.eval_basis(0, x, u);
  for (Index i = 1; i <= model.param_dim(); ++i)
    out += theta(i - 1) * model.eval_basis(i, x, u);
  return out;
}

/// Dynamics under the feedback u = K x + v.
inline Vector eval_closed_loop(const BasisModel& model, const Vector& x, const Vector& v,
                               const Vector& theta, const Matrix& k_gain) {
  return eval_f(model, x, Vector(k_gain * x + v), theta);
}

struct ClosedLoopJacobians {
  Matrix phi;   // d f_K / d x, feedback term included
  Matrix b;     // d f_K / d v
};

inline ClosedLoopJacobians eval_closed_loop_jacobians(const BasisModel& model,
                                                      const Vector& x, const Vector& v,
                                                      const Vector& theta,
                                                      const Matrix& k_gain) {
  const Vector u = k_gain * x + v;
  Matrix ax = model.basis_state_jacobian(0, x, u);
  Matrix au = model.basis_input_jacobian(0, x, u);
  for (Index i = 1; i <= model.param_dim(); ++i) {
    ax += theta(i - 1) * model.basis_state_jacobian(i, x, u);
    au += theta(i - 1) * model.basis_input_jacobian(i, x, u);
  }
  ClosedLoopJacobians out;
  out.phi = ax + au * k_gain;
  out.b = std::move(au);
  return out;
}

/// Quadratic-basis instance: f0(x,u) = A x + B u and f_i(x,u) = e_i x_{j_i}^2
/// (the i-th basis writes the square of state coordinate j_i into state
/// coordinate i-1, zero-based).
class QuadraticBasisModel final : public BasisModel {
 public:
  QuadraticBasisModel(Matrix a, Matrix b, std::vector<Index> squared_indices)
      : a_(std::move(a)), b_(std::move(b)), js_(std::move(squared_indices)) {
    if (a_.rows() != a_.cols()) throw std::invalid_argument("QuadraticBasisModel: A not square");
    if (b_.rows() != a_.rows()) throw std::invalid_argument("QuadraticBasisModel: B row mismatch");
    if (static_cast<Index>(js_.size()) > a_.rows())
      throw std::invalid_argument("QuadraticBasisModel: more parameters than states");
    for (Index j : js_)
      if (j < 0 || j >= a_.rows())
        throw std::invalid_argument("QuadraticBasisModel: squared index out of range");
  }

  Index state_dim() const override { return a_.rows(); }
  Index input_dim() const override { return b_.cols(); }
  Index param_dim() const override { return static_cast<Index>(js_.size()); }
  const Matrix& a() const { return a_; }
  const Matrix& b() const { return b_; }
  const std::vector<Index>& squared_indices() const { return js_; }

  Vector eval_basis(Index i, const Vector& x, const Vector& u) const override {
    if (i == 0) return a_ * x + b_ * u;
    check_index(i);
    Vector out = Vector::Zero(state_dim());
    const double xj = x(js_[static_cast<size_t>(i - 1)]);
    out(i - 1) = xj * xj;
    return out;
  }

  Matrix basis_state_jacobian(Index i, const Vector& x, const Vector&) const override {
    if (i == 0) return a_;
    check_index(i);
    Matrix out = Matrix::Zero(state_dim(), state_dim());
    const Index j = js_[static_cast<size_t>(i - 1)];
    out(i - 1, j) = 2.0 * x(j);
    return out;
  }

  Matrix basis_input_jacobian(Index i, const Vector&, const Vector&) const override {
    if (i == 0) return b_;
    check_index(i);
    return Matrix::Zero(state_dim(), input_dim());
  }

  std::vector<JacobianDeviation> jacobian_deviation_vertices(
      const Vector& x0, const Vector& /*v0*/, const Matrix& /*k_gain*/,
      const VPolytope& s_set, const ControlPerturbationSet& /*v_set*/,
      const ParamSimplex& theta_set, const Vector& theta0) const override {
    // The state Jacobian is affine in theta and in the squared coordinates of
    // the state, and the input Jacobian is constant, so extreme deviations
    // are attained at vertex pairs of Theta x S. Only the coordinates that
    // actually get squared matter, so S vertices are deduplicated by their
    // projection onto those coordinates.
    std::vector<Index> distinct;
    for (Index j : js_)
      if (std::find(distinct.begin(), distinct.end(), j) == distinct.end())
        distinct.push_back(j);
    std::map<std::vector<double>, Vector> unique_proj;
    for (const Vector& s : s_set.vertices) {
      std::vector<double> key;
      key.reserve(distinct.size());
      for (Index j : distinct) key.push_back(s(j));
      unique_proj.emplace(std::move(key), s);
    }
    const Matrix d_zero = Matrix::Zero(state_dim(), input_dim());
    std::vector<JacobianDeviation> out;
    out.reserve(static_cast<size_t>(theta_set.num_vertices()) * unique_proj.size());
    std::map<std::vector<double>, bool> seen;
    for (Index q = 0; q < theta_set.num_vertices(); ++q) {
      const Vector theta_q = theta_set.vertices().col(q);
      for (const auto& [key, s] : unique_proj) {
        Matrix c = Matrix::Zero(state_dim(), state_dim());
        std::vector<double> value_key;
        value_key.reserve(js_.size());
        for (size_t i = 0; i < js_.size(); ++i) {
          const Index j = js_[i];
          const double entry =
              2.0 * (theta_q(static_cast<Index>(i)) * s(j) +
                     (theta_q(static_cast<Index>(i)) - theta0(static_cast<Index>(i))) * x0(j));
          c(static_cast<Index>(i), j) += entry;
          value_key.push_back(entry);
        }
        // Coincident parameter vertices (a collapsed set) would otherwise
        // duplicate pairs; the hull is unchanged by dropping exact repeats.
        if (!seen.emplace(std::move(value_key), true).second) continue;
        out.push_back({std::move(c), d_zero});
      }
    }
    return out;
  }

 private:
  void check_index(Index i) const {
    if (i < 1 || i > param_dim())
      throw std::out_of_range("QuadraticBasisModel: basis index out of range");
  }

  Matrix a_, b_;
  std::vector<Index> js_;
};

}  // namespace etmpc
