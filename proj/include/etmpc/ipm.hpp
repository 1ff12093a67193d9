#pragma once

// Primal-dual interior-point solver for the standard-form problem declared in
// conic.hpp. The implementation follows the usual homogeneous self-dual
// embedding recipe: Nesterov-Todd scalings per cone block, a Mehrotra
// predictor-corrector step, and a KKT solve reduced onto the primal block by
// a Schur complement. Certificates of primal or dual infeasibility fall out
// of the embedding.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/SVD>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <vector>

#include <etmpc/conic.hpp>

namespace etmpc::conic {

namespace ipm_detail {

constexpr double kInfStep = 1e30;

struct ConeState {
  ConeSpec spec;
  Index offset = 0;
  // Nonnegative: componentwise scaling w, lambda = sqrt(s z).
  Vector w_lp;
  // Second-order: W = eta * Wbar with Wbar determined by the unit-hyperbolic
  // point wbar.
  double eta = 1.0;
  Vector wbar;
  // Semidefinite: W u = svec(R' U R); P = R R'.
  Matrix r_fac, r_inv, p_mat, p_inv;
};

class ScaledCones {
 public:
  explicit ScaledCones(const std::vector<ConeSpec>& specs) {
    Index off = 0;
    for (const ConeSpec& c : specs) {
      ConeState st;
      st.spec = c;
      st.offset = off;
      off += c.rows();
      degree_ += static_cast<double>(c.degree());
      blocks_.push_back(std::move(st));
    }
    rows_ = off;
    lam_.setZero(rows_);
  }

  Index rows() const { return rows_; }
  double degree() const { return degree_; }
  const Vector& lambda() const { return lam_; }
  const std::vector<ConeState>& blocks() const { return blocks_; }

  void identity_vector(Vector& e) const {
    e.setZero(rows_);
    for (const ConeState& b : blocks_) {
      switch (b.spec.kind) {
        case ConeClass::Nonnegative:
          e.segment(b.offset, b.spec.size).setOnes();
          break;
        case ConeClass::SecondOrder:
          e(b.offset) = 1.0;
          break;
        case ConeClass::PositiveSemidefinite: {
          Index k = b.offset;
          for (Index j = 0; j < b.spec.size; ++j) {
            e(k) = 1.0;
            k += b.spec.size - j;
          }
          break;
        }
      }
    }
  }

  double min_eig(const Vector& u) const {
    double m = std::numeric_limits<double>::infinity();
    for (const ConeState& b : blocks_) {
      switch (b.spec.kind) {
        case ConeClass::Nonnegative:
          m = std::min(m, u.segment(b.offset, b.spec.size).minCoeff());
          break;
        case ConeClass::SecondOrder: {
          const double head = u(b.offset);
          const double tail = u.segment(b.offset + 1, b.spec.size - 1).norm();
          m = std::min(m, head - tail);
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const Matrix mat = smat(u.segment(b.offset, b.spec.rows()), b.spec.size);
          Eigen::SelfAdjointEigenSolver<Matrix> eig(mat, Eigen::EigenvaluesOnly);
          m = std::min(m, eig.eigenvalues().minCoeff());
          break;
        }
      }
    }
    return m;
  }

  void shift_into_interior(Vector& u) const {
    const double m = min_eig(u);
    if (m < 1e-8 * std::max(1.0, u.cwiseAbs().maxCoeff())) {
      Vector e;
      identity_vector(e);
      u += (1.0 + std::max(0.0, -m)) * e;
    }
  }

  void set_identity() {
    for (ConeState& b : blocks_) {
      switch (b.spec.kind) {
        case ConeClass::Nonnegative:
          b.w_lp = Vector::Ones(b.spec.size);
          break;
        case ConeClass::SecondOrder:
          b.eta = 1.0;
          b.wbar = Vector::Zero(b.spec.size);
          b.wbar(0) = 1.0;
          break;
        case ConeClass::PositiveSemidefinite:
          b.r_fac = Matrix::Identity(b.spec.size, b.spec.size);
          b.r_inv = b.r_fac;
          b.p_mat = b.r_fac;
          b.p_inv = b.r_fac;
          break;
      }
    }
  }

  /// Nesterov-Todd scaling from a strictly interior pair; false when the pair
  /// has drifted out of the interior.
  bool compute_scaling(const Vector& s, const Vector& z) {
    for (ConeState& b : blocks_) {
      const Index o = b.offset;
      switch (b.spec.kind) {
        case ConeClass::Nonnegative: {
          const auto sb = s.segment(o, b.spec.size);
          const auto zb = z.segment(o, b.spec.size);
          if (sb.minCoeff() <= 0.0 || zb.minCoeff() <= 0.0) return false;
          b.w_lp = (sb.array() / zb.array()).sqrt().matrix();
          lam_.segment(o, b.spec.size) = (sb.array() * zb.array()).sqrt().matrix();
          break;
        }
        case ConeClass::SecondOrder: {
          const Index d = b.spec.size;
          const Vector sb = s.segment(o, d);
          const Vector zb = z.segment(o, d);
          const double sres = sb(0) * sb(0) - sb.tail(d - 1).squaredNorm();
          const double zres = zb(0) * zb(0) - zb.tail(d - 1).squaredNorm();
          if (sres <= 0.0 || zres <= 0.0 || sb(0) <= 0.0 || zb(0) <= 0.0) return false;
          const double a = std::sqrt(sres);
          const double bb = std::sqrt(zres);
          const Vector sbar = sb / a;
          const Vector zbar = zb / bb;
          const double gamma = std::sqrt(0.5 * (1.0 + sbar.dot(zbar)));
          b.wbar.resize(d);
          b.wbar(0) = (sbar(0) + zbar(0)) / (2.0 * gamma);
          b.wbar.tail(d - 1) = (sbar.tail(d - 1) - zbar.tail(d - 1)) / (2.0 * gamma);
          b.eta = std::sqrt(a / bb);
          // lambda = W z evaluated in closed form.
          Vector lz(d);
          soc_apply(b.wbar, zb, lz, /*flip=*/false);
          lam_.segment(o, d) = b.eta * lz;
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const Index d = b.spec.size;
          const Matrix sm = smat(s.segment(o, b.spec.rows()), d);
          const Matrix zm = smat(z.segment(o, b.spec.rows()), d);
          Eigen::LLT<Matrix> ls(sm), lz(zm);
          if (ls.info() != Eigen::Success || lz.info() != Eigen::Success) return false;
          const Matrix lsm = ls.matrixL();
          const Matrix lzm = lz.matrixL();
          Eigen::JacobiSVD<Matrix> svd(lzm.transpose() * lsm,
                                       Eigen::ComputeFullU | Eigen::ComputeFullV);
          const Vector sv = svd.singularValues();
          if (sv.minCoeff() <= 0.0) return false;
          const Vector inv_sqrt_sv = sv.cwiseSqrt().cwiseInverse();
          b.r_fac = lsm * svd.matrixV() * inv_sqrt_sv.asDiagonal();
          b.r_inv = inv_sqrt_sv.asDiagonal() * svd.matrixU().transpose() * lzm.transpose();
          b.p_mat = b.r_fac * b.r_fac.transpose();
          b.p_inv = b.r_inv.transpose() * b.r_inv;
          Matrix lam_mat = Matrix::Zero(d, d);
          lam_mat.diagonal() = sv;
          lam_.segment(o, b.spec.rows()) = svec(lam_mat);
          break;
        }
      }
    }
    return true;
  }

  void lambda_sq(Vector& out) const {
    out.setZero(rows_);
    for (const ConeState& b : blocks_) {
      const Index o = b.offset;
      switch (b.spec.kind) {
        case ConeClass::Nonnegative:
          out.segment(o, b.spec.size) =
              lam_.segment(o, b.spec.size).array().square().matrix();
          break;
        case ConeClass::SecondOrder: {
          const Index d = b.spec.size;
          const Vector lb = lam_.segment(o, d);
          out(o) = lb.squaredNorm();
          out.segment(o + 1, d - 1) = 2.0 * lb(0) * lb.tail(d - 1);
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const Index d = b.spec.size;
          const Matrix lm = smat(lam_.segment(o, b.spec.rows()), d);
          Matrix sq = Matrix::Zero(d, d);
          sq.diagonal() = lm.diagonal().array().square().matrix();
          out.segment(o, b.spec.rows()) = svec(sq);
          break;
        }
      }
    }
  }

  /// Symmetrized Jordan product u o v blockwise.
  void jordan_prod(const Vector& u, const Vector& v, Vector& out) const {
    out.setZero(rows_);
    for (const ConeState& b : blocks_) {
      const Index o = b.offset;
      switch (b.spec.kind) {
        case ConeClass::Nonnegative:
          out.segment(o, b.spec.size) = u.segment(o, b.spec.size)
                                            .cwiseProduct(v.segment(o, b.spec.size));
          break;
        case ConeClass::SecondOrder: {
          const Index d = b.spec.size;
          const Vector ub = u.segment(o, d);
          const Vector vb = v.segment(o, d);
          out(o) = ub.dot(vb);
          out.segment(o + 1, d - 1) = ub(0) * vb.tail(d - 1) + vb(0) * ub.tail(d - 1);
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const Index d = b.spec.size;
          const Matrix um = smat(u.segment(o, b.spec.rows()), d);
          const Matrix vm = smat(v.segment(o, b.spec.rows()), d);
          const Matrix prod = 0.5 * (um * vm + vm * um);
          out.segment(o, b.spec.rows()) = svec(prod);
          break;
        }
      }
    }
  }

  /// d := lambda \ d (inverse of the Jordan product with lambda).
  void lambda_solve(Vector& d) const {
    for (const ConeState& b : blocks_) {
      const Index o = b.offset;
      switch (b.spec.kind) {
        case ConeClass::Nonnegative:
          d.segment(o, b.spec.size).array() /= lam_.segment(o, b.spec.size).array();
          break;
        case ConeClass::SecondOrder: {
          const Index d_sz = b.spec.size;
          const Vector lb = lam_.segment(o, d_sz);
          const Vector db = d.segment(o, d_sz);
          const double det = lb(0) * lb(0) - lb.tail(d_sz - 1).squaredNorm();
          const double x0 = (lb(0) * db(0) - lb.tail(d_sz - 1).dot(db.tail(d_sz - 1))) / det;
          d.segment(o + 1, d_sz - 1) =
              (db.tail(d_sz - 1) - x0 * lb.tail(d_sz - 1)) / lb(0);
          d(o) = x0;
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const Index d_sz = b.spec.size;
          Matrix dm = smat(d.segment(o, b.spec.rows()), d_sz);
          const Matrix lm = smat(lam_.segment(o, b.spec.rows()), d_sz);
          for (Index i = 0; i < d_sz; ++i)
            for (Index j = 0; j < d_sz; ++j)
              dm(i, j) = 2.0 * dm(i, j) / (lm(i, i) + lm(j, j));
          d.segment(o, b.spec.rows()) = svec(dm);
          break;
        }
      }
    }
  }

  enum class Op { W, Wt, Winv, Winvt };

  void apply(Op op, const Vector& u, Vector& out) const {
    out.resize(rows_);
    for (const ConeState& b : blocks_) {
      const Index o = b.offset;
      switch (b.spec.kind) {
        case ConeClass::Nonnegative: {
          const auto ub = u.segment(o, b.spec.size);
          if (op == Op::W || op == Op::Wt)
            out.segment(o, b.spec.size) = ub.cwiseProduct(b.w_lp);
          else
            out.segment(o, b.spec.size) = ub.cwiseQuotient(b.w_lp);
          break;
        }
        case ConeClass::SecondOrder: {
          const Index d = b.spec.size;
          Vector res(d);
          const bool inv = (op == Op::Winv || op == Op::Winvt);
          soc_apply(b.wbar, u.segment(o, d), res, inv);
          out.segment(o, d) = res * (inv ? 1.0 / b.eta : b.eta);
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const Index d = b.spec.size;
          const Matrix um = smat(u.segment(o, b.spec.rows()), d);
          Matrix res;
          switch (op) {
            case Op::W: res = b.r_fac.transpose() * um * b.r_fac; break;
            case Op::Wt: res = b.r_fac * um * b.r_fac.transpose(); break;
            case Op::Winv: res = b.r_inv.transpose() * um * b.r_inv; break;
            case Op::Winvt: res = b.r_inv * um * b.r_inv.transpose(); break;
          }
          res = 0.5 * (res + res.transpose()).eval();
          out.segment(o, b.spec.rows()) = svec(res);
          break;
        }
      }
    }
  }

  /// W'W u.
  void apply_w2(const Vector& u, Vector& out) const {
    out.resize(rows_);
    for (const ConeState& b : blocks_) {
      const Index o = b.offset;
      switch (b.spec.kind) {
        case ConeClass::Nonnegative:
          out.segment(o, b.spec.size) =
              u.segment(o, b.spec.size).cwiseProduct(b.w_lp.array().square().matrix());
          break;
        case ConeClass::SecondOrder: {
          const Index d = b.spec.size;
          const Vector ub = u.segment(o, d);
          const double dotw = b.wbar.dot(ub);
          Vector res = 2.0 * dotw * b.wbar;
          res(0) -= ub(0);
          res.tail(d - 1) += ub.tail(d - 1);
          out.segment(o, d) = (b.eta * b.eta) * res;
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const Matrix um = smat(u.segment(o, b.spec.rows()), b.spec.size);
          Matrix res = b.p_mat * um * b.p_mat;
          res = 0.5 * (res + res.transpose()).eval();
          out.segment(o, b.spec.rows()) = svec(res);
          break;
        }
      }
    }
  }

  /// (W'W)^{-1} u.
  void apply_inv_w2(const Vector& u, Vector& out) const {
    out.resize(rows_);
    for (const ConeState& b : blocks_) {
      const Index o = b.offset;
      switch (b.spec.kind) {
        case ConeClass::Nonnegative:
          out.segment(o, b.spec.size) =
              u.segment(o, b.spec.size).cwiseQuotient(b.w_lp.array().square().matrix());
          break;
        case ConeClass::SecondOrder: {
          const Index d = b.spec.size;
          const Vector ub = u.segment(o, d);
          Vector wt = b.wbar;
          wt.tail(d - 1) *= -1.0;  // J wbar
          const double dotw = wt.dot(ub);
          Vector res = 2.0 * dotw * wt;
          res(0) -= ub(0);
          res.tail(d - 1) += ub.tail(d - 1);
          out.segment(o, d) = res / (b.eta * b.eta);
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const Matrix um = smat(u.segment(o, b.spec.rows()), b.spec.size);
          Matrix res = b.p_inv * um * b.p_inv;
          res = 0.5 * (res + res.transpose()).eval();
          out.segment(o, b.spec.rows()) = svec(res);
          break;
        }
      }
    }
  }

  /// Largest step alpha with u + alpha du still in the cone (u interior).
  double step_length(const Vector& u, const Vector& du) const {
    double alpha = kInfStep;
    for (const ConeState& b : blocks_) {
      const Index o = b.offset;
      switch (b.spec.kind) {
        case ConeClass::Nonnegative: {
          for (Index i = 0; i < b.spec.size; ++i)
            if (du(o + i) < 0.0) alpha = std::min(alpha, -u(o + i) / du(o + i));
          break;
        }
        case ConeClass::SecondOrder: {
          const Index d = b.spec.size;
          const Vector ub = u.segment(o, d);
          const Vector db = du.segment(o, d);
          const double a = db(0) * db(0) - db.tail(d - 1).squaredNorm();
          const double bq = ub(0) * db(0) - ub.tail(d - 1).dot(db.tail(d - 1));
          const double c = ub(0) * ub(0) - ub.tail(d - 1).squaredNorm();
          if (std::abs(a) < 1e-14 * std::max(1.0, db.squaredNorm())) {
            if (bq < 0.0) alpha = std::min(alpha, -c / (2.0 * bq));
          } else {
            const double disc = bq * bq - a * c;
            if (disc >= 0.0) {
              const double sq = std::sqrt(disc);
              for (const double root : {(-bq - sq) / a, (-bq + sq) / a})
                if (root > 0.0) alpha = std::min(alpha, root);
            }
          }
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const Index d = b.spec.size;
          const Matrix um = smat(u.segment(o, b.spec.rows()), d);
          const Matrix dm = smat(du.segment(o, b.spec.rows()), d);
          Eigen::LLT<Matrix> llt(um);
          if (llt.info() != Eigen::Success) return 0.0;
          const Matrix l = llt.matrixL();
          const Matrix inner = l.triangularView<Eigen::Lower>().solve(
              l.triangularView<Eigen::Lower>().solve(dm).transpose());
          Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
          const double emin = eig.eigenvalues().minCoeff();
          if (emin < 0.0) alpha = std::min(alpha, -1.0 / emin);
          break;
        }
      }
    }
    return alpha;
  }

 private:
  // Wbar u for the second-order cone; flip selects Wbar^{-1}.
  static void soc_apply(const Vector& wbar, const Vector& u, Vector& out, bool flip) {
    const Index d = wbar.size();
    Vector w = wbar;
    if (flip) w.tail(d - 1) *= -1.0;
    const double a = w.tail(d - 1).dot(u.tail(d - 1));
    out.resize(d);
    out(0) = w(0) * u(0) + a;
    out.tail(d - 1) = u.tail(d - 1) + (u(0) + a / (1.0 + w(0))) * w.tail(d - 1);
  }

  std::vector<ConeState> blocks_;
  Vector lam_;
  Index rows_ = 0;
  double degree_ = 0.0;
};

/// KKT solver for [0 A' G'; A 0 0; G 0 -W'W] reduced onto the primal block:
/// M = G'(W'W)^{-1}G, then an equality Schur complement A M^{-1} A'.
class KktSolver {
 public:
  explicit KktSolver(const Problem& p) : prob_(&p) {
    g_row_major_ = p.ineq;
    a_dense_t_ = Matrix(p.eq).transpose();  // n x p
    // Compact column representation for second-order and semidefinite blocks.
    Index off = 0;
    blocks_.resize(p.cones.size());
    Eigen::SparseMatrix<double, Eigen::RowMajor> by_row(p.ineq);
    for (size_t ci = 0; ci < p.cones.size(); ++ci) {
      const ConeSpec& spec = p.cones[ci];
      const Index rows = spec.rows();
      if (spec.kind != ConeClass::Nonnegative) {
        std::vector<char> present(static_cast<size_t>(p.num_vars), 0);
        for (Index r = off; r < off + rows; ++r)
          for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(by_row, r);
               it; ++it)
            present[static_cast<size_t>(it.col())] = 1;
        BlockCols& bc = blocks_[ci];
        for (Index j = 0; j < p.num_vars; ++j)
          if (present[static_cast<size_t>(j)]) bc.cols.push_back(j);
        bc.local = Matrix::Zero(rows, static_cast<Index>(bc.cols.size()));
        std::vector<Index> pos(static_cast<size_t>(p.num_vars), -1);
        for (size_t k = 0; k < bc.cols.size(); ++k)
          pos[static_cast<size_t>(bc.cols[k])] = static_cast<Index>(k);
        for (Index r = off; r < off + rows; ++r)
          for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(by_row, r);
               it; ++it)
            bc.local(r - off, pos[static_cast<size_t>(it.col())]) = it.value();
      }
      off += rows;
    }
    row_major_copy_ = by_row;
  }

  bool factor(const ScaledCones& cones, double reg) {
    const Index n = prob_->num_vars;
    m_mat_.setZero(n, n);
    const auto& blocks = cones.blocks();
    for (size_t ci = 0; ci < blocks.size(); ++ci) {
      const ConeState& st = blocks[ci];
      const Index o = st.offset;
      switch (st.spec.kind) {
        case ConeClass::Nonnegative: {
          for (Index r = o; r < o + st.spec.size; ++r) {
            const double w = st.w_lp(r - o);
            const double coef = 1.0 / (w * w);
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(
                     row_major_copy_, r);
                 it; ++it) {
              Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator jt(
                  row_major_copy_, r);
              for (; jt; ++jt)
                m_mat_(it.col(), jt.col()) += coef * it.value() * jt.value();
            }
          }
          break;
        }
        case ConeClass::SecondOrder: {
          const BlockCols& bc = blocks_[ci];
          const Index k = static_cast<Index>(bc.cols.size());
          if (k == 0) break;
          const Index d = st.spec.size;
          Vector wt = st.wbar;
          wt.tail(d - 1) *= -1.0;
          const Vector q = bc.local.transpose() * wt;
          Matrix local = bc.local.transpose() * bc.local;
          local += 2.0 * q * q.transpose();
          const Vector g0 = bc.local.row(0).transpose();
          local -= 2.0 * g0 * g0.transpose();
          local /= st.eta * st.eta;
          scatter(local, bc.cols);
          break;
        }
        case ConeClass::PositiveSemidefinite: {
          const BlockCols& bc = blocks_[ci];
          const Index k = static_cast<Index>(bc.cols.size());
          if (k == 0) break;
          const Index d = st.spec.size;
          Matrix transformed(st.spec.rows(), k);
          for (Index j = 0; j < k; ++j) {
            const Matrix uj = smat(bc.local.col(j), d);
            Matrix vj = st.p_inv * uj * st.p_inv;
            vj = 0.5 * (vj + vj.transpose()).eval();
            transformed.col(j) = svec(vj);
          }
          const Matrix local = transformed.transpose() * bc.local;
          scatter(0.5 * (local + local.transpose()), bc.cols);
          break;
        }
      }
    }
    m_mat_ = 0.5 * (m_mat_ + m_mat_.transpose()).eval();
    // Per-entry relative regularization: a global factor tied to the largest
    // diagonal entry (which grows like the inverse barrier parameter) would
    // swamp the well-conditioned directions and defeat refinement.
    for (Index i = 0; i < n; ++i)
      m_mat_(i, i) += reg * std::max(1.0, std::abs(m_mat_(i, i)));
    m_llt_.compute(m_mat_);
    if (m_llt_.info() != Eigen::Success) return false;
    const Index p = prob_->eq.rows();
    if (p > 0) {
      const Matrix minv_at = m_llt_.solve(a_dense_t_);
      Matrix s = prob_->eq * minv_at;
      s = 0.5 * (s + s.transpose()).eval();
      for (Index i = 0; i < p; ++i) s(i, i) += reg * std::max(1.0, std::abs(s(i, i)));
      s_llt_.compute(s);
      if (s_llt_.info() != Eigen::Success) return false;
    }
    return true;
  }

  void solve(const ScaledCones& cones, const Vector& bx, const Vector& by,
             const Vector& bz, Vector& dx, Vector& dy, Vector& dz) const {
    solve_once(cones, bx, by, bz, dx, dy, dz);
    // Iterative refinement against the unregularized blocks, kept while the
    // residual still shrinks.
    const double bscale =
        std::max({1.0, bx.cwiseAbs().maxCoeff(),
                  by.size() ? by.cwiseAbs().maxCoeff() : 0.0,
                  bz.cwiseAbs().maxCoeff()});
    Vector w2dz, rx, ry, rz, cx, cy, cz;
    double prev_resid = std::numeric_limits<double>::infinity();
    for (int round = 0; round < 6; ++round) {
      cones.apply_w2(dz, w2dz);
      rx = bx;
      rx.noalias() -= prob_->ineq.transpose() * dz;
      if (prob_->eq.rows() > 0) rx.noalias() -= prob_->eq.transpose() * dy;
      ry = by;
      if (prob_->eq.rows() > 0) ry.noalias() -= prob_->eq * dx;
      rz = bz + w2dz;
      rz.noalias() -= prob_->ineq * dx;
      const double resid = std::max({rx.cwiseAbs().maxCoeff(),
                                     ry.size() ? ry.cwiseAbs().maxCoeff() : 0.0,
                                     rz.cwiseAbs().maxCoeff()});
      if (resid < 1e-14 * bscale || resid >= prev_resid) break;
      prev_resid = resid;
      solve_once(cones, rx, ry, rz, cx, cy, cz);
      dx += cx;
      if (dy.size()) dy += cy;
      dz += cz;
    }
  }

 private:
  void solve_once(const ScaledCones& cones, const Vector& bx, const Vector& by,
                  const Vector& bz, Vector& dx, Vector& dy, Vector& dz) const {
    Vector invw2_bz;
    cones.apply_inv_w2(bz, invw2_bz);
    Vector r1 = bx;
    r1.noalias() += prob_->ineq.transpose() * invw2_bz;
    const Index p = prob_->eq.rows();
    if (p > 0) {
      const Vector minv_r1 = m_llt_.solve(r1);
      Vector rhs_y = prob_->eq * minv_r1 - by;
      dy = s_llt_.solve(rhs_y);
      dx = m_llt_.solve(r1 - a_dense_t_ * dy);
    } else {
      dy.resize(0);
      dx = m_llt_.solve(r1);
    }
    Vector gz = prob_->ineq * dx - bz;
    cones.apply_inv_w2(gz, dz);
  }

  void scatter(const Matrix& local, const std::vector<Index>& cols) {
    const Index k = static_cast<Index>(cols.size());
    for (Index a = 0; a < k; ++a)
      for (Index b = 0; b < k; ++b) m_mat_(cols[a], cols[b]) += local(a, b);
  }

  struct BlockCols {
    std::vector<Index> cols;
    Matrix local;  // cone rows x active columns
  };

  const Problem* prob_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> g_row_major_, row_major_copy_;
  Matrix a_dense_t_;
  std::vector<BlockCols> blocks_;
  Matrix m_mat_;
  Eigen::LLT<Matrix> m_llt_, s_llt_;
};

// Diagonal scalings applied to a problem by `equilibrate`; the original data
// is recovered through the inverse transform.
struct Equilibration {
  Vector row_eq;    // multiplied into the equality rows
  Vector row_ineq;  // multiplied into the cone rows, uniform within each block
  Vector col;       // multiplied into the variable columns
  double cost_scale = 1.0;
};

// Ruiz-style equilibration of the stacked constraint matrix, in place.  Rows
// belonging to one second-order or semidefinite block share a common factor so
// that scaled slacks stay in the same cone.
inline Equilibration equilibrate(Problem& prob, int passes = 10) {
  const Index n = prob.num_vars;
  const Index p = prob.eq.rows();
  const Index m = prob.ineq.rows();
  Equilibration eq;
  eq.row_eq = Vector::Ones(p);
  eq.row_ineq = Vector::Ones(m);
  eq.col = Vector::Ones(n);

  const auto factor_of = [](double norm) {
    if (norm <= 1e-12) return 1.0;  // empty row or column: leave untouched
    return 1.0 / std::sqrt(std::min(std::max(norm, 1e-8), 1e8));
  };
  const auto scale_in_place = [](SparseMatrix& mat, const Vector& row_f,
                                 const Vector& col_f) {
    for (Index k = 0; k < mat.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(mat, k); it; ++it)
        it.valueRef() *= row_f(it.row()) * col_f(it.col());
  };

  for (int pass = 0; pass < passes; ++pass) {
    Vector ra = Vector::Zero(p), rg = Vector::Zero(m), cn = Vector::Zero(n);
    for (Index k = 0; k < prob.eq.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(prob.eq, k); it; ++it) {
        const double a = std::abs(it.value());
        ra(it.row()) = std::max(ra(it.row()), a);
        cn(it.col()) = std::max(cn(it.col()), a);
      }
    for (Index k = 0; k < prob.ineq.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(prob.ineq, k); it; ++it) {
        const double a = std::abs(it.value());
        rg(it.row()) = std::max(rg(it.row()), a);
        cn(it.col()) = std::max(cn(it.col()), a);
      }
    Index off = 0;
    for (const ConeSpec& cone : prob.cones) {
      const Index rows = cone.rows();
      if (cone.kind != ConeClass::Nonnegative) {
        const double mx = rg.segment(off, rows).maxCoeff();
        rg.segment(off, rows).setConstant(mx);
      }
      off += rows;
    }
    Vector da(p), dg(m), e(n);
    for (Index i = 0; i < p; ++i) da(i) = factor_of(ra(i));
    for (Index i = 0; i < m; ++i) dg(i) = factor_of(rg(i));
    for (Index j = 0; j < n; ++j) e(j) = factor_of(cn(j));
    scale_in_place(prob.eq, da, e);
    scale_in_place(prob.ineq, dg, e);
    prob.eq_rhs = prob.eq_rhs.cwiseProduct(da);
    prob.ineq_rhs = prob.ineq_rhs.cwiseProduct(dg);
    prob.cost = prob.cost.cwiseProduct(e);
    eq.row_eq = eq.row_eq.cwiseProduct(da);
    eq.row_ineq = eq.row_ineq.cwiseProduct(dg);
    eq.col = eq.col.cwiseProduct(e);
  }
  eq.cost_scale = 1.0 / std::max(1.0, prob.cost.cwiseAbs().maxCoeff());
  prob.cost *= eq.cost_scale;
  return eq;
}

inline SolveStatus solve_core(const Problem& prob, const Settings& settings,
                              Solution& sol) {
  using namespace ipm_detail;
  prob.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const auto elapsed = [&t_start]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
        .count();
  };

  const Index n = prob.num_vars;
  const Index p = prob.eq.rows();
  const Index m = prob.ineq.rows();
  if (m == 0) throw std::invalid_argument("conic::solve: at least one cone row required");

  ScaledCones cones(prob.cones);
  KktSolver kkt(prob);

  const double resx0 = std::max(1.0, prob.cost.norm());
  const double resy0 = std::max(1.0, prob.eq_rhs.norm());
  const double resz0 = std::max(1.0, prob.ineq_rhs.norm());

  // Initial point from two least-squares style solves with identity scaling.
  cones.set_identity();
  if (!kkt.factor(cones, settings.static_regularization)) return SolveStatus::NumericalFailure;
  Vector x, y, z, s, tmp_y, tmp_z, tmp_x;
  {
    Vector bx = Vector::Zero(n);
    kkt.solve(cones, bx, prob.eq_rhs, prob.ineq_rhs, x, tmp_y, tmp_z);
    s = -tmp_z;
    cones.shift_into_interior(s);
    Vector bz = Vector::Zero(m);
    kkt.solve(cones, -prob.cost, Vector::Zero(p), bz, tmp_x, y, z);
    cones.shift_into_interior(z);
  }
  double tau = 1.0, kappa = 1.0;

  const double deg = cones.degree() + 1.0;
  sol.iterations = 0;

  Vector e_vec;
  cones.identity_vector(e_vec);

  Vector x1, y1, z1, x2, y2, z2;
  Vector dx_a, dy_a, dz_a, ds_a;
  Vector dx, dy, dz, ds;
  Vector ds_target, d3_adj, lam_sq, corr, ws_a, wz_a;

  SolveStatus fail_status = SolveStatus::IterationLimit;

  // Best iterate fallback for non-converged exits.
  double best_merit = std::numeric_limits<double>::infinity();
  Vector bx_best = x, by_best = y, bz_best = z, bs_best = s;
  double btau = tau;
  double best_pres = std::numeric_limits<double>::infinity();
  double best_dres = best_pres, best_gap = best_pres, best_relgap = best_pres;
  double best_pcost = 0.0, best_dcost = 0.0;

  // Best certificates seen so far, kept for reduced-accuracy classification
  // when a run stalls before meeting the strict certificate tolerance.
  double best_cert_infeas = std::numeric_limits<double>::infinity();
  Vector cert_y, cert_z;
  double best_cert_unbounded = std::numeric_limits<double>::infinity();
  Vector cert_x, cert_s;

  for (int iter = 0; iter <= settings.max_iterations; ++iter) {
    sol.iterations = iter;
    // Residuals of the homogeneous embedding.
    Vector rx = prob.ineq.transpose() * z + prob.cost * tau;
    if (p > 0) rx.noalias() += prob.eq.transpose() * y;
    Vector ry(p);
    if (p > 0) ry = prob.eq * x - prob.eq_rhs * tau;
    Vector rz = prob.ineq * x + s - prob.ineq_rhs * tau;
    const double rt = prob.cost.dot(x) + (p > 0 ? prob.eq_rhs.dot(y) : 0.0) +
                      prob.ineq_rhs.dot(z) + kappa;

    const double pcost = prob.cost.dot(x) / tau;
    const double dcost = -((p > 0 ? prob.eq_rhs.dot(y) : 0.0) + prob.ineq_rhs.dot(z)) / tau;
    const double gap = s.dot(z) / (tau * tau);
    const double relgap = gap / std::max(1.0, std::abs(pcost));
    const double pres =
        std::max(p > 0 ? ry.norm() / resy0 : 0.0, rz.norm() / resz0) / tau;
    // Backward-error normalization: when the dual solution is large the
    // attainable absolute residual floor scales with it.
    double dual_scale = tau * resx0;
    dual_scale = std::max(dual_scale, (prob.ineq.transpose() * z).norm());
    if (p > 0) dual_scale = std::max(dual_scale, (prob.eq.transpose() * y).norm());
    const double dres = rx.norm() / dual_scale;

    const double merit = std::max(pres, dres) + relgap;
    if (merit < best_merit) {
      best_merit = merit;
      bx_best = x; by_best = y; bz_best = z; bs_best = s; btau = tau;
      best_pres = pres; best_dres = dres; best_gap = gap; best_relgap = relgap;
      best_pcost = pcost; best_dcost = dcost;
    }

    if (settings.verbose)
      std::printf(
          "it %2d pcost % .6e dcost % .6e gap %.2e pres %.2e dres %.2e tau %.2e "
          "kappa %.2e\n",
          iter, pcost, dcost, gap, pres, dres, tau, kappa);

    if (pres <= settings.feas_tol && dres <= settings.feas_tol &&
        (gap <= settings.gap_abs_tol || relgap <= settings.gap_rel_tol)) {
      sol.x = x / tau;
      sol.y = y / tau;
      sol.z = z / tau;
      sol.s = s / tau;
      sol.primal_cost = pcost;
      sol.dual_cost = dcost;
      sol.gap = gap;
      sol.primal_residual = pres;
      sol.dual_residual = dres;
      sol.solve_seconds = elapsed();
      return SolveStatus::Optimal;
    }

    // Certificates.
    const double hz_by = prob.ineq_rhs.dot(z) + (p > 0 ? prob.eq_rhs.dot(y) : 0.0);
    if (hz_by < 0.0) {
      Vector atgz = prob.ineq.transpose() * z;
      if (p > 0) atgz.noalias() += prob.eq.transpose() * y;
      const double quality = atgz.norm() / resx0 / (-hz_by);
      if (quality < best_cert_infeas) {
        best_cert_infeas = quality;
        cert_y = y / (-hz_by);
        cert_z = z / (-hz_by);
      }
      if (quality <= settings.feas_tol) {
        sol.y = cert_y;
        sol.z = cert_z;
        sol.x = x / tau;
        sol.s = s / tau;
        sol.solve_seconds = elapsed();
        return SolveStatus::Infeasible;
      }
    }
    const double cx = prob.cost.dot(x);
    if (cx < 0.0) {
      const double r1n = p > 0 ? (prob.eq * x).norm() / resy0 : 0.0;
      const double r2n = (prob.ineq * x + s).norm() / resz0;
      const double quality = std::max(r1n, r2n) / (-cx);
      if (quality < best_cert_unbounded) {
        best_cert_unbounded = quality;
        cert_x = x / (-cx);
        cert_s = s / (-cx);
      }
      if (quality <= settings.feas_tol) {
        sol.x = cert_x;
        sol.s = cert_s;
        sol.y = y / tau;
        sol.z = z / tau;
        sol.solve_seconds = elapsed();
        return SolveStatus::Unbounded;
      }
    }

    if (iter == settings.max_iterations) {
      fail_status = SolveStatus::IterationLimit;
      break;
    }
    if (elapsed() > settings.time_limit_seconds) {
      fail_status = SolveStatus::TimeLimit;
      break;
    }

    if (!cones.compute_scaling(s, z)) {
      fail_status = SolveStatus::NumericalFailure;
      break;
    }
    if (!kkt.factor(cones, settings.static_regularization)) {
      fail_status = SolveStatus::NumericalFailure;
      break;
    }
    const double mu = (s.dot(z) + tau * kappa) / deg;
    double dtau_corr = 0.0;

    kkt.solve(cones, -prob.cost, prob.eq_rhs, prob.ineq_rhs, x1, y1, z1);
    const double denom =
        prob.cost.dot(x1) + (p > 0 ? prob.eq_rhs.dot(y1) : 0.0) +
        prob.ineq_rhs.dot(z1) - kappa / tau;
    if (!std::isfinite(denom) || denom >= 0.0) {
      fail_status = SolveStatus::NumericalFailure;
      break;
    }

    const auto compute_direction = [&](double sigma, bool with_corr, Vector& ox,
                                       Vector& oy, Vector& oz, Vector& os,
                                       double& otau, double& okappa) {
      const double one_minus = 1.0 - sigma;
      cones.lambda_sq(lam_sq);
      ds_target = sigma * mu * e_vec - lam_sq;
      double d6 = sigma * mu - tau * kappa;
      if (with_corr) {
        cones.jordan_prod(ws_a, wz_a, corr);
        ds_target -= corr;
        d6 -= dtau_corr;
      }
      Vector lam_ds = ds_target;
      cones.lambda_solve(lam_ds);
      Vector wt_lam_ds;
      cones.apply(ScaledCones::Op::Wt, lam_ds, wt_lam_ds);
      d3_adj = -one_minus * rz - wt_lam_ds;
      kkt.solve(cones, -one_minus * rx, p > 0 ? Vector(-one_minus * ry) : Vector(0),
                d3_adj, x2, y2, z2);
      const double d4 = -one_minus * rt;
      const double numer = d4 - d6 / tau -
                           (prob.cost.dot(x2) + (p > 0 ? prob.eq_rhs.dot(y2) : 0.0) +
                            prob.ineq_rhs.dot(z2));
      otau = numer / denom;
      ox = x2 + otau * x1;
      if (p > 0) oy = y2 + otau * y1; else oy.resize(0);
      oz = z2 + otau * z1;
      Vector w2_dz;
      cones.apply_w2(oz, w2_dz);
      os = wt_lam_ds - w2_dz;
      okappa = (d6 - kappa * otau) / tau;
    };

    // Affine (predictor) direction.
    double dtau_a, dkappa_a;
    compute_direction(0.0, false, dx_a, dy_a, dz_a, ds_a, dtau_a, dkappa_a);
    double alpha_a = std::min(cones.step_length(s, ds_a), cones.step_length(z, dz_a));
    if (dtau_a < 0.0) alpha_a = std::min(alpha_a, -tau / dtau_a);
    if (dkappa_a < 0.0) alpha_a = std::min(alpha_a, -kappa / dkappa_a);
    alpha_a = std::min(alpha_a, 1.0);
    const double sigma = std::pow(1.0 - alpha_a, 3.0);

    // Corrector uses the scaled affine products.
    cones.apply(ScaledCones::Op::Winvt, ds_a, ws_a);
    cones.apply(ScaledCones::Op::W, dz_a, wz_a);
    dtau_corr = dtau_a * dkappa_a;

    double dtau, dkappa;
    compute_direction(sigma, true, dx, dy, dz, ds, dtau, dkappa);

    double alpha = std::min(cones.step_length(s, ds), cones.step_length(z, dz));
    if (dtau < 0.0) alpha = std::min(alpha, -tau / dtau);
    if (dkappa < 0.0) alpha = std::min(alpha, -kappa / dkappa);
    alpha = std::min(1.0, settings.step_fraction * alpha);
    if (!std::isfinite(alpha) || alpha < 1e-10) {
      fail_status = SolveStatus::NumericalFailure;
      break;
    }

    x += alpha * dx;
    if (p > 0) y += alpha * dy;
    z += alpha * dz;
    s += alpha * ds;
    tau += alpha * dtau;
    kappa += alpha * dkappa;
    if (tau <= 0.0 || kappa <= 0.0) {
      fail_status = SolveStatus::NumericalFailure;
      break;
    }
  }

  sol.x = bx_best / btau;
  sol.y = by_best / btau;
  sol.z = bz_best / btau;
  sol.s = bs_best / btau;
  sol.primal_cost = best_pcost;
  sol.dual_cost = best_dcost;
  sol.gap = best_gap;
  sol.primal_residual = best_pres;
  sol.dual_residual = best_dres;
  sol.solve_seconds = elapsed();
  if (best_pres <= settings.reduced_feas_tol && best_dres <= settings.reduced_feas_tol &&
      (best_gap <= settings.reduced_gap_tol || best_relgap <= settings.reduced_gap_tol)) {
    sol.inaccurate = true;
    return SolveStatus::Optimal;
  }
  if (best_cert_infeas <= settings.reduced_feas_tol) {
    sol.y = cert_y;
    sol.z = cert_z;
    sol.inaccurate = true;
    return SolveStatus::Infeasible;
  }
  if (best_cert_unbounded <= settings.reduced_feas_tol) {
    sol.x = cert_x;
    sol.s = cert_s;
    sol.inaccurate = true;
    return SolveStatus::Unbounded;
  }
  return fail_status;
}

}  // namespace ipm_detail

inline SolveStatus solve(const Problem& prob, const Settings& settings, Solution& sol) {
  Problem scaled = prob;
  const ipm_detail::Equilibration eq = ipm_detail::equilibrate(scaled);
  const SolveStatus status = ipm_detail::solve_core(scaled, settings, sol);

  // Map the returned point or certificate back to the original units.  With
  // row scalings D, column scaling E and cost scaling c_s, the scaled problem
  // reads min (c_s E c)'xh  s.t. (D_a A E) xh = D_a b, (D_g G E) xh + sh = D_g h,
  // so x = E xh, s = D_g^{-1} sh, y = D_a yh / c_s, z = D_g zh / c_s.  An
  // infeasibility certificate keeps its normalization h'z + b'y = -1 when the
  // cost scaling is dropped.
  sol.x = sol.x.cwiseProduct(eq.col);
  sol.s = sol.s.cwiseQuotient(eq.row_ineq);
  const double dual_factor =
      status == SolveStatus::Infeasible ? 1.0 : 1.0 / eq.cost_scale;
  if (sol.y.size() == prob.eq.rows())
    sol.y = sol.y.cwiseProduct(eq.row_eq) * dual_factor;
  sol.z = sol.z.cwiseProduct(eq.row_ineq) * dual_factor;

  if (status != SolveStatus::Infeasible && status != SolveStatus::Unbounded) {
    const double bn = std::max(1.0, prob.eq_rhs.norm());
    const double hn = std::max(1.0, prob.ineq_rhs.norm());
    const double cnorm = std::max(1.0, prob.cost.norm());
    Vector rdual = prob.ineq.transpose() * sol.z + prob.cost;
    double pres_eq = 0.0;
    if (prob.eq.rows() > 0) {
      rdual.noalias() += prob.eq.transpose() * sol.y;
      pres_eq = (prob.eq * sol.x - prob.eq_rhs).norm() / bn;
    }
    sol.primal_cost = prob.cost.dot(sol.x);
    sol.dual_cost = -((prob.eq.rows() > 0 ? prob.eq_rhs.dot(sol.y) : 0.0) +
                      prob.ineq_rhs.dot(sol.z));
    sol.gap = std::abs(sol.s.dot(sol.z));
    sol.primal_residual =
        std::max(pres_eq, (prob.ineq * sol.x + sol.s - prob.ineq_rhs).norm() / hn);
    double dual_scale = std::max(cnorm, (prob.ineq.transpose() * sol.z).norm());
    if (prob.eq.rows() > 0)
      dual_scale = std::max(dual_scale, (prob.eq.transpose() * sol.y).norm());
    sol.dual_residual = rdual.norm() / dual_scale;
  }
  return status;
}

}  // namespace etmpc::conic
