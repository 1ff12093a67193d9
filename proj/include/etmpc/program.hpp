#pragma once

// Structured builder for conic optimization problems. Callers describe the
// problem with named variable blocks and affine expressions; the builder
// groups constraints by cone class, lowers rotated second-order cones to
// plain ones, and emits the standard-form data consumed by the solver in
// ipm.hpp. It also reports structural counts (used by the scaling study) and
// a plain-text export of the assembled program.

#include <algorithm>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <etmpc/conic.hpp>
#include <etmpc/ipm.hpp>

namespace etmpc {

/// Sparse affine expression c0 + sum_i coeff_i * x_i.
struct LinearExpr {
  std::vector<std::pair<Index, double>> terms;
  double constant = 0.0;

  LinearExpr() = default;
  explicit LinearExpr(double c) : constant(c) {}

  LinearExpr& add_term(Index var, double coeff) {
    terms.emplace_back(var, coeff);
    return *this;
  }

  LinearExpr& operator+=(const LinearExpr& other) {
    terms.insert(terms.end(), other.terms.begin(), other.terms.end());
    constant += other.constant;
    return *this;
  }

  LinearExpr& operator-=(const LinearExpr& other) {
    for (const auto& [v, c] : other.terms) terms.emplace_back(v, -c);
    constant -= other.constant;
    return *this;
  }

  LinearExpr& operator*=(double a) {
    for (auto& [v, c] : terms) c *= a;
    constant *= a;
    return *this;
  }
};

inline LinearExpr ex(Index var, double coeff = 1.0) {
  LinearExpr e;
  e.add_term(var, coeff);
  return e;
}

inline LinearExpr operator+(LinearExpr a, const LinearExpr& b) { return a += b; }
inline LinearExpr operator-(LinearExpr a, const LinearExpr& b) { return a -= b; }
inline LinearExpr operator*(double a, LinearExpr e) { return e *= a; }
inline LinearExpr operator-(LinearExpr e) { return e *= -1.0; }

/// Rows of coeffs * x_block (x_block contiguous starting at var_offset) plus
/// an optional constant vector.
inline std::vector<LinearExpr> affine_map(const Matrix& coeffs, Index var_offset,
                                          const Vector& constants = Vector()) {
  std::vector<LinearExpr> rows(static_cast<size_t>(coeffs.rows()));
  for (Index i = 0; i < coeffs.rows(); ++i) {
    LinearExpr& e = rows[static_cast<size_t>(i)];
    if (constants.size() > 0) e.constant = constants(i);
    for (Index j = 0; j < coeffs.cols(); ++j)
      if (coeffs(i, j) != 0.0) e.add_term(var_offset + j, coeffs(i, j));
  }
  return rows;
}

/// rows += coeffs * x_block for a second contiguous variable block.
inline void accumulate_map(std::vector<LinearExpr>& rows, const Matrix& coeffs,
                           Index var_offset) {
  if (static_cast<Index>(rows.size()) != coeffs.rows())
    throw std::invalid_argument("accumulate_map: row count mismatch");
  for (Index i = 0; i < coeffs.rows(); ++i)
    for (Index j = 0; j < coeffs.cols(); ++j)
      if (coeffs(i, j) != 0.0)
        rows[static_cast<size_t>(i)].add_term(var_offset + j, coeffs(i, j));
}

struct ProgramCounts {
  Index variables = 0;
  Index equality_rows = 0;
  Index inequality_rows = 0;       // scalar nonnegativity rows
  Index second_order_cones = 0;    // includes lowered rotated cones
  Index semidefinite_blocks = 0;
};

class ConicProgram {
 public:
  /// Contiguous block of fresh variables; returns the offset of the first.
  Index add_variables(const std::string& name, Index count) {
    if (count <= 0) throw std::invalid_argument("add_variables: count must be positive");
    const Index off = num_vars_;
    var_blocks_.emplace_back(name, off, count);
    num_vars_ += count;
    return off;
  }

  Index num_variables() const { return num_vars_; }

  void set_objective_coefficient(Index var, double coeff) {
    objective_.emplace_back(var, coeff);
  }

  /// expr == 0.
  void add_equality(const LinearExpr& e) {
    for (const auto& [v, c] : e.terms) eq_triplets_.emplace_back(num_eq_rows_, v, c);
    eq_rhs_.push_back(-e.constant);
    ++num_eq_rows_;
  }

  /// expr >= 0.
  void add_nonnegative(const LinearExpr& e) { nonneg_rows_.push_back(e); }

  /// head >= || (tail_1, ..., tail_d) ||_2.
  void add_second_order(const LinearExpr& head, const std::vector<LinearExpr>& tail) {
    std::vector<LinearExpr> rows;
    rows.reserve(tail.size() + 1);
    rows.push_back(head);
    rows.insert(rows.end(), tail.begin(), tail.end());
    soc_blocks_.push_back(std::move(rows));
  }

  /// 2 a b >= ||u||^2 with a, b >= 0, expressed as one second-order cone with
  /// rows ((a+b)/sqrt2, (a-b)/sqrt2, u).
  void add_rotated(const LinearExpr& a, const LinearExpr& b,
                   const std::vector<LinearExpr>& u) {
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    std::vector<LinearExpr> tail;
    tail.reserve(u.size() + 1);
    tail.push_back(inv_sqrt2 * (a - b));
    tail.insert(tail.end(), u.begin(), u.end());
    add_second_order(inv_sqrt2 * (a + b), tail);
  }

  /// f0 + sum_i x_{vars[i]} * coeff_mats[i] is positive semidefinite. All
  /// matrices must be symmetric with the same side length.
  void add_semidefinite(const std::vector<std::pair<Index, Matrix>>& terms,
                        const Matrix& f0) {
    const Index d = f0.rows();
    if (f0.cols() != d) throw std::invalid_argument("add_semidefinite: f0 not square");
    for (const auto& [var, mat] : terms) {
      if (mat.rows() != d || mat.cols() != d)
        throw std::invalid_argument("add_semidefinite: coefficient size mismatch");
      (void)var;
    }
    psd_blocks_.push_back(PsdBlock{terms, f0});
  }

  ProgramCounts counts() const {
    ProgramCounts c;
    c.variables = num_vars_;
    c.equality_rows = num_eq_rows_;
    c.inequality_rows = static_cast<Index>(nonneg_rows_.size());
    c.second_order_cones = static_cast<Index>(soc_blocks_.size());
    c.semidefinite_blocks = static_cast<Index>(psd_blocks_.size());
    return c;
  }

  /// Lower to the standard form min c'x s.t. Ax = b, Gx + s = h, s in K.
  conic::Problem build() const {
    conic::Problem p;
    p.num_vars = num_vars_;
    p.cost = Vector::Zero(num_vars_);
    for (const auto& [v, c] : objective_) p.cost(v) += c;

    p.eq.resize(num_eq_rows_, num_vars_);
    p.eq.setFromTriplets(eq_triplets_.begin(), eq_triplets_.end());
    p.eq_rhs = Eigen::Map<const Vector>(eq_rhs_.data(), num_eq_rows_);

    Index cone_rows = static_cast<Index>(nonneg_rows_.size());
    for (const auto& blk : soc_blocks_) cone_rows += static_cast<Index>(blk.size());
    for (const auto& blk : psd_blocks_)
      cone_rows += conic::svec_size(blk.f0.rows());

    std::vector<Eigen::Triplet<double>> trips;
    Vector h = Vector::Zero(cone_rows);
    Index row = 0;
    const auto emit_expr = [&](const LinearExpr& e) {
      // s_row = e(x): G row holds -coeffs, h holds the constant.
      for (const auto& [v, c] : e.terms) trips.emplace_back(row, v, -c);
      h(row) = e.constant;
      ++row;
    };

    if (!nonneg_rows_.empty()) {
      p.cones.push_back({conic::ConeClass::Nonnegative,
                         static_cast<Index>(nonneg_rows_.size())});
      for (const auto& e : nonneg_rows_) emit_expr(e);
    }
    for (const auto& blk : soc_blocks_) {
      p.cones.push_back({conic::ConeClass::SecondOrder, static_cast<Index>(blk.size())});
      for (const auto& e : blk) emit_expr(e);
    }
    for (const auto& blk : psd_blocks_) {
      const Index d = blk.f0.rows();
      p.cones.push_back({conic::ConeClass::PositiveSemidefinite, d});
      const Index base = row;
      const Vector h0 = conic::svec(Matrix(0.5 * (blk.f0 + blk.f0.transpose())));
      for (Index k = 0; k < h0.size(); ++k) h(base + k) = h0(k);
      for (const auto& [var, mat] : blk.terms) {
        const Vector col = conic::svec(Matrix(0.5 * (mat + mat.transpose())));
        for (Index k = 0; k < col.size(); ++k)
          if (col(k) != 0.0) trips.emplace_back(base + k, var, -col(k));
      }
      row += h0.size();
    }

    p.ineq.resize(cone_rows, num_vars_);
    p.ineq.setFromTriplets(trips.begin(), trips.end());
    p.ineq_rhs = h;
    p.validate();
    return p;
  }

 private:
  struct PsdBlock {
    std::vector<std::pair<Index, Matrix>> terms;
    Matrix f0;
  };

  Index num_vars_ = 0;
  std::vector<std::tuple<std::string, Index, Index>> var_blocks_;
  std::vector<std::pair<Index, double>> objective_;
  std::vector<Eigen::Triplet<double>> eq_triplets_;
  std::vector<double> eq_rhs_;
  Index num_eq_rows_ = 0;
  std::vector<LinearExpr> nonneg_rows_;
  std::vector<std::vector<LinearExpr>> soc_blocks_;
  std::vector<PsdBlock> psd_blocks_;
};

/// Plain-text dump of a standard-form problem: dimensions, cone list, then
/// the objective and both constraint matrices as sorted (row, col, value)
/// triples alongside their right-hand sides.
inline void write_program_text(const conic::Problem& p, std::ostream& os) {
  os << "conic_program 1\n";
  os << "dims " << p.num_vars << " " << p.eq.rows() << " " << p.ineq.rows() << "\n";
  os << "cones " << p.cones.size() << "\n";
  for (const auto& c : p.cones) {
    switch (c.kind) {
      case conic::ConeClass::Nonnegative: os << "nonneg " << c.size << "\n"; break;
      case conic::ConeClass::SecondOrder: os << "soc " << c.size << "\n"; break;
      case conic::ConeClass::PositiveSemidefinite: os << "psd " << c.size << "\n"; break;
    }
  }
  const auto dump_sparse = [&os](const char* tag, const conic::SparseMatrix& m) {
    std::vector<std::tuple<Index, Index, double>> trips;
    for (Index k = 0; k < m.outerSize(); ++k)
      for (conic::SparseMatrix::InnerIterator it(m, k); it; ++it)
        trips.emplace_back(it.row(), it.col(), it.value());
    std::sort(trips.begin(), trips.end(),
              [](const auto& a, const auto& b) {
                return std::tie(std::get<0>(a), std::get<1>(a)) <
                       std::tie(std::get<0>(b), std::get<1>(b));
              });
    os << tag << " " << trips.size() << "\n";
    for (const auto& [r, c, v] : trips) os << r << " " << c << " " << v << "\n";
  };
  os << "objective " << p.cost.size() << "\n";
  for (Index i = 0; i < p.cost.size(); ++i) os << p.cost(i) << "\n";
  dump_sparse("equality_matrix", p.eq);
  os << "equality_rhs " << p.eq_rhs.size() << "\n";
  for (Index i = 0; i < p.eq_rhs.size(); ++i) os << p.eq_rhs(i) << "\n";
  dump_sparse("cone_matrix", p.ineq);
  os << "cone_rhs " << p.ineq_rhs.size() << "\n";
  for (Index i = 0; i < p.ineq_rhs.size(); ++i) os << p.ineq_rhs(i) << "\n";
}

/// Pluggable solver boundary so closed-loop code can be driven by a stub in
/// tests (e.g. to force failure paths).
class ConicSolverInterface {
 public:
  virtual ~ConicSolverInterface() = default;
  virtual conic::SolveStatus solve(const conic::Problem& problem,
                                   const conic::Settings& settings,
                                   conic::Solution& solution) = 0;
};

class IpmSolver final : public ConicSolverInterface {
 public:
  conic::SolveStatus solve(const conic::Problem& problem, const conic::Settings& settings,
                           conic::Solution& solution) override {
    return conic::solve(problem, settings, solution);
  }
};

}  // namespace etmpc
