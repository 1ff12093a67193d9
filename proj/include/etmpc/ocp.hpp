#pragma once

// Assembly of the per-iteration tube optimal control problem as a conic
// program: tube dynamics and scaling recursion, tightened state/input rows,
// the terminal block, and a single rotated-cone objective epigraph, plus
// solving through the pluggable conic-solver interface and solution
// extraction.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <etmpc/geometry.hpp>
#include <etmpc/linearize.hpp>
#include <etmpc/program.hpp>
#include <etmpc/terminal.hpp>

namespace etmpc {

// ---------------------------------------------------------------------------
// Inputs and layout
// ---------------------------------------------------------------------------

/// Constraint sets of the control problem.  An empty system (zero rows) for
/// the perturbation set marks it unbounded, in which case no rows are emitted.
struct OcpSets {
  HPolytope state_set;  // contains x0_k + z_k + E(V, beta_k^2)
  HPolytope input_set;  // contains K(x0_k + z_k + E) + v0_k + v_k
  HPolytope s_set;      // linearization validity: contains z_k + E(V, beta_k^2)
  HPolytope v_set;      // contains v0_k + v_k when bounded
};

/// Variable offsets of an assembled problem, used for extraction and tests.
struct OcpLayout {
  Index horizon = 0;  // N
  Index state_dim = 0;
  Index input_dim = 0;
  Index z_offset = 0;     // (N+1) blocks of state_dim
  Index v_offset = 0;     // N blocks of input_dim
  Index beta_offset = 0;  // beta_0..beta_N
  Index aux_offset = 0;   // one shared recursion auxiliary per step
  Index l_offset = 0;     // l_0..l_N
  Index objective_var = 0;
  TerminalBlock terminal;
};

struct AssembledOcp {
  ConicProgram program;
  OcpLayout layout;
};

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

namespace ocp_detail {

inline Matrix cholesky_sqrt(const Matrix& m, const char* name) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument(std::string("assemble_ocp: weight ") + name +
                                " must be symmetric positive definite");
  return Matrix(llt.matrixL()).transpose();  // m = L L^T, |L^T x|^2 = x^T m x
}

}  // namespace ocp_detail

inline AssembledOcp assemble_ocp(const NominalTrajectory& traj,
                                 const std::vector<StepLinearization>& lin,
                                 const Vector& x_plant, const TerminalDesign& design,
                                 const TerminalOnline& online, const OcpSets& sets,
                                 const Matrix& q, const Matrix& r,
                                 std::optional<double> decrease_bound = std::nullopt) {
  const Index horizon = static_cast<Index>(lin.size());
  if (horizon == 0) throw std::invalid_argument("assemble_ocp: empty horizon");
  if (traj.horizon() != horizon)
    throw std::invalid_argument(
        "assemble_ocp: trajectory and linearization horizons disagree");
  const Index n_x = static_cast<Index>(traj.x0.front().size());
  const Index n_u = static_cast<Index>(traj.v0.front().size());
  if (x_plant.size() != n_x)
    throw std::invalid_argument("assemble_ocp: plant state dimension mismatch");
  if (design.v.dim() != n_x || design.k.rows() != n_u || design.k.cols() != n_x)
    throw std::invalid_argument("assemble_ocp: terminal design dimension mismatch");
  if (sets.state_set.dim() != n_x || sets.input_set.dim() != n_u ||
      sets.s_set.dim() != n_x || (sets.v_set.rows() > 0 && sets.v_set.dim() != n_u))
    throw std::invalid_argument("assemble_ocp: constraint set dimension mismatch");
  for (Index k = 0; k < horizon; ++k) {
    const StepLinearization& step = lin[static_cast<size_t>(k)];
    if (!std::isfinite(step.lambda))
      throw std::invalid_argument("assemble_ocp: contraction factor missing at step " +
                                  std::to_string(k));
    if (!step.phi.allFinite() || !step.b.allFinite())
      throw std::invalid_argument("assemble_ocp: non-finite linearization at step " +
                                  std::to_string(k));
  }

  const Matrix q_sqrt = ocp_detail::cholesky_sqrt(q, "Q");
  const Matrix r_sqrt = ocp_detail::cholesky_sqrt(r, "R");
  const Matrix& v_sqrt = design.v.sqrt_factor();
  const Matrix& k_gain = design.k;

  AssembledOcp out;
  ConicProgram& prog = out.program;
  OcpLayout& lay = out.layout;
  lay.horizon = horizon;
  lay.state_dim = n_x;
  lay.input_dim = n_u;
  lay.z_offset = prog.add_variables("z", (horizon + 1) * n_x);
  lay.v_offset = prog.add_variables("v", horizon * n_u);
  lay.beta_offset = prog.add_variables("beta", horizon + 1);
  lay.aux_offset = prog.add_variables("recursion_aux", horizon);
  lay.l_offset = prog.add_variables("l", horizon + 1);
  lay.objective_var = prog.add_variables("j_bar", 1);

  const auto z_at = [&](Index k) { return lay.z_offset + k * n_x; };
  const auto v_at = [&](Index k) { return lay.v_offset + k * n_u; };

  // Initial tube cross section covers the plant state.
  {
    std::vector<LinearExpr> tail =
        affine_map(v_sqrt, z_at(0), Vector(v_sqrt * (traj.x0.front() - x_plant)));
    prog.add_second_order(ex(lay.beta_offset), tail);
  }

  for (Index k = 0; k < horizon; ++k) {
    const StepLinearization& step = lin[static_cast<size_t>(k)];
    const Vector& x0_k = traj.x0[static_cast<size_t>(k)];
    const Vector& v0_k = traj.v0[static_cast<size_t>(k)];

    // Dynamics of the tube centers.
    {
      std::vector<LinearExpr> rows = affine_map(Matrix(-step.phi), z_at(k));
      accumulate_map(rows, Matrix(-step.b), v_at(k));
      accumulate_map(rows, Matrix::Identity(n_x, n_x), z_at(k + 1));
      for (LinearExpr& row : rows) prog.add_equality(row);
    }

    // Scaling recursion, split through one shared auxiliary:
    // aux_k >= ||(sqrt(lambda_k) beta_k, sigma)|| and, per uncertainty vertex
    // pair, beta_{k+1} - aux_k >= ||C z_k + D v_k + delta0||_V.
    {
      std::vector<LinearExpr> tail;
      tail.push_back(std::sqrt(std::max(0.0, step.lambda)) * ex(lay.beta_offset + k));
      tail.push_back(LinearExpr(design.sigma));
      prog.add_second_order(ex(lay.aux_offset + k), tail);
    }
    for (const JacobianDeviation& dev : step.cd) {
      const Matrix cz = v_sqrt * dev.c;
      const bool has_d = dev.d.size() > 0 && !dev.d.isZero(0.0);
      const Matrix dz = has_d ? Matrix(v_sqrt * dev.d) : Matrix();
      for (const Vector& d0 : step.delta0) {
        std::vector<LinearExpr> tail = affine_map(cz, z_at(k), Vector(v_sqrt * d0));
        if (has_d) accumulate_map(tail, dz, v_at(k));
        prog.add_second_order(
            ex(lay.beta_offset + k + 1) - ex(lay.aux_offset + k), tail);
      }
    }

    // Stage cost epigraph with the cross-section inflation.
    {
      std::vector<LinearExpr> tail =
          affine_map(q_sqrt, z_at(k), Vector(q_sqrt * x0_k));
      std::vector<LinearExpr> input_rows =
          affine_map(Matrix(r_sqrt * k_gain), z_at(k),
                     Vector(r_sqrt * (k_gain * x0_k + v0_k)));
      accumulate_map(input_rows, r_sqrt, v_at(k));
      tail.insert(tail.end(), input_rows.begin(), input_rows.end());
      prog.add_second_order(
          ex(lay.l_offset + k) - design.kappa * ex(lay.beta_offset + k), tail);
    }

    // State rows tightened against the cross section.
    for (Index i = 0; i < sets.state_set.rows(); ++i) {
      const Vector hrow = sets.state_set.H.row(i).transpose();
      const TightenedHalfspace t =
          tighten_halfspace(hrow, sets.state_set.h(i), design.v);
      LinearExpr e(t.offset - hrow.dot(x0_k));
      for (Index c = 0; c < n_x; ++c)
        if (hrow(c) != 0.0) e.add_term(z_at(k) + c, -hrow(c));
      e -= t.beta_coeff * ex(lay.beta_offset + k);
      prog.add_nonnegative(e);
    }

    // Input rows: the feedback part sweeps the cross section.
    for (Index i = 0; i < sets.input_set.rows(); ++i) {
      const Vector grow = sets.input_set.H.row(i).transpose();
      const Vector zrow = k_gain.transpose() * grow;
      const TightenedHalfspace t =
          tighten_halfspace(zrow, sets.input_set.h(i), design.v);
      LinearExpr e(t.offset - zrow.dot(x0_k) - grow.dot(v0_k));
      for (Index c = 0; c < n_x; ++c)
        if (zrow(c) != 0.0) e.add_term(z_at(k) + c, -zrow(c));
      for (Index c = 0; c < n_u; ++c)
        if (grow(c) != 0.0) e.add_term(v_at(k) + c, -grow(c));
      e -= t.beta_coeff * ex(lay.beta_offset + k);
      prog.add_nonnegative(e);
    }

    // Linearization validity rows on the deviation tube alone.
    for (Index i = 0; i < sets.s_set.rows(); ++i) {
      const Vector hrow = sets.s_set.H.row(i).transpose();
      const TightenedHalfspace t = tighten_halfspace(hrow, sets.s_set.h(i), design.v);
      LinearExpr e(t.offset);
      for (Index c = 0; c < n_x; ++c)
        if (hrow(c) != 0.0) e.add_term(z_at(k) + c, -hrow(c));
      e -= t.beta_coeff * ex(lay.beta_offset + k);
      prog.add_nonnegative(e);
    }

    // Perturbation bounds (exact, no sweep) when the set is bounded.
    for (Index i = 0; i < sets.v_set.rows(); ++i) {
      const Vector grow = sets.v_set.H.row(i).transpose();
      LinearExpr e(sets.v_set.h(i) - grow.dot(v0_k));
      for (Index c = 0; c < n_u; ++c)
        if (grow(c) != 0.0) e.add_term(v_at(k) + c, -grow(c));
      prog.add_nonnegative(e);
    }
  }

  lay.terminal = emit_terminal_constraints(traj.x0.back(), design, online, prog,
                                           z_at(horizon), lay.beta_offset + horizon,
                                           lay.l_offset + horizon);

  // Objective epigraph: one rotated cone j_bar >= sum of squared stage terms,
  // so decrease bounds stay affine in j_bar.
  {
    std::vector<LinearExpr> l_terms;
    l_terms.reserve(static_cast<size_t>(horizon) + 1);
    for (Index k = 0; k <= horizon; ++k) l_terms.push_back(ex(lay.l_offset + k));
    prog.add_rotated(ex(lay.objective_var), LinearExpr(0.5), l_terms);
    prog.set_objective_coefficient(lay.objective_var, 1.0);
  }

  if (decrease_bound.has_value())
    prog.add_nonnegative(LinearExpr(*decrease_bound) - ex(lay.objective_var));

  return out;
}

// ---------------------------------------------------------------------------
// Solving and extraction
// ---------------------------------------------------------------------------

struct MPCSolution {
  std::vector<Vector> v_star;  // horizon entries
  std::vector<Vector> z_star;  // horizon + 1 entries
  Vector beta_star;            // beta_0..beta_N then the terminal extension
  Vector l_star;               // l_0..l_N
  double j_bar = 0.0;
};

enum class OcpStatus { kOptimal, kInfeasible, kNumericalFailure };

inline const char* to_string(OcpStatus s) {
  switch (s) {
    case OcpStatus::kOptimal: return "optimal";
    case OcpStatus::kInfeasible: return "infeasible";
    case OcpStatus::kNumericalFailure: return "numerical_failure";
  }
  return "unknown";
}

struct OcpResult {
  OcpStatus status = OcpStatus::kNumericalFailure;
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double gap = 0.0;
  std::optional<MPCSolution> solution;
};

inline MPCSolution extract_solution(const AssembledOcp& ocp, const conic::Solution& sol) {
  const OcpLayout& lay = ocp.layout;
  MPCSolution out;
  out.z_star.reserve(static_cast<size_t>(lay.horizon) + 1);
  for (Index k = 0; k <= lay.horizon; ++k)
    out.z_star.push_back(sol.x.segment(lay.z_offset + k * lay.state_dim, lay.state_dim));
  out.v_star.reserve(static_cast<size_t>(lay.horizon));
  for (Index k = 0; k < lay.horizon; ++k)
    out.v_star.push_back(sol.x.segment(lay.v_offset + k * lay.input_dim, lay.input_dim));
  const Index n_hat = lay.terminal.variables_added / 2 - 1;
  out.beta_star.resize(lay.horizon + 1 + n_hat);
  out.beta_star.head(lay.horizon + 1) = sol.x.segment(lay.beta_offset, lay.horizon + 1);
  out.beta_star.tail(n_hat) = sol.x.segment(lay.terminal.beta_offset, n_hat);
  out.l_star = sol.x.segment(lay.l_offset, lay.horizon + 1);
  out.j_bar = sol.x(lay.objective_var);
  return out;
}

inline OcpResult solve_ocp(const AssembledOcp& ocp, ConicSolverInterface& solver,
                           const conic::Settings& settings = {}) {
  conic::Solution sol;
  const conic::SolveStatus raw = solver.solve(ocp.program.build(), settings, sol);
  OcpResult out;
  out.iterations = sol.iterations;
  out.primal_residual = sol.primal_residual;
  out.dual_residual = sol.dual_residual;
  out.gap = sol.gap;
  switch (raw) {
    case conic::SolveStatus::Optimal:
      out.status = OcpStatus::kOptimal;
      out.solution = extract_solution(ocp, sol);
      break;
    case conic::SolveStatus::Infeasible:
      out.status = OcpStatus::kInfeasible;
      break;
    default:
      out.status = OcpStatus::kNumericalFailure;
      break;
  }
  return out;
}

}  // namespace etmpc
