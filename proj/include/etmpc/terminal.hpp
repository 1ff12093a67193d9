#pragma once

// Offline terminal design and online terminal quantities for the tube
// controller: a linear difference inclusion (LDI) valid near the origin, the
// semidefinite program that fixes the tube shape V, terminal gain K and
// noise-to-cost level sigma, the scalar constants driving the terminal
// recursions, the terminal set for (||z_N||_V, beta_N), the horizon-extension
// length, and the terminal cost block of the conic program.

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include <etmpc/geometry.hpp>
#include <etmpc/model.hpp>
#include <etmpc/program.hpp>

namespace etmpc {

// ---------------------------------------------------------------------------
// Linear difference inclusion
// ---------------------------------------------------------------------------

/// Convex hull bound on the closed-loop Jacobians of f over a validity region
/// X_hat x U_hat and the initial parameter set.  Two representations:
///  - exact == true: the hull of the explicit vertex pairs (a_hat, b_hat)
///    contains every Jacobian pair (tight corner enumeration);
///  - exact == false: only the structured box form is available, i.e. the
///    state Jacobian lies in a0 + sum_i D_i * radii(i) * e_{rows_i} e_{cols_i}'
///    with |D_i| <= 1, and the input Jacobian equals b0.  Used when the corner
///    count is intractable; the box hull is a superset of the exact hull.
struct LdiModel {
  Matrix a0, b0;
  std::vector<Index> rows;  // state coordinate written by each uncertain entry
  std::vector<Index> cols;  // state coordinate read by each uncertain entry
  Vector radii;
  std::vector<Matrix> a_hat, b_hat;
  bool exact = false;
  HPolytope x_hat, u_hat;

  Index num_vertices() const { return static_cast<Index>(a_hat.size()); }
  Index num_uncertain_entries() const { return static_cast<Index>(rows.size()); }
};

/// Largest explicit vertex count materialized by build_ldi; beyond this the
/// structured box form alone is kept and the SDP switches to a multiplier
/// formulation.
inline constexpr Index kMaxExplicitLdiVertices = 512;

inline LdiModel build_ldi(const BasisModel& model, const ParamSimplex& theta_set,
                          const HPolytope& x_hat, const HPolytope& u_hat) {
  const auto* quad = dynamic_cast<const QuadraticBasisModel*>(&model);
  if (quad == nullptr)
    throw std::invalid_argument(
        "build_ldi: model does not expose Jacobian bounds over a region");
  if (!x_hat.is_axis_box())
    throw std::invalid_argument("build_ldi: state validity region must be an axis box");
  const Index n_x = model.state_dim();
  const Index n_theta = model.param_dim();

  LdiModel ldi;
  ldi.a0 = quad->a();
  ldi.b0 = quad->b();
  ldi.x_hat = x_hat;
  ldi.u_hat = u_hat;

  if (n_theta == 0) {
    ldi.radii = Vector::Zero(0);
    ldi.a_hat = {quad->a()};
    ldi.b_hat = {quad->b()};
    ldi.exact = true;
    return ldi;
  }

  // Structured box form: the uncertain Jacobian entry for basis i is
  // theta_i * 2 * xi with xi the squared coordinate, |xi| <= halfwidth.
  ldi.radii = Vector::Zero(n_theta);
  for (Index i = 0; i < n_theta; ++i) {
    const Index col = quad->squared_indices()[static_cast<size_t>(i)];
    ldi.rows.push_back(i);
    ldi.cols.push_back(col);
    const double theta_max = theta_set.vertices().row(i).cwiseAbs().maxCoeff();
    ldi.radii(i) = 2.0 * theta_max * x_hat.box_halfwidth(col);
  }

  // Corner count: one sign per distinct squared coordinate, crossed with the
  // parameter vertices.
  std::vector<Index> distinct_cols = ldi.cols;
  std::sort(distinct_cols.begin(), distinct_cols.end());
  distinct_cols.erase(std::unique(distinct_cols.begin(), distinct_cols.end()),
                      distinct_cols.end());
  const Index n_distinct = static_cast<Index>(distinct_cols.size());
  const double corner_count =
      std::ldexp(static_cast<double>(theta_set.num_vertices()), static_cast<int>(n_distinct));
  if (corner_count > static_cast<double>(kMaxExplicitLdiVertices)) {
    ldi.exact = false;
    return ldi;
  }

  std::map<std::vector<double>, Matrix> unique_a;
  for (Index q = 0; q < theta_set.num_vertices(); ++q) {
    const Vector theta_q = theta_set.vertices().col(q);
    for (Index mask = 0; mask < (Index{1} << n_distinct); ++mask) {
      Vector corner = Vector::Zero(n_x);
      for (Index d = 0; d < n_distinct; ++d) {
        const Index col = distinct_cols[static_cast<size_t>(d)];
        const double hw = x_hat.box_halfwidth(col);
        corner(col) = ((mask >> d) & 1) ? hw : -hw;
      }
      Matrix a = quad->a();
      for (Index i = 0; i < n_theta; ++i)
        a(i, ldi.cols[static_cast<size_t>(i)]) +=
            2.0 * theta_q(i) * corner(ldi.cols[static_cast<size_t>(i)]);
      std::vector<double> key(a.data(), a.data() + a.size());
      unique_a.emplace(std::move(key), std::move(a));
    }
  }
  for (auto& [key, a] : unique_a) {
    ldi.a_hat.push_back(a);
    ldi.b_hat.push_back(quad->b());
  }
  ldi.exact = true;
  return ldi;
}

/// Distance of a state/input Jacobian pair to the LDI hull (0 when inside).
/// Exact mode solves a small linear program over hull weights; box mode
/// checks the structured entries directly.
inline double ldi_jacobian_distance(const LdiModel& ldi, const Matrix& jac_x,
                                    const Matrix& jac_u,
                                    ConicSolverInterface* solver = nullptr) {
  if (!ldi.exact) {
    double dist = (jac_u - ldi.b0).cwiseAbs().maxCoeff();
    Matrix rem = jac_x - ldi.a0;
    for (Index i = 0; i < ldi.num_uncertain_entries(); ++i) {
      double& entry = rem(ldi.rows[static_cast<size_t>(i)], ldi.cols[static_cast<size_t>(i)]);
      dist = std::max(dist, std::max(0.0, std::abs(entry) - ldi.radii(i)));
      entry = 0.0;
    }
    return std::max(dist, rem.cwiseAbs().maxCoeff());
  }

  const Index nv = ldi.num_vertices();
  Vector target(jac_x.size() + jac_u.size());
  target << Eigen::Map<const Vector>(jac_x.data(), jac_x.size()),
      Eigen::Map<const Vector>(jac_u.data(), jac_u.size());
  ConicProgram prog;
  const Index mu = prog.add_variables("mu", nv);
  const Index dist = prog.add_variables("dist", 1);
  prog.set_objective_coefficient(dist, 1.0);
  LinearExpr weight_sum;
  for (Index j = 0; j < nv; ++j) {
    prog.add_nonnegative(ex(mu + j));
    weight_sum += ex(mu + j);
  }
  weight_sum.constant = -1.0;
  prog.add_equality(weight_sum);
  for (Index e = 0; e < target.size(); ++e) {
    LinearExpr combo;
    for (Index j = 0; j < nv; ++j) {
      const Matrix& src = e < jac_x.size() ? ldi.a_hat[static_cast<size_t>(j)]
                                           : ldi.b_hat[static_cast<size_t>(j)];
      const Index local = e < jac_x.size() ? e : e - jac_x.size();
      combo.add_term(mu + j, src.data()[local]);
    }
    combo.constant = -target(e);
    prog.add_nonnegative(ex(dist) + combo);
    prog.add_nonnegative(ex(dist) - combo);
  }
  IpmSolver default_solver;
  ConicSolverInterface& use = solver != nullptr ? *solver : default_solver;
  conic::Solution sol;
  const conic::SolveStatus status = use.solve(prog.build(), conic::Settings{}, sol);
  if (status != conic::SolveStatus::Optimal)
    return std::numeric_limits<double>::infinity();
  return std::max(0.0, sol.x(dist));
}

// ---------------------------------------------------------------------------
// Offline semidefinite design
// ---------------------------------------------------------------------------

struct TerminalGains {
  Matrix v;
  Matrix k;
  double sigma = 0.0;
};

namespace terminal_detail {

/// Symmetric basis matrix for the (a, b) entry of an n x n matrix variable.
inline Matrix symmetric_basis(Index n, Index a, Index b) {
  Matrix e = Matrix::Zero(n, n);
  e(a, b) += 1.0;
  e(b, a) += 1.0;
  if (a == b) e(a, b) = 1.0;
  return e;
}

}  // namespace terminal_detail

/// Minimize tau subject to the robust-cost LMI over every LDI vertex and
/// disturbance vertex; returns V = S^{-1}, K = Y V, sigma = sqrt(tau).  With
/// the box-form LDI a single multiplier LMI per disturbance vertex replaces
/// the vertex enumeration.
inline TerminalGains solve_terminal_sdp(const LdiModel& ldi, const DisturbanceSet& w_set,
                                        const Matrix& q, const Matrix& r,
                                        const conic::Settings& settings = {}) {
  const Index n = ldi.a0.rows();
  const Index n_u = ldi.b0.cols();
  if (q.rows() != n || r.rows() != n_u)
    throw std::invalid_argument("solve_terminal_sdp: weight dimension mismatch");
  Eigen::LLT<Matrix> q_llt(q), r_llt(r);
  if (q_llt.info() != Eigen::Success || r_llt.info() != Eigen::Success)
    throw std::invalid_argument(
        "solve_terminal_sdp: cost weights must be positive definite");
  const Matrix q_inv = q_llt.solve(Matrix::Identity(n, n));
  const Matrix r_inv = r_llt.solve(Matrix::Identity(n_u, n_u));

  ConicProgram prog;
  const Index n_s = n * (n + 1) / 2;
  const Index s_off = prog.add_variables("s", n_s);
  const Index y_off = prog.add_variables("y", n_u * n);
  const Index tau = prog.add_variables("tau", 1);
  prog.set_objective_coefficient(tau, 1.0);

  std::vector<std::pair<Index, Index>> s_entries;  // (row >= col) per variable
  for (Index b = 0; b < n; ++b)
    for (Index a = b; a < n; ++a) s_entries.emplace_back(a, b);

  const Index block = 3 * n + 1 + n_u;  // rows: [S | tau | S | Q^{-1} | R^{-1}]
  const Index row_tau = n;
  const Index row3 = n + 1;
  const Index row_q = 2 * n + 1;
  const Index row_r = 3 * n + 1;

  const auto base_f0 = [&](const Vector& w) {
    Matrix f0 = Matrix::Zero(block, block);
    f0.block(row_tau, row3, 1, n) = w.transpose();
    f0.block(row3, row_tau, n, 1) = w;
    f0.block(row_q, row_q, n, n) = q_inv;
    f0.block(row_r, row_r, n_u, n_u) = r_inv;
    return f0;
  };
  const auto fill_common = [&](std::vector<std::pair<Index, Matrix>>& terms,
                               const Matrix& a_hat, const Matrix& b_hat, Index extent) {
    for (Index sv = 0; sv < n_s; ++sv) {
      const auto [ea, eb] = s_entries[static_cast<size_t>(sv)];
      const Matrix e = terminal_detail::symmetric_basis(n, ea, eb);
      Matrix f = Matrix::Zero(extent, extent);
      f.block(0, 0, n, n) = e;
      const Matrix cross = e * a_hat.transpose();
      f.block(0, row3, n, n) += cross;
      f.block(row3, 0, n, n) += cross.transpose();
      f.block(0, row_q, n, n) += e;
      f.block(row_q, 0, n, n) += e;
      f.block(row3, row3, n, n) += e;
      terms.emplace_back(s_off + sv, std::move(f));
    }
    for (Index a = 0; a < n_u; ++a) {
      for (Index b = 0; b < n; ++b) {
        Matrix f = Matrix::Zero(extent, extent);
        // Y entry (a, b) contributes B_hat e_a e_b' inside (A S + B Y).
        const Vector col = b_hat.col(a);
        f.block(0, row3, n, n).row(b) += col.transpose();
        f.block(row3, 0, n, n).col(b) += col;
        f(b, row_r + a) += 1.0;
        f(row_r + a, b) += 1.0;
        terms.emplace_back(y_off + a * n + b, std::move(f));
      }
    }
    {
      Matrix f = Matrix::Zero(extent, extent);
      f(row_tau, row_tau) = 1.0;
      terms.emplace_back(tau, std::move(f));
    }
  };

  Index t_off = -1;
  if (ldi.exact) {
    for (Index j = 0; j < ldi.num_vertices(); ++j) {
      for (Index rr = 0; rr < w_set.num_vertices(); ++rr) {
        std::vector<std::pair<Index, Matrix>> terms;
        fill_common(terms, ldi.a_hat[static_cast<size_t>(j)],
                    ldi.b_hat[static_cast<size_t>(j)], block);
        Matrix f0 = base_f0(w_set.vertices().col(rr));
        prog.add_semidefinite(terms, f0);
      }
    }
  } else {
    // Box-form uncertainty: absorb each structured entry with a scalar
    // multiplier t_i via a Schur-complement extension of the nominal LMI.
    const Index p = ldi.num_uncertain_entries();
    t_off = prog.add_variables("t", p);
    const Index extent = block + p;
    for (Index rr = 0; rr < w_set.num_vertices(); ++rr) {
      std::vector<std::pair<Index, Matrix>> terms;
      fill_common(terms, ldi.a0, ldi.b0, extent);
      // Couple the uncertain columns to S: column i holds radii_i * S e_{c_i}
      // in the first block's rows.
      for (Index sv = 0; sv < n_s; ++sv) {
        const auto [ea, eb] = s_entries[static_cast<size_t>(sv)];
        const Matrix e = terminal_detail::symmetric_basis(n, ea, eb);
        Matrix f = Matrix::Zero(extent, extent);
        bool used = false;
        for (Index i = 0; i < p; ++i) {
          const Vector coupling = ldi.radii(i) * e.col(ldi.cols[static_cast<size_t>(i)]);
          if (coupling.isZero(0.0)) continue;
          f.block(0, block + i, n, 1) += coupling;
          f.block(block + i, 0, 1, n) += coupling.transpose();
          used = true;
        }
        if (used) terms.emplace_back(s_off + sv, std::move(f));
      }
      for (Index i = 0; i < p; ++i) {
        Matrix f = Matrix::Zero(extent, extent);
        f(block + i, block + i) = 1.0;
        f(row3 + ldi.rows[static_cast<size_t>(i)], row3 + ldi.rows[static_cast<size_t>(i)]) =
            -1.0;
        terms.emplace_back(t_off + i, std::move(f));
      }
      Matrix f0 = Matrix::Zero(extent, extent);
      f0.topLeftCorner(block, block) = base_f0(w_set.vertices().col(rr));
      prog.add_semidefinite(terms, f0);
    }
    for (Index i = 0; i < p; ++i) prog.add_nonnegative(ex(t_off + i));
  }

  // Keep S safely invertible.
  {
    std::vector<std::pair<Index, Matrix>> terms;
    for (Index sv = 0; sv < n_s; ++sv) {
      const auto [ea, eb] = s_entries[static_cast<size_t>(sv)];
      terms.emplace_back(s_off + sv, terminal_detail::symmetric_basis(n, ea, eb));
    }
    prog.add_semidefinite(terms, Matrix::Constant(n, n, 0.0) -
                                     1e-8 * Matrix::Identity(n, n));
  }
  prog.add_nonnegative(ex(tau));

  IpmSolver solver;
  conic::Solution sol;
  const conic::SolveStatus status = solver.solve(prog.build(), settings, sol);
  if (status == conic::SolveStatus::Infeasible || status == conic::SolveStatus::Unbounded)
    throw std::runtime_error(
        "solve_terminal_sdp: design problem infeasible; the system is not "
        "robustly stabilizable over the given LDI");
  if (status != conic::SolveStatus::Optimal)
    throw std::runtime_error(std::string("solve_terminal_sdp: solver failed (") +
                             conic::to_string(status) + ")");

  Matrix s = Matrix::Zero(n, n);
  for (Index sv = 0; sv < n_s; ++sv) {
    const auto [ea, eb] = s_entries[static_cast<size_t>(sv)];
    s(ea, eb) = sol.x(s_off + sv);
    s(eb, ea) = sol.x(s_off + sv);
  }
  Matrix y(n_u, n);
  for (Index a = 0; a < n_u; ++a)
    for (Index b = 0; b < n; ++b) y(a, b) = sol.x(y_off + a * n + b);

  TerminalGains gains;
  Eigen::LLT<Matrix> s_llt(s);
  if (s_llt.info() != Eigen::Success)
    throw std::runtime_error("solve_terminal_sdp: returned shape matrix not positive definite");
  gains.v = s_llt.solve(Matrix::Identity(n, n));
  gains.v = (0.5 * (gains.v + gains.v.transpose())).eval();
  gains.k = y * gains.v;
  gains.sigma = std::sqrt(std::max(0.0, sol.x(tau)));
  return gains;
}

// ---------------------------------------------------------------------------
// Terminal scalars and the aggregated design
// ---------------------------------------------------------------------------

struct TerminalScalars {
  double lambda_hat = 0.0;
  double d_theta = 0.0;
  double d_phi = 0.0;
  double lipschitz = 0.0;
  double rho_hat = 0.0;
  double kappa = 0.0;
  double gamma = 0.0;
};

/// Aggregate state constraints: X and X_hat rows, plus U and U_hat rows
/// mapped through the terminal control law u = K x.
inline HPolytope aggregate_constraints(const HPolytope& state_set, const HPolytope& x_hat,
                                       const HPolytope& input_set, const HPolytope& u_hat,
                                       const Matrix& k_gain) {
  const Index n = state_set.dim();
  const Index rows = state_set.rows() + x_hat.rows() + input_set.rows() + u_hat.rows();
  HPolytope agg;
  agg.H.resize(rows, n);
  agg.h.resize(rows);
  Index at = 0;
  const auto push = [&](const Matrix& h_block, const Vector& off) {
    agg.H.middleRows(at, h_block.rows()) = h_block;
    agg.h.segment(at, off.size()) = off;
    at += h_block.rows();
  };
  push(state_set.H, state_set.h);
  push(x_hat.H, x_hat.h);
  push(input_set.H * k_gain, input_set.h);
  push(u_hat.H * k_gain, u_hat.h);
  return agg;
}

inline TerminalScalars terminal_scalars(const EllipsoidShape& v, const Matrix& k_gain,
                                        const Matrix& q, const Matrix& r,
                                        const LdiModel& ldi, const ParamSimplex& theta_set,
                                        const BasisModel& model, const HPolytope& x_bar,
                                        const HPolytope& aggregate) {
  TerminalScalars out;
  const Matrix q_hat = q + k_gain.transpose() * r * k_gain;

  {
    Matrix g = v.inv_sqrt_factor() * q_hat * v.inv_sqrt_factor();
    g = (0.5 * (g + g.transpose())).eval();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(g, Eigen::EigenvaluesOnly);
    const double s_min = eig.eigenvalues().minCoeff();
    if (s_min <= 1e-12)
      throw std::runtime_error(
          "terminal_scalars: contraction rate >= 1 (shape matrix does not dominate "
          "the stage cost)");
    out.lambda_hat = std::clamp(1.0 - s_min, 0.0, 1.0 - 1e-12);
  }

  for (Index a = 0; a < theta_set.num_vertices(); ++a)
    for (Index b = a + 1; b < theta_set.num_vertices(); ++b)
      out.d_theta = std::max(out.d_theta, (theta_set.vertices().col(a) -
                                           theta_set.vertices().col(b))
                                              .lpNorm<1>());

  if (ldi.exact) {
    for (Index a = 0; a < ldi.num_vertices(); ++a) {
      const Matrix phi_a =
          ldi.a_hat[static_cast<size_t>(a)] + ldi.b_hat[static_cast<size_t>(a)] * k_gain;
      for (Index b = a + 1; b < ldi.num_vertices(); ++b) {
        const Matrix phi_b =
            ldi.a_hat[static_cast<size_t>(b)] + ldi.b_hat[static_cast<size_t>(b)] * k_gain;
        out.d_phi = std::max(out.d_phi, induced_matrix_norm(phi_a - phi_b, v));
      }
    }
  } else {
    const Index n = ldi.a0.rows();
    for (Index i = 0; i < ldi.num_uncertain_entries(); ++i) {
      Matrix e = Matrix::Zero(n, n);
      e(ldi.rows[static_cast<size_t>(i)], ldi.cols[static_cast<size_t>(i)]) = 1.0;
      out.d_phi += 2.0 * ldi.radii(i) * induced_matrix_norm(e, v);
    }
  }

  {
    const auto* quad = dynamic_cast<const QuadraticBasisModel*>(&model);
    if (quad == nullptr && model.param_dim() > 0)
      throw std::invalid_argument(
          "terminal_scalars: model does not expose Jacobian bounds over a region");
    if (!x_bar.is_axis_box())
      throw std::invalid_argument("terminal_scalars: Lipschitz region must be an axis box");
    const Index n = model.state_dim();
    for (Index i = 0; i < model.param_dim(); ++i) {
      const Index col = quad->squared_indices()[static_cast<size_t>(i)];
      Matrix e = Matrix::Zero(n, n);
      e(i, col) = 1.0;
      out.lipschitz = std::max(
          out.lipschitz, 2.0 * x_bar.box_halfwidth(col) * induced_matrix_norm(e, v));
    }
  }

  {
    double best = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < aggregate.rows(); ++i) {
      const double denom = (v.inv_sqrt_factor() * aggregate.H.row(i).transpose()).norm();
      if (denom <= 1e-14) continue;
      best = std::min(best, aggregate.h(i) / denom);
    }
    if (!std::isfinite(best) || best <= 0.0)
      throw std::runtime_error("terminal_scalars: aggregate constraint set has no margin");
    out.rho_hat = best;
  }

  out.kappa = q_weighted_matrix_norm(v.inv_sqrt_factor(), q_hat);
  const double denom = 1.0 - std::sqrt(out.lambda_hat);
  out.gamma = std::max(std::sqrt(1.0 / denom), 2.0 * out.kappa * out.kappa / denom);
  return out;
}

struct TerminalDesign {
  EllipsoidShape v;
  Matrix k;
  double sigma = 0.0;
  double lambda_hat = 0.0;
  double gamma = 0.0;
  double d_theta = 0.0;
  double d_phi = 0.0;
  double lipschitz = 0.0;
  double rho_hat = 0.0;
  double kappa = 0.0;
  Matrix q_hat;
  HPolytope aggregate;
};

/// x0N-independent ceiling on sigma_hat.
/// Design-level ceiling on the certified noise slack.  The gamma weight enters
/// squared: the terminal tail's final stage carries weight gamma, and bounding
/// the geometric sum of the propagated drift contributes another factor
/// 1/(1-sqrt(lambda)) <= gamma^2; the certified decrease inequality closes only
/// with both factors present.
inline double sigma_bar(const TerminalDesign& d) {
  return d.gamma * d.gamma *
         (d.sigma + d.rho_hat * (d.d_phi + d.d_theta * d.lipschitz));
}

// ---------------------------------------------------------------------------
// Terminal set recursions
// ---------------------------------------------------------------------------

/// Minimal feasible scaling sequence beta_{N+1..N+n_hat} given (r, beta_N):
/// the lower-bound recursion taken with equality.
inline std::vector<double> omega_min_beta_trajectory(double r, double beta_n,
                                                     double x0n_norm,
                                                     const TerminalDesign& d,
                                                     Index n_hat) {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(n_hat));
  const double drift0 = r * d.d_phi + d.d_theta * d.lipschitz * x0n_norm;
  double prev = beta_n;
  for (Index m = 1; m <= n_hat; ++m) {
    const double next =
        std::sqrt(d.lambda_hat * prev * prev + d.sigma * d.sigma) +
        std::pow(d.lambda_hat, 0.5 * static_cast<double>(m - 1)) * drift0;
    out.push_back(next);
    prev = next;
  }
  return out;
}

/// Membership oracle for the terminal set: the affine cap on beta_N plus the
/// requirement that the minimal scaling sequence stays under the shrinking
/// caps.  Exact because the recursion lower bounds are monotone.
inline bool omega_contains(double r, double beta_n, double x0n_norm,
                           const TerminalDesign& d, Index n_hat, double tol = 1e-12) {
  if (r < -tol || beta_n < -tol) return false;
  if (beta_n > d.rho_hat - (r + x0n_norm) + tol) return false;
  const std::vector<double> traj =
      omega_min_beta_trajectory(r, beta_n, x0n_norm, d, n_hat);
  for (Index m = 1; m <= n_hat; ++m) {
    const double cap =
        d.rho_hat -
        std::pow(d.lambda_hat, 0.5 * static_cast<double>(m)) * (r + x0n_norm);
    if (traj[static_cast<size_t>(m - 1)] > cap + tol) return false;
  }
  return true;
}

namespace terminal_detail {

/// Largest feasible beta_N for a fixed r (negative when the slice is empty).
inline double max_feasible_beta_n(double r, double x0n_norm, const TerminalDesign& d,
                                  Index n_hat) {
  const double cap0 = d.rho_hat - (r + x0n_norm);
  if (cap0 < 0.0) return -1.0;
  if (omega_contains(r, cap0, x0n_norm, d, n_hat, 0.0)) return cap0;
  if (!omega_contains(r, 0.0, x0n_norm, d, n_hat, 0.0)) return -1.0;
  double lo = 0.0, hi = cap0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (omega_contains(r, mid, x0n_norm, d, n_hat, 0.0))
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

/// Left side of the horizon-extension sufficient condition at a given r with
/// beta_N at its maximal feasible value; -inf when the slice is empty.
inline double n_hat_condition_value(double r, double x0n_norm, const TerminalDesign& d,
                                    Index n_hat) {
  const double beta_n = max_feasible_beta_n(r, x0n_norm, d, n_hat);
  if (beta_n < 0.0) return -std::numeric_limits<double>::infinity();
  const std::vector<double> traj =
      omega_min_beta_trajectory(r, beta_n, x0n_norm, d, n_hat);
  const double beta_end = traj.back();
  return std::sqrt(d.lambda_hat) * beta_end + d.sigma +
         std::pow(d.lambda_hat, 0.5 * static_cast<double>(n_hat)) *
             (r * d.d_phi + d.d_theta * d.lipschitz * x0n_norm) +
         std::pow(d.lambda_hat, 0.5 * static_cast<double>(n_hat + 1)) * (r + x0n_norm);
}

/// Largest r with a nonempty slice (negative if the whole set is empty).
inline double max_feasible_r(double x0n_norm, const TerminalDesign& d, Index n_hat) {
  if (max_feasible_beta_n(0.0, x0n_norm, d, n_hat) < 0.0) return -1.0;
  double lo = 0.0, hi = std::max(d.rho_hat - x0n_norm, 0.0);
  if (max_feasible_beta_n(hi, x0n_norm, d, n_hat) >= 0.0) return hi;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (max_feasible_beta_n(mid, x0n_norm, d, n_hat) >= 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

}  // namespace terminal_detail

/// Worst value of the horizon-extension condition over the terminal set.  The
/// condition value is nondecreasing in r at the maximal feasible beta_N, so
/// the edge value dominates; a coarse grid guards the monotonicity argument.
inline double n_hat_condition_max(double x0n_norm, const TerminalDesign& d, Index n_hat) {
  const double r_edge = terminal_detail::max_feasible_r(x0n_norm, d, n_hat);
  if (r_edge < 0.0) return -std::numeric_limits<double>::infinity();
  double worst = terminal_detail::n_hat_condition_value(r_edge, x0n_norm, d, n_hat);
  const int grid = 128;
  for (int g = 0; g <= grid; ++g) {
    const double r = r_edge * static_cast<double>(g) / grid;
    worst = std::max(worst, terminal_detail::n_hat_condition_value(r, x0n_norm, d, n_hat));
  }
  return worst;
}

inline constexpr Index kNHatCap = 200;

/// Smallest horizon extension (at least the guess) for which the sufficient
/// condition holds over the whole terminal set.
inline Index compute_n_hat(double x0n_norm, const TerminalDesign& d, Index guess = 1) {
  if (d.sigma * d.sigma / (1.0 - d.lambda_hat) >= d.rho_hat * d.rho_hat)
    throw std::runtime_error(
        "compute_n_hat: noise level too large for the terminal region "
        "(sigma^2/(1-lambda) >= rho^2); no finite horizon extension exists");
  if (x0n_norm >= d.rho_hat)
    throw std::runtime_error(
        "compute_n_hat: terminal nominal state outside the terminal region");
  for (Index n_hat = std::max<Index>(guess, 1); n_hat <= kNHatCap; ++n_hat) {
    const double worst = n_hat_condition_max(x0n_norm, d, n_hat);
    if (worst <= d.rho_hat - 1e-9) return n_hat;
  }
  throw std::runtime_error("compute_n_hat: horizon extension exceeds the cap");
}

struct TerminalOnline {
  Index n_hat = 1;
  double sigma_hat = 0.0;
  double r_max = 0.0;
  double x0n_norm = 0.0;
};

/// Largest admissible ||z_N||_V and the resulting certified noise level.
inline TerminalOnline compute_r_max_and_sigma_hat(double x0n_norm,
                                                  const TerminalDesign& d, Index n_hat) {
  TerminalOnline online;
  online.n_hat = n_hat;
  online.x0n_norm = x0n_norm;
  const double r_max = terminal_detail::max_feasible_r(x0n_norm, d, n_hat);
  if (r_max < 0.0)
    throw std::runtime_error(
        "compute_r_max_and_sigma_hat: terminal set empty for this nominal endpoint");
  online.r_max = r_max;
  // gamma^2: one gamma from the weighted final stage of the terminal tail, one
  // from the geometric-sum bound on the recursion drift (see sigma_bar).
  online.sigma_hat =
      d.gamma * d.gamma *
      (d.sigma + std::pow(d.lambda_hat, 0.5 * static_cast<double>(n_hat)) *
                     (d.d_phi * r_max + d.d_theta * d.lipschitz * x0n_norm));
  if (online.sigma_hat > sigma_bar(d) + 1e-12)
    throw std::logic_error("compute_r_max_and_sigma_hat: certified noise level exceeds "
                           "its design ceiling");
  return online;
}

/// Recomputes the online terminal quantities only when the weighted norm of
/// the terminal nominal state moves.
class TerminalCache {
 public:
  explicit TerminalCache(const TerminalDesign& design) : design_(&design) {}

  const TerminalOnline& update(double x0n_norm) {
    if (valid_ && std::abs(x0n_norm - online_.x0n_norm) <= 1e-9) return online_;
    const Index n_hat = compute_n_hat(x0n_norm, *design_);
    online_ = compute_r_max_and_sigma_hat(x0n_norm, *design_, n_hat);
    valid_ = true;
    return online_;
  }

  bool valid() const { return valid_; }
  const TerminalOnline& current() const {
    if (!valid_) throw std::logic_error("TerminalCache: no online quantities computed yet");
    return online_;
  }

 private:
  const TerminalDesign* design_;
  TerminalOnline online_;
  bool valid_ = false;
};

// ---------------------------------------------------------------------------
// Terminal block of the conic program
// ---------------------------------------------------------------------------

struct TerminalBlock {
  Index r_var = 0;
  Index beta_offset = 0;  // beta_{N+1..N+n_hat}
  Index l_offset = 0;     // l_{N+0..N+n_hat}
  Index variables_added = 0;
};

/// Append the terminal constraints to a conic program: the norm bound
/// r >= ||z_N||_V, the affine cap, the scaling recursion (lower bounds as
/// second-order cones, upper bounds affine), the terminal-cost stage bounds
/// and the aggregation l_N >= ||(l_{N+0},...,l_{N+n_hat})||.
inline TerminalBlock emit_terminal_constraints(const Vector& x0n, const TerminalDesign& d,
                                               const TerminalOnline& online,
                                               ConicProgram& prog, Index z_n_offset,
                                               Index beta_n_var, Index l_n_var) {
  const double x0n_norm = d.v.norm(x0n);
  if (std::abs(x0n_norm - online.x0n_norm) > 1e-7)
    throw std::logic_error(
        "emit_terminal_constraints: online terminal quantities computed for a "
        "different nominal endpoint");
  const Index n_hat = online.n_hat;
  const double lam = d.lambda_hat;
  const double sqrt_lam = std::sqrt(lam);

  TerminalBlock block;
  block.r_var = prog.add_variables("term_r", 1);
  block.beta_offset = prog.add_variables("term_beta", n_hat);
  block.l_offset = prog.add_variables("term_l", n_hat + 1);
  block.variables_added = 2 * n_hat + 2;

  // r >= ||z_N||_V.
  prog.add_second_order(ex(block.r_var),
                        affine_map(d.v.sqrt_factor(), z_n_offset));

  // beta_N <= rho - (r + ||x0_N||_V).
  prog.add_nonnegative(-ex(beta_n_var) - ex(block.r_var) +
                       LinearExpr(d.rho_hat - x0n_norm));

  for (Index m = 1; m <= n_hat; ++m) {
    const Index beta_var = block.beta_offset + m - 1;
    const double pow_prev = std::pow(lam, 0.5 * static_cast<double>(m - 1));
    const double pow_cur = std::pow(lam, 0.5 * static_cast<double>(m));
    // Lower bound: beta_k - drift >= || (sqrt(lam) beta_{k-1}, sigma) ||.
    LinearExpr head = ex(beta_var) - (pow_prev * d.d_phi) * ex(block.r_var);
    head.constant -= pow_prev * d.d_theta * d.lipschitz * x0n_norm;
    LinearExpr prev =
        m == 1 ? ex(beta_n_var) : ex(block.beta_offset + m - 2);
    std::vector<LinearExpr> tail;
    tail.push_back(sqrt_lam * prev);
    tail.push_back(LinearExpr(d.sigma));
    prog.add_second_order(head, tail);
    // Upper bound: beta_k <= rho - lam^{m/2} (r + ||x0_N||_V).
    prog.add_nonnegative(-ex(beta_var) - pow_cur * ex(block.r_var) +
                         LinearExpr(d.rho_hat - pow_cur * x0n_norm));
  }

  for (Index k = 0; k <= n_hat; ++k) {
    const double pow_k = std::pow(lam, 0.5 * static_cast<double>(k));
    const double scale = k == n_hat ? d.gamma : 1.0;
    LinearExpr beta_term =
        k == 0 ? ex(beta_n_var) : ex(block.beta_offset + k - 1);
    LinearExpr bound = ex(block.l_offset + k) - (scale * pow_k) * ex(block.r_var) -
                       scale * beta_term;
    bound.constant -= scale * pow_k * x0n_norm;
    prog.add_nonnegative(bound);
  }

  std::vector<LinearExpr> l_tail;
  for (Index k = 0; k <= n_hat; ++k) l_tail.push_back(ex(block.l_offset + k));
  prog.add_second_order(ex(l_n_var), l_tail);
  return block;
}

// ---------------------------------------------------------------------------
// Design-time verification and assembly
// ---------------------------------------------------------------------------

/// Squared terminal cost at the minimal feasible scaling sequence.
inline double terminal_cost_sq(double x0n_norm, double r, double beta_n,
                               const TerminalDesign& d, Index n_hat) {
  const std::vector<double> traj =
      omega_min_beta_trajectory(r, beta_n, x0n_norm, d, n_hat);
  const double s = x0n_norm + r;
  double sum = 0.0;
  for (Index k = 0; k < n_hat; ++k) {
    const double beta_k = k == 0 ? beta_n : traj[static_cast<size_t>(k - 1)];
    const double l = std::pow(d.lambda_hat, 0.5 * static_cast<double>(k)) * s + beta_k;
    sum += l * l;
  }
  const double l_last =
      d.gamma * (std::pow(d.lambda_hat, 0.5 * static_cast<double>(n_hat)) * s +
                 traj.back());
  return sum + l_last * l_last;
}

/// Verify the certified one-step decrease of the terminal cost on sampled
/// members of the terminal set, propagated through the worst-case terminal
/// recursions.  A failure means the chosen gamma does not certify stability.
/// Returns the number of tuples actually tested (samples that landed inside
/// the terminal set).
inline Index verify_decrease_condition(const TerminalDesign& d, Index samples = 200,
                                       std::uint64_t seed = 12345,
                                       double tolerance = 1e-7) {
  std::mt19937_64 rng(seed);
  const auto uniform01 = [&rng]() {
    return std::ldexp(static_cast<double>(rng()), -64);
  };
  Index tested = 0;
  for (Index trial = 0; trial < samples; ++trial) {
    const double x0n = 0.8 * d.rho_hat * uniform01();
    Index n_hat = 0;
    TerminalOnline online;
    try {
      n_hat = compute_n_hat(x0n, d);
      online = compute_r_max_and_sigma_hat(x0n, d, n_hat);
    } catch (const std::runtime_error&) {
      continue;  // terminal set empty at this endpoint; not a sampled member
    }
    const double r = online.r_max * uniform01();
    const double beta_cap = terminal_detail::max_feasible_beta_n(r, x0n, d, n_hat);
    if (beta_cap < 0.0) continue;
    const double beta_n = beta_cap * uniform01();

    // Concrete members with the sampled weighted norms; the decrease condition
    // is stated for the actual points, not their norm bounds.
    const Index n = d.v.dim();
    const auto unit_direction = [&]() {
      Vector g(n);
      for (Index i = 0; i < n; i += 2) {
        const double u1 = std::max(uniform01(), 1e-300);
        const double u2 = uniform01();
        const double rad = std::sqrt(-2.0 * std::log(u1));
        g(i) = rad * std::cos(6.283185307179586 * u2);
        if (i + 1 < n) g(i + 1) = rad * std::sin(6.283185307179586 * u2);
      }
      const double nv = d.v.norm(g);
      return Vector(nv > 0.0 ? Vector((1.0 / nv) * g) : Vector::Zero(n));
    };
    const Vector x0_vec = x0n * unit_direction();
    const Vector z_vec = r * unit_direction();

    const double x0n_next = std::sqrt(d.lambda_hat) * x0n;
    const double r_next = std::sqrt(d.lambda_hat) * r;
    const double beta_next =
        std::sqrt(d.lambda_hat * beta_n * beta_n + d.sigma * d.sigma) + d.d_phi * r +
        d.d_theta * d.lipschitz * x0n;

    if (!omega_contains(r_next, beta_next, x0n_next, d, n_hat, 1e-9))
      throw std::runtime_error(
          "verify_decrease_condition: terminal set is not invariant under the "
          "worst-case recursions");

    const double cost_now = terminal_cost_sq(x0n, r, beta_n, d, n_hat);
    const double cost_next = terminal_cost_sq(x0n_next, r_next, beta_next, d, n_hat);
    const Vector point = x0_vec + z_vec;
    const double stage =
        std::sqrt(point.dot(d.q_hat * point)) + beta_n * d.kappa;
    const double required = stage * stage - online.sigma_hat * online.sigma_hat;
    if (cost_now - cost_next < required - tolerance)
      throw std::runtime_error(
          "verify_decrease_condition: terminal cost decrease condition failed on a "
          "sampled tuple; the design constants do not certify stability");
    ++tested;
  }
  if (tested == 0)
    throw std::runtime_error(
        "verify_decrease_condition: no valid terminal tuples could be sampled");
  return tested;
}

/// Full offline design: LDI, SDP, scalars, aggregation, and the sampled
/// decrease verification.
inline TerminalDesign design_terminal(const BasisModel& model, const ParamSimplex& theta0,
                                      const DisturbanceSet& w_set, const Matrix& q,
                                      const Matrix& r, const HPolytope& state_set,
                                      const HPolytope& input_set, const HPolytope& x_hat,
                                      const HPolytope& u_hat,
                                      const conic::Settings& sdp_settings = {}) {
  const LdiModel ldi = build_ldi(model, theta0, x_hat, u_hat);
  const TerminalGains gains = solve_terminal_sdp(ldi, w_set, q, r, sdp_settings);
  EllipsoidShape shape(gains.v);
  const HPolytope aggregate =
      aggregate_constraints(state_set, x_hat, input_set, u_hat, gains.k);
  const TerminalScalars scalars =
      terminal_scalars(shape, gains.k, q, r, ldi, theta0, model, x_hat, aggregate);
  TerminalDesign design{std::move(shape),
                        gains.k,
                        gains.sigma,
                        scalars.lambda_hat,
                        scalars.gamma,
                        scalars.d_theta,
                        scalars.d_phi,
                        scalars.lipschitz,
                        scalars.rho_hat,
                        scalars.kappa,
                        q + gains.k.transpose() * r * gains.k,
                        aggregate};
  verify_decrease_condition(design);
  return design;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace terminal_detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows > 0 ? static_cast<Index>(j.at(0).size()) : 0;
  Matrix m(rows, cols);
  for (Index a = 0; a < rows; ++a)
    for (Index b = 0; b < cols; ++b) m(a, b) = j.at(a).at(b).get<double>();
  return m;
}

}  // namespace terminal_detail

inline nlohmann::json to_json(const TerminalDesign& d) {
  nlohmann::json j;
  j["shape_matrix"] = terminal_detail::matrix_to_json(d.v.matrix());
  j["gain"] = terminal_detail::matrix_to_json(d.k);
  j["sigma"] = d.sigma;
  j["lambda_hat"] = d.lambda_hat;
  j["gamma"] = d.gamma;
  j["d_theta"] = d.d_theta;
  j["d_phi"] = d.d_phi;
  j["lipschitz"] = d.lipschitz;
  j["rho_hat"] = d.rho_hat;
  j["kappa"] = d.kappa;
  j["q_hat"] = terminal_detail::matrix_to_json(d.q_hat);
  j["aggregate_rows"] = terminal_detail::matrix_to_json(d.aggregate.H);
  j["aggregate_offsets"] =
      terminal_detail::matrix_to_json(Matrix(d.aggregate.h.transpose()));
  return j;
}

inline TerminalDesign terminal_design_from_json(const nlohmann::json& j) {
  EllipsoidShape shape(terminal_detail::matrix_from_json(j.at("shape_matrix")));
  HPolytope aggregate;
  aggregate.H = terminal_detail::matrix_from_json(j.at("aggregate_rows"));
  aggregate.h = terminal_detail::matrix_from_json(j.at("aggregate_offsets"))
                    .row(0)
                    .transpose();
  return TerminalDesign{std::move(shape),
                        terminal_detail::matrix_from_json(j.at("gain")),
                        j.at("sigma").get<double>(),
                        j.at("lambda_hat").get<double>(),
                        j.at("gamma").get<double>(),
                        j.at("d_theta").get<double>(),
                        j.at("d_phi").get<double>(),
                        j.at("lipschitz").get<double>(),
                        j.at("rho_hat").get<double>(),
                        j.at("kappa").get<double>(),
                        terminal_detail::matrix_from_json(j.at("q_hat")),
                        std::move(aggregate)};
}

}  // namespace etmpc
