#pragma once

// Set-membership estimation of the unknown model parameters. The parameter
// set keeps the facet normals of the initial simplex and only tightens the
// facet offsets, so its complexity never grows. Each observed transition
// (x, u, x+) constrains theta through the requirement that the residual
// x+ - f(x, u, theta) lies in the disturbance set; the tightest offset per
// facet is found by a small linear program over the buffered transitions.

#include <deque>
#include <stdexcept>
#include <utility>
#include <vector>

#include <etmpc/model.hpp>
#include <etmpc/program.hpp>

namespace etmpc {

struct SmeSettings {
  Index history_capacity = 5;
  /// Componentwise tolerance for the part of the residual outside the
  /// disturbance matrix column space.
  double range_tolerance = 1e-8;
  /// Outward padding added to each tightened offset so the true parameter
  /// stays feasible under solver round-off.
  double offset_slack = 1e-9;
  conic::Settings lp_settings;
};

struct SmeReport {
  bool tightened = false;       // any offset strictly decreased
  bool inconsistent = false;    // some facet program was infeasible
  bool solver_trouble = false;  // some facet program failed numerically
  bool degenerate = false;      // tightened set had no valid vertex layout
};

struct Transition {
  Vector x, u, x_plus;
};

class SetMembershipEstimator {
 public:
  SetMembershipEstimator(const BasisModel& model, DisturbanceSet disturbance,
                         ParamSimplex initial, SmeSettings settings = {})
      : model_(&model),
        disturbance_(std::move(disturbance)),
        set_(std::move(initial)),
        settings_(settings),
        theta0_(set_.vertex_mean()) {
    if (set_.dim() != model.param_dim())
      throw std::invalid_argument("SetMembershipEstimator: parameter dimension mismatch");
  }

  const ParamSimplex& parameter_set() const { return set_; }
  const Vector& theta_nominal() const { return theta0_; }
  const std::deque<Transition>& history() const { return history_; }

  /// Ingest one transition and tighten the parameter set. The set is left
  /// unchanged when the data are inconsistent with the model assumptions or
  /// the tightened set loses its simplex structure; both cases are flagged.
  SmeReport update(const Vector& x, const Vector& u, const Vector& x_plus) {
    history_.push_back({x, u, x_plus});
    while (static_cast<Index>(history_.size()) > settings_.history_capacity)
      history_.pop_front();

    SmeReport report;
    Vector new_offsets = set_.offsets();
    for (Index facet = 0; facet < set_.shape().rows(); ++facet) {
      double value = 0.0;
      const FacetStatus status = max_along(set_.shape().row(facet).transpose(), value);
      if (status == FacetStatus::Infeasible) {
        report.inconsistent = true;
        return report;
      }
      if (status == FacetStatus::SolverTrouble) {
        report.solver_trouble = true;
        continue;  // keep the previous offset; an unused bound is still sound
      }
      new_offsets(facet) = std::min(new_offsets(facet), value + settings_.offset_slack);
    }

    if ((new_offsets.array() < set_.offsets().array()).any()) {
      try {
        ParamSimplex tightened(set_.shape(), new_offsets);
        set_ = std::move(tightened);
        theta0_ = set_.vertex_mean();
        report.tightened = true;
      } catch (const std::exception&) {
        report.degenerate = true;  // previous set and nominal retained
      }
    }
    return report;
  }

 private:
  enum class FacetStatus { Ok, Infeasible, SolverTrouble };

  /// max direction' theta subject to the previous set and all buffered
  /// residual-membership constraints.
  FacetStatus max_along(const Vector& direction, double& value) const {
    const Index n_theta = model_->param_dim();
    ConicProgram prog;
    const Index theta = prog.add_variables("theta", n_theta);
    for (Index i = 0; i < n_theta; ++i)
      prog.set_objective_coefficient(theta + i, -direction(i));  // maximize

    const auto prev_rows = affine_map(-set_.shape(), theta, set_.offsets());
    for (const auto& row : prev_rows) prog.add_nonnegative(row);

    const Matrix& b_w = disturbance_.matrix();
    const Matrix& pinv = disturbance_.pseudo_inverse();
    const Matrix range_residual = Matrix::Identity(b_w.rows(), b_w.rows()) - b_w * pinv;
    for (const Transition& tr : history_) {
      Vector d = tr.x_plus - model_->eval_basis(0, tr.x, tr.u);
      Matrix f_cols(d.size(), n_theta);
      for (Index i = 0; i < n_theta; ++i)
        f_cols.col(i) = model_->eval_basis(i + 1, tr.x, tr.u);
      // what = pinv (d - F theta) must be inside the box; the residual
      // outside the column space must vanish (within tolerance).
      const Matrix box_coeff = -pinv * f_cols;
      const Vector box_const = pinv * d;
      for (Index r = 0; r < box_coeff.rows(); ++r) {
        LinearExpr what_r(box_const(r));
        for (Index i = 0; i < n_theta; ++i)
          if (box_coeff(r, i) != 0.0) what_r.add_term(theta + i, box_coeff(r, i));
        prog.add_nonnegative(LinearExpr(disturbance_.bound()) - what_r);
        prog.add_nonnegative(LinearExpr(disturbance_.bound()) + what_r);
      }
      const Matrix out_coeff = -range_residual * f_cols;
      const Vector out_const = range_residual * d;
      for (Index r = 0; r < out_coeff.rows(); ++r) {
        if (out_coeff.row(r).cwiseAbs().maxCoeff() < 1e-14 &&
            std::abs(out_const(r)) < 1e-14)
          continue;  // structurally zero residual component
        LinearExpr res_r(out_const(r));
        for (Index i = 0; i < n_theta; ++i)
          if (out_coeff(r, i) != 0.0) res_r.add_term(theta + i, out_coeff(r, i));
        prog.add_nonnegative(LinearExpr(settings_.range_tolerance) - res_r);
        prog.add_nonnegative(LinearExpr(settings_.range_tolerance) + res_r);
      }
    }

    conic::Solution sol;
    const conic::SolveStatus status =
        conic::solve(prog.build(), settings_.lp_settings, sol);
    switch (status) {
      case conic::SolveStatus::Optimal:
        value = -sol.primal_cost;
        return FacetStatus::Ok;
      case conic::SolveStatus::Infeasible:
        return FacetStatus::Infeasible;
      default:
        return FacetStatus::SolverTrouble;
    }
  }

  const BasisModel* model_;
  DisturbanceSet disturbance_;
  ParamSimplex set_;
  SmeSettings settings_;
  Vector theta0_;
  std::deque<Transition> history_;
};

}  // namespace etmpc
