#pragma once

// Receding-horizon tube controller. Each time step runs a few successive
// linearization iterations: roll out the nominal trajectory, linearize the
// model along it, refresh the terminal quantities, and solve the resulting
// conic program for a perturbation correction. When a linearization yields an
// infeasible problem, a backtracking line search interpolates the candidate
// back toward the previous feasible configuration, whose feasibility is
// guaranteed by the tube construction. Warm starts are maintained by shifting
// the perturbation sequence and the stored nominal trajectory one step.

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <etmpc/linearize.hpp>
#include <etmpc/model.hpp>
#include <etmpc/ocp.hpp>
#include <etmpc/terminal.hpp>

namespace etmpc {

struct MPCConfig {
  Index horizon = 10;
  Index iter_max = 3;
  Index line_search_max_trials = 20;
  /// Iterations stop once the norm of the stacked correction falls below this.
  double tolerance = 1e-3;
};

struct ControllerSetup {
  MPCConfig config;
  Matrix q;  // state stage weight
  Matrix r;  // input stage weight
  OcpSets sets;
  VPolytope s_vertices;  // vertex form of sets.s_set, used by the linearization
  ControlPerturbationSet v_region = ControlPerturbationSet::all();
  conic::Settings solver_settings;
};

struct ControllerState {
  std::vector<Vector> v0;      // current perturbation sequence, horizon entries
  std::vector<Vector> v0_old;  // stored fallback perturbation sequence
  std::vector<Vector> x0_old;  // stored nominal states; empty before the first step
  Vector theta0;               // nominal parameter used in the current step
  std::optional<double> j_bar_final_prev;  // objective bookkeeping of the last step
  double prev_stage_cost = 0.0;            // realized stage cost of the last step
  double sigma_hat_prev = 0.0;  // certified noise level stored with the last step
};

/// Advance the warm start after a completed step: the perturbation sequences
/// drop their head and append zero, and the stored nominal states become the
/// tail of the current trajectory extended by one zero-perturbation step.
inline void shift_warm_start(ControllerState& state, const std::vector<Vector>& x0_current,
                             const BasisModel& model, const Matrix& k_gain) {
  if (state.v0.empty() || state.v0_old.size() != state.v0.size())
    throw std::invalid_argument("shift_warm_start: perturbation sequences inconsistent");
  if (x0_current.size() != state.v0.size() + 1)
    throw std::invalid_argument("shift_warm_start: nominal state sequence length mismatch");
  if (state.theta0.size() != model.param_dim())
    throw std::invalid_argument("shift_warm_start: nominal parameter not set");
  const Vector zero_v = Vector::Zero(model.input_dim());
  state.v0.erase(state.v0.begin());
  state.v0.push_back(zero_v);
  state.v0_old.erase(state.v0_old.begin());
  state.v0_old.push_back(zero_v);
  std::vector<Vector> next(x0_current.begin() + 1, x0_current.end());
  next.push_back(eval_closed_loop(model, x0_current.back(), zero_v, state.theta0, k_gain));
  state.x0_old = std::move(next);
}

struct IterationDiagnostics {
  Index iteration = 0;  // 1-based outer iteration index
  bool feasible = false;
  Index line_search_trials = 0;  // 0 when the direct solve succeeded
  double alpha = 1.0;            // interpolation weight of the accepted candidate
  double j_bar = 0.0;            // objective of the accepted solve
  double v_star_norm = 0.0;
  OcpStatus last_status = OcpStatus::kNumericalFailure;
};

struct StepDiagnostics {
  std::vector<IterationDiagnostics> iterations;
  std::vector<double> alphas;  // every interpolation weight tried, in order
  bool any_feasible = false;
  bool exhausted = false;         // some line search ran out of trials
  Index exhausted_iteration = 0;  // iteration at which that happened (0 = none)
  bool j_bar_from_bound = false;  // no feasible solve; bookkeeping used the stored bound
  double j_bar_final = 0.0;
  double sigma_hat = 0.0;   // certified noise level of the final accepted iterate
  double stage_cost = 0.0;  // realized cost of the applied state/control pair
  Vector beta_profile;      // tube scalings of the final accepted solution
  std::vector<Vector> nominal_states;  // trajectory backing the warm-start shift
  std::vector<Vector> accepted_nominal_states;  // trajectory of final_solution
  Vector accepted_head_v;  // first-step perturbation of the accepted solution
  std::optional<MPCSolution> final_solution;
  Index solve_attempts = 0;
  double solver_seconds = 0.0;
  double step_seconds = 0.0;
  std::string last_error;  // message of the last rejected candidate, if any
};

struct StepResult {
  Vector u;
  StepDiagnostics diagnostics;
};

class TubeController {
 public:
  TubeController(const BasisModel& model, const TerminalDesign& design,
                 DisturbanceSet disturbance, ControllerSetup setup,
                 ConicSolverInterface& solver, std::vector<Vector> v0_init = {})
      : model_(&model),
        design_(&design),
        disturbance_(std::move(disturbance)),
        setup_(std::move(setup)),
        solver_(&solver),
        cache_(design) {
    const MPCConfig& cfg = setup_.config;
    if (cfg.horizon < 1)
      throw std::invalid_argument("TubeController: horizon must be at least 1");
    if (cfg.iter_max < 1)
      throw std::invalid_argument("TubeController: iter_max must be at least 1");
    if (cfg.line_search_max_trials < 0)
      throw std::invalid_argument("TubeController: line-search cap must be nonnegative");
    if (!(cfg.tolerance > 0.0))
      throw std::invalid_argument("TubeController: tolerance must be positive");
    if (setup_.q.rows() != model.state_dim() || setup_.q.cols() != model.state_dim())
      throw std::invalid_argument("TubeController: state weight dimension mismatch");
    if (setup_.r.rows() != model.input_dim() || setup_.r.cols() != model.input_dim())
      throw std::invalid_argument("TubeController: input weight dimension mismatch");
    if (v0_init.empty())
      v0_init.assign(static_cast<size_t>(cfg.horizon), Vector::Zero(model.input_dim()));
    if (static_cast<Index>(v0_init.size()) != cfg.horizon)
      throw std::invalid_argument(
          "TubeController: initial perturbation sequence length mismatch");
    for (const Vector& v : v0_init)
      if (v.size() != model.input_dim())
        throw std::invalid_argument(
            "TubeController: initial perturbation dimension mismatch");
    state_.v0 = v0_init;
    state_.v0_old = std::move(v0_init);
  }

  /// One closed-loop time step: iterate linearization and solves, apply the
  /// line search on infeasibility, and return the control input to apply.
  StepResult step(const Vector& x_plant, const ParamSimplex& theta_set) {
    const auto t_begin = std::chrono::steady_clock::now();
    if (x_plant.size() != model_->state_dim())
      throw std::invalid_argument("TubeController::step: plant state dimension mismatch");
    if (theta_set.dim() != model_->param_dim())
      throw std::invalid_argument("TubeController::step: parameter set dimension mismatch");
    state_.theta0 = theta_set.vertex_mean();

    StepDiagnostics diag;
    const bool first_step = state_.x0_old.empty();

    Vector x0_head = x_plant;
    std::vector<Vector> x0_current;  // nominal states backing the final shift
    double v_star_norm = std::numeric_limits<double>::infinity();
    std::optional<MPCSolution> accepted;
    double last_j_bar = 0.0;
    double accepted_sigma_hat = state_.sigma_hat_prev;

    Index i = 1;
    while (i <= setup_.config.iter_max && v_star_norm >= setup_.config.tolerance) {
      IterationDiagnostics it;
      it.iteration = i;

      std::optional<double> bound;
      if (i == 1) {
        if (state_.j_bar_final_prev)
          bound = *state_.j_bar_final_prev - state_.prev_stage_cost +
                  state_.sigma_hat_prev * state_.sigma_hat_prev;
      } else {
        bound = last_j_bar;
      }

      std::optional<Candidate> cand;
      OcpResult result;
      auto try_candidate = [&](const Vector& head) {
        cand.reset();
        try {
          Candidate c = evaluate_candidate(head, state_.v0, theta_set);
          result = attempt_solve(c, x_plant, bound, diag);
          it.last_status = result.status;
          cand = std::move(c);
          x0_current = cand->traj.x0;
          return result.status == OcpStatus::kOptimal;
        } catch (const std::exception& err) {
          diag.last_error = err.what();
          return false;
        }
      };

      bool feasible = try_candidate(x0_head);

      if (!feasible) {
        if (first_step && i == 1)
          throw std::runtime_error(
              "TubeController::step: no feasible solution at the first time step and "
              "no stored fallback (" +
              describe_failure(result, diag) + ")");
        // Backtracking line search toward the stored feasible configuration.
        double alpha = 1.0;
        bool searching = true;
        const Vector head_old = (i == 1) ? state_.x0_old.front() : x0_head;
        for (Index trial = 1; trial <= setup_.config.line_search_max_trials && searching;
             ++trial) {
          alpha *= 0.5;
          if (i == 1) x0_head = head_old + alpha * (x0_head - head_old);
          for (size_t k = 0; k < state_.v0.size(); ++k)
            state_.v0[k] = state_.v0_old[k] + alpha * (state_.v0[k] - state_.v0_old[k]);
          ++it.line_search_trials;
          diag.alphas.push_back(alpha);
          if (try_candidate(x0_head)) {
            searching = false;
            it.alpha = alpha;
          }
        }
        if (searching) {
          // The interpolated candidates sit within rounding of the fallback by
          // now; attempt the stored configuration itself once.
          if (i == 1) x0_head = head_old;
          state_.v0 = state_.v0_old;
          ++it.line_search_trials;
          diag.alphas.push_back(0.0);
          if (try_candidate(x0_head)) {
            searching = false;
            it.alpha = 0.0;
          }
        }
        if (!searching) {
          feasible = true;
        } else {
          diag.exhausted = true;
          diag.exhausted_iteration = i;
          state_.v0 = state_.v0_old;
          if (i == 1) x0_current = state_.x0_old;
          i = setup_.config.iter_max;  // terminate the outer loop after this pass
        }
      }

      if (feasible) {
        const MPCSolution& sol = *result.solution;
        double norm_sq = 0.0;
        for (const Vector& vk : sol.v_star) norm_sq += vk.squaredNorm();
        v_star_norm = std::sqrt(norm_sq);
        last_j_bar = sol.j_bar;
        accepted = sol;
        accepted_sigma_hat = cand->online.sigma_hat;
        diag.accepted_nominal_states = cand->traj.x0;
        diag.accepted_head_v = state_.v0.front() + sol.v_star.front();
        it.feasible = true;
        it.j_bar = sol.j_bar;
        it.v_star_norm = v_star_norm;
        diag.any_feasible = true;
      } else {
        v_star_norm = 0.0;  // the correction is dropped on exhaustion
      }

      state_.v0_old = state_.v0;
      if (feasible)
        for (size_t k = 0; k < state_.v0.size(); ++k)
          state_.v0[k] += result.solution->v_star[k];
      diag.iterations.push_back(std::move(it));
      ++i;
    }

    if (accepted) {
      diag.j_bar_final = last_j_bar;
      diag.sigma_hat = accepted_sigma_hat;
      diag.beta_profile = accepted->beta_star;
      state_.sigma_hat_prev = accepted_sigma_hat;
    } else {
      // No solve succeeded anywhere in this step; the stored bound is still a
      // certified objective value for the fallback configuration.
      if (!state_.j_bar_final_prev)
        throw std::logic_error("TubeController::step: bookkeeping without a previous objective");
      diag.j_bar_from_bound = true;
      diag.j_bar_final = *state_.j_bar_final_prev - state_.prev_stage_cost +
                         state_.sigma_hat_prev * state_.sigma_hat_prev;
      diag.sigma_hat = state_.sigma_hat_prev;
    }
    state_.j_bar_final_prev = diag.j_bar_final;
    diag.final_solution = std::move(accepted);

    Vector u = design_->k * x_plant + state_.v0.front();
    diag.stage_cost = x_plant.dot(setup_.q * x_plant) + u.dot(setup_.r * u);
    state_.prev_stage_cost = diag.stage_cost;
    diag.nominal_states = x0_current;

    shift_warm_start(state_, x0_current, *model_, design_->k);

    diag.step_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    return {std::move(u), std::move(diag)};
  }

  const ControllerState& state() const { return state_; }
  const MPCConfig& config() const { return setup_.config; }
  const TerminalDesign& design() const { return *design_; }

 private:
  struct Candidate {
    NominalTrajectory traj;
    std::vector<StepLinearization> lin;
    TerminalOnline online;
  };

  /// Roll out, linearize, and refresh the terminal quantities for one
  /// configuration. Throws when the rollout diverges or the terminal state
  /// leaves the admissible region; callers treat that as infeasibility.
  Candidate evaluate_candidate(const Vector& head, const std::vector<Vector>& v0,
                               const ParamSimplex& theta_set) {
    Candidate c;
    c.traj = rollout_nominal(*model_, design_->k, head, v0, state_.theta0);
    c.lin.reserve(v0.size());
    for (size_t k = 0; k < v0.size(); ++k)
      c.lin.push_back(linearize_step(*model_, design_->k, c.traj.x0[k], c.traj.v0[k],
                                     state_.theta0, setup_.s_vertices, setup_.v_region,
                                     theta_set, disturbance_, design_->sigma, design_->v));
    c.online = cache_.update(design_->v.norm(c.traj.x0.back()));
    return c;
  }

  OcpResult attempt_solve(const Candidate& cand, const Vector& x_plant,
                          std::optional<double> bound, StepDiagnostics& diag) {
    AssembledOcp ocp = assemble_ocp(cand.traj, cand.lin, x_plant, *design_, cand.online,
                                    setup_.sets, setup_.q, setup_.r, bound);
    ++diag.solve_attempts;
    const auto t0 = std::chrono::steady_clock::now();
    OcpResult res = solve_ocp(ocp, *solver_, setup_.solver_settings);
    diag.solver_seconds +=
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
  }

  static std::string describe_failure(const OcpResult& result, const StepDiagnostics& diag) {
    std::string out = std::string("last solver status: ") + to_string(result.status);
    if (!diag.last_error.empty()) out += "; last error: " + diag.last_error;
    return out;
  }

  const BasisModel* model_;
  const TerminalDesign* design_;
  DisturbanceSet disturbance_;
  ControllerSetup setup_;
  ConicSolverInterface* solver_;
  TerminalCache cache_;
  ControllerState state_;
};

}  // namespace etmpc
