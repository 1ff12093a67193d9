#pragma once

// Randomized benchmark harness: generates quadratic benchmark systems, runs
// the closed loop with set-membership estimation in the loop while asserting
// the certified invariants online, and produces the solver scaling study.
// Every random draw derives from one master seed through a fixed stream
// splitter, so records are bit-reproducible per seed.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <etmpc/checks.hpp>
#include <etmpc/controller.hpp>
#include <etmpc/estimation.hpp>
#include <etmpc/ipm.hpp>
#include <etmpc/program.hpp>

namespace etmpc {

/// Derive an independent sub-seed from a master seed and a stream index
/// (splitmix64 of the combined word).
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct SimDims {
  Index state = 2;
  Index input = 1;
  Index param = 2;
  Index disturbance = 2;

  void validate() const {
    if (state <= 0 || input <= 0 || param <= 0 || disturbance <= 0)
      throw std::invalid_argument("SimDims: dimensions must be positive");
    if (param > state)
      throw std::invalid_argument("SimDims: more squared coordinates than states");
    if (disturbance > state)
      throw std::invalid_argument("SimDims: disturbance channels exceed states");
  }
};

/// Full benchmark configuration. Defaults reproduce the reference scenario:
/// a loose state box, unit input box, small additive disturbances, and a
/// ten-step loop with a ten-step prediction horizon.
struct SimConfig {
  SimDims dims;
  Index horizon = 10;  // prediction horizon N
  Index steps = 10;    // closed-loop steps T
  Index iter_max = 3;
  Index sme_history = 5;  // transitions kept by the estimator
  std::uint64_t seed = 1;

  double state_bound = 1.0e6;       // state box halfwidth
  double input_bound = 1.0;         // input box halfwidth
  double disturbance_bound = 0.01;  // per-channel disturbance bound
  double deviation_offset = 0.5;    // nominal-deviation simplex offset
  double validity_bound = 1.5;      // linearization validity box halfwidth
  double theta_star_radius = 0.025; // true parameter sampled in this ball
  double theta_radius = 0.05;       // max distance of the initial set from it
  double tolerance = 1.0e-3;        // outer-loop termination tolerance
  double q_weight = 1.0;            // state cost is q_weight * I
  double r_weight = 1.0;            // input cost is r_weight * I
  bool origin_start = false;        // skip the feasible-point search, use 0

  conic::Settings solver;  // conic solver settings (shared by SDP and SOCP)

  void validate() const {
    dims.validate();
    if (horizon <= 0 || steps <= 0 || iter_max <= 0 || sme_history <= 0)
      throw std::invalid_argument("SimConfig: loop parameters must be positive");
    if (state_bound <= 0.0 || input_bound <= 0.0 || deviation_offset <= 0.0 ||
        validity_bound <= 0.0 || tolerance <= 0.0 || q_weight <= 0.0 ||
        r_weight <= 0.0)
      throw std::invalid_argument("SimConfig: bounds must be positive");
    if (disturbance_bound < 0.0 || theta_star_radius < 0.0 || theta_radius <= 0.0)
      throw std::invalid_argument("SimConfig: radii must be nonnegative");
  }
};

/// One randomly generated benchmark system.
struct GeneratedSystem {
  QuadraticBasisModel model;
  DisturbanceSet disturbance;
  Vector theta_star;
  ParamSimplex theta_set;
  double spectral_radius = 0.0;  // of the linear part after rescaling
};

namespace harness_detail {

inline double uniform01(std::mt19937_64& rng) {
  return std::ldexp(static_cast<double>(rng()), -64);
}

inline double uniform_pm1(std::mt19937_64& rng) { return 2.0 * uniform01(rng) - 1.0; }

inline Vector gaussian(std::mt19937_64& rng, Index n) {
  Vector g(n);
  for (Index i = 0; i < n; i += 2) {
    const double u1 = std::max(uniform01(rng), 1e-300);
    const double u2 = uniform01(rng);
    const double rad = std::sqrt(-2.0 * std::log(u1));
    g(i) = rad * std::cos(6.283185307179586 * u2);
    if (i + 1 < n) g(i + 1) = rad * std::sin(6.283185307179586 * u2);
  }
  return g;
}

/// Random rotation with determinant +1 (QR of a Gaussian matrix with the
/// sign convention fixed).
inline Matrix random_rotation(std::mt19937_64& rng, Index n) {
  Matrix g(n, n);
  for (Index i = 0; i < n; ++i) g.col(i) = gaussian(rng, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index i = 0; i < n; ++i)
    if (r(i, i) < 0.0) q.col(i) = -q.col(i);
  if (q.determinant() < 0.0) q.col(0) = -q.col(0);
  return q;
}

/// Vertex directions of a regular simplex in R^n with unit circumradius:
/// n + 1 unit vectors with identical pairwise inner products.
inline Matrix regular_simplex_directions(Index n) {
  // Start from the standard-basis simplex in R^{n+1}, center it, and express
  // the offsets in an orthonormal basis of the hyperplane orthogonal to the
  // all-ones vector.
  Vector ones = Vector::Ones(n + 1);
  Eigen::HouseholderQR<Matrix> qr(ones);
  const Matrix q = qr.householderQ();  // first column parallel to ones
  const Matrix basis = q.rightCols(n); // (n+1) x n, orthonormal
  Matrix out(n, n + 1);
  for (Index v = 0; v <= n; ++v) {
    Vector offset = -ones / static_cast<double>(n + 1);
    offset(v) += 1.0;
    Vector c = basis.transpose() * offset;
    out.col(v) = c / c.norm();
  }
  return out;
}

inline double spectral_radius(const Matrix& a) {
  return a.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace harness_detail

/// Generate one benchmark system: a random linear part rescaled into a fixed
/// spectral-radius window, random input map, randomly placed squared
/// nonlinearities (distinct coordinates), a full-column-rank disturbance map,
/// a true parameter in a small ball, and an initial parameter simplex that
/// provably contains it. Deterministic per seed.
inline GeneratedSystem generate_system(const SimDims& dims, std::uint64_t seed,
                                       double disturbance_bound = 0.01,
                                       double theta_star_radius = 0.025,
                                       double theta_radius = 0.05) {
  dims.validate();
  std::mt19937_64 rng(split_seed(seed, 0x11));
  const Index n = dims.state;
  const Index m = dims.input;
  const Index p = dims.param;
  const Index nw = dims.disturbance;

  // Linear part with spectral radius drawn uniformly in [0.5, 1.2].
  Matrix a(n, n);
  double radius = 0.0;
  do {
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) a(i, j) = harness_detail::uniform_pm1(rng);
    radius = harness_detail::spectral_radius(a);
  } while (radius < 1e-9);
  const double target = 0.5 + 0.7 * harness_detail::uniform01(rng);
  a *= target / radius;

  Matrix b(n, m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) b(i, j) = harness_detail::uniform_pm1(rng);

  // Squared coordinates: a uniform draw without replacement, so each index is
  // marginally uniform and the nonlinearities touch distinct coordinates
  // (keeps the constraint structure of assembled subproblems deterministic
  // for a given size).
  std::vector<Index> coords(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  for (Index i = 0; i < p; ++i) {
    const Index j =
        i + static_cast<Index>(rng() % static_cast<std::uint64_t>(n - i));
    std::swap(coords[static_cast<size_t>(i)], coords[static_cast<size_t>(j)]);
  }
  std::vector<Index> squared(coords.begin(), coords.begin() + p);

  // Disturbance map: resample until reasonably conditioned.
  Matrix b_w(n, nw);
  bool ok = false;
  for (Index attempt = 0; attempt < 64 && !ok; ++attempt) {
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < nw; ++j) b_w(i, j) = harness_detail::uniform_pm1(rng);
    Eigen::JacobiSVD<Matrix> svd(b_w);
    const double smin = svd.singularValues().minCoeff();
    const double smax = svd.singularValues().maxCoeff();
    ok = smin > 0.0 && smax / smin <= 1.0e3;
  }
  if (!ok)
    throw std::runtime_error(
        "generate_system: could not draw a well-conditioned disturbance map");

  // True parameter in a ball, then an initial simplex that contains it with
  // every vertex within theta_radius of it: circumradius 0.8 * theta_radius
  // and a center offset below the inscribed-sphere radius.
  const Vector star_dir = harness_detail::gaussian(rng, p).normalized();
  const Vector theta_star =
      theta_star_radius *
      std::pow(harness_detail::uniform01(rng), 1.0 / static_cast<double>(p)) *
      star_dir;
  const double circum = 0.8 * theta_radius;
  const double max_offset = std::min(0.9 * circum / static_cast<double>(p),
                                     theta_radius - circum);
  Matrix vertices(p, p + 1);
  {
    const Vector offset_dir = harness_detail::gaussian(rng, p).normalized();
    const Vector center =
        theta_star + (max_offset * harness_detail::uniform01(rng)) * offset_dir;
    const Matrix rot = harness_detail::random_rotation(rng, p);
    const Matrix dirs = harness_detail::regular_simplex_directions(p);
    for (Index v = 0; v <= p; ++v)
      vertices.col(v) = center + circum * (rot * dirs.col(v));
  }
  ParamSimplex theta_set = ParamSimplex::from_vertices(vertices);
  if (!theta_set.contains(theta_star, 1e-12))
    throw std::logic_error("generate_system: initial set misses the parameter");
  for (Index v = 0; v <= p; ++v)
    if ((vertices.col(v) - theta_star).norm() > theta_radius + 1e-12)
      throw std::logic_error("generate_system: initial set too wide");

  return GeneratedSystem{QuadraticBasisModel(a, b, squared),
                         DisturbanceSet(b_w, disturbance_bound),
                         theta_star,
                         std::move(theta_set),
                         target};
}

/// Offline artifacts for one benchmark instance: the generated system, the
/// terminal design, and the controller setup mirroring the configuration.
struct BenchmarkInstance {
  GeneratedSystem system;
  TerminalDesign design;
  ControllerSetup controller;
  HPolytope x_hat;
  HPolytope u_hat;
  double design_seconds = 0.0;
};

/// Generate a system and run the full offline design for it.
inline BenchmarkInstance design_offline(const SimConfig& config, std::uint64_t seed) {
  config.validate();
  GeneratedSystem system =
      generate_system(config.dims, seed, config.disturbance_bound,
                      config.theta_star_radius, config.theta_radius);
  const Index n = config.dims.state;
  const Index m = config.dims.input;

  HPolytope x_hat = HPolytope::box(n, config.validity_bound);
  HPolytope u_hat = HPolytope::box(m, config.input_bound);

  ControllerSetup setup;
  setup.config.horizon = config.horizon;
  setup.config.iter_max = config.iter_max;
  setup.config.tolerance = config.tolerance;
  setup.q = config.q_weight * Matrix::Identity(n, n);
  setup.r = config.r_weight * Matrix::Identity(m, m);
  setup.sets.state_set = HPolytope::box(n, config.state_bound);
  setup.sets.input_set = HPolytope::box(m, config.input_bound);
  HPolytope s_poly;
  s_poly.H.resize(n + 1, n);
  s_poly.H.topRows(n) = -Matrix::Identity(n, n);
  s_poly.H.bottomRows(1).setOnes();
  s_poly.h = Vector::Constant(n + 1, config.deviation_offset);
  setup.sets.s_set = s_poly;
  setup.s_vertices = simplex_vertices(s_poly.H, s_poly.h);
  setup.solver_settings = config.solver;

  const auto started = std::chrono::steady_clock::now();
  TerminalDesign design = design_terminal(
      system.model, system.theta_set, system.disturbance, setup.q, setup.r,
      setup.sets.state_set, setup.sets.input_set, x_hat, u_hat, config.solver);
  const double design_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
          .count();

  return BenchmarkInstance{std::move(system), std::move(design), std::move(setup),
                           std::move(x_hat),  std::move(u_hat),  design_seconds};
}

/// Assemble and solve the subproblem for a fresh initial state with zero
/// perturbation warm start (the feasibility probe used by the initial-state
/// search and the scaling study).
inline OcpResult solve_from_scratch(const BenchmarkInstance& instance,
                                    const Vector& x0,
                                    ConicSolverInterface& solver,
                                    AssembledOcp* assembled_out = nullptr,
                                    double* solve_seconds = nullptr) {
  const BasisModel& model = instance.system.model;
  const TerminalDesign& design = instance.design;
  const ControllerSetup& setup = instance.controller;

  const std::vector<Vector> v0(static_cast<size_t>(setup.config.horizon),
                               Vector::Zero(model.input_dim()));
  const NominalTrajectory traj = rollout_nominal(
      model, design.k, x0, v0, instance.system.theta_set.vertex_mean());

  std::vector<StepLinearization> lin;
  lin.reserve(static_cast<size_t>(setup.config.horizon));
  for (Index k = 0; k < setup.config.horizon; ++k)
    lin.push_back(linearize_step(model, design.k, traj.x0[static_cast<size_t>(k)],
                                 traj.v0[static_cast<size_t>(k)], traj.theta0,
                                 setup.s_vertices, setup.v_region,
                                 instance.system.theta_set, instance.system.disturbance,
                                 design.sigma, design.v));

  TerminalCache cache(design);
  const TerminalOnline& online = cache.update(design.v.norm(traj.x0.back()));
  AssembledOcp ocp = assemble_ocp(traj, lin, x0, design, online, setup.sets, setup.q,
                                  setup.r);
  const auto started = std::chrono::steady_clock::now();
  OcpResult result = solve_ocp(ocp, solver, setup.solver_settings);
  if (solve_seconds != nullptr)
    *solve_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
            .count();
  if (assembled_out != nullptr) *assembled_out = std::move(ocp);
  return result;
}

/// Search a random ray for a large feasible initial state: grow the scale
/// until the subproblem turns infeasible, then bisect the bracket. The whole
/// search spends at most 30 subproblem solves after the origin probe.
inline Vector find_feasible_x0(const BenchmarkInstance& instance,
                               ConicSolverInterface& solver, std::uint64_t seed) {
  std::mt19937_64 rng(split_seed(seed, 0x22));
  const Index n = instance.system.model.state_dim();
  const Vector direction = harness_detail::gaussian(rng, n).normalized();

  Index budget = 30;
  const auto feasible = [&](double scale) {
    --budget;
    return solve_from_scratch(instance, Vector(scale * direction), solver).status ==
           OcpStatus::kOptimal;
  };

  if (solve_from_scratch(instance, Vector::Zero(n), solver).status !=
      OcpStatus::kOptimal)
    throw std::runtime_error(
        "find_feasible_x0: the origin subproblem is infeasible; the offline "
        "design is inconsistent");

  double lo = 0.0;
  double hi = 1.0;
  bool bracketed = false;
  while (budget > 0) {
    if (feasible(hi)) {
      lo = hi;
      hi *= 2.0;
    } else {
      bracketed = true;
      break;
    }
  }
  while (bracketed && budget > 0 && hi - lo > 1e-6 * std::max(1.0, hi)) {
    const double mid = 0.5 * (lo + hi);
    (feasible(mid) ? lo : hi) = mid;
  }
  return lo * direction;
}

/// Everything recorded about one closed-loop step.
struct StepRecord {
  Index t = 0;
  Vector state;
  Vector control;
  double stage_cost = 0.0;
  double j_bar_final = 0.0;
  double sigma_hat = 0.0;
  bool any_feasible = false;
  bool exhausted = false;
  bool j_bar_from_bound = false;
  Index iterations = 0;
  Index line_search_trials = 0;
  std::vector<double> alphas;
  std::vector<double> j_bar_trace;  // accepted objective value per iteration
  Vector beta_profile;
  Vector theta_offsets;  // estimator facet offsets after the update at t
  bool containment_checked = false;
  double containment_margin = std::numeric_limits<double>::infinity();
  Index solve_attempts = 0;
  double solver_seconds = 0.0;
  double step_seconds = 0.0;
};

/// Full record of one closed-loop run.
struct RunRecord {
  std::uint64_t seed = 0;
  SimDims dims;
  Vector theta_star;
  double spectral_radius = 0.0;
  double design_seconds = 0.0;
  double sigma = 0.0;
  double lambda_hat = 0.0;
  double rho_hat = 0.0;
  double sigma_bar = 0.0;
  Vector x_init;
  std::vector<StepRecord> steps;
  bool aborted = false;
  std::string abort_reason;
  double total_seconds = 0.0;
};

/// Run the closed loop for one seeded benchmark instance: offline design,
/// initial-state search, then per step an estimator update from the observed
/// transition, a controller step, and the true dynamics with a random
/// disturbance. Certified invariants are asserted online; any violation
/// aborts the run with a diagnostic in the record.
inline RunRecord run_closed_loop(const SimConfig& config, std::uint64_t seed) {
  config.validate();
  const auto run_started = std::chrono::steady_clock::now();

  BenchmarkInstance instance = design_offline(config, seed);
  const BasisModel& model = instance.system.model;
  const TerminalDesign& design = instance.design;

  IpmSolver solver;
  RunRecord record;
  record.seed = seed;
  record.dims = config.dims;
  record.theta_star = instance.system.theta_star;
  record.spectral_radius = instance.system.spectral_radius;
  record.design_seconds = instance.design_seconds;
  record.sigma = design.sigma;
  record.lambda_hat = design.lambda_hat;
  record.rho_hat = design.rho_hat;
  record.sigma_bar = sigma_bar(design);

  record.x_init = config.origin_start
                      ? Vector(Vector::Zero(model.state_dim()))
                      : find_feasible_x0(instance, solver, seed);

  SmeSettings sme;
  sme.history_capacity = config.sme_history;
  sme.lp_settings = config.solver;
  SetMembershipEstimator estimator(model, instance.system.disturbance,
                                   instance.system.theta_set, sme);

  TubeController controller(model, design, instance.system.disturbance,
                            instance.controller, solver);

  std::mt19937_64 w_rng(split_seed(seed, 0x33));
  std::mt19937_64 containment_rng(split_seed(seed, 0x44));

  const auto abort_run = [&](const std::string& why) {
    record.aborted = true;
    record.abort_reason = why;
  };

  Vector x = record.x_init;
  Vector x_prev, u_prev;
  for (Index t = 0; t < config.steps && !record.aborted; ++t) {
    StepRecord step;
    step.t = t;
    step.state = x;

    if (t > 0) {
      const Vector offsets_before = estimator.parameter_set().offsets();
      estimator.update(x_prev, u_prev, x);
      const Vector offsets_after = estimator.parameter_set().offsets();
      if (!estimator.parameter_set().contains(instance.system.theta_star, 1e-9)) {
        abort_run("estimator lost the true parameter at step " + std::to_string(t));
        break;
      }
      for (Index i = 0; i < offsets_after.size(); ++i)
        if (offsets_after(i) > offsets_before(i)) {
          abort_run("estimator offsets grew at step " + std::to_string(t));
          break;
        }
      if (record.aborted) break;
    }
    step.theta_offsets = estimator.parameter_set().offsets();

    StepResult result;
    try {
      result = controller.step(x, estimator.parameter_set());
    } catch (const std::exception& err) {
      abort_run(std::string("controller step failed: ") + err.what());
      break;
    }
    const StepDiagnostics& diag = result.diagnostics;

    step.control = result.u;
    step.stage_cost = diag.stage_cost;
    step.j_bar_final = diag.j_bar_final;
    step.sigma_hat = diag.sigma_hat;
    step.any_feasible = diag.any_feasible;
    step.exhausted = diag.exhausted;
    step.j_bar_from_bound = diag.j_bar_from_bound;
    step.iterations = static_cast<Index>(diag.iterations.size());
    for (const IterationDiagnostics& it : diag.iterations) {
      step.line_search_trials += it.line_search_trials;
      if (it.feasible) step.j_bar_trace.push_back(it.j_bar);
    }
    step.alphas = diag.alphas;
    step.beta_profile = diag.beta_profile;
    step.solve_attempts = diag.solve_attempts;
    step.solver_seconds = diag.solver_seconds;
    step.step_seconds = diag.step_seconds;

    // ---- online invariants ------------------------------------------------
    if (!instance.controller.sets.state_set.contains(x))
      abort_run("state left its constraint set at step " + std::to_string(t));
    else if (!instance.controller.sets.input_set.contains(result.u))
      abort_run("input left its constraint set at step " + std::to_string(t));
    else if (step.sigma_hat > record.sigma_bar)
      abort_run("certified noise level exceeded its offline cap at step " +
                std::to_string(t));
    else if (t > 0) {
      const StepRecord& prev = record.steps.back();
      const double allowed = prev.j_bar_final - prev.stage_cost +
                             prev.sigma_hat * prev.sigma_hat + 1e-6;
      if (step.j_bar_final > allowed)
        abort_run("certified decrease failed at step " + std::to_string(t) +
                  " (bound " + std::to_string(allowed) + ", got " +
                  std::to_string(step.j_bar_final) + ")");
    }
    if (record.aborted) {
      record.steps.push_back(std::move(step));
      break;
    }

    // One-step tube containment around the applied input; skipped when line
    // search exhaustion discarded the accepted correction, because the
    // applied input then differs from the plan the tube certifies.
    if (diag.final_solution.has_value() && !diag.accepted_nominal_states.empty()) {
      const Vector planned =
          design.k * x + diag.accepted_head_v;
      if ((planned - result.u).norm() <= 1e-9 * std::max(1.0, planned.norm())) {
        CheckReport containment;
        containment.name = "one-step containment";
        check_one_step_containment(model, design.v, estimator.parameter_set(),
                                   instance.system.disturbance, x, result.u,
                                   diag.accepted_nominal_states,
                                   *diag.final_solution, containment_rng, {},
                                   containment);
        step.containment_checked = true;
        step.containment_margin = containment.worst_margin;
        if (!containment.pass()) {
          abort_run("tube containment violated at step " + std::to_string(t) + ": " +
                    containment.detail);
          record.steps.push_back(std::move(step));
          break;
        }
      }
    }

    // ---- plant update -----------------------------------------------------
    const Vector w = instance.system.disturbance.vertices() *
                     check_detail::simplex_weights(
                         w_rng, instance.system.disturbance.num_vertices());
    x_prev = x;
    u_prev = result.u;
    x = eval_f(model, x, result.u, instance.system.theta_star) + w;

    record.steps.push_back(std::move(step));
  }

  record.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - run_started)
          .count();
  return record;
}

/// One row of the scaling study.
struct ScalingRecord {
  SimDims dims;
  ProgramCounts counts;        // from the median-count instance
  double mean_solve_seconds = 0.0;
  double mean_design_seconds = 0.0;
  Index instances = 0;
  Index solved = 0;  // instances whose subproblem solve reported optimal
};

/// The size sequence of the reference scaling table.
inline std::vector<SimDims> scaling_size_sequence() {
  return {{2, 1, 2, 2},  {4, 2, 2, 2},  {4, 2, 4, 2},  {6, 2, 4, 2},
          {5, 2, 5, 2},  {6, 2, 6, 2},  {8, 2, 8, 2},  {8, 4, 8, 2},
          {10, 4, 10, 2}, {12, 4, 12, 2}};
}

/// Scaling study: for each size, generate several systems, design offline,
/// assemble the origin subproblem, record its structural counts and the mean
/// solve wall time.
inline std::vector<ScalingRecord> scaling_study(const SimConfig& base,
                                                const std::vector<SimDims>& sizes,
                                                std::uint64_t seed,
                                                Index instances_per_size = 10) {
  std::vector<ScalingRecord> out;
  out.reserve(sizes.size());
  IpmSolver solver;
  for (size_t s = 0; s < sizes.size(); ++s) {
    SimConfig config = base;
    config.dims = sizes[s];
    config.validate();

    ScalingRecord rec;
    rec.dims = sizes[s];
    rec.instances = instances_per_size;
    std::vector<ProgramCounts> counts;
    double time_sum = 0.0;
    double design_sum = 0.0;
    Index timed = 0;
    for (Index i = 0; i < instances_per_size; ++i) {
      const std::uint64_t instance_seed = split_seed(seed, (s << 8) | static_cast<size_t>(i));
      BenchmarkInstance instance = design_offline(config, instance_seed);
      design_sum += instance.design_seconds;
      AssembledOcp assembled;
      double solve_seconds = 0.0;
      OcpResult result =
          solve_from_scratch(instance, Vector::Zero(config.dims.state), solver,
                             &assembled, &solve_seconds);
      counts.push_back(assembled.program.counts());
      time_sum += solve_seconds;
      ++timed;
      if (result.status == OcpStatus::kOptimal) ++rec.solved;
    }
    // Median by cone count: robust against per-instance terminal-extension
    // length differences.
    std::sort(counts.begin(), counts.end(),
              [](const ProgramCounts& a, const ProgramCounts& b) {
                return a.soc_cones < b.soc_cones;
              });
    rec.counts = counts[counts.size() / 2];
    rec.mean_solve_seconds = timed > 0 ? time_sum / static_cast<double>(timed) : 0.0;
    rec.mean_design_seconds =
        timed > 0 ? design_sum / static_cast<double>(timed) : 0.0;
    out.push_back(rec);
  }
  return out;
}

}  // namespace etmpc
