#pragma once

// Randomized soundness checks shared by the verification CLI, the closed-loop
// harness, and the acceptance gate. Every check evaluates an inequality that
// the offline design or the online solution claims to certify, on sampled
// points where the claim must hold, and records the worst slack observed.
// The checks are one-sided: sampling can miss a violation but can never
// manufacture one, so a failure here is always a genuine unsoundness.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <etmpc/linearize.hpp>
#include <etmpc/model.hpp>
#include <etmpc/ocp.hpp>
#include <etmpc/terminal.hpp>

namespace etmpc {

/// Outcome of one sampled-inequality check. `worst_margin` is the smallest
/// slack (allowed value plus tolerance minus observed value) across all
/// samples; negative means the inequality failed there.
struct CheckReport {
  std::string name;
  Index samples = 0;
  Index failures = 0;
  double worst_margin = std::numeric_limits<double>::infinity();
  std::string detail;  // description of the worst violating sample

  bool pass() const { return samples > 0 && failures == 0; }

  void add(double margin, const std::string& what) {
    ++samples;
    if (margin < worst_margin) {
      worst_margin = margin;
      if (margin < 0.0) detail = what;
    }
    if (margin < 0.0) ++failures;
  }

  std::string summary() const {
    std::string s = name + ": " + (pass() ? "ok" : "FAILED") + " (" +
                    std::to_string(samples) + " samples, worst margin " +
                    std::to_string(worst_margin) + ")";
    if (!detail.empty()) s += " [" + detail + "]";
    return s;
  }
};

namespace check_detail {

inline double uniform01(std::mt19937_64& rng) {
  return std::ldexp(static_cast<double>(rng()), -64);
}

inline Vector gaussian_vector(std::mt19937_64& rng, Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector g(n);
  for (Index i = 0; i < n; ++i) g(i) = normal(rng);
  return g;
}

/// Uniform direction on the unit sphere.
inline Vector unit_direction(std::mt19937_64& rng, Index n) {
  Vector g = gaussian_vector(rng, n);
  double nv = g.norm();
  while (nv < 1e-12) {
    g = gaussian_vector(rng, n);
    nv = g.norm();
  }
  return g / nv;
}

/// Uniform sample from the probability simplex (normalized exponentials).
inline Vector simplex_weights(std::mt19937_64& rng, Index k) {
  Vector w(k);
  double total = 0.0;
  for (Index i = 0; i < k; ++i) {
    w(i) = -std::log(std::max(uniform01(rng), 1e-300));
    total += w(i);
  }
  return w / total;
}

/// Random convex combination of vertex columns; occasionally a pure vertex so
/// the extreme points get exercised as well.
inline Vector hull_sample(std::mt19937_64& rng, const Matrix& vertex_cols) {
  const Index k = vertex_cols.cols();
  if (uniform01(rng) < 0.3)
    return vertex_cols.col(static_cast<Index>(rng() % static_cast<std::uint64_t>(k)));
  return vertex_cols * simplex_weights(rng, k);
}

/// Support value max_{s in hull(verts)} row . s.
inline double support_over_vertices(const Vector& row, const std::vector<Vector>& verts) {
  double best = -std::numeric_limits<double>::infinity();
  for (const Vector& s : verts) best = std::max(best, row.dot(s));
  return best;
}

/// Whether the whole slab x0 + hull(s_verts) lies inside the linearization
/// region and its feedback image inside the input region. This is the domain
/// on which the terminal recursions are claimed.
inline bool terminal_region_ok(const Vector& x0, const Matrix& k_gain,
                               const HPolytope& x_hat, const HPolytope& u_hat,
                               const std::vector<Vector>& s_verts) {
  for (Index i = 0; i < x_hat.rows(); ++i) {
    const Vector row = x_hat.H.row(i).transpose();
    if (row.dot(x0) + support_over_vertices(row, s_verts) > x_hat.h(i)) return false;
  }
  const Vector u0 = k_gain * x0;
  for (Index i = 0; i < u_hat.rows(); ++i) {
    const Vector row = u_hat.H.row(i).transpose();
    const Vector rk = k_gain.transpose() * row;
    if (row.dot(u0) + support_over_vertices(rk, s_verts) > u_hat.h(i)) return false;
  }
  return true;
}

/// Largest step t such that t * direction still satisfies terminal_region_ok,
/// found by doubling and bisection. Returns 0 when even the origin fails.
inline double max_terminal_scale(const Vector& direction, const Matrix& k_gain,
                                 const HPolytope& x_hat, const HPolytope& u_hat,
                                 const std::vector<Vector>& s_verts) {
  const auto ok = [&](double t) {
    return terminal_region_ok(Vector(t * direction), k_gain, x_hat, u_hat, s_verts);
  };
  if (!ok(0.0)) return 0.0;
  double lo = 0.0;
  double hi = 1.0;
  Index grow = 0;
  while (ok(hi) && grow < 60) {
    lo = hi;
    hi *= 2.0;
    ++grow;
  }
  if (grow >= 60) return lo;  // effectively unconstrained
  for (Index it = 0; it < 50; ++it) {
    const double mid = 0.5 * (lo + hi);
    (ok(mid) ? lo : hi) = mid;
  }
  return lo;
}

}  // namespace check_detail

// ---------------------------------------------------------------------------
// Tube recursion scaling factor: soundness and minimality
// ---------------------------------------------------------------------------

/// Verify on sampled boundary points that the reported contraction factor
/// lambda really certifies the scaling recursion: for every Jacobian-deviation
/// vertex C and disturbance vertex w, every e with |e|_V = beta satisfies
/// |(Phi + C) e + w|_V <= sqrt(lambda beta^2 + sigma^2).
inline void check_scaling_certificate(const StepLinearization& lin,
                                      const DisturbanceSet& disturbance, double sigma,
                                      const EllipsoidShape& shape, double beta,
                                      Index boundary_points, std::mt19937_64& rng,
                                      double tolerance, CheckReport& report) {
  const double allowed =
      std::sqrt(lin.lambda * beta * beta + sigma * sigma) + tolerance;
  for (Index p = 0; p < boundary_points; ++p) {
    const Vector e =
        beta * (shape.inv_sqrt_factor() *
                check_detail::unit_direction(rng, shape.dim()));
    for (const JacobianDeviation& dev : lin.cd) {
      const Vector base = (lin.phi + dev.c) * e;
      for (Index r = 0; r < disturbance.num_vertices(); ++r) {
        const double got = shape.norm(base + disturbance.vertices().col(r));
        report.add(allowed - got,
                   "scaling recursion exceeded at beta=" + std::to_string(beta));
      }
    }
  }
}

/// Semidefinite feasibility of a candidate contraction factor: lambda is
/// admissible iff lambda * V - (Phi+C)' Psi (Phi+C) is positive semidefinite
/// for every deviation vertex C and disturbance vertex w, with
/// Psi = (V^{-1} - w w' / sigma^2)^{-1}. Returns the smallest eigenvalue over
/// all vertex pairs, so admissibility is `result >= 0`.
inline double scaling_factor_feasibility(double lambda, const Matrix& phi,
                                         const std::vector<JacobianDeviation>& cd,
                                         const DisturbanceSet& disturbance,
                                         double sigma, const EllipsoidShape& shape) {
  const Matrix& v = shape.matrix();
  const double sigma_sq = sigma * sigma;
  double worst = std::numeric_limits<double>::infinity();
  for (Index r = 0; r < disturbance.num_vertices(); ++r) {
    const Vector w = disturbance.vertices().col(r);
    const Vector vw = v * w;
    const double denom = sigma_sq - w.dot(vw);
    if (denom <= 0.0)
      throw std::invalid_argument(
          "scaling_factor_feasibility: disturbance vertex outside the sigma ball");
    const Matrix psi = v + vw * vw.transpose() / denom;
    for (const JacobianDeviation& dev : cd) {
      const Matrix m = phi + dev.c;
      Matrix block = lambda * v - m.transpose() * psi * m;
      block = 0.5 * (block + block.transpose()).eval();
      Eigen::SelfAdjointEigenSolver<Matrix> eig(block, Eigen::EigenvaluesOnly);
      worst = std::min(worst, eig.eigenvalues().minCoeff());
    }
  }
  return worst;
}

/// Minimality of the reported contraction factor on one dataset: lambda plus
/// the margin must be feasible and lambda minus the margin must not be.
inline void check_scaling_factor_minimality(const StepLinearization& lin,
                                            const DisturbanceSet& disturbance,
                                            double sigma, const EllipsoidShape& shape,
                                            double margin, CheckReport& report) {
  const double above = scaling_factor_feasibility(lin.lambda + margin, lin.phi, lin.cd,
                                                  disturbance, sigma, shape);
  report.add(above, "factor + margin not feasible (eigenvalue " +
                        std::to_string(above) + ")");
  const double below = scaling_factor_feasibility(
      std::max(lin.lambda - margin, 0.0), lin.phi, lin.cd, disturbance, sigma, shape);
  if (lin.lambda - margin < 0.0) {
    // The factor is already within the margin of zero; there is nothing
    // smaller to rule out, which is itself the minimality statement.
    report.add(0.0, "");
  } else {
    report.add(-below, "factor - margin still feasible (eigenvalue " +
                           std::to_string(below) + ")");
  }
}

// ---------------------------------------------------------------------------
// Realized-trajectory tube containment
// ---------------------------------------------------------------------------

struct ContainmentSettings {
  Index vertex_limit = 256;   // exhaustive over vertex pairs up to this count
  Index sampled_pairs = 1000; // random realizations beyond the limit
  double tolerance = 1e-7;
};

/// One executed step: the plant state must sit in the first tube cross
/// section, and every admissible successor under the applied input must sit
/// in the second. Exhaustive over parameter/disturbance vertex pairs when
/// their count is small, sampled otherwise.
inline void check_one_step_containment(const BasisModel& model,
                                       const EllipsoidShape& shape,
                                       const ParamSimplex& theta_set,
                                       const DisturbanceSet& disturbance,
                                       const Vector& x_plant, const Vector& u_applied,
                                       const std::vector<Vector>& x0,
                                       const MPCSolution& sol, std::mt19937_64& rng,
                                       const ContainmentSettings& settings,
                                       CheckReport& report) {
  if (x0.size() < 2 || sol.z_star.size() < 2 || sol.beta_star.size() < 2)
    throw std::invalid_argument("check_one_step_containment: horizon too short");

  report.add(sol.beta_star(0) + settings.tolerance -
                 shape.norm(x_plant - x0[0] - sol.z_star[0]),
             "plant state outside the first cross section");

  const Vector center = x0[1] + sol.z_star[1];
  const double allowed = sol.beta_star(1) + settings.tolerance;
  const auto check_pair = [&](const Vector& theta, const Vector& w) {
    const Vector next = eval_f(model, x_plant, u_applied, theta) + w;
    report.add(allowed - shape.norm(next - center),
               "successor escaped the tube cross section");
  };

  const Index pairs = theta_set.num_vertices() * disturbance.num_vertices();
  if (pairs <= settings.vertex_limit) {
    for (Index q = 0; q < theta_set.num_vertices(); ++q)
      for (Index r = 0; r < disturbance.num_vertices(); ++r)
        check_pair(theta_set.vertices().col(q), disturbance.vertices().col(r));
  } else {
    for (Index s = 0; s < settings.sampled_pairs; ++s)
      check_pair(check_detail::hull_sample(rng, theta_set.vertices()),
                 check_detail::hull_sample(rng, disturbance.vertices()));
  }
}

/// Whole-horizon open-loop containment: freeze a parameter realization, draw
/// disturbances along the horizon, run the plant under the planned feedback
/// and corrections, and require every visited state to stay in its tube cross
/// section.
inline void check_open_loop_containment(const BasisModel& model,
                                        const EllipsoidShape& shape,
                                        const Matrix& k_gain,
                                        const ParamSimplex& theta_set,
                                        const DisturbanceSet& disturbance,
                                        const Vector& x_init,
                                        const std::vector<Vector>& x0,
                                        const std::vector<Vector>& v0,
                                        const MPCSolution& sol, Index realizations,
                                        std::mt19937_64& rng, double tolerance,
                                        CheckReport& report) {
  const Index horizon = static_cast<Index>(v0.size());
  if (static_cast<Index>(x0.size()) != horizon + 1 ||
      static_cast<Index>(sol.v_star.size()) != horizon ||
      static_cast<Index>(sol.z_star.size()) != horizon + 1 ||
      sol.beta_star.size() != horizon + 1)
    throw std::invalid_argument("check_open_loop_containment: length mismatch");

  for (Index run = 0; run < realizations; ++run) {
    const Vector theta = check_detail::hull_sample(rng, theta_set.vertices());
    Vector x = x_init;
    for (Index k = 0; k <= horizon; ++k) {
      report.add(sol.beta_star(k) + tolerance -
                     shape.norm(x - x0[static_cast<size_t>(k)] -
                                sol.z_star[static_cast<size_t>(k)]),
                 "open-loop state escaped the tube at step " + std::to_string(k));
      if (k == horizon) break;
      const Vector u = k_gain * x + v0[static_cast<size_t>(k)] +
                       sol.v_star[static_cast<size_t>(k)];
      const Vector w = check_detail::hull_sample(rng, disturbance.vertices());
      x = eval_f(model, x, u, theta) + w;
    }
  }
}

// ---------------------------------------------------------------------------
// Offline design certificate suites
// ---------------------------------------------------------------------------

struct DesignSuiteSettings {
  Index scaling_datasets = 20;     // linearization points for the recursion check
  Index boundary_points = 40;      // boundary samples per dataset and beta
  Index cost_samples = 1000;       // sampled points for the cost certificate
  Index terminal_samples = 150;    // sampled points in the terminal region
  Index directions_per_sample = 8; // directions for the contraction bounds
  Index decrease_tuples = 1000;    // sampled tuples for the cost decrease
  double scaling_tolerance = 1e-8;
  double cost_tolerance = 1e-9;
  double terminal_tolerance = 1e-8;
  double decrease_tolerance = 1e-7;
  double comparison_tolerance = 1e-8;
  std::uint64_t seed = 0x13d5eedULL;
};

/// Reports for the full certificate suite of one offline design.
struct DesignSuiteResult {
  CheckReport scaling;              // tube recursion certified by lambda
  CheckReport cost;                 // cost-to-go certificate on the design region
  CheckReport nominal_contraction;  // terminal rollout contracts in the V norm
  CheckReport center_contraction;   // tube centers contract in the V norm
  CheckReport scaling_comparison;   // online recursion below its offline bound
  CheckReport factor_comparison;    // pointwise factor below the region factor
  CheckReport decrease;             // terminal cost decrease on sampled tuples
  double deviation_scale = 1.0;     // scaling applied to the deviation polytope

  bool pass() const {
    for (const CheckReport* r : ordered())
      if (!r->pass()) return false;
    return true;
  }

  std::vector<const CheckReport*> ordered() const {
    return {&scaling,            &cost,
            &nominal_contraction, &center_contraction,
            &scaling_comparison,  &factor_comparison,
            &decrease};
  }
};

/// Run every certificate suite for one design. `x_hat`/`u_hat` are the
/// linearization validity regions used when the design was produced and
/// `s_verts` the vertices of the nominal-deviation polytope.
inline DesignSuiteResult run_design_suites(const BasisModel& model,
                                           const TerminalDesign& design,
                                           const ParamSimplex& theta_set,
                                           const DisturbanceSet& disturbance,
                                           const VPolytope& s_set,
                                           const HPolytope& x_hat,
                                           const HPolytope& u_hat,
                                           const DesignSuiteSettings& settings = {}) {
  std::mt19937_64 rng(settings.seed);
  DesignSuiteResult out;
  out.scaling.name = "tube recursion certificate";
  out.cost.name = "cost-to-go certificate";
  out.nominal_contraction.name = "terminal nominal contraction";
  out.center_contraction.name = "terminal center contraction";
  out.scaling_comparison.name = "terminal recursion domination";
  out.factor_comparison.name = "terminal factor comparison";
  out.decrease.name = "terminal cost decrease";

  const EllipsoidShape& shape = design.v;
  const Index n = model.state_dim();
  const Index m = model.input_dim();
  const Vector theta0 = theta_set.vertex_mean();
  const ControlPerturbationSet v_region = ControlPerturbationSet::all();
  const double sqrt_lambda_hat = std::sqrt(design.lambda_hat);

  // --- Tube recursion certificate on random linearization points -----------
  for (Index d = 0; d < settings.scaling_datasets; ++d) {
    const double radius = design.rho_hat * check_detail::uniform01(rng);
    const Vector x0 = radius * (shape.inv_sqrt_factor() *
                                check_detail::unit_direction(rng, n));
    const Vector v0 = 0.1 * check_detail::gaussian_vector(rng, m);
    const StepLinearization lin =
        linearize_step(model, design.k, x0, v0, theta0, s_set, v_region, theta_set,
                       disturbance, design.sigma, shape);
    for (double beta : {0.2, 1.0}) {
      check_scaling_certificate(lin, disturbance, design.sigma, shape, beta,
                                settings.boundary_points, rng,
                                settings.scaling_tolerance, out.scaling);
    }
  }

  // --- Cost-to-go certificate on the constrained design region -------------
  const bool boxed = x_hat.is_axis_box();
  for (Index s = 0; s < settings.cost_samples; ++s) {
    Vector x;
    if (boxed && s % 2 == 0) {
      // Rejection sample from the box, keeping the feedback inside its region.
      bool found = false;
      for (Index attempt = 0; attempt < 50 && !found; ++attempt) {
        Vector cand(n);
        for (Index i = 0; i < n; ++i)
          cand(i) = (2.0 * check_detail::uniform01(rng) - 1.0) * x_hat.box_halfwidth(i);
        if (u_hat.contains(Vector(design.k * cand))) {
          x = cand;
          found = true;
        }
      }
      if (!found) continue;
    } else {
      // The ellipsoid of radius rho_hat always lies inside the design region.
      const double radius = design.rho_hat * check_detail::uniform01(rng);
      x = radius * (shape.inv_sqrt_factor() * check_detail::unit_direction(rng, n));
    }
    const Vector u = design.k * x;
    const Vector theta = check_detail::hull_sample(rng, theta_set.vertices());
    Vector w = check_detail::hull_sample(rng, disturbance.vertices());
    if (check_detail::uniform01(rng) < 0.2) w *= check_detail::uniform01(rng);
    const Vector next = eval_f(model, x, u, theta) + w;
    const double drop = shape.norm(x) * shape.norm(x) - shape.norm(next) * shape.norm(next);
    const double required = x.dot(design.q_hat * x) - design.sigma * design.sigma;
    out.cost.add(drop - required + settings.cost_tolerance,
                 "cost certificate violated on a sampled point");
  }

  // --- Contraction bounds on the constrained design region -----------------
  // The rollout and center recursions contract wherever the state stays in
  // the design region, for which the ellipsoid of radius rho_hat is an inner
  // approximation.
  for (Index s = 0; s < settings.terminal_samples; ++s) {
    const double radius = design.rho_hat * check_detail::uniform01(rng);
    const Vector x0 = radius * (shape.inv_sqrt_factor() *
                                check_detail::unit_direction(rng, n));
    const Vector x0_next = eval_closed_loop(model, x0, Vector::Zero(m), theta0, design.k);
    out.nominal_contraction.add(
        sqrt_lambda_hat * shape.norm(x0) + settings.terminal_tolerance -
            shape.norm(x0_next),
        "terminal rollout expanded in the V norm");

    const Matrix phi =
        eval_closed_loop_jacobians(model, x0, Vector::Zero(m), theta0, design.k).phi;
    for (Index t = 0; t < settings.directions_per_sample; ++t) {
      const Vector z = shape.inv_sqrt_factor() * check_detail::unit_direction(rng, n);
      // The recursion is homogeneous in z, so unit directions suffice.
      out.center_contraction.add(
          sqrt_lambda_hat + settings.terminal_tolerance - shape.norm(phi * z),
          "tube center recursion expanded in the V norm");
    }
  }

  // --- Suites under the deviation-slab premise ------------------------------
  // The recursion-domination and factor-comparison claims hold wherever the
  // whole deviation polytope around the linearization point stays inside the
  // validity regions. That premise is parametric in the polytope, so when the
  // supplied one is too large to admit any such point the suite instantiates
  // the claim with the largest admissible scaling instead.
  std::vector<Vector> s_verts = s_set.vertices;
  {
    const auto admissible = [&](double t) {
      std::vector<Vector> scaled;
      scaled.reserve(s_verts.size());
      for (const Vector& sv : s_verts) scaled.push_back(t * sv);
      return check_detail::terminal_region_ok(Vector::Zero(n), design.k, x_hat, u_hat,
                                              scaled);
    };
    if (!admissible(1.0)) {
      double lo = 0.0;
      double hi = 1.0;
      for (Index it = 0; it < 50; ++it) {
        const double mid = 0.5 * (lo + hi);
        (admissible(mid) ? lo : hi) = mid;
      }
      out.deviation_scale = 0.8 * lo;
      for (Vector& sv : s_verts) sv *= out.deviation_scale;
    }
  }
  VPolytope suite_s;
  suite_s.vertices = s_verts;

  for (Index s = 0; s < settings.terminal_samples; ++s) {
    const Vector direction = check_detail::unit_direction(rng, n);
    const double scale = check_detail::max_terminal_scale(direction, design.k, x_hat,
                                                          u_hat, s_verts);
    if (scale <= 0.0) continue;
    const Vector x0 = (scale * check_detail::uniform01(rng)) * direction;
    const double x0_norm = shape.norm(x0);

    const StepLinearization lin =
        linearize_step(model, design.k, x0, Vector::Zero(m), theta0, suite_s, v_region,
                       theta_set, disturbance, design.sigma, shape);

    // Pointwise factor never exceeds the region-wide factor.
    out.factor_comparison.add(
        design.lambda_hat + settings.comparison_tolerance - lin.lambda,
        "pointwise contraction factor exceeded the region factor");

    // The online scaling recursion is dominated by its offline bound.
    for (Index t = 0; t < settings.directions_per_sample; ++t) {
      const double r = design.rho_hat * check_detail::uniform01(rng);
      const Vector z = r * (shape.inv_sqrt_factor() *
                            check_detail::unit_direction(rng, n));
      const double beta = 2.0 * design.rho_hat * check_detail::uniform01(rng);
      double crossing = 0.0;
      for (const JacobianDeviation& dev : lin.cd)
        for (const Vector& delta : lin.delta0)
          crossing = std::max(crossing, shape.norm(dev.c * z + delta));
      const double online =
          std::sqrt(lin.lambda * beta * beta + design.sigma * design.sigma) + crossing;
      const double offline =
          std::sqrt(design.lambda_hat * beta * beta + design.sigma * design.sigma) +
          design.d_phi * shape.norm(z) +
          design.d_theta * design.lipschitz * x0_norm;
      out.scaling_comparison.add(offline - online + settings.terminal_tolerance,
                                 "online recursion exceeded its offline bound");
    }
  }

  // --- Terminal cost decrease on sampled tuples ----------------------------
  {
    Index tested = 0;
    std::uint64_t seed = settings.seed + 1;
    try {
      while (tested < settings.decrease_tuples) {
        tested += verify_decrease_condition(design, settings.decrease_tuples, seed++,
                                            settings.decrease_tolerance);
      }
      out.decrease.samples = tested;
      out.decrease.worst_margin = 0.0;
    } catch (const std::runtime_error& err) {
      out.decrease.samples = tested + 1;
      out.decrease.failures = 1;
      out.decrease.worst_margin = -1.0;
      out.decrease.detail = err.what();
    }
  }

  return out;
}

// ---------------------------------------------------------------------------
// Contraction factor minimality over random datasets
// ---------------------------------------------------------------------------

/// Build a random linearization dataset and verify the minimality of its
/// contraction factor. Repeats for `datasets` independently drawn systems.
inline CheckReport check_minimality_over_random_datasets(Index datasets,
                                                         std::uint64_t seed,
                                                         double margin = 1e-6) {
  CheckReport report;
  report.name = "contraction factor minimality";
  std::mt19937_64 rng(seed);
  for (Index d = 0; d < datasets; ++d) {
    const Index n = 2 + static_cast<Index>(rng() % 3);
    const Index nw = 1 + static_cast<Index>(rng() % 2);

    Matrix root = Matrix::Zero(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j)
        root(i, j) = 2.0 * check_detail::uniform01(rng) - 1.0;
    const Matrix v = root * root.transpose() + Matrix::Identity(n, n);
    const EllipsoidShape shape(v);

    Matrix b_w(n, nw);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < nw; ++j)
        b_w(i, j) = 2.0 * check_detail::uniform01(rng) - 1.0;
    Eigen::JacobiSVD<Matrix> svd(b_w);
    if (svd.singularValues().minCoeff() < 1e-3) {
      --d;  // nearly rank-deficient draw; replace it
      continue;
    }
    const DisturbanceSet disturbance(b_w, 0.05);

    double w_reach = 0.0;
    for (Index r = 0; r < disturbance.num_vertices(); ++r)
      w_reach = std::max(w_reach, shape.norm(disturbance.vertices().col(r)));
    const double sigma = w_reach * (1.2 + check_detail::uniform01(rng));

    StepLinearization lin;
    lin.phi = Matrix::Zero(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j)
        lin.phi(i, j) = 1.5 * (2.0 * check_detail::uniform01(rng) - 1.0);
    const Index devs = 1 + static_cast<Index>(rng() % 3);
    for (Index k = 0; k < devs; ++k) {
      JacobianDeviation dev;
      dev.c = Matrix::Zero(n, n);
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
          dev.c(i, j) = 0.3 * (2.0 * check_detail::uniform01(rng) - 1.0);
      dev.d = Matrix::Zero(n, 1);
      lin.cd.push_back(std::move(dev));
    }
    lin.lambda = compute_lambda_k(lin.phi, lin.cd, disturbance, sigma, shape);
    check_scaling_factor_minimality(lin, disturbance, sigma, shape, margin, report);
  }
  return report;
}

}  // namespace etmpc
