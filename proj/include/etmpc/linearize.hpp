#pragma once

// Per-step linearization data for the tube optimization: nominal trajectory
// rollout, parameter-offset disturbance vertices, Jacobian-deviation
// vertices, and the contraction factor lambda that propagates the ellipsoid
// scaling through one step under the worst disturbance vertex.

#include <stdexcept>
#include <string>
#include <vector>

#include <etmpc/geometry.hpp>
#include <etmpc/model.hpp>

namespace etmpc {

struct NominalTrajectory {
  std::vector<Vector> x0;  // N + 1 states
  std::vector<Vector> v0;  // N control corrections
  Vector theta0;

  Index horizon() const { return static_cast<Index>(v0.size()); }
};

/// Simulate x0[k+1] = f(x0[k], K x0[k] + v0[k], theta0).
inline NominalTrajectory rollout_nominal(const BasisModel& model, const Matrix& k_gain,
                                         const Vector& x_init,
                                         const std::vector<Vector>& v0_seq,
                                         const Vector& theta0) {
  if (v0_seq.empty()) throw std::invalid_argument("rollout_nominal: empty horizon");
  NominalTrajectory traj;
  traj.theta0 = theta0;
  traj.v0 = v0_seq;
  traj.x0.reserve(v0_seq.size() + 1);
  traj.x0.push_back(x_init);
  for (size_t k = 0; k < v0_seq.size(); ++k) {
    Vector next = eval_closed_loop(model, traj.x0.back(), v0_seq[k], theta0, k_gain);
    if (!next.allFinite() || next.cwiseAbs().maxCoeff() > 1e12)
      throw std::runtime_error("rollout_nominal: trajectory diverged at step " +
                               std::to_string(k));
    traj.x0.push_back(std::move(next));
  }
  return traj;
}

/// Vertices of the parameter-offset disturbance at one step: for each vertex
/// theta_q of the parameter set, sum_i (theta_q_i - theta0_i) f_i(x0, u0).
inline std::vector<Vector> delta0_vertices(const BasisModel& model, const Vector& x0_k,
                                           const Vector& v0_k, const Matrix& k_gain,
                                           const ParamSimplex& theta_set,
                                           const Vector& theta0) {
  const Vector u0 = k_gain * x0_k + v0_k;
  std::vector<Vector> basis_vals;
  basis_vals.reserve(static_cast<size_t>(model.param_dim()));
  for (Index i = 1; i <= model.param_dim(); ++i)
    basis_vals.push_back(model.eval_basis(i, x0_k, u0));
  std::vector<Vector> out;
  out.reserve(static_cast<size_t>(theta_set.num_vertices()));
  for (Index q = 0; q < theta_set.num_vertices(); ++q) {
    Vector d = Vector::Zero(model.state_dim());
    for (Index i = 0; i < model.param_dim(); ++i)
      d += (theta_set.vertices()(i, q) - theta0(i)) * basis_vals[static_cast<size_t>(i)];
    out.push_back(std::move(d));
  }
  return out;
}

/// Smallest factor lambda with lambda * V >= (Phi + C)' Psi (Phi + C) for all
/// Jacobian-deviation vertices C and disturbance vertices w, where
/// Psi = (V^{-1} - w w'/sigma^2)^{-1}; this certifies the one-step scaling
/// update sqrt(lambda beta^2 + sigma^2) of the tube cross sections.
inline double compute_lambda_k(const Matrix& phi,
                               const std::vector<JacobianDeviation>& cd_vertices,
                               const DisturbanceSet& disturbance, double sigma,
                               const EllipsoidShape& shape) {
  const double sigma_sq = sigma * sigma;
  const Matrix& v = shape.matrix();
  std::vector<Matrix> psi;
  psi.reserve(static_cast<size_t>(disturbance.num_vertices()));
  for (Index r = 0; r < disturbance.num_vertices(); ++r) {
    const Vector w = disturbance.vertices().col(r);
    const Vector vw = v * w;
    const double wvw = w.dot(vw);
    if (wvw >= sigma_sq * (1.0 - 1e-9))
      throw std::runtime_error(
          "compute_lambda_k: disturbance vertex " + std::to_string(r) +
          " too large for the requested sigma (w'Vw = " + std::to_string(wvw) +
          ", sigma^2 = " + std::to_string(sigma_sq) + ")");
    Matrix p = v + vw * vw.transpose() / (sigma_sq - wvw);
    psi.push_back(std::move(p));
  }
  double lambda = 0.0;
  for (const JacobianDeviation& dev : cd_vertices) {
    const Matrix a = (phi + dev.c) * shape.inv_sqrt_factor();
    for (const Matrix& p : psi) {
      Matrix g = a.transpose() * p * a;
      g = 0.5 * (g + g.transpose()).eval();
      Eigen::SelfAdjointEigenSolver<Matrix> eig(g, Eigen::EigenvaluesOnly);
      lambda = std::max(lambda, eig.eigenvalues().maxCoeff());
    }
  }
  return std::max(lambda, 0.0);
}

struct StepLinearization {
  Matrix phi;
  Matrix b;
  std::vector<Vector> delta0;           // one per parameter-set vertex
  std::vector<JacobianDeviation> cd;    // Jacobian-deviation vertices
  double lambda = 0.0;
};

inline StepLinearization linearize_step(const BasisModel& model, const Matrix& k_gain,
                                        const Vector& x0_k, const Vector& v0_k,
                                        const Vector& theta0, const VPolytope& s_set,
                                        const ControlPerturbationSet& v_set,
                                        const ParamSimplex& theta_set,
                                        const DisturbanceSet& disturbance, double sigma,
                                        const EllipsoidShape& shape) {
  StepLinearization out;
  const auto jac = eval_closed_loop_jacobians(model, x0_k, v0_k, theta0, k_gain);
  out.phi = jac.phi;
  out.b = jac.b;
  out.delta0 = delta0_vertices(model, x0_k, v0_k, k_gain, theta_set, theta0);
  out.cd = model.jacobian_deviation_vertices(x0_k, v0_k, k_gain, s_set, v_set,
                                             theta_set, theta0);
  if (static_cast<Index>(out.delta0.size()) > model.param_dim() + 1)
    throw std::logic_error("linearize_step: too many parameter vertices");
  out.lambda = compute_lambda_k(out.phi, out.cd, disturbance, sigma, shape);
  return out;
}

}  // namespace etmpc
