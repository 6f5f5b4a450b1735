#pragma once

#include "model.hpp"
#include "numerics.hpp"

#include <stdexcept>

namespace quadmpc {

/// How an unmeasured constant disturbance enters the plant: state update
/// through Gamma_d, measurement through C_d.
struct DisturbanceModel {
  Matrix Gamma_d;  ///< n x nd
  Matrix C_d;      ///< p x nd

  Eigen::Index size() const { return Gamma_d.cols(); }
};

/// Constant wind force along world X, held over each sample: the exact
/// discretization of VX' += d, so the scalar d lands on the X-velocity update
/// (dt) and on the X-position update (dt^2/2). Absent from the measurement.
///
/// The force must enter through the velocity row: a disturbance confined to
/// the position update equals the (I - Phi) column of VX, which a pose-only
/// output cannot separate from a velocity offset, and the augmented pair
/// loses detectability.
inline DisturbanceModel wind_gust_disturbance(const LtiModel& model) {
  DisturbanceModel d;
  d.Gamma_d = Matrix::Zero(model.state_dim(), 1);
  d.Gamma_d(StateIndex::VX, 0) = model.dt;
  d.Gamma_d(StateIndex::X, 0) = 0.5 * model.dt * model.dt;
  d.C_d = Matrix::Zero(model.output_dim(), 1);
  return d;
}

/// Plant state stacked with the disturbance, driven by the same input:
///   [x; d]+ = Phi_t [x; d] + Gamma_t u,   y = C_t [x; d].
struct AugmentedModel {
  Matrix Phi_t, Gamma_t, C_t;
  Eigen::Index dist_dim = 0;  ///< trailing disturbance states within the blocks

  Eigen::Index dim() const { return Phi_t.rows(); }
  Eigen::Index state_dim() const { return dim() - dist_dim; }
  Eigen::Index input_dim() const { return Gamma_t.cols(); }
  Eigen::Index output_dim() const { return C_t.rows(); }
};

inline AugmentedModel augment(const LtiModel& model, const DisturbanceModel& dist) {
  const Eigen::Index n = model.state_dim();
  const Eigen::Index m = model.input_dim();
  const Eigen::Index p = model.output_dim();
  const Eigen::Index nd = dist.size();
  if (dist.Gamma_d.rows() != n || dist.C_d.rows() != p || dist.C_d.cols() != nd)
    throw std::invalid_argument("augment: disturbance blocks do not match the model");

  AugmentedModel aug;
  aug.dist_dim = nd;
  aug.Phi_t = Matrix::Zero(n + nd, n + nd);
  aug.Phi_t.topLeftCorner(n, n) = model.Phi;
  aug.Phi_t.topRightCorner(n, nd) = dist.Gamma_d;
  aug.Phi_t.bottomRightCorner(nd, nd) = Matrix::Identity(nd, nd);
  aug.Gamma_t = Matrix::Zero(n + nd, m);
  aug.Gamma_t.topRows(n) = model.Gamma;
  aug.C_t = Matrix::Zero(p, n + nd);
  aug.C_t.leftCols(n) = model.C;
  aug.C_t.rightCols(nd) = dist.C_d;
  return aug;
}

/// Rank of [[I - Phi, -Gamma_d], [C, C_d]]. The augmented pair is detectable
/// iff (C, Phi) is detectable and this rank equals n + nd; full rank also
/// guarantees the target-selection equations are solvable for any reference.
inline Eigen::Index offset_tracking_rank(const LtiModel& model, const DisturbanceModel& dist) {
  const Eigen::Index n = model.state_dim();
  const Eigen::Index p = model.output_dim();
  const Eigen::Index nd = dist.size();
  Matrix M(n + p, n + nd);
  M.topLeftCorner(n, n) = Matrix::Identity(n, n) - model.Phi;
  M.topRightCorner(n, nd) = -dist.Gamma_d;
  M.bottomLeftCorner(p, n) = model.C;
  M.bottomRightCorner(p, nd) = dist.C_d;
  return numerical_rank(M);
}

/// Steady-state predictor gain: L = (dual Riccati gain)' with the roles of
/// dynamics and output swapped. The returned L places the error dynamics
/// Phi_t - L C_t strictly inside the unit circle.
inline Matrix kalman_gain(const AugmentedModel& aug, const Matrix& Q_K, const Matrix& R_K) {
  if (Q_K.rows() != aug.dim() || R_K.rows() != aug.output_dim())
    throw std::invalid_argument("kalman_gain: weight dimensions do not match");
  const DareSolution dual =
      solve_dare(aug.Phi_t.transpose(), aug.C_t.transpose(), Q_K, R_K);
  const Matrix L = dual.K.transpose();
  if (spectral_radius(aug.Phi_t - L * aug.C_t) >= 1.0)
    throw ConvergenceError("kalman_gain: error dynamics not contractive", dual.iterations);
  return L;
}

/// One predictor update: correct with the current measurement, then advance.
inline Vector observer_step(const AugmentedModel& aug, const Matrix& L, const Vector& xhat,
                            const Vector& u, const Vector& y) {
  if (xhat.size() != aug.dim() || u.size() != aug.input_dim() || y.size() != aug.output_dim())
    throw std::invalid_argument("observer_step: dimension mismatch");
  return aug.Phi_t * xhat + aug.Gamma_t * u + L * (y - aug.C_t * xhat);
}

}  // namespace quadmpc
