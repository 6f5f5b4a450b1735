#pragma once

#include "numerics.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace quadmpc {

using State = Eigen::Matrix<double, 12, 1>;
using Input = Eigen::Matrix<double, 4, 1>;

/// Published layout of the state vector.
struct StateIndex {
  enum : int { X = 0, Y, Z, Roll, Pitch, Yaw, VX, VY, VZ, RollRate, PitchRate, YawRate, Count };
};

/// Input layout. Thrust is the deviation from hover: total rotor thrust minus m*g.
struct InputIndex {
  enum : int { Thrust = 0, TorqueX, TorqueY, TorqueZ, Count };
};

struct QuadrotorParams {
  double m = 1.0;    ///< mass [kg]
  double g = 9.81;   ///< gravitational acceleration [m/s^2]
  double l = 0.2;    ///< arm length [m]
  double I_x = 0.11; ///< roll inertia [kg m^2]
  double I_y = 0.11; ///< pitch inertia [kg m^2]
  double I_z = 0.04; ///< yaw inertia [kg m^2]
  double dt = 0.1;   ///< sample time [s]

  double hover_thrust() const { return m * g; }

  void validate() const {
    if (!(m > 0.0 && g > 0.0 && l > 0.0 && I_x > 0.0 && I_y > 0.0 && I_z > 0.0 && dt > 0.0))
      throw std::invalid_argument("QuadrotorParams: all parameters must be positive");
  }
};

/// Continuous-time rigid-body dynamics xdot = f(x, u). Torques act through the
/// arm length; gyroscopic coupling terms keep the full Euler rotation products.
inline State dynamics_continuous(const State& x, const Input& u, const QuadrotorParams& p) {
  const double phi = x(StateIndex::Roll);
  const double theta = x(StateIndex::Pitch);
  const double psi = x(StateIndex::Yaw);
  const double dphi = x(StateIndex::RollRate);
  const double dtheta = x(StateIndex::PitchRate);
  const double dpsi = x(StateIndex::YawRate);

  const double F = u(InputIndex::Thrust) + p.hover_thrust();
  const double sph = std::sin(phi), cph = std::cos(phi);
  const double sth = std::sin(theta), cth = std::cos(theta);
  const double sps = std::sin(psi), cps = std::cos(psi);

  State dx;
  dx.segment<6>(0) = x.segment<6>(6);
  dx(StateIndex::VX) = F * (cph * sth * cps + sph * sps) / p.m;
  dx(StateIndex::VY) = F * (cph * sth * sps + sph * cps) / p.m;
  dx(StateIndex::VZ) = F * (cph * cth) / p.m - p.g;
  dx(StateIndex::RollRate) = (u(InputIndex::TorqueX) * p.l + dtheta * dpsi * (p.I_y - p.I_z)) / p.I_x;
  dx(StateIndex::PitchRate) = (u(InputIndex::TorqueY) * p.l + dpsi * dphi * (p.I_z - p.I_x)) / p.I_y;
  dx(StateIndex::YawRate) = (u(InputIndex::TorqueZ) * p.l + dphi * dtheta * (p.I_x - p.I_y)) / p.I_z;
  return dx;
}

/// Jacobians of the dynamics at the hover equilibrium (x = 0, u = 0).
inline void linearize(const QuadrotorParams& p, Matrix& A, Matrix& B) {
  p.validate();
  A = Matrix::Zero(12, 12);
  B = Matrix::Zero(12, 4);
  A.block<6, 6>(0, 6).setIdentity();
  A(StateIndex::VX, StateIndex::Pitch) = p.g;
  A(StateIndex::VY, StateIndex::Roll) = p.g;
  B(StateIndex::VZ, InputIndex::Thrust) = 1.0 / p.m;
  B(StateIndex::RollRate, InputIndex::TorqueX) = p.l / p.I_x;
  B(StateIndex::PitchRate, InputIndex::TorqueY) = p.l / p.I_y;
  B(StateIndex::YawRate, InputIndex::TorqueZ) = p.l / p.I_z;
}

/// Exact zero-order-hold discretization via the exponential of the augmented
/// matrix [[A, B], [0, 0]] * dt.
inline std::pair<Matrix, Matrix> discretize_zoh(const Matrix& A, const Matrix& B, double dt) {
  if (A.rows() != A.cols() || B.rows() != A.rows())
    throw std::invalid_argument("discretize_zoh: dimension mismatch");
  if (!(dt > 0.0)) throw std::invalid_argument("discretize_zoh: dt must be positive");
  const Eigen::Index n = A.rows();
  const Eigen::Index m = B.cols();
  Matrix Aug = Matrix::Zero(n + m, n + m);
  Aug.topLeftCorner(n, n) = A;
  Aug.topRightCorner(n, m) = B;
  const Matrix E = expm(Aug * dt);
  return {E.topLeftCorner(n, n), E.topRightCorner(n, m)};
}

enum class OutputMode { FullState, Pose };

/// 6x12 selector for the pose block (positions and Euler angles).
inline Matrix pose_output_matrix() {
  Matrix C = Matrix::Zero(6, 12);
  C.block<6, 6>(0, 0).setIdentity();
  return C;
}

/// Linear time-invariant model around hover: continuous pair (A, B), exact
/// discrete pair (Phi, Gamma), and the measurement map y = C x + D u.
struct LtiModel {
  Matrix A, B;
  Matrix Phi, Gamma;
  Matrix C, D;
  double dt = 0.1;

  Eigen::Index state_dim() const { return Phi.rows(); }
  Eigen::Index input_dim() const { return Gamma.cols(); }
  Eigen::Index output_dim() const { return C.rows(); }
};

inline LtiModel make_model(const QuadrotorParams& p, OutputMode mode = OutputMode::FullState) {
  LtiModel mdl;
  linearize(p, mdl.A, mdl.B);
  std::tie(mdl.Phi, mdl.Gamma) = discretize_zoh(mdl.A, mdl.B, p.dt);
  if (max_abs(mdl.Phi - expm(mdl.A * p.dt)) > 1e-12)
    throw std::runtime_error("make_model: discretization cross-check failed");
  mdl.C = mode == OutputMode::FullState ? Matrix::Identity(12, 12) : pose_output_matrix();
  mdl.D = Matrix::Zero(mdl.C.rows(), 4);
  mdl.dt = p.dt;
  return mdl;
}

/// One sample period of the nonlinear dynamics under a held input, integrated
/// with classical RK4 split into `substeps` equal steps.
inline State step_nonlinear(const State& x, const Input& u, const QuadrotorParams& p,
                            int substeps = 1) {
  if (substeps < 1) throw std::invalid_argument("step_nonlinear: substeps must be >= 1");
  const double h = p.dt / substeps;
  State s = x;
  for (int i = 0; i < substeps; ++i) {
    const State k1 = dynamics_continuous(s, u, p);
    const State k2 = dynamics_continuous(s + (0.5 * h) * k1, u, p);
    const State k3 = dynamics_continuous(s + (0.5 * h) * k2, u, p);
    const State k4 = dynamics_continuous(s + h * k3, u, p);
    s += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return s;
}

}  // namespace quadmpc
