#include <catch2/catch_amalgamated.hpp>

#include <quadmpc/model.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace quadmpc;

namespace {
State base_state() {
  State x = State::Zero();
  x(StateIndex::X) = 1.0;
  x(StateIndex::Y) = 2.0;
  x(StateIndex::Z) = -0.5;
  x(StateIndex::Roll) = 0.2;
  x(StateIndex::Pitch) = -0.3;
  x(StateIndex::Yaw) = 0.4;
  x(StateIndex::VX) = 0.5;
  x(StateIndex::VY) = -0.3;
  x(StateIndex::VZ) = 0.1;
  x(StateIndex::RollRate) = 0.7;
  x(StateIndex::PitchRate) = -0.2;
  x(StateIndex::YawRate) = 0.9;
  return x;
}
}  // namespace

TEST_CASE("hover is an exact equilibrium") {
  const QuadrotorParams p;
  const State dx = dynamics_continuous(State::Zero(), Input::Zero(), p);
  REQUIRE(max_abs(dx) == 0.0);
}

TEST_CASE("hover Jacobians match central finite differences") {
  const QuadrotorParams p;
  Matrix A, B;
  linearize(p, A, B);
  const auto f = [&p](const Vector& x, const Vector& u) -> Vector {
    return dynamics_continuous(State(x), Input(u), p);
  };
  const auto J = oracle::fd_jacobians(f, Vector::Zero(12), Vector::Zero(4), 1e-6);
  REQUIRE(max_abs(A - J.dx) < 1e-6);
  REQUIRE(max_abs(B - J.du) < 1e-6);
}

TEST_CASE("linearization structure") {
  const QuadrotorParams p;
  Matrix A, B;
  linearize(p, A, B);
  REQUIRE(A(StateIndex::VX, StateIndex::Pitch) == Catch::Approx(p.g));
  REQUIRE(A(StateIndex::VY, StateIndex::Roll) == Catch::Approx(p.g));
  REQUIRE(A(StateIndex::X, StateIndex::VX) == 1.0);
  REQUIRE(B(StateIndex::VZ, InputIndex::Thrust) == Catch::Approx(1.0 / p.m));
  REQUIRE(B(StateIndex::RollRate, InputIndex::TorqueX) == Catch::Approx(p.l / p.I_x));
  REQUIRE(B(StateIndex::YawRate, InputIndex::TorqueZ) == Catch::Approx(p.l / p.I_z));
  // gravity tilts couple only through roll and pitch
  REQUIRE(A.block(6, 0, 6, 3).isZero(0.0));
  REQUIRE(A(StateIndex::VX, StateIndex::Roll) == 0.0);
  REQUIRE(A(StateIndex::VY, StateIndex::Pitch) == 0.0);
}

TEST_CASE("zero-order hold of a double integrator is exact") {
  Matrix A(2, 2), B(2, 1);
  A << 0.0, 1.0, 0.0, 0.0;
  B << 0.0, 1.0;
  const double dt = 0.37;
  const auto [Phi, Gamma] = discretize_zoh(A, B, dt);
  Matrix Phi_ref(2, 2);
  Phi_ref << 1.0, dt, 0.0, 1.0;
  Matrix Gamma_ref(2, 1);
  Gamma_ref << 0.5 * dt * dt, dt;
  REQUIRE(max_abs(Phi - Phi_ref) < 1e-12);
  REQUIRE(max_abs(Gamma - Gamma_ref) < 1e-12);
}

TEST_CASE("quadrotor hold matrices agree with quadrature and the exponential") {
  const QuadrotorParams p;
  const LtiModel mdl = make_model(p);
  REQUIRE(max_abs(mdl.Phi - expm(mdl.A * p.dt)) <= 1e-12);
  const Matrix Gamma_ref = oracle::zoh_gamma_quadrature(mdl.A, mdl.B, p.dt);
  REQUIRE(max_abs(mdl.Gamma - Gamma_ref) < 1e-9);
}

TEST_CASE("model outputs") {
  const QuadrotorParams p;
  const LtiModel full = make_model(p, OutputMode::FullState);
  REQUIRE(full.C.rows() == 12);
  REQUIRE(max_abs(full.C - Matrix::Identity(12, 12)) == 0.0);
  const LtiModel pose = make_model(p, OutputMode::Pose);
  REQUIRE(pose.C.rows() == 6);
  REQUIRE(max_abs(pose.C.leftCols(6) - Matrix::Identity(6, 6)) == 0.0);
  REQUIRE(pose.C.rightCols(6).isZero(0.0));
  REQUIRE(pose.D.isZero(0.0));
}

TEST_CASE("free fall along Z matches the closed form") {
  QuadrotorParams p;
  Input u = Input::Zero();
  u(InputIndex::Thrust) = -p.hover_thrust();  // total thrust zero
  State x = State::Zero();
  for (int k = 1; k <= 5; ++k) {
    x = step_nonlinear(x, u, p);
    const double t = k * p.dt;
    REQUIRE(x(StateIndex::Z) == Catch::Approx(-0.5 * p.g * t * t).margin(1e-12));
    REQUIRE(x(StateIndex::VZ) == Catch::Approx(-p.g * t).margin(1e-12));
  }
}

TEST_CASE("RK4 self-convergence is fourth order") {
  const QuadrotorParams p;
  const State x0 = base_state();
  Input u;
  u << 2.0, 0.3, -0.2, 0.01;
  const State ref = step_nonlinear(x0, u, p, 256);
  const double e1 = max_abs(step_nonlinear(x0, u, p, 1) - ref);
  const double e2 = max_abs(step_nonlinear(x0, u, p, 2) - ref);
  const double e4 = max_abs(step_nonlinear(x0, u, p, 4) - ref);
  const double r12 = e1 / e2;
  const double r24 = e2 / e4;
  REQUIRE(r12 > 12.0);
  REQUIRE(r12 < 20.0);
  REQUIRE(r24 > 12.0);
  REQUIRE(r24 < 20.0);
}

TEST_CASE("planar trajectories with zero roll rotate with the yaw angle") {
  // On the invariant subfamily roll = 0, roll rate = 0, yaw rate = 0 (no roll or
  // yaw torque), the horizontal thrust component points along the yaw heading, so
  // shifting yaw by a constant rotates the (X, Y) trajectory rigidly.
  const QuadrotorParams p;
  const double psi0 = 0.9;
  const double c = std::cos(psi0), s = std::sin(psi0);

  State x = State::Zero();
  x(StateIndex::X) = 1.0;
  x(StateIndex::Y) = -0.5;
  x(StateIndex::Yaw) = 0.4;
  x(StateIndex::Pitch) = 0.25;
  x(StateIndex::VX) = 0.6;
  x(StateIndex::VY) = 0.2;
  x(StateIndex::PitchRate) = 0.15;

  State xr = x;
  xr(StateIndex::Yaw) += psi0;
  xr(StateIndex::X) = c * x(StateIndex::X) - s * x(StateIndex::Y);
  xr(StateIndex::Y) = s * x(StateIndex::X) + c * x(StateIndex::Y);
  xr(StateIndex::VX) = c * x(StateIndex::VX) - s * x(StateIndex::VY);
  xr(StateIndex::VY) = s * x(StateIndex::VX) + c * x(StateIndex::VY);

  Input u = Input::Zero();
  u(InputIndex::Thrust) = 1.5;
  u(InputIndex::TorqueY) = 0.4;

  for (int k = 0; k < 20; ++k) {
    x = step_nonlinear(x, u, p, 4);
    xr = step_nonlinear(xr, u, p, 4);
    REQUIRE(xr(StateIndex::X) ==
            Catch::Approx(c * x(StateIndex::X) - s * x(StateIndex::Y)).margin(1e-10));
    REQUIRE(xr(StateIndex::Y) ==
            Catch::Approx(s * x(StateIndex::X) + c * x(StateIndex::Y)).margin(1e-10));
    REQUIRE(xr(StateIndex::Z) == Catch::Approx(x(StateIndex::Z)).margin(1e-10));
    REQUIRE(xr(StateIndex::Roll) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(xr(StateIndex::Yaw) == Catch::Approx(x(StateIndex::Yaw) + psi0).margin(1e-10));
  }
}

TEST_CASE("finite-horizon recursion on the hold model reaches the dare gain") {
  const QuadrotorParams p;
  const LtiModel mdl = make_model(p);
  Vector qd(12);
  qd << 10, 10, 100, 10, 10, 10, 1, 1, 1, 1, 1, 1;
  Vector rd(4);
  rd << 0.1, 1, 1, 1;
  const Matrix Q = qd.asDiagonal();
  const Matrix R = rd.asDiagonal();
  const DareSolution dare = solve_dare(mdl.Phi, mdl.Gamma, Q, R);
  const FiniteHorizonLqr fh = finite_horizon_gains(mdl.Phi, mdl.Gamma, Q, R, Q, 500);
  REQUIRE(max_abs(fh.gains.front() + dare.K) < 1e-8);
}

TEST_CASE("parameter validation") {
  QuadrotorParams p;
  p.m = -1.0;
  REQUIRE_THROWS_AS(p.validate(), std::invalid_argument);
  QuadrotorParams q;
  q.dt = 0.0;
  REQUIRE_THROWS_AS(q.validate(), std::invalid_argument);
}
