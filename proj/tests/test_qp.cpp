#include <catch2/catch_amalgamated.hpp>

#include <quadmpc/qp.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace quadmpc;

namespace {

QpProblem box_problem(const Matrix& H, const Vector& q, const Vector& lb, const Vector& ub) {
  const Eigen::Index n = q.size();
  Matrix G(2 * n, n);
  G << Matrix::Identity(n, n), -Matrix::Identity(n, n);
  Vector h(2 * n);
  h << ub, -lb;
  return QpProblem::from_dense(H, q, Matrix(0, n), Vector(0), G, h);
}

}  // namespace

TEST_CASE("equality constrained QP matches the closed form") {
  const int n = 5;
  QpProblem prob = QpProblem::from_dense(Matrix::Identity(n, n), Vector::Zero(n),
                                         Matrix::Ones(1, n), Vector::Ones(1), Matrix(0, n),
                                         Vector(0));
  const QpSolution sol = solve_qp(prob);
  REQUIRE(sol.status == QpStatus::Optimal);
  REQUIRE(sol.primal_residual <= 1e-6);
  REQUIRE(sol.dual_residual <= 1e-6);
  for (int i = 0; i < n; ++i) REQUIRE(sol.z(i) == Catch::Approx(0.2).margin(1e-8));
  REQUIRE(sol.y(0) == Catch::Approx(-0.2).margin(1e-8));
  REQUIRE(sol.objective == Catch::Approx(0.1).margin(1e-8));
  REQUIRE(sol.solve_time > 0.0);
}

TEST_CASE("box QPs match the active-set enumeration oracle") {
  auto rng = test::make_rng(3001);
  for (int n : {2, 3, 5}) {
    for (int trial = 0; trial < 15; ++trial) {
      const Matrix H = test::random_spd(rng, n);
      const Vector q = test::random_vector(rng, n, 2.0);
      Vector lb = test::random_vector(rng, n, 1.0);
      Vector ub = lb + test::random_vector(rng, n, 1.0).cwiseAbs() + Vector::Constant(n, 0.1);
      const Vector z_ref = oracle::box_qp_enumerate(H, q, lb, ub);
      const QpSolution sol = solve_qp(box_problem(H, q, lb, ub));
      REQUIRE(sol.status == QpStatus::Optimal);
      REQUIRE(max_abs(sol.z - z_ref) < 1e-6);
    }
  }
}

TEST_CASE("complementary slackness and dual feasibility hold at the solution") {
  auto rng = test::make_rng(3002);
  const int n = 4;
  const Matrix H = test::random_spd(rng, n);
  const Vector q = test::random_vector(rng, n, 3.0);
  const Vector lb = Vector::Constant(n, -0.3);
  const Vector ub = Vector::Constant(n, 0.3);
  const QpProblem prob = box_problem(H, q, lb, ub);
  const QpSolution sol = solve_qp(prob);
  REQUIRE(sol.status == QpStatus::Optimal);
  const Vector slack = prob.h_in - Matrix(prob.G_in) * sol.z;
  for (Eigen::Index i = 0; i < slack.size(); ++i) {
    REQUIRE(sol.y(i) >= -1e-8);
    REQUIRE(std::abs(sol.y(i) * slack(i)) <= 1e-6);
  }
}

TEST_CASE("simplex projection") {
  // Projecting (0.9, 0.5, -0.2) onto the probability simplex gives (0.7, 0.3, 0).
  const int n = 3;
  Vector p(n);
  p << 0.9, 0.5, -0.2;
  QpProblem prob = QpProblem::from_dense(Matrix::Identity(n, n), -p, Matrix::Ones(1, n),
                                         Vector::Ones(1), -Matrix::Identity(n, n),
                                         Vector::Zero(n));
  const QpSolution sol = solve_qp(prob);
  REQUIRE(sol.status == QpStatus::Optimal);
  REQUIRE(sol.z(0) == Catch::Approx(0.7).margin(1e-7));
  REQUIRE(sol.z(1) == Catch::Approx(0.3).margin(1e-7));
  REQUIRE(sol.z(2) == Catch::Approx(0.0).margin(1e-7));
}

TEST_CASE("infeasible constraints produce a Farkas certificate") {
  // z <= -1 and -z <= -1 cannot hold together.
  Matrix G(2, 1);
  G << 1.0, -1.0;
  Vector h(2);
  h << -1.0, -1.0;
  QpProblem prob = QpProblem::from_dense(Matrix::Identity(1, 1), Vector::Zero(1), Matrix(0, 1),
                                         Vector(0), G, h);
  const QpSolution sol = solve_qp(prob);
  REQUIRE(sol.status == QpStatus::Infeasible);
  REQUIRE(sol.certificate.size() == 2);
  const Vector& cert = sol.certificate;
  REQUIRE(cert.cwiseAbs().maxCoeff() == Catch::Approx(1.0));
  REQUIRE(cert.minCoeff() >= -1e-7);                        // multipliers of <= rows
  REQUIRE(std::abs((G.transpose() * cert)(0)) <= 1e-6);     // G'y = 0
  REQUIRE(h.dot(cert) <= -1e-6);                            // h'y < 0
  REQUIRE(std::isnan(sol.objective));
}

TEST_CASE("unbounded direction is certified") {
  // min -z with z >= 0 only: objective decreases along +z forever.
  Matrix G(1, 1);
  G << -1.0;
  Vector h(1);
  h << 0.0;
  Vector c(1);
  c << -1.0;
  const QpSolution sol = solve_lp(c, G, h, LpSense::Minimize);
  REQUIRE(sol.status == QpStatus::Unbounded);
  REQUIRE(sol.certificate.size() == 1);
  REQUIRE(sol.certificate(0) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("bounded LPs match the vertex enumeration oracle") {
  auto rng = test::make_rng(3003);
  const int n = 3;
  int checked = 0;
  for (int trial = 0; trial < 30; ++trial) {
    // random facets plus a box that keeps the feasible set bounded; origin interior
    Matrix G(8 + 2 * n, n);
    Vector h(8 + 2 * n);
    for (int i = 0; i < 8; ++i) {
      Vector row = test::random_vector(rng, n);
      row.normalize();
      G.row(i) = row;
      h(i) = 0.2 + std::abs(test::random_vector(rng, 1)(0));
    }
    G.block(8, 0, n, n) = Matrix::Identity(n, n);
    G.block(8 + n, 0, n, n) = -Matrix::Identity(n, n);
    h.segment(8, 2 * n).setConstant(2.0);
    const Vector c = test::random_vector(rng, n, 1.0);
    const auto ref = oracle::lp_vertex_enumerate(c, G, h, /*maximize=*/true);
    REQUIRE(ref.has_value());
    const QpSolution sol = solve_lp(c, G, h, LpSense::Maximize);
    REQUIRE(sol.status == QpStatus::Optimal);
    REQUIRE(sol.objective == Catch::Approx(*ref).margin(1e-6));
    ++checked;
  }
  REQUIRE(checked == 30);
}

TEST_CASE("warm start from the solution returns immediately with the same point") {
  auto rng = test::make_rng(3004);
  const int n = 6;
  const Matrix H = test::random_spd(rng, n);
  const Vector q = test::random_vector(rng, n, 2.0);
  const Vector lb = Vector::Constant(n, -0.5);
  const Vector ub = Vector::Constant(n, 0.5);
  const QpProblem prob = box_problem(H, q, lb, ub);
  QpSolver solver;
  const QpSolution cold = solver.solve(prob);
  REQUIRE(cold.status == QpStatus::Optimal);
  const QpSolution warm = solver.solve(prob, cold.z, cold.y);
  REQUIRE(warm.status == QpStatus::Optimal);
  REQUIRE(warm.iterations == 0);
  REQUIRE(max_abs(warm.z - cold.z) < 1e-8);
}

TEST_CASE("repeated cold solves are bitwise deterministic") {
  auto rng = test::make_rng(3005);
  const int n = 5;
  const Matrix H = test::random_spd(rng, n);
  const Vector q = test::random_vector(rng, n, 2.0);
  const QpProblem prob = box_problem(H, q, Vector::Constant(n, -1.0), Vector::Constant(n, 1.0));
  const QpSolution a = solve_qp(prob);
  const QpSolution b = solve_qp(prob);
  REQUIRE(a.status == b.status);
  REQUIRE(a.iterations == b.iterations);
  for (int i = 0; i < n; ++i) REQUIRE(a.z(i) == b.z(i));
}

TEST_CASE("iteration cap returns the best iterate with MaxIterations") {
  auto rng = test::make_rng(3006);
  const int n = 8;
  const Matrix H = test::random_spd(rng, n);
  const Vector q = test::random_vector(rng, n, 2.0);
  QpProblem prob = box_problem(H, q, Vector::Constant(n, -0.2), Vector::Constant(n, 0.2));
  QpSettings s;
  s.max_iter = 2;
  s.polish = false;
  const QpSolution sol = solve_qp(prob, s);
  REQUIRE(sol.status == QpStatus::MaxIterations);
  REQUIRE(sol.z.allFinite());
  REQUIRE(std::isfinite(sol.objective));
}

TEST_CASE("indefinite Hessian is rejected") {
  Matrix H = -Matrix::Identity(2, 2);
  QpProblem prob = QpProblem::from_dense(H, Vector::Zero(2), Matrix(0, 2), Vector(0),
                                         Matrix::Identity(2, 2), Vector::Ones(2));
  REQUIRE_THROWS_AS(solve_qp(prob), std::invalid_argument);
}

TEST_CASE("dimension mismatches are rejected") {
  QpProblem prob = QpProblem::from_dense(Matrix::Identity(2, 2), Vector::Zero(3), Matrix(0, 2),
                                         Vector(0), Matrix(0, 2), Vector(0));
  REQUIRE_THROWS_AS(solve_qp(prob), std::invalid_argument);
}

TEST_CASE("polish drives residuals well below the tolerance") {
  auto rng = test::make_rng(3007);
  const int n = 6;
  const Matrix H = test::random_spd(rng, n, 2.0);
  const Vector q = test::random_vector(rng, n, 5.0);
  const QpProblem prob = box_problem(H, q, Vector::Constant(n, -0.4), Vector::Constant(n, 0.4));
  const QpSolution sol = solve_qp(prob);
  REQUIRE(sol.status == QpStatus::Optimal);
  REQUIRE(sol.polished);
  REQUIRE(sol.primal_residual <= 1e-9);
  REQUIRE(sol.dual_residual <= 1e-9);
}

TEST_CASE("badly scaled data still meets the absolute tolerance") {
  // Hessian entries spanning eight orders of magnitude.
  Matrix H = Matrix::Zero(3, 3);
  H(0, 0) = 1e4;
  H(1, 1) = 1.0;
  H(2, 2) = 1e-4;
  Vector q(3);
  q << -1e4, 2.0, -3e-4;
  const QpSolution sol = solve_qp(box_problem(H, q, Vector::Constant(3, -2.0), Vector::Constant(3, 2.0)));
  REQUIRE(sol.status == QpStatus::Optimal);
  REQUIRE(sol.primal_residual <= 1e-6);
  REQUIRE(sol.dual_residual <= 1e-6);
  REQUIRE(sol.z(0) == Catch::Approx(1.0).margin(1e-6));
  REQUIRE(sol.z(1) == Catch::Approx(-2.0).margin(1e-6));
  REQUIRE(sol.z(2) == Catch::Approx(2.0).margin(1e-6));
}

TEST_CASE("equality block with redundant consistent rows is handled") {
  // Same constraint twice; solution unaffected.
  Matrix A(2, 2);
  A << 1.0, 1.0, 1.0, 1.0;
  Vector b(2);
  b << 1.0, 1.0;
  QpProblem prob = QpProblem::from_dense(Matrix::Identity(2, 2), Vector::Zero(2), A, b,
                                         Matrix(0, 2), Vector(0));
  const QpSolution sol = solve_qp(prob);
  REQUIRE(sol.status == QpStatus::Optimal);
  REQUIRE(sol.z(0) == Catch::Approx(0.5).margin(1e-7));
  REQUIRE(sol.z(1) == Catch::Approx(0.5).margin(1e-7));
}
