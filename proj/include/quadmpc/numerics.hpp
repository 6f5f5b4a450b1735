#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace quadmpc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Thrown when an iterative scheme exhausts its budget; carries the last residual.
struct ConvergenceError : std::runtime_error {
  double residual;
  ConvergenceError(const std::string& msg, double r)
      : std::runtime_error(msg + " (residual " + std::to_string(r) + ")"), residual(r) {}
};

/// Max absolute entry; zero for empty matrices.
inline double max_abs(const Eigen::Ref<const Matrix>& M) {
  return M.size() == 0 ? 0.0 : M.cwiseAbs().maxCoeff();
}

inline void require_finite(const Eigen::Ref<const Matrix>& M, const char* what) {
  if (!M.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

inline Matrix symmetrize(const Matrix& M) { return 0.5 * (M + M.transpose()); }

/// Largest |eigenvalue| of a square matrix.
inline double spectral_radius(const Matrix& M) {
  if (M.rows() != M.cols()) throw std::invalid_argument("spectral_radius: matrix not square");
  if (M.rows() == 0) return 0.0;
  require_finite(M, "spectral_radius");
  Eigen::EigenSolver<Matrix> es(M, /*computeEigenvectors=*/false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Rank by SVD: singular values above tol * sigma_max count.
inline Eigen::Index numerical_rank(const Matrix& M, double tol = 1e-9) {
  if (M.size() == 0) return 0;
  require_finite(M, "numerical_rank");
  Eigen::JacobiSVD<Matrix> svd(M);
  const Vector sv = svd.singularValues();
  if (sv(0) <= 0.0) return 0;
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol * sv(0)) ++r;
  return r;
}

/// Matrix exponential by scaling-and-squaring with a degree-13 Pade approximant.
/// Accuracy is near machine precision for well-scaled inputs; the squaring phase
/// doubles the argument s times after scaling ||M||_1 below the Pade radius.
inline Matrix expm(const Matrix& M) {
  if (M.rows() != M.cols()) throw std::invalid_argument("expm: matrix not square");
  const Eigen::Index n = M.rows();
  if (n == 0) return Matrix(0, 0);
  require_finite(M, "expm");

  static const double b[14] = {64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
                               1187353796428800.0,  129060195264000.0,   10559470521600.0,
                               670442572800.0,      33522128640.0,       1323241920.0,
                               40840800.0,          960960.0,            16380.0,
                               182.0,               1.0};
  constexpr double theta13 = 5.371920351148152;

  const double norm1 = M.cwiseAbs().colwise().sum().maxCoeff();
  if (norm1 == 0.0) return Matrix::Identity(n, n);
  int s = 0;
  Matrix A = M;
  if (norm1 > theta13) {
    s = static_cast<int>(std::ceil(std::log2(norm1 / theta13)));
    A /= std::pow(2.0, s);
  }

  const Matrix I = Matrix::Identity(n, n);
  const Matrix A2 = A * A;
  const Matrix A4 = A2 * A2;
  const Matrix A6 = A4 * A2;
  const Matrix U =
      A * (A6 * (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * I);
  const Matrix V =
      A6 * (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * I;

  Matrix R = (V - U).partialPivLu().solve(V + U);
  for (int i = 0; i < s; ++i) R = R * R;
  return R;
}

/// One application of the Riccati operator
///   F(P) = Q + A' (P - P B (B'PB + R)^{-1} B'P) A, symmetrized.
inline Matrix riccati_map(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R,
                          const Matrix& P) {
  const Matrix BtP = B.transpose() * P;
  const Matrix S = BtP * B + R;
  Eigen::LLT<Matrix> llt(symmetrize(S));
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("riccati_map: B'PB + R is not positive definite");
  const Matrix BtPA = BtP * A;
  const Matrix K = llt.solve(BtPA);
  return symmetrize(Q + A.transpose() * P * A - BtPA.transpose() * K);
}

struct DareSolution {
  Matrix P;         ///< stabilizing fixed point of the Riccati operator
  Matrix K;         ///< gain for the law u = -K x
  int iterations = 0;
  double residual = 0.0;  ///< max-abs entry of P - F(P), evaluated after convergence
};

/// Discrete algebraic Riccati equation via the structure-preserving doubling
/// iteration: each step squares the effective horizon, so convergence is
/// quadratic and survives closed-loop poles arbitrarily close to the unit
/// circle. Accepted solutions are stabilizing: spectral_radius(A - B K) < 1.
inline DareSolution solve_dare(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R,
                               double tol = 1e-10, int max_iter = 10000) {
  const Eigen::Index n = A.rows();
  const Eigen::Index m = B.cols();
  if (A.cols() != n) throw std::invalid_argument("solve_dare: A not square");
  if (B.rows() != n) throw std::invalid_argument("solve_dare: B row count mismatch");
  if (Q.rows() != n || Q.cols() != n) throw std::invalid_argument("solve_dare: Q dimension mismatch");
  if (R.rows() != m || R.cols() != m) throw std::invalid_argument("solve_dare: R dimension mismatch");
  require_finite(A, "solve_dare: A");
  require_finite(B, "solve_dare: B");
  require_finite(Q, "solve_dare: Q");
  require_finite(R, "solve_dare: R");
  if (Eigen::LLT<Matrix>(symmetrize(R)).info() != Eigen::Success)
    throw std::invalid_argument("solve_dare: R is not positive definite");

  DareSolution sol;
  Matrix Ak = A;
  Matrix Gk = B * Eigen::LLT<Matrix>(symmetrize(R)).solve(B.transpose());
  Matrix Hk = symmetrize(Q);
  double diff = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::PartialPivLU<Matrix> W((Matrix::Identity(n, n) + Gk * Hk).eval());
    const Matrix WiA = W.solve(Ak);
    const Matrix WiG = W.solve(Gk);
    const Matrix Hn = symmetrize(Hk + Ak.transpose() * Hk * WiA);
    Gk = symmetrize(Gk + Ak * WiG * Ak.transpose());
    diff = max_abs(Hn - Hk);
    Hk = Hn;
    Ak = Ak * WiA;
    sol.iterations = it;
    if (!Hk.allFinite() || !Gk.allFinite() || !Ak.allFinite())
      throw ConvergenceError("solve_dare: iteration diverged", diff);
    if (diff <= tol) break;
  }
  if (diff > tol) throw ConvergenceError("solve_dare: no convergence within max_iter", diff);
  sol.P = Hk;

  sol.residual = max_abs(sol.P - riccati_map(A, B, Q, R, sol.P));

  const Matrix BtP = B.transpose() * sol.P;
  sol.K = Eigen::LLT<Matrix>(symmetrize(BtP * B + R)).solve(BtP * A);
  const double rho = spectral_radius(A - B * sol.K);
  if (rho >= 1.0)
    throw ConvergenceError("solve_dare: fixed point is not stabilizing", rho);
  return sol;
}

struct FiniteHorizonLqr {
  std::vector<Matrix> gains;        ///< L_0..L_{T-1}; optimal input is u_t = L_t x_t
  std::vector<Matrix> cost_to_go;   ///< K_0..K_T (cost_to_go[t] weights x_t)
};

/// Backward dynamic-programming recursion for the T-step LQ problem with
/// terminal weight Q_T:
///   L_t = -(B'K_{t+1}B + R)^{-1} B'K_{t+1}A,  K_t = Q + A'K_{t+1}A + A'K_{t+1}B L_t.
inline FiniteHorizonLqr finite_horizon_gains(const Matrix& A, const Matrix& B, const Matrix& Q,
                                             const Matrix& R, const Matrix& Q_T, int T) {
  if (T < 1) throw std::invalid_argument("finite_horizon_gains: T must be >= 1");
  const Eigen::Index n = A.rows();
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n || Q_T.rows() != n ||
      Q_T.cols() != n || R.rows() != B.cols() || R.cols() != B.cols())
    throw std::invalid_argument("finite_horizon_gains: dimension mismatch");

  FiniteHorizonLqr out;
  out.cost_to_go.assign(static_cast<size_t>(T) + 1, Matrix());
  out.gains.assign(static_cast<size_t>(T), Matrix());
  out.cost_to_go[static_cast<size_t>(T)] = symmetrize(Q_T);
  for (int t = T - 1; t >= 0; --t) {
    const Matrix& Kn = out.cost_to_go[static_cast<size_t>(t) + 1];
    const Matrix BtK = B.transpose() * Kn;
    Eigen::LLT<Matrix> llt(symmetrize(BtK * B + R));
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("finite_horizon_gains: B'KB + R is not positive definite");
    const Matrix L = -llt.solve(BtK * A);
    out.gains[static_cast<size_t>(t)] = L;
    out.cost_to_go[static_cast<size_t>(t)] =
        symmetrize(Q + A.transpose() * Kn * A + A.transpose() * Kn * B * L);
  }
  return out;
}

}  // namespace quadmpc
