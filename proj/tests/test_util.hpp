#pragma once

#include <quadmpc/numerics.hpp>

#include <cstdint>
#include <random>

namespace quadmpc::test {

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols,
                            double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix M(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) M(i, j) = dist(rng);
  return M;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

/// Symmetric positive definite matrix with eigenvalues bounded away from zero.
inline Matrix random_spd(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  const Matrix M = random_matrix(rng, n, n, scale);
  return M * M.transpose() + 0.1 * scale * scale * Matrix::Identity(n, n);
}

/// Random (A, B) pair that is stabilizable with high probability: A is scaled so
/// its spectral radius stays moderate and B is dense.
inline std::pair<Matrix, Matrix> random_stabilizable(std::mt19937_64& rng, Eigen::Index n,
                                                     Eigen::Index m) {
  Matrix A = random_matrix(rng, n, n);
  A *= 0.95 / std::max(1.0, spectral_radius(A));
  const Matrix B = random_matrix(rng, n, m);
  return {A, B};
}

}  // namespace quadmpc::test
