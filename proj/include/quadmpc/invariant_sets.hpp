#pragma once

#include "model.hpp"
#include "qp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace quadmpc {

/// Intersection of halfspaces H x <= h.
struct Polyhedron {
  Matrix H;
  Vector h;

  Eigen::Index dim() const { return H.cols(); }
  Eigen::Index num_rows() const { return H.rows(); }

  bool contains(const Eigen::Ref<const Vector>& x, double tol = 1e-9) const {
    return ((H * x - h).array() <= tol).all();
  }

  /// Largest row violation (negative when strictly inside).
  double margin(const Eigen::Ref<const Vector>& x) const {
    return (H * x - h).maxCoeff();
  }

  void validate() const {
    if (H.rows() != h.size()) throw std::invalid_argument("Polyhedron: row count mismatch");
    require_finite(H, "Polyhedron: H");
    require_finite(h, "Polyhedron: h");
  }
};

inline Polyhedron box_polyhedron(const Vector& lower, const Vector& upper) {
  const Eigen::Index n = lower.size();
  if (upper.size() != n) throw std::invalid_argument("box_polyhedron: bound size mismatch");
  if (!((lower.array() < upper.array()).all()))
    throw std::invalid_argument("box_polyhedron: lower must be strictly below upper");
  Polyhedron P;
  P.H = Matrix(2 * n, n);
  P.H << Matrix::Identity(n, n), -Matrix::Identity(n, n);
  P.h = Vector(2 * n);
  P.h << upper, -lower;
  return P;
}

/// Operating boxes for states and inputs. Both must contain the origin strictly
/// so the invariant-set construction below is well posed.
struct ConstraintSpec {
  Vector state_lower = Vector(12), state_upper = Vector(12);
  Vector input_lower = Vector(4), input_upper = Vector(4);

  static ConstraintSpec defaults(const QuadrotorParams& p) {
    ConstraintSpec s;
    const double pi = 3.14159265358979323846;
    s.state_upper << 100.0, 100.0, 100.0, pi / 2.0, pi / 2.0, 2.0 * pi, 3.0, 3.0, 3.0, 3.0 * pi,
        3.0 * pi, 3.0 * pi;
    s.state_lower = -s.state_upper;
    // Thrust deviation ranges from cutting all rotors to full collective thrust
    // at four times the hover force; torque limits come with the airframe.
    s.input_lower << -p.hover_thrust(), -1.47, -1.47, -0.02;
    s.input_upper << 3.0 * p.hover_thrust(), 1.47, 1.47, 0.02;
    return s;
  }

  Polyhedron state_box() const { return box_polyhedron(state_lower, state_upper); }
  Polyhedron input_box() const { return box_polyhedron(input_lower, input_upper); }

  void validate() const {
    if (state_lower.size() != state_upper.size() || input_lower.size() != input_upper.size())
      throw std::invalid_argument("ConstraintSpec: bound size mismatch");
    if (!((state_lower.array() < 0.0).all() && (state_upper.array() > 0.0).all() &&
          (input_lower.array() < 0.0).all() && (input_upper.array() > 0.0).all()))
      throw std::invalid_argument("ConstraintSpec: boxes must contain the origin strictly");
  }
};

inline QpSettings invariant_set_lp_settings() {
  QpSettings s;
  s.eps = 1e-8;
  s.max_iter = 200000;
  return s;
}

struct InvariantSetResult {
  Polyhedron set;
  int t_star = 0;   ///< first horizon at which the row battery certifies invariance
  int lp_count = 0;
};

/// Maximal constraint-admissible invariant set of the loop x+ = (Phi - Gamma K) x
/// under the stacked constraints (u, x) = ([-K; I] x) in U x X.
///
/// Builds row blocks M_k = F [-K; I] (Phi - Gamma K)^k, k = 0..t, and stops at
/// the first t where every row of M_{t+1} has LP maximum at most its bound over
/// the current set; the result stacks blocks 0..t. Each candidate row costs one
/// LP over the accumulated rows.
inline InvariantSetResult max_admissible_invariant_set(
    const Matrix& Phi, const Matrix& Gamma, const Matrix& K, const ConstraintSpec& spec,
    int t_max = 200, const QpSettings& lp_settings = invariant_set_lp_settings()) {
  spec.validate();
  const Eigen::Index n = Phi.rows();
  const Eigen::Index m = Gamma.cols();
  if (Phi.cols() != n || Gamma.rows() != n || K.rows() != m || K.cols() != n)
    throw std::invalid_argument("max_admissible_invariant_set: dimension mismatch");
  if (spec.state_lower.size() != n || spec.input_lower.size() != m)
    throw std::invalid_argument("max_admissible_invariant_set: constraint boxes do not match model");

  const Matrix A_K = Phi - Gamma * K;
  if (spectral_radius(A_K) >= 1.0)
    throw std::invalid_argument("max_admissible_invariant_set: closed loop is not contractive");

  const Polyhedron U = spec.input_box();
  const Polyhedron X = spec.state_box();
  const Eigen::Index su = U.num_rows();
  const Eigen::Index sx = X.num_rows();
  const Eigen::Index s = su + sx;

  // F (u, x) <= f stacks the input rows above the state rows.
  Matrix F = Matrix::Zero(s, m + n);
  F.topLeftCorner(su, m) = U.H;
  F.bottomRightCorner(sx, n) = X.H;
  Vector f(s);
  f << U.h, X.h;

  Matrix Kp(m + n, n);
  Kp << -K, Matrix::Identity(n, n);
  const Matrix M0 = F * Kp;

  constexpr double stop_tol = 1e-8;
  std::vector<Matrix> blocks{M0};
  Matrix Apow = A_K;  // A_K^{t+1}
  InvariantSetResult res;

  for (int t = 0; t <= t_max; ++t) {
    Matrix Hc(s * (t + 1), n);
    Vector hc(s * (t + 1));
    for (int k = 0; k <= t; ++k) {
      Hc.middleRows(s * k, s) = blocks[static_cast<size_t>(k)];
      hc.segment(s * k, s) = f;
    }

    const Matrix M_next = M0 * Apow;
    bool invariant = true;
    for (Eigen::Index i = 0; i < s; ++i) {
      const Vector c = M_next.row(i);
      // The set sits inside the state box, so a row already capped by the box
      // maximum is redundant without an LP. Conservative, hence exact.
      double box_max = 0.0;
      for (Eigen::Index j = 0; j < n; ++j)
        box_max += std::max(c(j) * spec.state_lower(j), c(j) * spec.state_upper(j));
      if (box_max <= f(i)) continue;
      ++res.lp_count;
      const QpSolution lp = solve_lp(c, Hc, hc, LpSense::Maximize, lp_settings);
      if (lp.status != QpStatus::Optimal)
        throw std::runtime_error(std::string("max_admissible_invariant_set: row LP ") +
                                 to_string(lp.status));
      if (lp.objective > f(i) + stop_tol) {
        invariant = false;
        break;
      }
    }
    if (invariant) {
      res.set = Polyhedron{std::move(Hc), std::move(hc)};
      res.t_star = t;
      return res;
    }
    blocks.push_back(M_next);
    Apow = Apow * A_K;
  }
  throw ConvergenceError("max_admissible_invariant_set: no finite determination index", t_max);
}

/// Interior points of a bounded polyhedron containing the origin. Rejection
/// sampling from the bounding box; when acceptance is poor the remainder comes
/// from scaled random directions through the origin.
inline std::vector<Vector> sample_interior(const Polyhedron& P, int count, std::uint64_t seed) {
  P.validate();
  const Eigen::Index n = P.dim();
  if (!P.contains(Vector::Zero(n)))
    throw std::invalid_argument("sample_interior: polyhedron must contain the origin");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Bounding box by coordinate LPs.
  Vector lo(n), hi(n);
  const QpSettings lp_settings = invariant_set_lp_settings();
  for (Eigen::Index j = 0; j < n; ++j) {
    Vector c = Vector::Zero(n);
    c(j) = 1.0;
    const QpSolution up = solve_lp(c, P.H, P.h, LpSense::Maximize, lp_settings);
    const QpSolution dn = solve_lp(c, P.H, P.h, LpSense::Minimize, lp_settings);
    if (up.status != QpStatus::Optimal || dn.status != QpStatus::Optimal)
      throw std::invalid_argument("sample_interior: polyhedron is unbounded");
    hi(j) = up.objective;
    lo(j) = dn.objective;
  }

  std::vector<Vector> points;
  points.reserve(static_cast<size_t>(count));
  const double tol = -1e-12;  // strictly inside
  long budget = 64L * count;
  while (static_cast<int>(points.size()) < count && budget-- > 0) {
    Vector x(n);
    for (Eigen::Index j = 0; j < n; ++j) x(j) = lo(j) + (hi(j) - lo(j)) * unif(rng);
    if (P.contains(x, tol)) points.push_back(x);
  }
  while (static_cast<int>(points.size()) < count) {
    Vector dir(n);
    for (Eigen::Index j = 0; j < n; ++j) dir(j) = gauss(rng);
    const Vector Hd = P.H * dir;
    double lam = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < P.num_rows(); ++i)
      if (Hd(i) > 0.0) lam = std::min(lam, P.h(i) / Hd(i));
    if (!std::isfinite(lam)) continue;
    const double r = 0.99 * std::pow(unif(rng), 1.0 / static_cast<double>(n));
    const Vector x = r * lam * dir;
    if (P.contains(x, tol)) points.push_back(x);
  }
  return points;
}

/// Drop rows implied by the remaining ones. Each row is kept unless its LP
/// maximum over the other active rows stays at or below its own bound.
inline Polyhedron prune_redundant(const Polyhedron& P,
                                  const QpSettings& lp_settings = invariant_set_lp_settings(),
                                  double tol = 1e-9) {
  P.validate();
  const Eigen::Index n = P.dim();
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < P.num_rows(); ++i) keep.push_back(i);

  for (Eigen::Index i = P.num_rows() - 1; i >= 0; --i) {
    std::vector<Eigen::Index> others;
    for (Eigen::Index k : keep)
      if (k != i) others.push_back(k);
    if (others.empty()) break;
    Matrix G(static_cast<Eigen::Index>(others.size()) + 1, n);
    Vector g(static_cast<Eigen::Index>(others.size()) + 1);
    for (size_t a = 0; a < others.size(); ++a) {
      G.row(static_cast<Eigen::Index>(a)) = P.H.row(others[a]);
      g(static_cast<Eigen::Index>(a)) = P.h(others[a]);
    }
    // own row relaxed by one unit keeps the LP bounded
    G.row(G.rows() - 1) = P.H.row(i);
    g(g.size() - 1) = P.h(i) + 1.0;
    const QpSolution lp = solve_lp(Vector(P.H.row(i)), G, g, LpSense::Maximize, lp_settings);
    if (lp.status == QpStatus::Optimal && lp.objective <= P.h(i) + tol)
      keep.erase(std::find(keep.begin(), keep.end(), i));
  }

  Polyhedron out;
  out.H = Matrix(static_cast<Eigen::Index>(keep.size()), n);
  out.h = Vector(static_cast<Eigen::Index>(keep.size()));
  for (size_t a = 0; a < keep.size(); ++a) {
    out.H.row(static_cast<Eigen::Index>(a)) = P.H.row(keep[a]);
    out.h(static_cast<Eigen::Index>(a)) = P.h(keep[a]);
  }
  return out;
}

}  // namespace quadmpc
