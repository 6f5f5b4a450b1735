#pragma once

#include "numerics.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iterator>
#include <limits>
#include <stdexcept>
#include <vector>

namespace quadmpc {

using SparseMatrix = Eigen::SparseMatrix<double>;

enum class QpStatus { Optimal, Infeasible, Unbounded, MaxIterations };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::Infeasible: return "infeasible";
    case QpStatus::Unbounded: return "unbounded";
    default: return "max_iterations";
  }
}

/// Convex QP in the form
///   min 1/2 z'Hz + q'z   s.t.  A_eq z = b_eq,  G_in z <= h_in.
/// H must be positive semidefinite; it is symmetrized before solving.
struct QpProblem {
  SparseMatrix H;
  Vector q;
  SparseMatrix A_eq;
  Vector b_eq;
  SparseMatrix G_in;
  Vector h_in;

  Eigen::Index num_vars() const { return q.size(); }
  Eigen::Index num_eq() const { return A_eq.rows(); }
  Eigen::Index num_in() const { return G_in.rows(); }

  static QpProblem from_dense(const Matrix& H, const Vector& q, const Matrix& A_eq,
                              const Vector& b_eq, const Matrix& G_in, const Vector& h_in) {
    QpProblem p;
    p.H = H.sparseView();
    p.q = q;
    p.A_eq = A_eq.sparseView();
    p.b_eq = b_eq;
    p.G_in = G_in.sparseView();
    p.h_in = h_in;
    return p;
  }

  void validate() const {
    const Eigen::Index n = num_vars();
    if (n < 1) throw std::invalid_argument("QpProblem: no variables");
    if (H.rows() != n || H.cols() != n) throw std::invalid_argument("QpProblem: H dimension mismatch");
    if (A_eq.rows() != b_eq.size() || (A_eq.rows() > 0 && A_eq.cols() != n))
      throw std::invalid_argument("QpProblem: equality block dimension mismatch");
    if (G_in.rows() != h_in.size() || (G_in.rows() > 0 && G_in.cols() != n))
      throw std::invalid_argument("QpProblem: inequality block dimension mismatch");
    if (!q.allFinite() || !b_eq.allFinite() || !h_in.allFinite())
      throw std::invalid_argument("QpProblem: non-finite data");
    // Dense spectral check is affordable only for small problems; larger ones are
    // caught by the quasi-definite factorization inside the solver.
    if (n <= 64) {
      const Matrix Hd = Matrix(H);
      const Matrix Hs = 0.5 * (Hd + Hd.transpose());
      Eigen::SelfAdjointEigenSolver<Matrix> es(Hs, Eigen::EigenvaluesOnly);
      if (es.eigenvalues().size() > 0 && es.eigenvalues().minCoeff() < -1e-8)
        throw std::invalid_argument("QpProblem: H is not positive semidefinite");
    }
  }
};

struct QpSettings {
  double eps = 1e-6;             ///< absolute KKT tolerance certified on Optimal results
  double eps_infeasible = 1e-7;  ///< certificate detection threshold
  int max_iter = 50000;
  double rho = 0.1;              ///< base penalty for inequality rows
  double rho_eq_scale = 1e3;     ///< equality rows use rho * rho_eq_scale
  double sigma = 1e-6;
  double alpha = 1.6;            ///< over-relaxation
  bool adaptive_rho = true;
  bool polish = true;
  int check_interval = 25;
  int scaling_iters = 10;
};

struct QpSolution {
  QpStatus status = QpStatus::MaxIterations;
  Vector z;             ///< primal point (best iterate when not Optimal)
  Vector y;             ///< multipliers for the stacked rows [A_eq; G_in]
  double objective = std::numeric_limits<double>::quiet_NaN();
  double primal_residual = std::numeric_limits<double>::infinity();
  double dual_residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
  double solve_time = 0.0;  ///< seconds
  bool polished = false;
  Vector certificate;  ///< Farkas certificate (Infeasible) or unbounded ray (Unbounded)
};

namespace qp_detail {

inline void col_max_abs(const SparseMatrix& M, Vector& out) {
  out.setZero();
  for (int j = 0; j < M.outerSize(); ++j)
    for (SparseMatrix::InnerIterator it(M, j); it; ++it)
      out(j) = std::max(out(j), std::abs(it.value()));
}

inline void row_max_abs(const SparseMatrix& M, Vector& out) {
  out.setZero();
  for (int j = 0; j < M.outerSize(); ++j)
    for (SparseMatrix::InnerIterator it(M, j); it; ++it)
      out(it.row()) = std::max(out(it.row()), std::abs(it.value()));
}

inline double clamp_norm(double v) { return std::min(std::max(v, 1e-8), 1e8); }

struct Scaling {
  Vector d;  ///< variable scaling, x = d .* xbar
  Vector e;  ///< row scaling
  double c = 1.0;
};

/// Modified Ruiz equilibration of the KKT data in place.
inline Scaling ruiz_equilibrate(SparseMatrix& P, Vector& q, SparseMatrix& A, Vector& l, Vector& u,
                                int iters) {
  const Eigen::Index n = q.size();
  const Eigen::Index m = A.rows();
  Scaling sc;
  sc.d = Vector::Ones(n);
  sc.e = Vector::Ones(m);
  Vector colP(n), colA(n), rowA(m);
  for (int pass = 0; pass < iters; ++pass) {
    col_max_abs(P, colP);
    if (m > 0)
      col_max_abs(A, colA);
    else
      colA.setZero();
    Vector dd(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double nrm = std::max(colP(j), colA(j));
      dd(j) = nrm > 0.0 ? 1.0 / std::sqrt(clamp_norm(nrm)) : 1.0;
    }
    Vector de(m);
    if (m > 0) {
      row_max_abs(A, rowA);
      for (Eigen::Index i = 0; i < m; ++i)
        de(i) = rowA(i) > 0.0 ? 1.0 / std::sqrt(clamp_norm(rowA(i))) : 1.0;
    }
    P = dd.asDiagonal() * P * dd.asDiagonal();
    q.array() *= dd.array();
    if (m > 0) {
      A = de.asDiagonal() * A * dd.asDiagonal();
      l.array() *= de.array();  // +-inf entries stay infinite
      u.array() *= de.array();
    }
    sc.d.array() *= dd.array();
    if (m > 0) sc.e.array() *= de.array();

    col_max_abs(P, colP);
    const double mean_col = n > 0 ? colP.sum() / static_cast<double>(n) : 0.0;
    const double denom = std::max(mean_col, q.size() ? q.cwiseAbs().maxCoeff() : 0.0);
    const double gamma = denom > 0.0 ? 1.0 / clamp_norm(denom) : 1.0;
    P *= gamma;
    q *= gamma;
    sc.c *= gamma;
  }
  return sc;
}

}  // namespace qp_detail

/// Operator-splitting solver for sparse convex QPs. Each iteration solves one
/// quasi-definite KKT system with a cached sparse LDLT factorization; the
/// factorization is reused until the penalty parameter is rebalanced. The
/// splitting loop runs against a relative criterion, then an active-set polish
/// (regularized KKT solve plus iterative refinement) certifies the absolute
/// tolerance on the original data; if polish falls short, the loop resumes with
/// a tighter internal criterion. An Optimal result therefore always carries
/// unscaled KKT residuals at or below settings.eps.
class QpSolver {
 public:
  QpSettings settings;

  explicit QpSolver(QpSettings s = {}) : settings(s) {}

  QpSolution solve(const QpProblem& prob) const { return solve_impl(prob, nullptr, nullptr); }

  /// Warm-started solve; z0 and y0 must match the problem dimensions.
  QpSolution solve(const QpProblem& prob, const Vector& z0, const Vector& y0) const {
    return solve_impl(prob, &z0, &y0);
  }

 private:
  static constexpr double kInf = std::numeric_limits<double>::infinity();

  struct Candidate {
    Vector x, y;
    double rp = 0.0, rd = 0.0;
    bool polished = false;
  };

  QpSolution solve_impl(const QpProblem& prob, const Vector* z0, const Vector* y0) const {
    const auto t_start = std::chrono::steady_clock::now();
    prob.validate();

    const Eigen::Index n = prob.num_vars();
    const Eigen::Index me = prob.num_eq();
    const Eigen::Index m = me + prob.num_in();

    // Original (unscaled) data; P is the symmetrized Hessian.
    const SparseMatrix P = SparseMatrix(0.5 * (prob.H + SparseMatrix(prob.H.transpose())));
    SparseMatrix A(m, n);
    {
      std::vector<Eigen::Triplet<double>> trips;
      trips.reserve(static_cast<size_t>(prob.A_eq.nonZeros() + prob.G_in.nonZeros()));
      for (int j = 0; j < prob.A_eq.outerSize(); ++j)
        for (SparseMatrix::InnerIterator it(prob.A_eq, j); it; ++it)
          trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
      for (int j = 0; j < prob.G_in.outerSize(); ++j)
        for (SparseMatrix::InnerIterator it(prob.G_in, j); it; ++it)
          trips.emplace_back(static_cast<int>(me + it.row()), static_cast<int>(it.col()),
                             it.value());
      A.setFromTriplets(trips.begin(), trips.end());
    }
    Vector l(m), u(m);
    l.head(me) = prob.b_eq;
    u.head(me) = prob.b_eq;
    l.tail(m - me).setConstant(-kInf);
    u.tail(m - me) = prob.h_in;

    // Scaled working copies.
    SparseMatrix Ps = P, As = A;
    Vector qs = prob.q, ls = l, us = u;
    const qp_detail::Scaling sc =
        qp_detail::ruiz_equilibrate(Ps, qs, As, ls, us, settings.scaling_iters);

    double rho = settings.rho;
    Vector rho_vec(m), rho_inv(m);
    const auto set_rho = [&](double r) {
      rho = r;
      for (Eigen::Index i = 0; i < m; ++i) {
        rho_vec(i) = i < me ? r * settings.rho_eq_scale : r;
        rho_inv(i) = 1.0 / rho_vec(i);
      }
    };
    set_rho(settings.rho);

    // KKT matrix [[Ps + sigma I, As'], [As, -diag(1/rho)]].
    Eigen::SimplicialLDLT<SparseMatrix> ldlt;
    SparseMatrix K(n + m, n + m);
    const auto build_kkt = [&]() {
      std::vector<Eigen::Triplet<double>> trips;
      trips.reserve(static_cast<size_t>(Ps.nonZeros() + 2 * As.nonZeros() + n + m));
      for (int j = 0; j < Ps.outerSize(); ++j)
        for (SparseMatrix::InnerIterator it(Ps, j); it; ++it)
          trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
      for (Eigen::Index i = 0; i < n; ++i)
        trips.emplace_back(static_cast<int>(i), static_cast<int>(i), settings.sigma);
      for (int j = 0; j < As.outerSize(); ++j)
        for (SparseMatrix::InnerIterator it(As, j); it; ++it) {
          trips.emplace_back(static_cast<int>(n + it.row()), static_cast<int>(it.col()), it.value());
          trips.emplace_back(static_cast<int>(it.col()), static_cast<int>(n + it.row()), it.value());
        }
      for (Eigen::Index i = 0; i < m; ++i)
        trips.emplace_back(static_cast<int>(n + i), static_cast<int>(n + i), -rho_inv(i));
      K.setFromTriplets(trips.begin(), trips.end());
    };
    build_kkt();
    ldlt.analyzePattern(K);
    ldlt.factorize(K);
    if (ldlt.info() != Eigen::Success)
      throw std::invalid_argument("QpSolver: KKT factorization failed (H not PSD?)");

    // Scaled iterates.
    Vector xb = Vector::Zero(n), yb = Vector::Zero(m), zb(m);
    if (z0 != nullptr && y0 != nullptr) {
      if (z0->size() != n || y0->size() != m)
        throw std::invalid_argument("QpSolver: warm start dimension mismatch");
      xb = z0->cwiseQuotient(sc.d);
      yb = sc.c * y0->cwiseQuotient(sc.e);
      zb = (As * xb).cwiseMax(ls).cwiseMin(us);
    } else {
      zb = Vector::Zero(m).cwiseMax(ls).cwiseMin(us);
    }

    QpSolution sol;
    sol.z = Vector::Zero(n);
    sol.y = Vector::Zero(m);
    double best_score = kInf;
    double tighten = 1.0;

    Vector x_prev(n), y_prev(m), rhs(n + m), kkt_sol(n + m), zcand(m);
    Vector x(n), y(m);
    int last_rho_update = 0;
    int rho_updates = 0;
    int last_rescue = 0;

    const auto elapsed = [&]() {
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    };

    for (int iter = 0; iter <= settings.max_iter; ++iter) {
      const bool check_now = iter % settings.check_interval == 0 || iter == settings.max_iter;
      if (check_now) {
        x = sc.d.cwiseProduct(xb);
        y = m > 0 ? Vector(sc.e.cwiseProduct(yb) / sc.c) : Vector(0);
        const Vector Px = P * x;
        const Vector Aty = m > 0 ? Vector(A.transpose() * y) : Vector::Zero(n);
        const Vector Ax = m > 0 ? Vector(A * x) : Vector(0);
        const Vector zu = m > 0 ? Vector(zb.cwiseQuotient(sc.e)) : Vector(0);
        const double rp = m > 0 ? (Ax - zu).cwiseAbs().maxCoeff() : 0.0;
        const double rd = (Px + prob.q + Aty).cwiseAbs().maxCoeff();

        if (std::max(rp, rd) < best_score) {
          best_score = std::max(rp, rd);
          sol.z = x;
          sol.y = y;
          sol.primal_residual = rp;
          sol.dual_residual = rd;
        }

        const double sp = m > 0 ? std::max(max_abs(Ax), max_abs(zu)) : 0.0;
        const double sd = std::max({max_abs(Px), max_abs(prob.q), max_abs(Aty)});
        const bool near_opt = rp <= tighten * settings.eps * (1.0 + sp) &&
                              rd <= tighten * settings.eps * (1.0 + sd);
        if (near_opt) {
          Candidate cand{x, y, rp, rd, false};
          if (settings.polish) polish_candidate(prob, P, A, l, u, me, cand);
          if (cand.rp <= settings.eps && cand.rd <= settings.eps) {
            sol.status = QpStatus::Optimal;
            sol.z = cand.x;
            sol.y = cand.y;
            sol.primal_residual = cand.rp;
            sol.dual_residual = cand.rd;
            sol.polished = cand.polished;
            sol.iterations = iter;
            sol.objective = 0.5 * cand.x.dot(P * cand.x) + prob.q.dot(cand.x);
            sol.solve_time = elapsed();
            return sol;
          }
          tighten = std::max(tighten * 0.1, 1e-12);
        }

        // Long-running solve: the best or the current iterate may already
        // identify the optimal vertex, so periodically try to certify one
        // directly. A fixed-rho stall can park the iterates at a residual
        // plateau for good; this is the only exit that stays cheap relative
        // to the iterations it replaces.
        if (!near_opt && settings.polish && m > 0 && iter - last_rescue >= 5000) {
          last_rescue = iter;
          for (int which = 0; which < 2; ++which) {
            Candidate cand = which == 0
                                 ? Candidate{sol.z, sol.y, sol.primal_residual,
                                             sol.dual_residual, false}
                                 : Candidate{x, y, rp, rd, false};
            polish_candidate(prob, P, A, l, u, me, cand);
            if (cand.rp <= settings.eps && cand.rd <= settings.eps) {
              sol.status = QpStatus::Optimal;
              sol.z = cand.x;
              sol.y = cand.y;
              sol.primal_residual = cand.rp;
              sol.dual_residual = cand.rd;
              sol.polished = cand.polished;
              sol.iterations = iter;
              sol.objective = 0.5 * cand.x.dot(P * cand.x) + prob.q.dot(cand.x);
              sol.solve_time = elapsed();
              return sol;
            }
          }
        }

        if (iter > 0 && m > 0) {
          // Certificate checks on the one-iteration displacement.
          const Vector dx = sc.d.cwiseProduct(xb - x_prev);
          const Vector dy = sc.e.cwiseProduct(yb - y_prev) / sc.c;
          if (detect_primal_infeasible(A, l, u, dy)) {
            sol.status = QpStatus::Infeasible;
            sol.iterations = iter;
            sol.objective = std::numeric_limits<double>::quiet_NaN();
            sol.certificate = dy / dy.cwiseAbs().maxCoeff();
            sol.solve_time = elapsed();
            return sol;
          }
          if (detect_dual_infeasible(P, prob.q, A, me, dx)) {
            sol.status = QpStatus::Unbounded;
            sol.iterations = iter;
            sol.objective = std::numeric_limits<double>::quiet_NaN();
            sol.certificate = dx / dx.cwiseAbs().maxCoeff();
            sol.solve_time = elapsed();
            return sol;
          }
        }

        // Rebalance rho when the relative residuals drift apart. The update
        // budget keeps the heuristic from limit-cycling; once spent, fixed-rho
        // convergence takes over.
        if (settings.adaptive_rho && m > 0 && rho_updates < 10 &&
            iter - last_rho_update >= 100 && iter < settings.max_iter) {
          const double rp_rel = rp / std::max(sp, 1e-10);
          const double rd_rel = rd / std::max(sd, 1e-10);
          if (rp_rel > 0.0 && rd_rel > 0.0) {
            const double target = std::clamp(rho * std::sqrt(rp_rel / rd_rel), 1e-6, 1e6);
            if (target > 5.0 * rho || target < 0.2 * rho) {
              set_rho(target);
              build_kkt();
              ldlt.factorize(K);
              if (ldlt.info() != Eigen::Success)
                throw std::runtime_error("QpSolver: KKT refactorization failed");
              last_rho_update = iter;
              ++rho_updates;
            }
          }
        }
      }
      if (iter == settings.max_iter) break;

      x_prev = xb;
      y_prev = yb;

      rhs.head(n) = settings.sigma * xb - qs;
      rhs.tail(m) = zb - yb.cwiseProduct(rho_inv);
      kkt_sol = ldlt.solve(rhs);

      if (m > 0) {
        const Vector ztld = zb + (kkt_sol.tail(m) - yb).cwiseProduct(rho_inv);
        xb = settings.alpha * kkt_sol.head(n) + (1.0 - settings.alpha) * xb;
        zcand = settings.alpha * ztld + (1.0 - settings.alpha) * zb + yb.cwiseProduct(rho_inv);
        const Vector zn = zcand.cwiseMax(ls).cwiseMin(us);
        // y update uses the pre-projection point without the rho^{-1} y term;
        // after cancellation the old multiplier drops out entirely.
        yb = rho_vec.cwiseProduct(zcand - zn);
        zb = zn;
      } else {
        xb = settings.alpha * kkt_sol.head(n) + (1.0 - settings.alpha) * xb;
      }
    }

    // Last chance: the best iterate may already identify the active set even
    // though the inner criterion was never met.
    if (settings.polish && m > 0) {
      Candidate cand{sol.z, sol.y, sol.primal_residual, sol.dual_residual, false};
      polish_candidate(prob, P, A, l, u, me, cand);
      if (cand.rp <= settings.eps && cand.rd <= settings.eps) {
        sol.status = QpStatus::Optimal;
        sol.z = cand.x;
        sol.y = cand.y;
        sol.primal_residual = cand.rp;
        sol.dual_residual = cand.rd;
        sol.polished = cand.polished;
        sol.iterations = settings.max_iter;
        sol.objective = 0.5 * cand.x.dot(P * cand.x) + prob.q.dot(cand.x);
        sol.solve_time = elapsed();
        return sol;
      }
    }
    sol.status = QpStatus::MaxIterations;
    sol.iterations = settings.max_iter;
    sol.objective = 0.5 * sol.z.dot(P * sol.z) + prob.q.dot(sol.z);
    sol.solve_time = elapsed();
    return sol;
  }

  bool detect_primal_infeasible(const SparseMatrix& A, const Vector& l, const Vector& u,
                                const Vector& dy) const {
    const double ny = dy.size() ? dy.cwiseAbs().maxCoeff() : 0.0;
    if (ny <= 1e-12) return false;
    const double tol = settings.eps_infeasible * ny;
    if ((A.transpose() * dy).cwiseAbs().maxCoeff() > tol) return false;
    double support = 0.0;
    for (Eigen::Index i = 0; i < dy.size(); ++i) {
      const double dp = std::max(dy(i), 0.0);
      const double dm = std::min(dy(i), 0.0);
      if (std::isfinite(u(i)))
        support += u(i) * dp;
      else if (dp > tol)
        return false;
      if (std::isfinite(l(i)))
        support += l(i) * dm;
      else if (dm < -tol)
        return false;
    }
    return support <= -tol;
  }

  bool detect_dual_infeasible(const SparseMatrix& P, const Vector& q, const SparseMatrix& A,
                              Eigen::Index me, const Vector& dx) const {
    const double nx = dx.size() ? dx.cwiseAbs().maxCoeff() : 0.0;
    if (nx <= 1e-12) return false;
    const double tol = settings.eps_infeasible * nx;
    if (P.nonZeros() > 0 && (P * dx).cwiseAbs().maxCoeff() > tol) return false;
    if (q.dot(dx) > -tol) return false;
    const Vector Adx = A * dx;
    for (Eigen::Index i = 0; i < Adx.size(); ++i) {
      if (i < me) {
        if (std::abs(Adx(i)) > tol) return false;  // equality rows pin the direction
      } else {
        if (Adx(i) > tol) return false;  // must not climb a finite upper bound
      }
    }
    return true;
  }

  /// Polish by solving the KKT system of a guessed active set. Guesses come
  /// from the multiplier signs and from constraint slacks at two thresholds;
  /// the first guess certifying the tolerance wins, otherwise the tightest
  /// sign-feasible improvement is kept.
  void polish_candidate(const QpProblem& prob, const SparseMatrix& P, const SparseMatrix& A,
                        const Vector& l, const Vector& u, Eigen::Index me, Candidate& cand) const {
    const Eigen::Index m = A.rows();
    std::vector<std::vector<Eigen::Index>> guesses;
    {
      std::vector<Eigen::Index> g;
      for (Eigen::Index i = 0; i < m; ++i)
        if (i < me || cand.y(i) > 0.0) g.push_back(i);
      guesses.push_back(std::move(g));
    }
    if (m > 0) {
      const Vector Ax = A * cand.x;
      // The widest threshold rescues iterates parked well short of the active
      // bounds: extra rows cost one larger equality solve, and the shrink
      // passes discard them, whereas a missed row can never be recovered.
      for (const double kappa : {1e-6, 1e-4, 1e-2}) {
        std::vector<Eigen::Index> g;
        for (Eigen::Index i = 0; i < m; ++i)
          if (i < me || u(i) - Ax(i) <= kappa * (1.0 + std::abs(u(i)))) g.push_back(i);
        bool dup = false;
        for (const auto& prev : guesses) dup = dup || prev == g;
        if (!dup) guesses.push_back(std::move(g));
      }
    }

    Candidate best = cand;
    for (const auto& g : guesses) {
      Candidate trial = cand;
      if (!polish_with_active(prob, P, A, l, u, me, g, trial)) continue;
      if (trial.rp <= settings.eps && trial.rd <= settings.eps) {
        cand = trial;
        return;
      }
      if (std::max(trial.rp, trial.rd) < std::max(best.rp, best.rd)) best = trial;
    }
    cand = best;
  }

  /// Equality-solve on one active-set guess, then repair the guess: rows
  /// whose multiplier comes out negative are dropped, rows the trial point
  /// violates are added, and the reduced system re-solved. Dropping alone is
  /// not enough — a guess that misses a binding row pins the solution to a
  /// wrong vertex whose multiplier signs say nothing about the missing row,
  /// so the repair must be able to grow the set as well as shrink it.
  /// Returns false when no pass produces a sign-feasible improvement.
  bool polish_with_active(const QpProblem& prob, const SparseMatrix& P, const SparseMatrix& A,
                          const Vector& l, const Vector& u, Eigen::Index me,
                          const std::vector<Eigen::Index>& active0, Candidate& cand) const {
    const Eigen::Index n = prob.num_vars();
    const Eigen::Index m = A.rows();

    std::vector<Eigen::Index> active = active0;
    std::vector<Eigen::Index> prev_active;
    Vector x(n), y;
    Candidate best;
    bool have_best = false;

    constexpr int max_passes = 16;
    for (int pass_i = 0; pass_i < max_passes; ++pass_i) {
      const Eigen::Index ma = static_cast<Eigen::Index>(active.size());

      SparseMatrix Aact(ma, n);
      Vector bact(ma);
      {
        std::vector<Eigen::Triplet<double>> trips;
        std::vector<Eigen::Index> row_of(static_cast<size_t>(m), -1);
        for (Eigen::Index a = 0; a < ma; ++a) {
          row_of[static_cast<size_t>(active[a])] = a;
          bact(a) = u(active[a]);  // equality rows have l = u; inequalities sit at the bound
        }
        for (int j = 0; j < A.outerSize(); ++j)
          for (SparseMatrix::InnerIterator it(A, j); it; ++it) {
            const Eigen::Index r = row_of[static_cast<size_t>(it.row())];
            if (r >= 0)
              trips.emplace_back(static_cast<int>(r), static_cast<int>(it.col()), it.value());
          }
        Aact.setFromTriplets(trips.begin(), trips.end());
      }

      const double delta = 1e-8;
      SparseMatrix Kp(n + ma, n + ma);
      {
        std::vector<Eigen::Triplet<double>> trips;
        trips.reserve(static_cast<size_t>(P.nonZeros() + 2 * Aact.nonZeros() + n + ma));
        for (int j = 0; j < P.outerSize(); ++j)
          for (SparseMatrix::InnerIterator it(P, j); it; ++it)
            trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
        for (Eigen::Index i = 0; i < n; ++i)
          trips.emplace_back(static_cast<int>(i), static_cast<int>(i), delta);
        for (int j = 0; j < Aact.outerSize(); ++j)
          for (SparseMatrix::InnerIterator it(Aact, j); it; ++it) {
            trips.emplace_back(static_cast<int>(n + it.row()), static_cast<int>(it.col()),
                               it.value());
            trips.emplace_back(static_cast<int>(it.col()), static_cast<int>(n + it.row()),
                               it.value());
          }
        for (Eigen::Index i = 0; i < ma; ++i)
          trips.emplace_back(static_cast<int>(n + i), static_cast<int>(n + i), -delta);
        Kp.setFromTriplets(trips.begin(), trips.end());
      }
      // Pivoted LU: the tiny regularization makes unpivoted LDLT pivots cancel
      // to zero on degenerate active sets.
      Eigen::SparseLU<SparseMatrix> lu;
      lu.compute(Kp);
      if (lu.info() != Eigen::Success) return false;

      Vector rhs(n + ma);
      rhs.head(n) = -prob.q;
      rhs.tail(ma) = bact;
      Vector t = lu.solve(rhs);
      for (int pass = 0; pass < 3; ++pass) {
        Vector r(n + ma);
        r.head(n) = rhs.head(n) - P * t.head(n) - Aact.transpose() * t.tail(ma);
        r.tail(ma) = rhs.tail(ma) - Aact * t.head(n);
        t += lu.solve(r);
      }
      if (!t.allFinite()) return false;

      x = t.head(n);
      y = Vector::Zero(m);
      for (Eigen::Index a = 0; a < ma; ++a) y(active[a]) = t(n + a);
      if (!x.allFinite() || !y.allFinite()) break;

      const Vector Ax = m > 0 ? Vector(A * x) : Vector(0);
      double rp = 0.0;
      if (m > 0) {
        const Vector zc = Ax.cwiseMax(l).cwiseMin(u);
        rp = (Ax - zc).cwiseAbs().maxCoeff();
      }
      const double rd = (P * x + prob.q + (m > 0 ? Vector(A.transpose() * y) : Vector::Zero(n)))
                            .cwiseAbs()
                            .maxCoeff();

      double ymin = 0.0;
      for (Eigen::Index i = me; i < m; ++i) ymin = std::min(ymin, y(i));

      // A certificate needs nonnegative multipliers on the inequality rows;
      // stationarity alone can hold at a non-optimal vertex.
      if (ymin >= -settings.eps &&
          (!have_best || std::max(rp, rd) < std::max(best.rp, best.rd))) {
        best = Candidate{x, y, rp, rd, true};
        have_best = true;
        if (rp <= settings.eps && rd <= settings.eps) break;
      }

      // Repair: drop sign-infeasible pins, pick up rows the trial violates.
      // Kept rows sit exactly on their bound and violated rows are strictly
      // beyond theirs, so the two groups cannot overlap.
      std::vector<Eigen::Index> kept;
      for (const Eigen::Index i : active)
        if (i < me || y(i) >= 0.0) kept.push_back(i);
      std::vector<Eigen::Index> added;
      for (Eigen::Index i = me; i < m; ++i)
        if (Ax(i) - u(i) > settings.eps) added.push_back(i);
      std::vector<Eigen::Index> next;
      next.reserve(kept.size() + added.size());
      std::merge(kept.begin(), kept.end(), added.begin(), added.end(), std::back_inserter(next));
      next.erase(std::unique(next.begin(), next.end()), next.end());
      if (next == active || next == prev_active || next.empty()) break;
      prev_active = std::move(active);
      active = std::move(next);
    }

    if (!have_best) return false;
    const bool within_tol = best.rp <= settings.eps && best.rd <= settings.eps;
    const bool tighter = std::max(best.rp, best.rd) < std::max(cand.rp, cand.rd);
    if (!(within_tol || tighter)) return false;

    cand = std::move(best);
    return true;
  }
};

inline QpSolution solve_qp(const QpProblem& prob, const QpSettings& settings = {}) {
  return QpSolver(settings).solve(prob);
}

enum class LpSense { Minimize, Maximize };

/// Linear program  min/max c'x  s.t.  G x <= h, solved through the QP machinery.
/// The reported objective uses the requested sense.
inline QpSolution solve_lp(const Vector& c, const SparseMatrix& G, const Vector& h, LpSense sense,
                           const QpSettings& settings = {}) {
  QpProblem prob;
  const Eigen::Index n = c.size();
  prob.H = SparseMatrix(n, n);
  prob.q = sense == LpSense::Maximize ? Vector(-c) : c;
  prob.A_eq = SparseMatrix(0, n);
  prob.b_eq = Vector(0);
  prob.G_in = G;
  prob.h_in = h;
  QpSolution sol = solve_qp(prob, settings);
  if (sol.status == QpStatus::Optimal) sol.objective = c.dot(sol.z);
  return sol;
}

inline QpSolution solve_lp(const Vector& c, const Matrix& G, const Vector& h, LpSense sense,
                           const QpSettings& settings = {}) {
  return solve_lp(c, SparseMatrix(G.sparseView()), h, sense, settings);
}

}  // namespace quadmpc
