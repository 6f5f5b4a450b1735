#pragma once

#include "estimator.hpp"
#include "invariant_sets.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "qp.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace quadmpc {

enum class TerminalMode { Set, CostOnly };

/// Everything one receding-horizon solve needs. P must be the Riccati fixed
/// point for (Phi, Gamma, Q, R); validate() enforces it, because both the
/// terminal cost and the invariance of X_f are stated for that P.
struct MpcConfig {
  Matrix Phi, Gamma;
  int N = 10;
  Matrix Q, R, P;
  Polyhedron X, U;
  Polyhedron X_f;  ///< used only when terminal_mode == Set
  TerminalMode terminal_mode = TerminalMode::Set;
  bool shift_terminal_set = true;  ///< recenter X_f on x_ref when tracking

  Eigen::Index state_dim() const { return Phi.rows(); }
  Eigen::Index input_dim() const { return Gamma.cols(); }

  void validate() const {
    const Eigen::Index n = state_dim();
    const Eigen::Index m = input_dim();
    if (n < 1 || Phi.cols() != n || Gamma.rows() != n || m < 1)
      throw std::invalid_argument("MpcConfig: dynamics dimension mismatch");
    if (N < 1) throw std::invalid_argument("MpcConfig: horizon must be >= 1");
    if (Q.rows() != n || Q.cols() != n || R.rows() != m || R.cols() != m || P.rows() != n ||
        P.cols() != n)
      throw std::invalid_argument("MpcConfig: weight dimension mismatch");
    if (X.dim() != n || U.dim() != m)
      throw std::invalid_argument("MpcConfig: constraint dimension mismatch");
    if (terminal_mode == TerminalMode::Set && X_f.dim() != n)
      throw std::invalid_argument("MpcConfig: terminal set dimension mismatch");
    if (max_abs(P - riccati_map(Phi, Gamma, Q, R, P)) > 1e-8)
      throw std::invalid_argument("MpcConfig: P is not the Riccati fixed point");
  }
};

inline Matrix default_state_weight() {
  return Vector{{10, 10, 100, 10, 10, 10, 1, 1, 1, 1, 1, 1}}.asDiagonal();
}

inline Matrix default_input_weight() { return Vector{{0.1, 1, 1, 1}}.asDiagonal(); }

/// Full default pipeline: Riccati terminal weight plus the maximal invariant
/// terminal set under the resulting gain. The expensive part is the set
/// construction; build once per scenario and copy for horizon sweeps (X_f
/// depends on (Q, R) through K, never on N).
inline MpcConfig make_mpc_config(const LtiModel& model, const ConstraintSpec& cspec, int N,
                                 const Matrix& Q, const Matrix& R) {
  MpcConfig cfg;
  cfg.Phi = model.Phi;
  cfg.Gamma = model.Gamma;
  cfg.N = N;
  cfg.Q = Q;
  cfg.R = R;
  const DareSolution dare = solve_dare(model.Phi, model.Gamma, Q, R);
  cfg.P = dare.P;
  cfg.X = cspec.state_box();
  cfg.U = cspec.input_box();
  cfg.X_f = max_admissible_invariant_set(model.Phi, model.Gamma, dare.K, cspec).set;
  cfg.validate();
  return cfg;
}

inline MpcConfig make_mpc_config(const LtiModel& model, const ConstraintSpec& cspec) {
  return make_mpc_config(model, cspec, 10, default_state_weight(), default_input_weight());
}

/// Steady pair the cost is centered on, plus the constant state drift the
/// plant is believed to carry (Gamma_d d_hat). The drift must enter the
/// horizon's dynamics rows: the steady pair absorbs the disturbance only when
/// predictions see the same drift the plant does, otherwise the loop settles
/// a biased gain-dependent distance from x_ref. Regulation is the all-zero
/// target.
struct TrackingTarget {
  Vector x_ref, u_ref, y_ref;
  Vector drift;  ///< per-step additive state term; empty means zero
  double d_hat = 0.0;

  static TrackingTarget regulation(Eigen::Index n, Eigen::Index m, Eigen::Index p) {
    TrackingTarget t;
    t.x_ref = Vector::Zero(n);
    t.u_ref = Vector::Zero(m);
    t.y_ref = Vector::Zero(p);
    return t;
  }
};

/// Row/variable offsets of the simultaneous formulation with decision vector
/// z = (x_1..x_N, u_0..u_{N-1}).
struct OcpLayout {
  Eigen::Index n, m, sx, su, st;
  int N;

  Eigen::Index num_vars() const { return N * (n + m); }
  Eigen::Index num_eq() const { return N * n; }
  Eigen::Index num_in() const { return (N - 1) * sx + N * su + st; }
  Eigen::Index xvar(int k) const { return (k - 1) * n; }       // k = 1..N
  Eigen::Index uvar(int k) const { return N * n + k * m; }     // k = 0..N-1
  Eigen::Index eq_row(int k) const { return k * n; }           // k = 0..N-1
  Eigen::Index state_row(int k) const { return (k - 1) * sx; }  // k = 1..N-1
  Eigen::Index input_row(int k) const { return (N - 1) * sx + k * su; }
  Eigen::Index terminal_row() const { return (N - 1) * sx + N * su; }
};

inline OcpLayout ocp_layout(const MpcConfig& cfg) {
  OcpLayout lay;
  lay.n = cfg.state_dim();
  lay.m = cfg.input_dim();
  lay.N = cfg.N;
  lay.sx = cfg.X.num_rows();
  lay.su = cfg.U.num_rows();
  lay.st = cfg.terminal_mode == TerminalMode::Set ? cfg.X_f.num_rows() : cfg.X.num_rows();
  return lay;
}

namespace controller_detail {

inline void add_block(std::vector<Eigen::Triplet<double>>& trips, const Matrix& M,
                      Eigen::Index row0, Eigen::Index col0, double scale = 1.0) {
  for (Eigen::Index j = 0; j < M.cols(); ++j)
    for (Eigen::Index i = 0; i < M.rows(); ++i)
      if (M(i, j) != 0.0)
        trips.emplace_back(static_cast<int>(row0 + i), static_cast<int>(col0 + j),
                           scale * M(i, j));
}

}  // namespace controller_detail

/// Sparse horizon problem for the current state and target:
///   min  sum_k ||x_k - x_ref||_Q^2/2 + ||u_k - u_ref||_R^2/2 + ||x_N - x_ref||_P^2/2
///   s.t. x_{k+1} = Phi x_k + Gamma u_k + drift (x_0 fixed), x_k in X, u_k in U,
///        x_N in X_f (Set mode; recentred on x_ref when shift_terminal_set).
/// The constant k = 0 stage term is dropped from the objective. In deviation
/// variables the drift cancels against the steady pair, so the horizon sees
/// the nominal dynamics and the terminal set keeps its invariance.
inline QpProblem build_ocp(const Vector& x0, const MpcConfig& cfg, const TrackingTarget& target) {
  cfg.validate();
  const OcpLayout lay = ocp_layout(cfg);
  if (x0.size() != lay.n || target.x_ref.size() != lay.n || target.u_ref.size() != lay.m)
    throw std::invalid_argument("build_ocp: vector dimension mismatch");
  if (target.drift.size() != 0 && target.drift.size() != lay.n)
    throw std::invalid_argument("build_ocp: drift dimension mismatch");
  if (!x0.allFinite()) throw std::invalid_argument("build_ocp: state is not finite");

  using controller_detail::add_block;
  const Matrix In = Matrix::Identity(lay.n, lay.n);
  QpProblem prob;

  std::vector<Eigen::Triplet<double>> trips;
  for (int k = 1; k < lay.N; ++k) add_block(trips, cfg.Q, lay.xvar(k), lay.xvar(k));
  add_block(trips, cfg.P, lay.xvar(lay.N), lay.xvar(lay.N));
  for (int k = 0; k < lay.N; ++k) add_block(trips, cfg.R, lay.uvar(k), lay.uvar(k));
  prob.H.resize(lay.num_vars(), lay.num_vars());
  prob.H.setFromTriplets(trips.begin(), trips.end());

  prob.q = Vector::Zero(lay.num_vars());
  for (int k = 1; k < lay.N; ++k) prob.q.segment(lay.xvar(k), lay.n) = -cfg.Q * target.x_ref;
  prob.q.segment(lay.xvar(lay.N), lay.n) = -cfg.P * target.x_ref;
  for (int k = 0; k < lay.N; ++k) prob.q.segment(lay.uvar(k), lay.m) = -cfg.R * target.u_ref;

  trips.clear();
  for (int k = 0; k < lay.N; ++k) {
    add_block(trips, In, lay.eq_row(k), lay.xvar(k + 1));
    if (k > 0) add_block(trips, cfg.Phi, lay.eq_row(k), lay.xvar(k), -1.0);
    add_block(trips, cfg.Gamma, lay.eq_row(k), lay.uvar(k), -1.0);
  }
  prob.A_eq.resize(lay.num_eq(), lay.num_vars());
  prob.A_eq.setFromTriplets(trips.begin(), trips.end());
  prob.b_eq = Vector::Zero(lay.num_eq());
  if (target.drift.size() == lay.n)
    for (int k = 0; k < lay.N; ++k) prob.b_eq.segment(lay.eq_row(k), lay.n) = target.drift;
  prob.b_eq.head(lay.n) += cfg.Phi * x0;

  trips.clear();
  prob.h_in = Vector::Zero(lay.num_in());
  for (int k = 1; k < lay.N; ++k) {
    add_block(trips, cfg.X.H, lay.state_row(k), lay.xvar(k));
    prob.h_in.segment(lay.state_row(k), lay.sx) = cfg.X.h;
  }
  for (int k = 0; k < lay.N; ++k) {
    add_block(trips, cfg.U.H, lay.input_row(k), lay.uvar(k));
    prob.h_in.segment(lay.input_row(k), lay.su) = cfg.U.h;
  }
  if (cfg.terminal_mode == TerminalMode::Set) {
    add_block(trips, cfg.X_f.H, lay.terminal_row(), lay.xvar(lay.N));
    prob.h_in.segment(lay.terminal_row(), lay.st) =
        cfg.shift_terminal_set ? Vector(cfg.X_f.h + cfg.X_f.H * target.x_ref) : cfg.X_f.h;
  } else {
    add_block(trips, cfg.X.H, lay.terminal_row(), lay.xvar(lay.N));
    prob.h_in.segment(lay.terminal_row(), lay.st) = cfg.X.h;
  }
  prob.G_in.resize(lay.num_in(), lay.num_vars());
  prob.G_in.setFromTriplets(trips.begin(), trips.end());
  return prob;
}

/// Planned trajectory unpacked from a decision vector; x[0] is the query
/// state, so x has N+1 entries and u has N.
struct OcpPlan {
  std::vector<Vector> x, u;
};

inline OcpPlan extract_plan(const MpcConfig& cfg, const Vector& x0, const Vector& z) {
  const OcpLayout lay = ocp_layout(cfg);
  if (z.size() != lay.num_vars()) throw std::invalid_argument("extract_plan: bad decision vector");
  OcpPlan plan;
  plan.x.push_back(x0);
  for (int k = 1; k <= lay.N; ++k) plan.x.push_back(z.segment(lay.xvar(k), lay.n));
  for (int k = 0; k < lay.N; ++k) plan.u.push_back(z.segment(lay.uvar(k), lay.m));
  return plan;
}

/// Tracking cost of a plan, including the constant k = 0 stage the QP drops;
/// this is the value function sample V_N(x_0) when the plan is optimal.
inline double plan_cost(const MpcConfig& cfg, const TrackingTarget& target, const OcpPlan& plan) {
  double v = 0.0;
  for (int k = 0; k < cfg.N; ++k) {
    const Vector dx = plan.x[static_cast<size_t>(k)] - target.x_ref;
    const Vector du = plan.u[static_cast<size_t>(k)] - target.u_ref;
    v += 0.5 * dx.dot(cfg.Q * dx) + 0.5 * du.dot(cfg.R * du);
  }
  const Vector dN = plan.x[static_cast<size_t>(cfg.N)] - target.x_ref;
  return v + 0.5 * dN.dot(cfg.P * dN);
}

struct MpcStepResult {
  Vector u0;
  QpSolution qp;
  OcpPlan plan;
  double value = std::numeric_limits<double>::quiet_NaN();
  /// Smallest slack of (x_ref, u_ref) across the X and U rows; negative means
  /// the target pair leaves the boxes and the recentred terminal set is void.
  double target_margin = std::numeric_limits<double>::infinity();
};

/// Receding-horizon controller. Owns the warm-start memory: each solve seeds
/// from the previous solution shifted by one step (last block repeated).
class MpcController {
 public:
  explicit MpcController(MpcConfig cfg, QpSettings settings = {})
      : cfg_(std::move(cfg)), settings_(settings) {
    cfg_.validate();
  }

  const MpcConfig& config() const { return cfg_; }

  void reset() { have_warm_ = false; }

  MpcStepResult step(const Vector& x, const TrackingTarget& target) {
    const QpProblem prob = build_ocp(x, cfg_, target);
    const QpSolver solver(settings_);
    MpcStepResult res;
    if (have_warm_ && z_warm_.size() == prob.num_vars() &&
        y_warm_.size() == prob.num_eq() + prob.num_in()) {
      shift_warm();
      res.qp = solver.solve(prob, z_warm_, y_warm_);
    } else {
      res.qp = solver.solve(prob);
    }
    const OcpLayout lay = ocp_layout(cfg_);
    if (res.qp.status == QpStatus::Optimal || res.qp.status == QpStatus::MaxIterations) {
      z_warm_ = res.qp.z;
      y_warm_ = res.qp.y;
      have_warm_ = true;
    } else {
      have_warm_ = false;
    }
    if (res.qp.z.size() == lay.num_vars()) {
      res.u0 = res.qp.z.segment(lay.uvar(0), lay.m);
      res.plan = extract_plan(cfg_, x, res.qp.z);
      res.value = plan_cost(cfg_, target, res.plan);
    } else {
      res.u0 = Vector::Zero(lay.m);
    }
    res.target_margin = -std::max(cfg_.X.margin(target.x_ref), cfg_.U.margin(target.u_ref));
    return res;
  }

 private:
  /// Advance the stored solution one sample: block k takes block k+1's value,
  /// terminal blocks repeat. Applied to both primal and dual memory.
  void shift_warm() {
    const OcpLayout lay = ocp_layout(cfg_);
    Vector z = z_warm_;
    for (int k = 1; k < lay.N; ++k)
      z.segment(lay.xvar(k), lay.n) = z_warm_.segment(lay.xvar(k + 1), lay.n);
    for (int k = 0; k + 1 < lay.N; ++k)
      z.segment(lay.uvar(k), lay.m) = z_warm_.segment(lay.uvar(k + 1), lay.m);
    Vector y = y_warm_;
    const Eigen::Index eq0 = 0, in0 = lay.num_eq();
    for (int k = 0; k + 1 < lay.N; ++k)
      y.segment(eq0 + lay.eq_row(k), lay.n) = y_warm_.segment(eq0 + lay.eq_row(k + 1), lay.n);
    for (int k = 1; k + 1 < lay.N; ++k)
      y.segment(in0 + lay.state_row(k), lay.sx) =
          y_warm_.segment(in0 + lay.state_row(k + 1), lay.sx);
    for (int k = 0; k + 1 < lay.N; ++k)
      y.segment(in0 + lay.input_row(k), lay.su) =
          y_warm_.segment(in0 + lay.input_row(k + 1), lay.su);
    z_warm_.swap(z);
    y_warm_.swap(y);
  }

  MpcConfig cfg_;
  QpSettings settings_;
  Vector z_warm_, y_warm_;
  bool have_warm_ = false;
};

/// Raised when no admissible steady pair reproduces the requested reference.
class TargetSelectionError : public std::runtime_error {
 public:
  TargetSelectionError(const std::string& what, QpStatus status)
      : std::runtime_error(what), status(status) {}
  QpStatus status;
};

inline QpSettings ots_settings() {
  QpSettings s;
  s.eps = 1e-8;  // the target feeds equality-sensitive downstream algebra
  return s;
}

/// Steady pair for an output reference under the current disturbance
/// estimate: minimize ||u_r||^2/2 + 1e-6 ||x_r||^2/2 subject to
///   (I - Phi) x_r - Gamma u_r = Gamma_d d_hat,
///   C x_r = y_ref - C_d d_hat   (rows listed in `tracked`; all when empty),
///   (x_r, u_r) inside the constraint boxes.
/// With more outputs than inputs, tracking every output is generally
/// impossible under a disturbance; the caller picks which outputs bind.
inline TrackingTarget solve_ots(const AugmentedModel& aug, double d_hat, const Vector& y_ref,
                                const ConstraintSpec& cspec,
                                const std::vector<Eigen::Index>& tracked = {},
                                const QpSettings& qp_settings = ots_settings()) {
  if (aug.dist_dim != 1)
    throw std::invalid_argument("solve_ots: expects a scalar disturbance model");
  const Eigen::Index n = aug.state_dim();
  const Eigen::Index m = aug.input_dim();
  const Eigen::Index p = aug.output_dim();
  if (y_ref.size() != p) throw std::invalid_argument("solve_ots: reference dimension mismatch");
  const Polyhedron X = cspec.state_box();
  const Polyhedron U = cspec.input_box();
  if (X.dim() != n || U.dim() != m)
    throw std::invalid_argument("solve_ots: constraint dimension mismatch");

  std::vector<Eigen::Index> rows = tracked;
  if (rows.empty())
    for (Eigen::Index i = 0; i < p; ++i) rows.push_back(i);
  for (Eigen::Index i : rows)
    if (i < 0 || i >= p) throw std::invalid_argument("solve_ots: tracked output out of range");

  const Eigen::Index nt = static_cast<Eigen::Index>(rows.size());
  Matrix A_eq = Matrix::Zero(n + nt, n + m);
  Vector b_eq(n + nt);
  A_eq.topLeftCorner(n, n) = Matrix::Identity(n, n) - aug.Phi_t.topLeftCorner(n, n);
  A_eq.topRightCorner(n, m) = -aug.Gamma_t.topRows(n);
  b_eq.head(n) = aug.Phi_t.topRightCorner(n, 1) * d_hat;
  for (Eigen::Index i = 0; i < nt; ++i) {
    A_eq.row(n + i).head(n) = aug.C_t.row(rows[static_cast<size_t>(i)]).head(n);
    b_eq(n + i) =
        y_ref(rows[static_cast<size_t>(i)]) - aug.C_t(rows[static_cast<size_t>(i)], n) * d_hat;
  }

  Matrix G_in = Matrix::Zero(X.num_rows() + U.num_rows(), n + m);
  G_in.topLeftCorner(X.num_rows(), n) = X.H;
  G_in.bottomRightCorner(U.num_rows(), m) = U.H;
  Vector h_in(X.num_rows() + U.num_rows());
  h_in << X.h, U.h;

  Vector diag(n + m);
  diag.head(n).setConstant(1e-6);
  diag.tail(m).setOnes();
  const QpProblem prob = QpProblem::from_dense(Matrix(diag.asDiagonal()), Vector::Zero(n + m),
                                               A_eq, b_eq, G_in, h_in);
  const QpSolution sol = solve_qp(prob, qp_settings);
  if (sol.status != QpStatus::Optimal)
    throw TargetSelectionError(
        std::string("solve_ots: no admissible steady pair (") + to_string(sol.status) + ")",
        sol.status);

  TrackingTarget target;
  target.x_ref = sol.z.head(n);
  target.u_ref = sol.z.tail(m);
  target.y_ref = y_ref;
  target.drift = aug.Phi_t.topRightCorner(n, 1) * d_hat;
  target.d_hat = d_hat;
  return target;
}

/// Infinite-horizon feedback gain; u = -K x.
inline Matrix lqr_gain(const LtiModel& model, const Matrix& Q, const Matrix& R) {
  return solve_dare(model.Phi, model.Gamma, Q, R).K;
}

/// Unconstrained T-step policy from the backward recursion. `input` follows
/// the open-loop schedule (gain frozen past T-1); `receding_input` re-applies
/// the first gain every sample, which is how the baseline is simulated.
struct FiniteLqrPolicy {
  FiniteHorizonLqr dp;

  Vector input(int t, const Vector& x) const {
    const size_t idx = std::min(static_cast<size_t>(std::max(t, 0)), dp.gains.size() - 1);
    return dp.gains[idx] * x;
  }
  Vector receding_input(const Vector& x) const { return dp.gains.front() * x; }
};

inline FiniteLqrPolicy finite_lqr_controller(const LtiModel& model, const Matrix& Q,
                                             const Matrix& R, const Matrix& Q_T, int T) {
  return FiniteLqrPolicy{finite_horizon_gains(model.Phi, model.Gamma, Q, R, Q_T, T)};
}

}  // namespace quadmpc
