#pragma once

// Ground cost c(x, y): minimal integrated running cost steering x to y in time T.

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctrlot/errors.hpp"
#include "ctrlot/lbfgs.hpp"
#include "ctrlot/linalg.hpp"
#include "ctrlot/parallel.hpp"
#include "ctrlot/systems.hpp"

namespace ctrlot {

// ---------------------------------------------------------------------------
// Running costs

enum class CostKind { kinetic, quadratic, generic };

inline const char* to_string(CostKind k) {
  switch (k) {
    case CostKind::kinetic: return "kinetic";
    case CostKind::quadratic: return "quadratic";
    case CostKind::generic: return "generic";
  }
  return "?";
}

/// L(t, x, u). kinetic: sum_i w_i u_i^2. quadratic: x'Qx + u'Ru. generic: user map.
/// alpha, beta, p are the coercivity constants L >= alpha |u|^p + beta.
struct RunningCost {
  using Eval = std::function<double(double, const Vec&, const Vec&)>;

  CostKind kind = CostKind::kinetic;
  Vec weights;
  Mat Q, R;
  Eval generic_eval;
  bool convex_in_u = true;
  double alpha = 1.0;
  double beta = 0.0;
  double p = 2.0;

  static RunningCost kinetic(int n, double w = 1.0) { return kinetic(Vec::Constant(n, w)); }
  static RunningCost kinetic(Vec w) {
    RunningCost c;
    c.kind = CostKind::kinetic;
    c.alpha = w.size() ? w.minCoeff() : 1.0;
    c.weights = std::move(w);
    return c;
  }
  static RunningCost quadratic(Mat Q, Mat R) {
    RunningCost c;
    c.kind = CostKind::quadratic;
    c.Q = std::move(Q);
    c.R = std::move(R);
    c.alpha = c.R.size() ? std::max(0.0, min_eigenvalue(c.R)) : 1.0;
    return c;
  }
  static RunningCost generic(Eval L, bool convex_in_u, double alpha = 1.0, double beta = 0.0,
                             double p = 2.0) {
    RunningCost c;
    c.kind = CostKind::generic;
    c.generic_eval = std::move(L);
    c.convex_in_u = convex_in_u;
    c.alpha = alpha;
    c.beta = beta;
    c.p = p;
    return c;
  }

  void validate(int d, int n) const {
    switch (kind) {
      case CostKind::kinetic:
        if (weights.size() != n)
          throw InvalidCost("kinetic cost: expected " + std::to_string(n) + " weights");
        if (!(weights.array() > 0.0).all()) throw InvalidCost("kinetic cost: weights must be positive");
        if (p != 2.0) throw InvalidCost("kinetic cost: only exponent 2 is supported");
        break;
      case CostKind::quadratic:
        if (Q.rows() != d || Q.cols() != d) throw InvalidCost("quadratic cost: Q must be d x d");
        if (R.rows() != n || R.cols() != n) throw InvalidCost("quadratic cost: R must be n x n");
        if (!is_psd(Q)) throw InvalidCost("quadratic cost: Q is not symmetric positive semidefinite");
        if (!is_pd(R)) throw InvalidCost("quadratic cost: R is not symmetric positive definite");
        break;
      case CostKind::generic:
        if (!generic_eval) throw InvalidCost("generic cost: no evaluation map");
        break;
    }
    if (!(alpha > 0.0) && kind != CostKind::quadratic) throw InvalidCost("coercivity: alpha must be positive");
    if (!(p >= 1.0)) throw InvalidCost("coercivity: p must be at least 1");
  }

  /// True when L = x'Qx + u'Wu for some Q (possibly zero) and W.
  bool is_quadratic_form() const { return kind != CostKind::generic; }

  Mat control_weight(int n) const {
    if (kind == CostKind::kinetic) return weights.asDiagonal();
    if (kind == CostKind::quadratic) return R;
    (void)n;
    throw InvalidCost("control_weight: generic cost has no quadratic control weight");
  }
  Mat state_weight(int d) const {
    if (kind == CostKind::quadratic) return Q;
    if (kind == CostKind::kinetic) return Mat::Zero(d, d);
    throw InvalidCost("state_weight: generic cost has no quadratic state weight");
  }

  double operator()(double t, const Vec& x, const Vec& u) const {
    switch (kind) {
      case CostKind::kinetic: return (weights.array() * u.array().square()).sum();
      case CostKind::quadratic: return x.dot(Q * x) + u.dot(R * u);
      case CostKind::generic: return generic_eval(t, x, u);
    }
    return 0.0;
  }

  Vec grad_x(double t, const Vec& x, const Vec& u) const {
    switch (kind) {
      case CostKind::kinetic: return Vec::Zero(x.size());
      case CostKind::quadratic: return (Q + Q.transpose()) * x;
      case CostKind::generic: break;
    }
    const double h = 1e-6 * (1.0 + x.norm());
    Vec g(x.size()), xp = x, xm = x;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      xp(j) += h;
      xm(j) -= h;
      g(j) = (generic_eval(t, xp, u) - generic_eval(t, xm, u)) / (2.0 * h);
      xp(j) = xm(j) = x(j);
    }
    return g;
  }

  Vec grad_u(double t, const Vec& x, const Vec& u) const {
    switch (kind) {
      case CostKind::kinetic: return 2.0 * (weights.array() * u.array()).matrix();
      case CostKind::quadratic: return (R + R.transpose()) * u;
      case CostKind::generic: break;
    }
    const double h = 1e-6 * (1.0 + u.norm());
    Vec g(u.size()), up = u, um = u;
    for (Eigen::Index j = 0; j < u.size(); ++j) {
      up(j) += h;
      um(j) -= h;
      g(j) = (generic_eval(t, x, up) - generic_eval(t, x, um)) / (2.0 * h);
      up(j) = um(j) = u(j);
    }
    return g;
  }
};

/// Composite trapezoid over the control grid: each interval averages L at both ends.
inline double trajectory_cost(const RunningCost& cost, const Trajectory& tr) {
  double J = 0.0;
  for (int k = 0; k < tr.steps(); ++k) {
    const double h = tr.times[k + 1] - tr.times[k];
    J += 0.5 * h *
         (cost(tr.times[k], tr.states[k], tr.controls[k]) +
          cost(tr.times[k + 1], tr.states[k + 1], tr.controls[k]));
  }
  return J;
}

// ---------------------------------------------------------------------------
// Results

struct CostResult {
  double value = std::numeric_limits<double>::infinity();
  Trajectory trajectory;
  bool converged = false;
  double multistart_spread = 0.0;
  double endpoint_error = 0.0;
  double gradient_norm = 0.0;
  Vec costate;  // p(0) with H = p'f + L minimized in u
  int restart = 0;
  std::vector<double> restart_values;
  std::string method;
  std::vector<std::string> warnings;
};

class NonConvergence : public Error {
 public:
  NonConvergence(const std::string& what, CostResult best)
      : Error(what), best_(std::move(best)) {}
  const CostResult& best() const noexcept { return best_; }

 private:
  CostResult best_;
};

// ---------------------------------------------------------------------------
// Linear-quadratic closed forms

/// W_T = int_0^T e^{At} B R^{-1} B' e^{A't} dt by Gauss-Legendre quadrature.
inline Mat gramian(const Mat& A, const Mat& B, const Mat& R, double T, int quad_nodes = 32) {
  if (A.rows() != A.cols() || B.rows() != A.rows() || R.rows() != B.cols() || R.cols() != B.cols())
    throw InvalidArgument("gramian: inconsistent dimensions");
  if (!is_pd(R)) throw InvalidCost("gramian: R is not symmetric positive definite");
  if (!(T > 0.0)) throw InvalidArgument("gramian: horizon must be positive");
  const Mat S = B * R.llt().solve(B.transpose());
  const Quadrature q = gauss_legendre(quad_nodes, 0.0, T);
  Mat W = Mat::Zero(A.rows(), A.rows());
  for (int k = 0; k < quad_nodes; ++k) {
    const Mat E = (A * q.nodes[k]).exp();
    W += q.weights[k] * E * S * E.transpose();
  }
  return symmetrize(W);
}

/// c(x, y) = <x, Dx> - <x, Ey> + <y, Fy>.
struct LqMatrices {
  Mat D, E, F;
  Mat W;               // controllability Gramian
  double gramian_condition = 0.0;
  std::vector<std::string> warnings;

  double cost(const Vec& x, const Vec& y) const { return x.dot(D * x) - x.dot(E * y) + y.dot(F * y); }
};

namespace detail {

inline Mat lq_hamiltonian(const Mat& A, const Mat& B, const Mat& Q, const Mat& R) {
  const Eigen::Index d = A.rows();
  const Mat S = B * R.llt().solve(B.transpose());
  Mat H(2 * d, 2 * d);
  H << A, -0.5 * S, -2.0 * Q, -A.transpose();
  return H;
}

inline void lq_check(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, double T) {
  if (A.rows() != A.cols() || B.rows() != A.rows())
    throw InvalidArgument("lq: A must be d x d and B must be d x n");
  if (Q.rows() != A.rows() || Q.cols() != A.rows()) throw InvalidCost("lq: Q must be d x d");
  if (R.rows() != B.cols() || R.cols() != B.cols()) throw InvalidCost("lq: R must be n x n");
  if (!is_psd(Q)) throw InvalidCost("lq: Q is not symmetric positive semidefinite");
  if (!is_pd(R)) throw InvalidCost("lq: R is not symmetric positive definite");
  if (!(T > 0.0)) throw InvalidArgument("lq: horizon must be positive");
}

}  // namespace detail

inline LqMatrices lq_cost_matrices(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, double T) {
  detail::lq_check(A, B, Q, R, T);
  const Eigen::Index d = A.rows();
  if (kalman_rank(A, B) < d) throw SingularGramian("lq: (A, B) is not controllable");
  LqMatrices out;
  out.W = gramian(A, B, R, T);
  out.gramian_condition = condition_number(out.W);
  if (out.gramian_condition > 1e12)
    out.warnings.push_back("ill-conditioned Gramian (condition number " +
                           std::to_string(out.gramian_condition) + ")");
  if (Q.isZero(0.0)) {
    const Mat eAT = (A * T).exp();
    const Mat Winv = symmetrize(out.W.inverse());
    out.D = symmetrize(eAT.transpose() * Winv * eAT);
    out.E = 2.0 * eAT.transpose() * Winv;
    out.F = Winv;
  } else {
    const Mat Phi = (detail::lq_hamiltonian(A, B, Q, R) * T).exp();
    const Mat P11 = Phi.topLeftCorner(d, d), P12 = Phi.topRightCorner(d, d);
    const Mat P21 = Phi.bottomLeftCorner(d, d), P22 = Phi.bottomRightCorner(d, d);
    const Eigen::PartialPivLU<Mat> lu(P12);
    const Mat Py = lu.inverse();
    const Mat Px = -lu.solve(P11);
    out.D = symmetrize(0.5 * Px);
    out.F = symmetrize(-0.5 * P22 * Py);
    out.E = -0.5 * Py + 0.5 * (P21 + P22 * Px).transpose();
  }
  return out;
}

/// Exact propagation of the state-costate system z' = H z over [0, T].
class LqProblem {
 public:
  LqProblem(Mat A, Mat B, Mat Q, Mat R, double T)
      : A_(std::move(A)), B_(std::move(B)), Q_(std::move(Q)), R_(std::move(R)), T_(T) {
    mats_ = lq_cost_matrices(A_, B_, Q_, R_, T_);
    ham_ = detail::lq_hamiltonian(A_, B_, Q_, R_);
    const Eigen::Index d = A_.rows();
    const Mat Phi = (ham_ * T_).exp();
    P11_ = Phi.topLeftCorner(d, d);
    P12lu_ = Eigen::PartialPivLU<Mat>(Phi.topRightCorner(d, d));
    Rinv_Bt_ = R_.llt().solve(B_.transpose());
  }

  const LqMatrices& matrices() const { return mats_; }
  double value(const Vec& x, const Vec& y) const { return mats_.cost(x, y); }
  Vec initial_costate(const Vec& x, const Vec& y) const { return P12lu_.solve(y - P11_ * x); }

  /// Trajectory on N uniform intervals from the exact costate flow. Controls are
  /// Simpson averages of u(t) = -R^{-1}B'p/2 over each interval; the cost is the
  /// composite Simpson rule on the half-step grid.
  CostResult solve(const Vec& x, const Vec& y, int N = 256) const {
    if (x.size() != A_.rows() || y.size() != A_.rows())
      throw InvalidArgument("lq_point_cost: endpoint dimension mismatch");
    if (N < 1) throw InvalidArgument("lq_point_cost: need at least one step");
    const Eigen::Index d = A_.rows();
    CostResult res;
    res.method = "lq_closed_form";
    res.value = value(x, y);
    res.costate = initial_costate(x, y);
    res.warnings = mats_.warnings;
    const double h = T_ / N;
    const Mat half = (ham_ * (0.5 * h)).exp();
    Vec z(2 * d);
    z << x, res.costate;
    auto u_of = [&](const Vec& zz) { return Vec(-0.5 * Rinv_Bt_ * zz.tail(d)); };
    auto L_of = [&](const Vec& zz) {
      const Vec u = u_of(zz);
      return zz.head(d).dot(Q_ * zz.head(d)) + u.dot(R_ * u);
    };
    Trajectory& tr = res.trajectory;
    tr.times = uniform_times(T_, N);
    tr.states.push_back(x);
    double J = 0.0;
    for (int k = 0; k < N; ++k) {
      const Vec zm = half * z;
      const Vec z1 = half * zm;
      tr.controls.push_back((u_of(z) + 4.0 * u_of(zm) + u_of(z1)) / 6.0);
      J += h / 6.0 * (L_of(z) + 4.0 * L_of(zm) + L_of(z1));
      z = z1;
      tr.states.push_back(z.head(d));
    }
    tr.cost = J;
    res.endpoint_error = (tr.states.back() - y).norm();
    res.converged = res.endpoint_error <= 1e-6 * (1.0 + y.norm());
    if (!res.converged) res.warnings.push_back("closed-form trajectory misses the endpoint");
    return res;
  }

 private:
  Mat A_, B_, Q_, R_;
  double T_;
  LqMatrices mats_;
  Mat ham_, P11_, Rinv_Bt_;
  Eigen::PartialPivLU<Mat> P12lu_;
};

inline CostResult lq_point_cost(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, double T,
                                const Vec& x, const Vec& y, int N = 256) {
  return LqProblem(A, B, Q, R, T).solve(x, y, N);
}

// ---------------------------------------------------------------------------
// Direct transcription

struct TranscriptionParams {
  int N = 64;
  int restarts = 4;
  std::uint64_t seed = 0;
  std::vector<double> penalties{1e2, 1e3, 1e4, 1e5};
  int extra_rounds = 30;        // multiplier rounds at the last penalty
  double endpoint_tol = 1e-5;
  double gradient_tol = 1e-6;   // on sup |dJ/du_k| / dt
  int max_iters = 4000;
  double noise_scale = 0.5;     // restart noise, in units of |y - x|
  double control_bound = std::numeric_limits<double>::infinity();
};

namespace detail {

/// Discretized penalty objective with its discrete-adjoint gradient.
class Transcription {
 public:
  Transcription(const ControlAffineSystem& sys, const RunningCost& cost, Vec x, Vec y, double T, int N)
      : sys_(sys), cost_(cost), x0_(std::move(x)), y_(std::move(y)), T_(T), N_(N),
        d_(sys.dim()), n_(sys.inputs()), h_(T / N), times_(uniform_times(T, N)) {}

  int size() const { return N_ * n_; }
  double dt() const { return h_; }

  std::vector<Vec> unpack(const Vec& U) const {
    std::vector<Vec> u(N_);
    for (int k = 0; k < N_; ++k) u[k] = U.segment(k * n_, n_);
    return u;
  }

  Trajectory simulate(const Vec& U) const {
    Trajectory tr;
    tr.times = times_;
    tr.controls = unpack(U);
    tr.states.reserve(N_ + 1);
    tr.states.push_back(x0_);
    for (int k = 0; k < N_; ++k) tr.states.push_back(rk4_step(sys_, tr.states.back(), tr.controls[k], h_));
    tr.cost = trajectory_cost(cost_, tr);
    return tr;
  }

  /// J = running cost + nu'(x_N - y) + mu |x_N - y|^2. Writes grad, and the
  /// sensitivity dJ/dx_0 to `lambda0` when given.
  double evaluate(const Vec& U, Vec& grad, double mu, const Vec& nu, Vec* lambda0 = nullptr) const {
    std::vector<Vec> xs(N_ + 1);
    std::vector<Mat> Fx(N_), Fu(N_);
    xs[0] = x0_;
    const Mat I = Mat::Identity(d_, d_);
    double J = 0.0;
    for (int k = 0; k < N_; ++k) {
      const Vec u = U.segment(k * n_, n_);
      const Vec& x = xs[k];
      const double h = h_;
      const Vec k1 = sys_.velocity(x, u);
      const Mat J1 = sys_.state_jacobian(x, u), G1 = sys_.control_matrix(x);
      const Vec x2 = x + 0.5 * h * k1;
      const Vec k2 = sys_.velocity(x2, u);
      const Mat J2 = sys_.state_jacobian(x2, u), G2 = sys_.control_matrix(x2);
      const Vec x3 = x + 0.5 * h * k2;
      const Vec k3 = sys_.velocity(x3, u);
      const Mat J3 = sys_.state_jacobian(x3, u), G3 = sys_.control_matrix(x3);
      const Vec x4 = x + h * k3;
      const Vec k4 = sys_.velocity(x4, u);
      const Mat J4 = sys_.state_jacobian(x4, u), G4 = sys_.control_matrix(x4);

      const Mat K1x = J1, K1u = G1;
      const Mat K2x = J2 * (I + 0.5 * h * K1x), K2u = J2 * (0.5 * h * K1u) + G2;
      const Mat K3x = J3 * (I + 0.5 * h * K2x), K3u = J3 * (0.5 * h * K2u) + G3;
      const Mat K4x = J4 * (I + h * K3x), K4u = J4 * (h * K3u) + G4;
      Fx[k] = I + (h / 6.0) * (K1x + 2.0 * K2x + 2.0 * K3x + K4x);
      Fu[k] = (h / 6.0) * (K1u + 2.0 * K2u + 2.0 * K3u + K4u);
      xs[k + 1] = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      J += 0.5 * h * (cost_(times_[k], x, u) + cost_(times_[k + 1], xs[k + 1], u));
    }
    const Vec e = xs[N_] - y_;
    J += nu.dot(e) + mu * e.squaredNorm();
    if (!std::isfinite(J)) {
      grad = Vec::Zero(size());
      return std::numeric_limits<double>::infinity();
    }

    grad.resize(size());
    Vec lam = 2.0 * mu * e + nu;
    lam += 0.5 * h_ * cost_.grad_x(times_[N_], xs[N_], U.segment((N_ - 1) * n_, n_));
    for (int k = N_ - 1; k >= 0; --k) {
      const Vec u = U.segment(k * n_, n_);
      grad.segment(k * n_, n_) = Fu[k].transpose() * lam +
                                 0.5 * h_ * (cost_.grad_u(times_[k], xs[k], u) +
                                             cost_.grad_u(times_[k + 1], xs[k + 1], u));
      lam = Fx[k].transpose() * lam + 0.5 * h_ * cost_.grad_x(times_[k], xs[k], u);
      if (k > 0) lam += 0.5 * h_ * cost_.grad_x(times_[k], xs[k], U.segment((k - 1) * n_, n_));
    }
    if (lambda0) *lambda0 = lam;
    return J;
  }

  /// Least-squares controls tracking the straight segment from x to y.
  Vec straight_line_controls() const {
    Vec U(size());
    const Vec v = (y_ - x0_) / T_;
    for (int k = 0; k < N_; ++k) {
      const Vec xm = x0_ + ((k + 0.5) / N_) * (y_ - x0_);
      const Mat G = sys_.control_matrix(xm);
      const Vec rhs = v - sys_.drift()(xm);
      U.segment(k * n_, n_) = G.completeOrthogonalDecomposition().solve(rhs);
    }
    return U;
  }

  const Vec& target() const { return y_; }

 private:
  const ControlAffineSystem& sys_;
  const RunningCost& cost_;
  Vec x0_, y_;
  double T_;
  int N_, d_, n_;
  double h_;
  std::vector<double> times_;
};

struct RestartOutcome {
  Vec U;
  Trajectory trajectory;
  double value = 0.0;
  double endpoint_error = 0.0;
  double gradient_norm = 0.0;
  double control_norm = 0.0;
  Vec costate;
  bool converged = false;
};

inline RestartOutcome run_restart(const Transcription& tp, Vec U, const TranscriptionParams& prm) {
  const int d = static_cast<int>(tp.target().size());
  Vec nu = Vec::Zero(d);
  LbfgsOptions opt;
  opt.max_iters = prm.max_iters;
  opt.gradient_tol = prm.gradient_tol;
  opt.gradient_scale = 1.0 / tp.dt();
  const bool boxed = std::isfinite(prm.control_bound);

  RestartOutcome out;
  auto minimize = [&](double mu) {
    Objective f = [&](const Vec& v, Vec& g) { return tp.evaluate(v, g, mu, nu); };
    LbfgsResult r = boxed ? projected_gradient_minimize(f, U, prm.control_bound, opt)
                          : lbfgs_minimize(f, U, opt);
    U = r.x;
    out.gradient_norm = r.gradient_norm;
    const Trajectory tr = tp.simulate(U);
    const Vec e = tr.end() - tp.target();
    out.endpoint_error = e.norm();
    return e;
  };

  const double mu_last = prm.penalties.empty() ? 1e5 : prm.penalties.back();
  for (double mu : prm.penalties) nu += 2.0 * mu * minimize(mu);
  for (int r = 0; r < prm.extra_rounds; ++r) {
    if (out.endpoint_error <= prm.endpoint_tol && out.gradient_norm <= prm.gradient_tol) break;
    nu += 2.0 * mu_last * minimize(mu_last);
  }
  // report the state of the last subproblem (multiplier already consumed)
  Vec g;
  Vec nu_used = nu - 2.0 * mu_last * (tp.simulate(U).end() - tp.target());
  tp.evaluate(U, g, mu_last, nu_used, &out.costate);
  out.U = U;
  out.trajectory = tp.simulate(U);
  out.value = out.trajectory.cost;
  out.control_norm = std::sqrt(tp.dt()) * U.norm();
  out.converged = out.endpoint_error <= prm.endpoint_tol && out.gradient_norm <= prm.gradient_tol;
  return out;
}

inline CostResult transcribe(const ControlAffineSystem& sys, const RunningCost& cost, const Vec& x,
                             const Vec& y, double T, const TranscriptionParams& prm,
                             const std::string& method) {
  if (x.size() != sys.dim() || y.size() != sys.dim())
    throw InvalidArgument(method + ": endpoint dimension mismatch");
  if (!(T > 0.0)) throw InvalidArgument(method + ": horizon must be positive");
  if (prm.restarts < 1) throw InvalidArgument(method + ": need at least one restart");
  if (!x.allFinite() || !y.allFinite()) throw InvalidArgument(method + ": endpoints must be finite");
  cost.validate(sys.dim(), sys.inputs());

  const Transcription tp(sys, cost, x, y, T, prm.N);
  const Vec U0 = tp.straight_line_controls();
  const double noise = prm.noise_scale * (y - x).norm() / T;

  std::vector<RestartOutcome> runs;
  for (int r = 0; r < prm.restarts; ++r) {
    Vec U = U0;
    if (r > 0) {
      std::mt19937_64 rng(mix_seed(prm.seed, static_cast<std::uint64_t>(r)));
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (Eigen::Index i = 0; i < U.size(); ++i) U(i) += noise * gauss(rng);
    }
    runs.push_back(run_restart(tp, std::move(U), prm));
  }

  // selector: converged runs first, then lowest value; ties within 1e-9 go to the
  // smaller control norm, then the lower restart index
  int best = 0;
  auto better = [&](const RestartOutcome& a, const RestartOutcome& b) {
    if (a.converged != b.converged) return a.converged;
    if (a.value < b.value - 1e-9) return true;
    if (a.value > b.value + 1e-9) return false;
    return a.control_norm < b.control_norm - 1e-12;
  };
  for (int r = 1; r < prm.restarts; ++r)
    if (better(runs[r], runs[best])) best = r;

  CostResult res;
  res.method = method;
  double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
  for (const auto& o : runs) {
    res.restart_values.push_back(o.value);
    if (o.converged) {
      vmin = std::min(vmin, o.value);
      vmax = std::max(vmax, o.value);
    }
  }
  res.multistart_spread = vmax >= vmin ? vmax - vmin : 0.0;
  RestartOutcome& o = runs[best];
  res.value = o.value;
  res.trajectory = std::move(o.trajectory);
  res.endpoint_error = o.endpoint_error;
  res.gradient_norm = o.gradient_norm;
  res.costate = o.costate;
  res.restart = best;
  res.converged = o.converged;
  if (!res.converged)
    throw NonConvergence(method + ": no restart met the endpoint and gradient tolerances", std::move(res));
  return res;
}

}  // namespace detail

inline CostResult driftless_point_cost(const ControlAffineSystem& sys, const RunningCost& cost,
                                       const Vec& x, const Vec& y, double T,
                                       const TranscriptionParams& prm = {}) {
  if (!sys.is_driftless()) throw UnsupportedSystem("driftless_point_cost: system has a drift");
  if (cost.kind != CostKind::kinetic) throw InvalidCost("driftless_point_cost: cost must be kinetic");
  if (prm.N < 8) throw InvalidArgument("driftless_point_cost: need N >= 8");
  return detail::transcribe(sys, cost, x, y, T, prm, "driftless_transcription");
}

inline CostResult generic_point_cost(const ControlAffineSystem& sys, const RunningCost& cost,
                                     const Vec& x, const Vec& y, double T,
                                     const TranscriptionParams& prm = {}) {
  if (prm.N < 1) throw InvalidArgument("generic_point_cost: need N >= 1");
  if (cost.kind == CostKind::generic && !cost.convex_in_u)
    throw InvalidCost("generic_point_cost: cost must be convex in u");
  return detail::transcribe(sys, cost, x, y, T, prm, "generic_transcription");
}

// ---------------------------------------------------------------------------
// Dispatch and cost matrices

enum class CostMethod { automatic, closed_form, transcription };

/// Point-cost oracle for a fixed (system, cost, T): closed form for LTI systems
/// with quadratic costs, transcription otherwise.
class PointCostSolver {
 public:
  PointCostSolver(const ControlAffineSystem& sys, RunningCost cost, double T,
                  TranscriptionParams params = {}, CostMethod method = CostMethod::automatic)
      : sys_(sys), cost_(std::move(cost)), T_(T), params_(std::move(params)) {
    cost_.validate(sys_.dim(), sys_.inputs());
    if (!(T_ > 0.0)) throw InvalidArgument("point cost: horizon must be positive");
    const bool lq_ok = sys_.is_lti() && cost_.is_quadratic_form();
    if (method == CostMethod::closed_form && !lq_ok)
      throw UnsupportedSystem("point cost: closed form needs an LTI system and a quadratic cost");
    if (lq_ok && method != CostMethod::transcription)
      lq_.emplace(sys_.A(), sys_.B(), cost_.state_weight(sys_.dim()), cost_.control_weight(sys_.inputs()), T_);
  }

  bool closed_form() const { return lq_.has_value(); }
  const ControlAffineSystem& system() const { return sys_; }
  const RunningCost& cost() const { return cost_; }
  double horizon() const { return T_; }
  const TranscriptionParams& params() const { return params_; }

  double value(const Vec& x, const Vec& y, std::uint64_t seed = 0) const {
    if (lq_) return lq_->value(x, y);
    return solve(x, y, seed).value;
  }

  /// Throws NonConvergence from transcription when no restart converges.
  CostResult solve(const Vec& x, const Vec& y, std::uint64_t seed = 0) const {
    if (lq_) return lq_->solve(x, y, std::max(params_.N, 256));
    TranscriptionParams p = params_;
    p.seed = seed;
    if (sys_.is_driftless() && cost_.kind == CostKind::kinetic) return driftless_point_cost(sys_, cost_, x, y, T_, p);
    return generic_point_cost(sys_, cost_, x, y, T_, p);
  }

 private:
  const ControlAffineSystem& sys_;
  RunningCost cost_;
  double T_;
  TranscriptionParams params_;
  std::optional<LqProblem> lq_;
};

struct CostMatrix {
  Mat values;
  std::vector<std::pair<int, int>> defects;  // non-convergent entries (value = best candidate)
  std::vector<CostResult> results;           // row-major, filled when trajectories are kept

  const CostResult& result(int i, int j) const { return results.at(static_cast<std::size_t>(i) * values.cols() + j); }
};

struct CostMatrixOptions {
  bool keep_trajectories = false;
  unsigned threads = 0;
  std::uint64_t seed = 0;
};

inline CostMatrix cost_matrix(const PointCostSolver& solver, const std::vector<Vec>& X,
                              const std::vector<Vec>& Y, const CostMatrixOptions& opt = {}) {
  for (const auto& v : X)
    if (!v.allFinite()) throw InvalidArgument("cost_matrix: non-finite source point");
  for (const auto& v : Y)
    if (!v.allFinite()) throw InvalidArgument("cost_matrix: non-finite target point");
  const int m = static_cast<int>(X.size()), n = static_cast<int>(Y.size());
  CostMatrix out;
  out.values.resize(m, n);
  std::vector<char> bad(static_cast<std::size_t>(m) * n, 0);
  if (opt.keep_trajectories) out.results.resize(static_cast<std::size_t>(m) * n);
  const bool cheap = solver.closed_form() && !opt.keep_trajectories;
  parallel_for(static_cast<std::size_t>(m) * n, cheap ? 1u : opt.threads, [&](std::size_t idx) {
    const int i = static_cast<int>(idx / n), j = static_cast<int>(idx % n);
    if (cheap) {
      out.values(i, j) = solver.value(X[i], Y[j]);
      return;
    }
    CostResult r;
    try {
      r = solver.solve(X[i], Y[j], mix_seed(opt.seed, i, j));
    } catch (const NonConvergence& e) {
      r = e.best();
      bad[idx] = 1;
    }
    out.values(i, j) = r.value;
    if (opt.keep_trajectories) out.results[idx] = std::move(r);
  });
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      if (bad[static_cast<std::size_t>(i) * n + j]) out.defects.emplace_back(i, j);
  return out;
}

inline CostMatrix cost_matrix(const ControlAffineSystem& sys, const RunningCost& cost,
                              const std::vector<Vec>& X, const std::vector<Vec>& Y, double T,
                              const TranscriptionParams& params = {}, const CostMatrixOptions& opt = {}) {
  return cost_matrix(PointCostSolver(sys, cost, T, params), X, Y, opt);
}

// ---------------------------------------------------------------------------
// Endpoint-map diagnostics

/// Smallest singular value of the Gramian of the linearization along `traj`
/// (A(t) = df/dx, B(t) = [f_1 .. f_n]); near zero flags a singular curve.
inline double endpoint_map_singularity(const ControlAffineSystem& sys, const Trajectory& traj) {
  if (!traj.well_formed()) throw InvalidArgument("endpoint_map_singularity: malformed trajectory");
  for (const auto& x : traj.states)
    if (x.size() != sys.dim()) throw InvalidArgument("endpoint_map_singularity: state dimension mismatch");
  for (const auto& u : traj.controls)
    if (u.size() != sys.inputs()) throw InvalidArgument("endpoint_map_singularity: control dimension mismatch");
  double scale = 1.0;
  for (const auto& x : traj.states) scale = std::max(scale, x.norm());
  if (resimulation_error(sys, traj) > 1e-4 * scale)
    throw InvalidArgument("endpoint_map_singularity: trajectory does not satisfy the dynamics");

  const int d = sys.dim();
  Mat W = Mat::Zero(d, d);
  auto rhs = [&](const Mat& Wc, const Vec& x, const Vec& u) {
    const Mat A = sys.state_jacobian(x, u);
    const Mat B = sys.control_matrix(x);
    return Mat(A * Wc + Wc * A.transpose() + B * B.transpose());
  };
  for (int k = 0; k < traj.steps(); ++k) {
    const double h = traj.times[k + 1] - traj.times[k];
    const Vec& u = traj.controls[k];
    const Vec& x = traj.states[k];
    const Vec k1 = sys.velocity(x, u);
    const Vec x2 = x + 0.5 * h * k1;
    const Vec k2 = sys.velocity(x2, u);
    const Vec x3 = x + 0.5 * h * k2;
    const Vec k3 = sys.velocity(x3, u);
    const Vec x4 = x + h * k3;
    const Mat W1 = rhs(W, x, u);
    const Mat W2 = rhs(W + 0.5 * h * W1, x2, u);
    const Mat W3 = rhs(W + 0.5 * h * W2, x3, u);
    const Mat W4 = rhs(W + h * W3, x4, u);
    W += (h / 6.0) * (W1 + 2.0 * W2 + 2.0 * W3 + W4);
  }
  return smallest_singular_value(symmetrize(W));
}

// ---------------------------------------------------------------------------
// Pontryagin system

/// Integrates x' = f(x, u), p' = -(df/dx)'p - dL/dx with u = -W^{-1}G(x)'p / 2,
/// the minimizer of H = p'f + L for L = x'Qx + u'Wu. Controls are recorded as
/// the RK4-weighted stage averages, the cost by augmenting the state with J' = L.
inline Trajectory pontryagin_reconstruct(const ControlAffineSystem& sys, const RunningCost& cost,
                                         const Vec& x, const Vec& p0, double T, int steps) {
  if (!cost.is_quadratic_form())
    throw InvalidCost("pontryagin_reconstruct: needs a kinetic or quadratic cost");
  if (x.size() != sys.dim() || p0.size() != sys.dim())
    throw InvalidArgument("pontryagin_reconstruct: dimension mismatch");
  if (steps < 1 || !(T > 0.0)) throw InvalidArgument("pontryagin_reconstruct: bad time grid");
  const int d = sys.dim();
  const Mat W = cost.control_weight(sys.inputs());
  const Mat Q = cost.state_weight(d);
  const Eigen::LLT<Mat> Wllt(W);

  auto control = [&](const Vec& xs, const Vec& ps) {
    return Vec(-0.5 * Wllt.solve(sys.control_matrix(xs).transpose() * ps));
  };
  struct Deriv {
    Vec dz;
    Vec u;
  };
  auto deriv = [&](const Vec& z) {
    const Vec xs = z.head(d), ps = z.segment(d, d);
    Deriv out;
    out.u = control(xs, ps);
    out.dz.resize(2 * d + 1);
    out.dz.head(d) = sys.velocity(xs, out.u);
    out.dz.segment(d, d) = -sys.state_jacobian(xs, out.u).transpose() * ps - 2.0 * Q * xs;
    out.dz(2 * d) = xs.dot(Q * xs) + out.u.dot(W * out.u);
    return out;
  };

  Trajectory tr;
  tr.times = uniform_times(T, steps);
  Vec z(2 * d + 1);
  z << x, p0, 0.0;
  tr.states.push_back(x);
  const double h = T / steps;
  for (int k = 0; k < steps; ++k) {
    const Deriv a = deriv(z);
    const Deriv b = deriv(z + 0.5 * h * a.dz);
    const Deriv c = deriv(z + 0.5 * h * b.dz);
    const Deriv e = deriv(z + h * c.dz);
    z += (h / 6.0) * (a.dz + 2.0 * b.dz + 2.0 * c.dz + e.dz);
    if (!z.allFinite()) throw DivergenceError(k, "non-finite state or costate in the Pontryagin system");
    tr.controls.push_back((a.u + 2.0 * b.u + 2.0 * c.u + e.u) / 6.0);
    tr.states.push_back(z.head(d));
  }
  tr.cost = z(2 * d);
  return tr;
}

struct ShootingResult {
  Vec p0;
  Trajectory trajectory;
  double endpoint_error = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Damped Newton on p0 with a finite-difference endpoint Jacobian.
inline ShootingResult shooting(const ControlAffineSystem& sys, const RunningCost& cost, const Vec& x,
                               const Vec& y, double T, Vec p0, int steps = 400, double tol = 1e-10,
                               int max_iters = 60) {
  const int d = sys.dim();
  auto residual = [&](const Vec& p) {
    try {
      return Vec(pontryagin_reconstruct(sys, cost, x, p, T, steps).end() - y);
    } catch (const DivergenceError&) {
      return Vec(Vec::Constant(d, std::numeric_limits<double>::infinity()));
    }
  };
  ShootingResult out;
  Vec r = residual(p0);
  int it = 0;
  for (; it < max_iters && r.norm() > tol; ++it) {
    Mat Jm(d, d);
    for (int j = 0; j < d; ++j) {
      const double h = 1e-7 * (1.0 + std::abs(p0(j)));
      Vec pp = p0, pm = p0;
      pp(j) += h;
      pm(j) -= h;
      Jm.col(j) = (residual(pp) - residual(pm)) / (2.0 * h);
    }
    const Vec step = Jm.completeOrthogonalDecomposition().solve(r);
    double alpha = 1.0;
    bool moved = false;
    for (int k = 0; k < 30; ++k) {
      const Vec cand = p0 - alpha * step;
      const Vec rc = residual(cand);
      if (rc.allFinite() && rc.norm() < r.norm()) {
        p0 = cand;
        r = rc;
        moved = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!moved) break;
  }
  out.p0 = p0;
  out.trajectory = pontryagin_reconstruct(sys, cost, x, p0, T, steps);
  out.endpoint_error = (out.trajectory.end() - y).norm();
  out.iterations = it;
  out.converged = out.endpoint_error <= std::max(tol, 1e-8 * (1.0 + y.norm()));
  return out;
}

}  // namespace ctrlot
