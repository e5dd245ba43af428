#pragma once

// Control-affine systems  x' = f0(x) + sum_i u_i f_i(x)  on R^d.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctrlot/errors.hpp"
#include "ctrlot/linalg.hpp"

namespace ctrlot {

/// Central finite-difference Jacobian with step h = 1e-6 (1 + |x|).
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x) {
  const double h = 1e-6 * (1.0 + x.norm());
  const Vec f0 = f(x);
  Mat J(f0.size(), x.size());
  Vec xp = x, xm = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    xp(j) = x(j) + h;
    xm(j) = x(j) - h;
    J.col(j) = (f(xp) - f(xm)) / (2.0 * h);
    xp(j) = x(j);
    xm(j) = x(j);
  }
  return J;
}

struct VectorField {
  using Eval = std::function<Vec(const Vec&)>;
  using Jacobian = std::function<Mat(const Vec&)>;

  int dim = 0;
  Eval eval;
  Jacobian jacobian;  // empty: finite differences are used

  Vec operator()(const Vec& x) const { return eval(x); }
  Mat jac(const Vec& x) const { return jacobian ? jacobian(x) : fd_jacobian(eval, x); }
  bool has_analytic_jacobian() const { return static_cast<bool>(jacobian); }

  static VectorField zero(int d) {
    return {d, [d](const Vec&) { return Vec::Zero(d); },
            [d](const Vec&) { return Mat::Zero(d, d); }};
  }
  static VectorField constant(Vec b) {
    const int d = static_cast<int>(b.size());
    return {d, [b](const Vec&) { return b; }, [d](const Vec&) { return Mat::Zero(d, d); }};
  }
  static VectorField linear(Mat A) {
    const int d = static_cast<int>(A.rows());
    return {d, [A](const Vec& x) { return Vec(A * x); }, [A](const Vec&) { return A; }};
  }
};

/// Largest discrepancy between the stored and the finite-difference Jacobian
/// over `samples`, relative to 1 + |J|.
inline double jacobian_consistency(const VectorField& f, std::span<const Vec> samples) {
  double worst = 0.0;
  for (const Vec& x : samples) {
    const Mat Ja = f.jac(x);
    const Mat Jf = fd_jacobian(f.eval, x);
    worst = std::max(worst, (Ja - Jf).cwiseAbs().maxCoeff() / (1.0 + Ja.cwiseAbs().maxCoeff()));
  }
  return worst;
}

/// Estimate of M with |f(x)| <= M (|x| + 1) on the sample points.
inline double growth_constant(const VectorField& f, std::span<const Vec> samples) {
  double M = 0.0;
  for (const Vec& x : samples) M = std::max(M, f(x).norm() / (x.norm() + 1.0));
  return M;
}

enum class SystemKind { driftless, lti, generic };

inline const char* to_string(SystemKind k) {
  switch (k) {
    case SystemKind::driftless: return "driftless";
    case SystemKind::lti: return "lti";
    case SystemKind::generic: return "generic";
  }
  return "?";
}

class ControlAffineSystem {
 public:
  ControlAffineSystem(VectorField drift, std::vector<VectorField> controls,
                      SystemKind kind = SystemKind::generic, std::string name = "generic")
      : drift_(std::move(drift)), controls_(std::move(controls)), kind_(kind),
        name_(std::move(name)) {
    if (drift_.dim <= 0) throw InvalidArgument("system: state dimension must be positive");
    for (const auto& g : controls_)
      if (g.dim != drift_.dim) throw InvalidArgument("system: vector fields differ in dimension");
    if (kind_ == SystemKind::lti)
      throw InvalidArgument("system: use ControlAffineSystem::lti to build LTI systems");
  }

  static ControlAffineSystem lti(Mat A, Mat B, std::string name = "lti") {
    if (A.rows() != A.cols() || B.rows() != A.rows())
      throw InvalidArgument("lti: A must be d x d and B must be d x n");
    std::vector<VectorField> cols;
    for (Eigen::Index i = 0; i < B.cols(); ++i) cols.push_back(VectorField::constant(B.col(i)));
    ControlAffineSystem sys(VectorField::linear(A), std::move(cols), SystemKind::generic,
                            std::move(name));
    sys.kind_ = SystemKind::lti;
    sys.A_ = std::move(A);
    sys.B_ = std::move(B);
    return sys;
  }

  static ControlAffineSystem driftless(std::vector<VectorField> controls,
                                       std::string name = "driftless") {
    if (controls.empty()) throw InvalidArgument("driftless: need at least one control field");
    const int d = controls.front().dim;
    return ControlAffineSystem(VectorField::zero(d), std::move(controls), SystemKind::driftless,
                               std::move(name));
  }

  int dim() const { return drift_.dim; }
  int inputs() const { return static_cast<int>(controls_.size()); }
  SystemKind kind() const { return kind_; }
  /// True for the driftless tag and for LTI systems with A = 0.
  bool is_driftless() const {
    return kind_ == SystemKind::driftless || (kind_ == SystemKind::lti && A_.isZero(0.0));
  }
  bool is_lti() const { return kind_ == SystemKind::lti; }
  const std::string& name() const { return name_; }
  const VectorField& drift() const { return drift_; }
  const std::vector<VectorField>& controls() const { return controls_; }

  const Mat& A() const {
    if (!is_lti()) throw UnsupportedSystem("A(): system is not LTI");
    return A_;
  }
  const Mat& B() const {
    if (!is_lti()) throw UnsupportedSystem("B(): system is not LTI");
    return B_;
  }

  /// G(x) = [f_1(x) ... f_n(x)].
  Mat control_matrix(const Vec& x) const {
    Mat G(dim(), inputs());
    for (int i = 0; i < inputs(); ++i) G.col(i) = controls_[i](x);
    return G;
  }

  /// Unchecked f(x, u); see eval_dynamics for the validated entry point.
  Vec velocity(const Vec& x, const Vec& u) const {
    Vec v = drift_(x);
    for (int i = 0; i < inputs(); ++i)
      if (u(i) != 0.0) v += u(i) * controls_[i](x);
    return v;
  }

  /// d f(x, u) / dx.
  Mat state_jacobian(const Vec& x, const Vec& u) const {
    Mat J = drift_.jac(x);
    for (int i = 0; i < inputs(); ++i)
      if (u(i) != 0.0) J += u(i) * controls_[i].jac(x);
    return J;
  }

  /// Checks the kind tag against the fields at the given points.
  bool kind_consistent(std::span<const Vec> samples, double tol = 1e-10) const {
    for (const Vec& x : samples) {
      if (kind_ == SystemKind::driftless && drift_(x).norm() > tol) return false;
      if (kind_ == SystemKind::lti) {
        if ((drift_(x) - A_ * x).norm() > tol * (1.0 + x.norm())) return false;
        for (int i = 0; i < inputs(); ++i)
          if ((controls_[i](x) - B_.col(i)).norm() > tol) return false;
      }
    }
    return true;
  }

 private:
  VectorField drift_;
  std::vector<VectorField> controls_;
  SystemKind kind_;
  std::string name_;
  Mat A_, B_;
};

inline Vec eval_dynamics(const ControlAffineSystem& sys, const Vec& x, const Vec& u) {
  if (x.size() != sys.dim())
    throw InvalidArgument("eval_dynamics: state has length " + std::to_string(x.size()) +
                          ", expected " + std::to_string(sys.dim()));
  if (u.size() != sys.inputs())
    throw InvalidArgument("eval_dynamics: control has length " + std::to_string(u.size()) +
                          ", expected " + std::to_string(sys.inputs()));
  return sys.velocity(x, u);
}

// ---------------------------------------------------------------------------
// Lie brackets and rank conditions

/// [f, g](x) = Dg(x) f(x) - Df(x) g(x). The bracket's own Jacobian is left to
/// finite differences.
inline VectorField lie_bracket(const VectorField& f, const VectorField& g) {
  if (f.dim != g.dim) throw InvalidArgument("lie_bracket: fields differ in dimension");
  return {f.dim, [f, g](const Vec& x) { return Vec(g.jac(x) * f(x) - f.jac(x) * g(x)); }, {}};
}

/// Fields of the bracket sets V^0 ∪ ... ∪ V^r with V^0 the control fields and
/// V^k = {[g, h] : g ∈ V^0, h ∈ V^{k-1}}. With `include_drift`, brackets with the
/// drift are also taken at each level (the drift itself is not part of the span).
inline std::vector<VectorField> bracket_fields(const ControlAffineSystem& sys, int r,
                                               bool include_drift = false) {
  std::vector<VectorField> all(sys.controls().begin(), sys.controls().end());
  std::vector<VectorField> level = all;
  for (int k = 1; k <= r; ++k) {
    std::vector<VectorField> next;
    for (const VectorField& h : level) {
      if (include_drift) next.push_back(lie_bracket(sys.drift(), h));
      for (const VectorField& g : sys.controls()) next.push_back(lie_bracket(g, h));
    }
    all.insert(all.end(), next.begin(), next.end());
    level = std::move(next);
  }
  return all;
}

inline Mat stack_fields(const std::vector<VectorField>& fields, const Vec& x) {
  Mat M(x.size(), static_cast<Eigen::Index>(fields.size()));
  for (std::size_t i = 0; i < fields.size(); ++i) M.col(static_cast<Eigen::Index>(i)) = fields[i](x);
  // exact duplicates do not change the rank; the SVD takes care of them
  return M;
}

/// Rank of span{ V^0 ∪ ... ∪ V^r } at x for a driftless system.
inline int bracket_rank(const ControlAffineSystem& sys, int r, const Vec& x) {
  if (!sys.is_driftless()) throw UnsupportedSystem("bracket_rank: system has a drift");
  if (r < 0) throw InvalidArgument("bracket_rank: step count must be nonnegative");
  if (x.size() != sys.dim()) throw InvalidArgument("bracket_rank: state dimension mismatch");
  return numerical_rank(stack_fields(bracket_fields(sys, r), x));
}

/// Same rank with brackets against the drift included; for LTI systems this
/// reproduces the Kalman rank at r = d - 1.
inline int accessibility_rank(const ControlAffineSystem& sys, int r, const Vec& x) {
  if (r < 0) throw InvalidArgument("accessibility_rank: step count must be nonnegative");
  if (x.size() != sys.dim()) throw InvalidArgument("accessibility_rank: state dimension mismatch");
  return numerical_rank(stack_fields(bracket_fields(sys, r, true), x));
}

inline Mat kalman_matrix(const Mat& A, const Mat& B) {
  if (A.rows() != A.cols() || B.rows() != A.rows())
    throw InvalidArgument("kalman_rank: A must be d x d and B must be d x n");
  const Eigen::Index d = A.rows(), n = B.cols();
  Mat K(d, d * n);
  Mat block = B;
  for (Eigen::Index k = 0; k < d; ++k) {
    K.middleCols(k * n, n) = block;
    block = A * block;
  }
  return K;
}

inline int kalman_rank(const Mat& A, const Mat& B) { return numerical_rank(kalman_matrix(A, B)); }

// ---------------------------------------------------------------------------
// Trajectories and integration

/// States on t_0 = 0 < ... < t_N = T with controls piecewise constant on intervals.
struct Trajectory {
  std::vector<double> times;
  std::vector<Vec> states;    // N + 1
  std::vector<Vec> controls;  // N
  double cost = 0.0;

  int steps() const { return static_cast<int>(controls.size()); }
  double horizon() const { return times.empty() ? 0.0 : times.back(); }
  const Vec& start() const { return states.front(); }
  const Vec& end() const { return states.back(); }

  bool well_formed() const {
    if (times.size() < 2 || states.size() != times.size() || controls.size() + 1 != times.size())
      return false;
    for (std::size_t k = 1; k < times.size(); ++k)
      if (!(times[k] > times[k - 1])) return false;
    return true;
  }
};

inline std::vector<double> uniform_times(double T, int N) {
  std::vector<double> t(N + 1);
  for (int k = 0; k <= N; ++k) t[k] = T * k / N;
  t[N] = T;
  return t;
}

inline Vec rk4_step(const ControlAffineSystem& sys, const Vec& x, const Vec& u, double h) {
  const Vec k1 = sys.velocity(x, u);
  const Vec k2 = sys.velocity(x + 0.5 * h * k1, u);
  const Vec k3 = sys.velocity(x + 0.5 * h * k2, u);
  const Vec k4 = sys.velocity(x + h * k3, u);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Fixed-step RK4 under a piecewise-constant control with one value per step.
inline Trajectory flow(const ControlAffineSystem& sys, const Vec& x0,
                       const std::vector<Vec>& controls, double T) {
  const int N = static_cast<int>(controls.size());
  if (N < 1) throw InvalidArgument("flow: need at least one step");
  if (!(T > 0.0)) throw InvalidArgument("flow: horizon must be positive");
  if (x0.size() != sys.dim()) throw InvalidArgument("flow: state dimension mismatch");
  Trajectory tr;
  tr.times = uniform_times(T, N);
  tr.controls = controls;
  tr.states.reserve(N + 1);
  tr.states.push_back(x0);
  for (int k = 0; k < N; ++k) {
    if (controls[k].size() != sys.inputs()) throw InvalidArgument("flow: control dimension mismatch");
    const double h = tr.times[k + 1] - tr.times[k];
    Vec next = rk4_step(sys, tr.states.back(), controls[k], h);
    if (!next.allFinite()) throw DivergenceError(k, "non-finite state in flow");
    tr.states.push_back(std::move(next));
  }
  return tr;
}

inline Trajectory flow(const ControlAffineSystem& sys, const Vec& x0, const Vec& u, double T,
                       int N) {
  if (N < 1) throw InvalidArgument("flow: need at least one step");
  return flow(sys, x0, std::vector<Vec>(N, u), T);
}

/// Max deviation between the stored states and a re-simulation from states[0].
inline double resimulation_error(const ControlAffineSystem& sys, const Trajectory& tr) {
  if (!tr.well_formed()) throw InvalidArgument("trajectory is malformed");
  Vec x = tr.states.front();
  double err = 0.0;
  for (int k = 0; k < tr.steps(); ++k) {
    x = rk4_step(sys, x, tr.controls[k], tr.times[k + 1] - tr.times[k]);
    err = std::max(err, (x - tr.states[k + 1]).norm());
  }
  return err;
}

// ---------------------------------------------------------------------------
// Presets

inline ControlAffineSystem single_integrator(int d) {
  if (d < 1) throw InvalidArgument("single_integrator: dimension must be positive");
  return ControlAffineSystem::lti(Mat::Zero(d, d), Mat::Identity(d, d),
                                  "single_integrator(" + std::to_string(d) + ")");
}

inline ControlAffineSystem double_integrator() {
  Mat A(2, 2);
  A << 0, 1, 0, 0;
  Mat B(2, 1);
  B << 0, 1;
  return ControlAffineSystem::lti(A, B, "double_integrator");
}

/// g1 = (1, 0, -y/2), g2 = (0, 1, x/2).
inline ControlAffineSystem heisenberg() {
  VectorField g1{3,
                 [](const Vec& p) {
                   Vec v(3);
                   v << 1.0, 0.0, -0.5 * p(1);
                   return v;
                 },
                 [](const Vec&) {
                   Mat J = Mat::Zero(3, 3);
                   J(2, 1) = -0.5;
                   return J;
                 }};
  VectorField g2{3,
                 [](const Vec& p) {
                   Vec v(3);
                   v << 0.0, 1.0, 0.5 * p(0);
                   return v;
                 },
                 [](const Vec&) {
                   Mat J = Mat::Zero(3, 3);
                   J(2, 0) = 0.5;
                   return J;
                 }};
  return ControlAffineSystem::driftless({g1, g2}, "heisenberg");
}

/// State (x, y, theta); g1 = (cos theta, sin theta, 0), g2 = (0, 0, 1).
inline ControlAffineSystem unicycle() {
  VectorField g1{3,
                 [](const Vec& p) {
                   Vec v(3);
                   v << std::cos(p(2)), std::sin(p(2)), 0.0;
                   return v;
                 },
                 [](const Vec& p) {
                   Mat J = Mat::Zero(3, 3);
                   J(0, 2) = -std::sin(p(2));
                   J(1, 2) = std::cos(p(2));
                   return J;
                 }};
  Vec e3 = Vec::Zero(3);
  e3(2) = 1.0;
  return ControlAffineSystem::driftless({g1, VectorField::constant(e3)}, "unicycle");
}

}  // namespace ctrlot
