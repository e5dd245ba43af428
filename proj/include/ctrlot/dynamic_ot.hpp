#pragma once

// Convexified dynamic transport in density-momentum variables:
//   min sum dt vol [ K(m, rho) + s rho ]  s.t.  d_t rho + div(f0 rho) + sum_i div(f_i m_i) = 0,
// with one momentum channel per control field, solved by Douglas-Rachford splitting.

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#ifdef CTRLOT_HAS_CHOLMOD
#include <Eigen/CholmodSupport>
#endif

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ctrlot/errors.hpp"
#include "ctrlot/grid.hpp"
#include "ctrlot/linalg.hpp"
#include "ctrlot/parallel.hpp"
#include "ctrlot/point_cost.hpp"
#include "ctrlot/systems.hpp"

namespace ctrlot {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// K(a, b) = b psi(a / b) for b > 0, 0 at (0, 0), +infinity otherwise.
inline double perspective_K(const Vec& a, double b, const std::function<double(const Vec&)>& psi) {
  if (b > 0.0) return b * psi(a / b);
  if (b == 0.0 && a.isZero(0.0)) return 0.0;
  return kInfinity;
}

/// psi(v) = sum_i c_i v_i^2 / 2.
struct QuadraticPenalty {
  Vec c;

  static QuadraticPenalty unit(int n) { return {Vec::Ones(n)}; }
  /// Penalty whose perspective gives the running cost sum_i w_i u_i^2.
  static QuadraticPenalty from_cost(const RunningCost& cost, int n) {
    if (cost.kind == CostKind::kinetic) return {2.0 * cost.weights};
    if (cost.kind == CostKind::quadratic) {
      if (!cost.R.isDiagonal(1e-14))
        throw InvalidCost("dynamic transport: control weight R must be diagonal");
      return {2.0 * cost.R.diagonal()};
    }
    (void)n;
    throw InvalidCost("dynamic transport: running cost must be kinetic or quadratic");
  }

  int channels() const { return static_cast<int>(c.size()); }
  double operator()(const Vec& v) const { return 0.5 * (c.array() * v.array().square()).sum(); }
  double K(const Vec& a, double b) const {
    if (b > 0.0) return 0.5 * (c.array() * a.array().square()).sum() / b;
    if (b == 0.0 && a.isZero(0.0)) return 0.0;
    return kInfinity;
  }
};

namespace detail {

/// In-place prox of tau K for psi = sum c_i v_i^2 / 2. The minimizer has
/// a_i = b a_i^in / (b + tau c_i) where b >= 0 is the root of
///   P(b) = (b - b_in)/tau - sum_i c_i (a_i^in)^2 / (2 (b + tau c_i)^2),
/// found by Newton from b = 0 (P is increasing and concave there).
inline void prox_K_inplace(double* a, double& b, int n, double tau, const double* c) {
  double anorm = 0.0;
  for (int i = 0; i < n; ++i) anorm += a[i] * a[i];
  if (anorm == 0.0) {
    b = std::max(b, 0.0);
    return;
  }
  const double b_in = b;
  double P0 = -b_in / tau;
  for (int i = 0; i < n; ++i) P0 -= a[i] * a[i] / (2.0 * tau * tau * c[i]);
  if (P0 >= 0.0) {
    for (int i = 0; i < n; ++i) a[i] = 0.0;
    b = 0.0;
    return;
  }
  double x = 0.0;
  for (int it = 0; it < 200; ++it) {
    double P = (x - b_in) / tau, dP = 1.0 / tau;
    for (int i = 0; i < n; ++i) {
      const double s = x + tau * c[i];
      const double q = c[i] * a[i] * a[i];
      P -= q / (2.0 * s * s);
      dP += q / (s * s * s);
    }
    const double step = P / dP;
    x -= step;
    if (x < 0.0) x = 0.0;
    if (std::abs(step) <= 1e-15 * (1.0 + x)) break;
  }
  b = x;
  for (int i = 0; i < n; ++i) a[i] = x * a[i] / (x + tau * c[i]);
}

}  // namespace detail

/// Minimizer of K(a, b) + (|a - a_in|^2 + (b - b_in)^2) / (2 tau).
inline std::pair<Vec, double> prox_K(const Vec& a_in, double b_in, double tau,
                                     const QuadraticPenalty& psi) {
  if (!(tau > 0.0)) throw InvalidArgument("prox_K: step must be positive");
  if (psi.channels() != a_in.size()) throw InvalidArgument("prox_K: penalty and momentum differ in size");
  Vec a = a_in;
  double b = b_in;
  detail::prox_K_inplace(a.data(), b, static_cast<int>(a.size()), tau, psi.c.data());
  return {a, b};
}

inline std::pair<Vec, double> prox_K(const Vec& a_in, double b_in, double tau) {
  return prox_K(a_in, b_in, tau, QuadraticPenalty::unit(static_cast<int>(a_in.size())));
}

// ---------------------------------------------------------------------------
// Paths and the discrete continuity operator

/// rho[k] holds cell masses at level k = 0..nt; m[i][k] the momentum mass of
/// channel i at half level k + 1/2.
struct DensityMomentumPath {
  std::vector<Vec> rho;
  std::vector<std::vector<Vec>> m;

  int levels() const { return static_cast<int>(rho.size()); }
  int channels() const { return static_cast<int>(m.size()); }

  static DensityMomentumPath zeros(const SpaceTimeGrid& g, int channels) {
    DensityMomentumPath p;
    p.rho.assign(g.nt() + 1, Vec::Zero(g.cells()));
    p.m.assign(channels, std::vector<Vec>(g.nt(), Vec::Zero(g.cells())));
    return p;
  }

  /// Largest deviation of a slice mass from one.
  double mass_error() const {
    double e = 0.0;
    for (const auto& r : rho) e = std::max(e, std::abs(r.sum() - 1.0));
    return e;
  }
  double min_density() const {
    double v = kInfinity;
    for (const auto& r : rho) v = std::min(v, r.minCoeff());
    return v;
  }
};

/// Fields sampled at cell centres and the face-averaged central divergence.
class ContinuityOperator {
 public:
  ContinuityOperator(const ControlAffineSystem& sys, const SpaceTimeGrid& grid) : grid_(grid) {
    if (sys.dim() != grid.dim())
      throw InvalidArgument("continuity: system dimension " + std::to_string(sys.dim()) +
                            " differs from grid dimension " + std::to_string(grid.dim()));
    const int Nc = grid.cells(), d = grid.dim();
    has_drift_ = !sys.is_driftless();
    if (has_drift_) drift_.resize(d, Nc);
    fields_.assign(sys.inputs(), Mat(d, Nc));
    for (int c = 0; c < Nc; ++c) {
      const Vec x = grid.center(c);
      if (has_drift_) drift_.col(c) = sys.drift()(x);
      for (int i = 0; i < sys.inputs(); ++i) fields_[i].col(c) = sys.controls()[i](x);
    }
  }

  const SpaceTimeGrid& grid() const { return grid_; }
  int channels() const { return static_cast<int>(fields_.size()); }
  bool has_drift() const { return has_drift_; }
  const Mat& field(int i) const { return fields_[i]; }
  const Mat& drift() const { return drift_; }

  /// out += div(F q) with F sampled per cell; zero flux through the box boundary.
  void add_divergence(const Mat& F, const Vec& q, Vec& out) const {
    for (int a = 0; a < grid_.dim(); ++a) {
      const int s = grid_.stride(a), n = grid_.nx(a);
      const double inv_h = 1.0 / grid_.h(a);
      for (int c = 0; c < grid_.cells(); ++c) {
        if (grid_.coord(c, a) == n - 1) continue;
        const int e = c + s;
        const double flux = 0.5 * (F(a, c) * q(c) + F(a, e) * q(e)) * inv_h;
        out(c) += flux;
        out(e) -= flux;
      }
    }
  }

  /// Per-cell residual (nt x cells) in density per unit time.
  Mat residual(const DensityMomentumPath& p) const {
    check(p);
    const double vol = grid_.volume(), dt = grid_.dt();
    Mat R(grid_.nt(), grid_.cells());
    for (int k = 0; k < grid_.nt(); ++k) {
      Vec r = (p.rho[k + 1] - p.rho[k]) / (dt * vol);
      if (has_drift_) add_divergence(drift_, 0.5 * (p.rho[k] + p.rho[k + 1]) / vol, r);
      for (int i = 0; i < channels(); ++i) add_divergence(fields_[i], p.m[i][k] / vol, r);
      R.row(k) = r.transpose();
    }
    return R;
  }

  void check(const DensityMomentumPath& p) const {
    if (p.levels() != grid_.nt() + 1 || p.channels() != channels())
      throw InvalidArgument("continuity: path layout does not match the grid and system");
    for (const auto& r : p.rho)
      if (r.size() != grid_.cells()) throw InvalidArgument("continuity: density slice has the wrong size");
    for (const auto& ch : p.m) {
      if (static_cast<int>(ch.size()) != grid_.nt()) throw InvalidArgument("continuity: momentum levels mismatch");
      for (const auto& v : ch)
        if (v.size() != grid_.cells()) throw InvalidArgument("continuity: momentum slice has the wrong size");
    }
  }

 private:
  const SpaceTimeGrid& grid_;
  bool has_drift_ = false;
  Mat drift_;
  std::vector<Mat> fields_;
};

inline Mat continuity_residual(const DensityMomentumPath& path, const ControlAffineSystem& sys,
                               const SpaceTimeGrid& grid) {
  return ContinuityOperator(sys, grid).residual(path);
}

// ---------------------------------------------------------------------------
// Solver

enum class LinearSolver { cg, cholesky };

struct BBParams {
  double gamma = 0.02;          // prox step, in normalized units
  int max_iters = 4000;
  int min_iters = 50;
  double residual_tol = 1e-5;   // sup-norm continuity residual of the reported iterate
  double value_tol = 1e-6;      // relative value change between checks
  int check_every = 10;
  double cg_tol = 1e-10;
  int cg_max_iters = 5000;
  LinearSolver linear_solver = LinearSolver::cholesky;
  unsigned threads = 1;
  std::function<double(const Vec&)> state_cost;  // s(x); empty means zero
};

struct BBSolution {
  DensityMomentumPath path;
  double value = 0.0;
  double residual = 0.0;        // sup-norm
  double mass_error = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> history;  // value of the reported iterate per iteration
  int cg_iterations = 0;
};

namespace detail {

class BBProblem {
 public:
  BBProblem(const ControlAffineSystem& sys, const SpaceTimeGrid& grid, const QuadraticPenalty& psi,
            const Vec& mu0, const Vec& muT, const BBParams& prm)
      : op_(sys, grid), grid_(grid), psi_(psi), prm_(prm) {
    Nc_ = grid.cells();
    nt_ = grid.nt();
    n_ = op_.channels();
    vol_ = grid.volume();
    dt_ = grid.dt();
    rho0_ = mu0 / vol_;
    rhoT_ = muT / vol_;
    Nrho_ = (nt_ - 1) * Nc_;
    Nm_ = n_ * nt_ * Nc_;
    Nr_ = nt_ * Nc_;
    s_ = Vec::Zero(Nc_);
    if (prm.state_cost)
      for (int c = 0; c < Nc_; ++c) s_(c) = prm.state_cost(grid.center(c));
    assemble();
  }

  int size() const { return Nrho_ + Nm_ + Nr_; }
  int rho_index(int k, int c) const { return (k - 1) * Nc_ + c; }  // k = 1..nt-1
  int m_index(int i, int k, int c) const { return Nrho_ + (i * nt_ + k) * Nc_ + c; }
  int r_index(int k, int c) const { return Nrho_ + Nm_ + k * Nc_ + c; }

  /// Euclidean projection onto {B v = rhs}.
  void project(const Vec& v, Vec& out) {
    const Vec res = B_ * v - rhs_;
    if (prm_.linear_solver == LinearSolver::cholesky) {
      lambda_ = ldlt_.solve(res);
    } else {
      lambda_ = cg_.solveWithGuess(res, lambda_);
      cg_iterations_ += static_cast<int>(cg_.iterations());
    }
    out = v - Bt_ * lambda_;
  }

  /// Prox of gamma (K + s r) on every (m, r) pair; densities pass through.
  void prox(Vec& v) const {
    const double tau = prm_.gamma;
    parallel_for(static_cast<std::size_t>(nt_), prm_.threads, [&](std::size_t kk) {
      const int k = static_cast<int>(kk);
      std::vector<double> a(n_);
      for (int c = 0; c < Nc_; ++c) {
        for (int i = 0; i < n_; ++i) a[i] = v(m_index(i, k, c));
        double b = v(r_index(k, c)) - tau * s_(c);
        prox_K_inplace(a.data(), b, n_, tau, psi_.c.data());
        for (int i = 0; i < n_; ++i) v(m_index(i, k, c)) = a[i];
        v(r_index(k, c)) = b;
      }
    });
  }

  double value(const Vec& v) const {
    double J = 0.0;
    Vec a(n_);
    for (int k = 0; k < nt_; ++k)
      for (int c = 0; c < Nc_; ++c) {
        for (int i = 0; i < n_; ++i) a(i) = v(m_index(i, k, c));
        const double b = v(r_index(k, c));
        J += psi_.K(a, b) + s_(c) * b;
      }
    return J * dt_ * vol_;
  }

  Vec initial_guess() const {
    Vec v = Vec::Zero(size());
    for (int k = 1; k < nt_; ++k) {
      const double t = static_cast<double>(k) / nt_;
      v.segment(rho_index(k, 0), Nc_) = (1.0 - t) * rho0_ + t * rhoT_;
    }
    for (int k = 0; k < nt_; ++k) {
      const double t = (k + 0.5) / nt_;
      v.segment(r_index(k, 0), Nc_) = (1.0 - t) * rho0_ + t * rhoT_;
    }
    return v;
  }

  DensityMomentumPath path(const Vec& v) const {
    DensityMomentumPath p = DensityMomentumPath::zeros(grid_, n_);
    p.rho[0] = rho0_ * vol_;
    p.rho[nt_] = rhoT_ * vol_;
    for (int k = 1; k < nt_; ++k) p.rho[k] = v.segment(rho_index(k, 0), Nc_) * vol_;
    for (int i = 0; i < n_; ++i)
      for (int k = 0; k < nt_; ++k) p.m[i][k] = v.segment(m_index(i, k, 0), Nc_) * vol_;
    return p;
  }

  const ContinuityOperator& op() const { return op_; }
  int cg_iterations() const { return cg_iterations_; }

 private:
  void assemble() {
    using Triplet = Eigen::Triplet<double>;
    std::vector<Triplet> T;
    const int rows_cont = nt_ * Nc_;
    const int rows = 2 * rows_cont - 1;  // the last continuity row is implied by mass balance
    rhs_ = Vec::Zero(rows);
    auto cont_row = [&](int k, int c) { return k * Nc_ + c; };
    auto add = [&](int row, int col, double val) {
      if (row < rows_cont - 1 || row >= rows_cont) T.emplace_back(row >= rows_cont ? row - 1 : row, col, val);
    };
    auto add_rhs = [&](int row, double val) {
      if (row < rows_cont - 1) rhs_(row) += val;
      else if (row >= rows_cont) rhs_(row - 1) += val;
    };
    // continuity rows scaled by dt: rho_{k+1} - rho_k + dt div(...) = 0
    for (int k = 0; k < nt_; ++k) {
      for (int c = 0; c < Nc_; ++c) {
        const int row = cont_row(k, c);
        if (k + 1 < nt_) add(row, rho_index(k + 1, c), 1.0);
        else add_rhs(row, -rhoT_(c));
        if (k > 0) add(row, rho_index(k, c), -1.0);
        else add_rhs(row, rho0_(c));
      }
      auto add_div = [&](const Mat& F, auto col_of) {
        for (int a = 0; a < grid_.dim(); ++a) {
          const int s = grid_.stride(a), n = grid_.nx(a);
          const double w = 0.5 * dt_ / grid_.h(a);
          for (int c = 0; c < Nc_; ++c) {
            if (grid_.coord(c, a) == n - 1) continue;
            const int e = c + s;
            add(cont_row(k, c), col_of(c), w * F(a, c));
            add(cont_row(k, e), col_of(c), -w * F(a, c));
            add(cont_row(k, c), col_of(e), w * F(a, e));
            add(cont_row(k, e), col_of(e), -w * F(a, e));
          }
        }
      };
      for (int i = 0; i < n_; ++i) add_div(op_.field(i), [&](int c) { return m_index(i, k, c); });
      if (op_.has_drift()) add_div(op_.drift(), [&](int c) { return r_index(k, c); });
    }
    // interpolation rows: r_k - (rho_k + rho_{k+1}) / 2 = 0
    for (int k = 0; k < nt_; ++k)
      for (int c = 0; c < Nc_; ++c) {
        const int row = rows_cont + k * Nc_ + c;
        add(row, r_index(k, c), 1.0);
        if (k > 0) add(row, rho_index(k, c), -0.5);
        else add_rhs(row, 0.5 * rho0_(c));
        if (k + 1 < nt_) add(row, rho_index(k + 1, c), -0.5);
        else add_rhs(row, 0.5 * rhoT_(c));
      }
    B_.resize(rows, size());
    B_.setFromTriplets(T.begin(), T.end());
    B_.makeCompressed();
    Bt_ = B_.transpose();
    S_ = B_ * Bt_;
    S_.makeCompressed();
    lambda_ = Vec::Zero(rows);
    if (prm_.linear_solver == LinearSolver::cholesky) {
      ldlt_.compute(S_);
      if (ldlt_.info() != Eigen::Success) throw Error("solve_bb: constraint Gram matrix factorization failed");
    } else {
      cg_.setTolerance(prm_.cg_tol);
      cg_.setMaxIterations(prm_.cg_max_iters);
      cg_.compute(S_);
    }
  }

  ContinuityOperator op_;
  const SpaceTimeGrid& grid_;
  QuadraticPenalty psi_;
  BBParams prm_;
  int Nc_ = 0, nt_ = 0, n_ = 0, Nrho_ = 0, Nm_ = 0, Nr_ = 0;
  double vol_ = 0.0, dt_ = 0.0;
  Vec rho0_, rhoT_, s_, rhs_, lambda_;
  Eigen::SparseMatrix<double> B_, Bt_, S_;
  Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                           Eigen::DiagonalPreconditioner<double>>
      cg_;
#ifdef CTRLOT_HAS_CHOLMOD
  Eigen::CholmodSupernodalLLT<Eigen::SparseMatrix<double>> ldlt_;
#else
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt_;
#endif
  int cg_iterations_ = 0;
};

inline void check_marginal(const Vec& mu, int cells, const char* name) {
  if (mu.size() != cells) throw InvalidArgument(std::string("solve_bb: ") + name + " has the wrong number of cells");
  if (!mu.allFinite() || (mu.array() < 0.0).any())
    throw InvalidMeasure(std::string("solve_bb: ") + name + " must be finite and nonnegative");
  if (std::abs(mu.sum() - 1.0) > 1e-6)
    throw InvalidMeasure(std::string("solve_bb: ") + name + " mass is " + std::to_string(mu.sum()));
}

}  // namespace detail

/// mu0, muT are cell masses on `grid`. The reported path is the prox iterate,
/// which has nonnegative densities at half levels and finite cost.
inline BBSolution solve_bb(const ControlAffineSystem& sys, const QuadraticPenalty& psi,
                           const SpaceTimeGrid& grid, const Vec& mu0, const Vec& muT,
                           const BBParams& prm = {}) {
  detail::check_marginal(mu0, grid.cells(), "mu0");
  detail::check_marginal(muT, grid.cells(), "muT");
  if (psi.channels() != sys.inputs()) throw InvalidArgument("solve_bb: one penalty weight per control channel");
  if (!(prm.gamma > 0.0)) throw InvalidArgument("solve_bb: gamma must be positive");
  const Vec a = mu0 / mu0.sum(), b = muT / muT.sum();
  detail::BBProblem P(sys, grid, psi, a, b, prm);

  Vec z = P.initial_guess(), x(P.size()), y(P.size());
  P.project(z, x);
  z = x;
  BBSolution sol;
  double last_value = kInfinity;
  int it = 0;
  for (; it < prm.max_iters; ++it) {
    P.project(z, x);
    y = 2.0 * x - z;
    P.prox(y);
    z += y - x;
    sol.history.push_back(P.value(y));
    if ((it + 1) % prm.check_every == 0 && it + 1 >= prm.min_iters) {
      const double v = sol.history.back();
      const double res = P.op().residual(P.path(y)).cwiseAbs().maxCoeff();
      const bool flat = std::abs(v - last_value) <= prm.value_tol * std::max(1.0, std::abs(v));
      last_value = v;
      if (res <= prm.residual_tol && flat) {
        ++it;
        break;
      }
    }
  }
  sol.iterations = it;
  sol.path = P.path(y);
  sol.value = P.value(y);
  sol.residual = P.op().residual(sol.path).cwiseAbs().maxCoeff();
  sol.mass_error = sol.path.mass_error();
  sol.converged = sol.residual <= prm.residual_tol && it < prm.max_iters;
  sol.cg_iterations = P.cg_iterations();
  return sol;
}

inline BBSolution solve_bb(const ControlAffineSystem& sys, const RunningCost& cost, const SpaceTimeGrid& grid,
                           const Vec& mu0, const Vec& muT, BBParams prm = {}) {
  cost.validate(sys.dim(), sys.inputs());
  if (cost.kind == CostKind::quadratic && !cost.Q.isZero(0.0) && !prm.state_cost) {
    const Mat Q = cost.Q;
    prm.state_cost = [Q](const Vec& x) { return x.dot(Q * x); };
  }
  return solve_bb(sys, QuadraticPenalty::from_cost(cost, sys.inputs()), grid, mu0, muT, prm);
}

/// u_i = m_i / rho at half levels where the density (mass / volume) reaches the floor.
struct GridFeedback {
  std::vector<std::vector<Vec>> u;  // [channel][half level] per cell
  double below_floor_mass = 0.0;    // time-averaged fraction of mass under the floor
  double floor = 0.0;
};

inline GridFeedback recover_feedback(const DensityMomentumPath& path, const SpaceTimeGrid& grid,
                                     double density_floor) {
  if (!(density_floor > 0.0)) throw InvalidArgument("recover_feedback: floor must be positive");
  GridFeedback fb;
  fb.floor = density_floor;
  const int nt = path.levels() - 1, n = path.channels();
  fb.u.assign(n, std::vector<Vec>(nt, Vec::Zero(grid.cells())));
  const double vol = grid.volume();
  double below = 0.0;
  for (int k = 0; k < nt; ++k) {
    const Vec rho = 0.5 * (path.rho[k] + path.rho[k + 1]);
    for (int c = 0; c < grid.cells(); ++c) {
      if (rho(c) / vol >= density_floor) {
        for (int i = 0; i < n; ++i) fb.u[i][k](c) = path.m[i][k](c) / rho(c);
      } else {
        below += std::max(0.0, rho(c));
      }
    }
  }
  fb.below_floor_mass = nt ? below / nt : 0.0;
  return fb;
}

/// Objective of a path in mass units, the same functional solve_bb minimizes.
inline double path_objective(const DensityMomentumPath& p, const SpaceTimeGrid& grid, const QuadraticPenalty& psi,
                             const std::function<double(const Vec&)>& state_cost = {}) {
  const double vol = grid.volume(), dt = grid.dt();
  double J = 0.0;
  Vec a(p.channels());
  for (int k = 0; k + 1 < p.levels(); ++k)
    for (int c = 0; c < grid.cells(); ++c) {
      for (int i = 0; i < p.channels(); ++i) a(i) = p.m[i][k](c) / vol;
      const double b = 0.5 * (p.rho[k](c) + p.rho[k + 1](c)) / vol;
      J += psi.K(a, b);
      if (state_cost) J += state_cost(grid.center(c)) * b;
    }
  return J * dt * vol;
}

}  // namespace ctrlot
