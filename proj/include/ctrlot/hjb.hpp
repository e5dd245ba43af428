#pragma once

// Forward value functions, feedback synthesis and flow diagnostics.
//
// Convention: V(t, y) = inf over trajectories ending at y of f(x(0)) + int 1/2 (u'Ru + x'Qx),
// which solves dV/dt + H(x, dV) = 0 forward from V(0) = f. Optimal trajectories follow
// the characteristics, so the feedback is u = +R^{-1} G(x)' dV.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ctrlot/errors.hpp"
#include "ctrlot/grid.hpp"
#include "ctrlot/interpolation.hpp"
#include "ctrlot/linalg.hpp"
#include "ctrlot/measures.hpp"
#include "ctrlot/parallel.hpp"
#include "ctrlot/static_ot.hpp"
#include "ctrlot/systems.hpp"

namespace ctrlot {

namespace detail {

/// Multilinear interpolation stencil on cell centres, clamped to the box.
struct Stencil {
  int count = 0;
  int cell[8];
  double weight[8];
};

inline Stencil stencil(const SpaceTimeGrid& g, const Vec& x) {
  const int d = g.dim();
  int base[3];
  double frac[3];
  for (int a = 0; a < d; ++a) {
    double s = (x(a) - g.lo()(a)) / g.h(a) - 0.5;
    const int n = g.nx(a);
    int i = static_cast<int>(std::floor(s));
    i = std::min(std::max(i, 0), n - 2);
    base[a] = i;
    frac[a] = std::min(std::max(s - i, 0.0), 1.0);
  }
  Stencil st;
  st.count = 1 << d;
  for (int corner = 0; corner < st.count; ++corner) {
    int c = 0;
    double w = 1.0;
    for (int a = 0; a < d; ++a) {
      const int bit = (corner >> a) & 1;
      c += (base[a] + bit) * g.stride(a);
      w *= bit ? frac[a] : 1.0 - frac[a];
    }
    st.cell[corner] = c;
    st.weight[corner] = w;
  }
  return st;
}

/// Grid neighbour along axis a, or -1 past the boundary.
inline int neighbour(const SpaceTimeGrid& g, int c, int a, int dir) {
  const int i = g.coord(c, a) + dir;
  if (i < 0 || i >= g.nx(a)) return -1;
  return c + dir * g.stride(a);
}

/// Central differences inside, one-sided at the box faces.
inline Vec grid_gradient(const SpaceTimeGrid& g, const Vec& V, int c) {
  Vec p(g.dim());
  for (int a = 0; a < g.dim(); ++a) {
    const int l = neighbour(g, c, a, -1), r = neighbour(g, c, a, +1);
    if (l >= 0 && r >= 0) p(a) = (V(r) - V(l)) / (2.0 * g.h(a));
    else if (r >= 0) p(a) = (V(r) - V(c)) / g.h(a);
    else p(a) = (V(c) - V(l)) / g.h(a);
  }
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Initial potentials

/// Point-cost oracle for the potential extension: c(x, y) in the value-function units.
struct InitialPotential {
  Vec f;                       // one value per grid cell
  std::string method;          // "exact", "subsample" or "fallback"
  int oracle_calls = 0;
  int failures = 0;
};

/// f(x) = max_i (phi_i - c(x_i, x)) over support points, evaluated on cells whose
/// coordinates are multiples of `stride` (and the last cell on each axis), then
/// filled by nearest evaluated cell. Failed oracle calls fall back the same way.
inline InitialPotential kantorovich_potential(const Vec& phi, const std::vector<Vec>& support,
                                              const SpaceTimeGrid& grid, const CostOracle& cost, int stride = 1) {
  if (phi.size() != static_cast<Eigen::Index>(support.size()) || support.empty())
    throw InvalidArgument("kantorovich_potential: one potential value per support point required");
  if (stride < 1) throw InvalidArgument("kantorovich_potential: stride must be positive");
  InitialPotential out;
  const int cells = grid.cells(), d = grid.dim();
  std::vector<char> known(cells, 0);
  out.f = Vec::Constant(cells, std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < cells; ++c) {
    bool coarse = true;
    for (int a = 0; a < d; ++a) {
      const int i = grid.coord(c, a);
      if (i % stride != 0 && i != grid.nx(a) - 1) coarse = false;
    }
    if (!coarse) continue;
    const Vec x = grid.center(c);
    double best = -std::numeric_limits<double>::infinity();
    bool ok = true;
    for (std::size_t i = 0; i < support.size(); ++i) {
      ++out.oracle_calls;
      const std::optional<double> v = cost(support[i], x);
      if (!v || !std::isfinite(*v)) {
        ok = false;
        break;
      }
      best = std::max(best, phi(static_cast<Eigen::Index>(i)) - *v);
    }
    if (!ok) {
      ++out.failures;
      continue;
    }
    out.f(c) = best;
    known[c] = 1;
  }
  std::vector<int> donors;
  for (int c = 0; c < cells; ++c)
    if (known[c]) donors.push_back(c);
  if (donors.empty()) throw InvalidCost("kantorovich_potential: every oracle evaluation failed");
  bool filled = false;
  for (int c = 0; c < cells; ++c) {
    if (known[c]) continue;
    filled = true;
    const Vec x = grid.center(c);
    int best = donors.front();
    double bd = std::numeric_limits<double>::infinity();
    for (int k : donors) {
      const double dist = (grid.center(k) - x).squaredNorm();
      if (dist < bd) {
        bd = dist;
        best = k;
      }
    }
    out.f(c) = out.f(best);
  }
  out.method = out.failures > 0 ? "fallback" : (filled ? "subsample" : "exact");
  return out;
}

/// Extension from the target side of a dual pair: f(x) = max_j (-scale psi_j - c(y_j, x)).
/// For a symmetric cost this is minus the c-transform extension of phi, which is the
/// initial datum whose characteristics carry the source onto the target.
inline InitialPotential kantorovich_potential(const DualPotentials& duals, const std::vector<Vec>& target_support,
                                              const SpaceTimeGrid& grid, const CostOracle& cost, double scale = 1.0,
                                              int stride = 1) {
  return kantorovich_potential(Vec(-scale * duals.psi), target_support, grid, cost, stride);
}

// ---------------------------------------------------------------------------
// Grid HJB for driftless systems

struct ValueGrid {
  SpaceTimeGrid grid;
  Mat V;   // (nt+1) x cells
  Vec f;   // initial potential
  int substeps = 0;
  bool substepped = false;

  double time(int k) const { return grid.time(k); }

  /// Multilinear in space, linear in time.
  double at(double t, const Vec& x) const {
    const double s = std::min(std::max(t / grid.dt(), 0.0), static_cast<double>(grid.nt()));
    const int k = std::min(static_cast<int>(std::floor(s)), grid.nt() - 1);
    const double th = s - k;
    const detail::Stencil st = detail::stencil(grid, x);
    double v0 = 0.0, v1 = 0.0;
    for (int i = 0; i < st.count; ++i) {
      v0 += st.weight[i] * V(k, st.cell[i]);
      v1 += st.weight[i] * V(k + 1, st.cell[i]);
    }
    return (1.0 - th) * v0 + th * v1;
  }

  Vec gradient(int k, int c) const { return detail::grid_gradient(grid, V.row(k).transpose(), c); }
};

/// Lax-Friedrichs march of dV/dt + 1/2 sum_i (g_i . dV)^2 = 0 from V(0) = f, with
/// linear extrapolation at the box faces. Sub-steps keep dt * sum_a alpha_a / h_a <= cfl.
inline ValueGrid solve_hjb_driftless(const ControlAffineSystem& sys, const Vec& f, const SpaceTimeGrid& grid,
                                     double cfl = 0.9, int threads = 1) {
  if (!sys.is_driftless()) throw UnsupportedSystem("solve_hjb_driftless: system has drift");
  const int d = grid.dim(), cells = grid.cells();
  if (d != sys.dim() || d < 1 || d > 3) throw InvalidArgument("solve_hjb_driftless: need a 1-3 dimensional grid matching the system");
  if (f.size() != cells) throw InvalidArgument("solve_hjb_driftless: initial potential size differs from the grid");
  if (!f.allFinite()) throw InvalidArgument("solve_hjb_driftless: initial potential not finite");

  std::vector<Mat> G(cells);
  for (int c = 0; c < cells; ++c) G[c] = sys.control_matrix(grid.center(c));

  ValueGrid out;
  out.grid = grid;
  out.f = f;
  out.V.resize(grid.nt() + 1, cells);
  out.V.row(0) = f.transpose();

  Vec V = f, next(cells), ham(cells);
  Mat flux(d, cells);  // dH/dp at each cell
  Mat lap(d, cells);
  for (int k = 0; k < grid.nt(); ++k) {
    double remaining = grid.dt();
    int taken = 0;
    while (remaining > 1e-15 * grid.dt()) {
      parallel_for(cells, threads, [&](int c) {
        Vec p(d);
        for (int a = 0; a < d; ++a) {
          const int l = detail::neighbour(grid, c, a, -1), r = detail::neighbour(grid, c, a, +1);
          const double vl = l >= 0 ? V(l) : 2.0 * V(c) - V(r);
          const double vr = r >= 0 ? V(r) : 2.0 * V(c) - V(l);
          p(a) = (vr - vl) / (2.0 * grid.h(a));
          lap(a, c) = vr - 2.0 * V(c) + vl;
        }
        const Vec gp = G[c].transpose() * p;
        ham(c) = 0.5 * gp.squaredNorm();
        flux.col(c) = G[c] * gp;
      });
      double speed = 0.0;
      Vec alpha(d);
      for (int a = 0; a < d; ++a) {
        alpha(a) = flux.row(a).cwiseAbs().maxCoeff();
        speed += alpha(a) / grid.h(a);
      }
      const double tau = speed > 0.0 ? std::min(remaining, cfl / speed) : remaining;
      for (int c = 0; c < cells; ++c) {
        double visc = 0.0;
        for (int a = 0; a < d; ++a) visc += alpha(a) * lap(a, c) / (2.0 * grid.h(a));
        next(c) = V(c) - tau * (ham(c) - visc);
      }
      V.swap(next);
      remaining -= tau;
      ++taken;
      if (!V.allFinite()) throw DivergenceError(k, "solve_hjb_driftless: value became non-finite");
    }
    out.substeps += taken;
    if (taken > 1) out.substepped = true;
    out.V.row(k + 1) = V.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// LQ closed form

/// V(t, x) = x'P(t)x + q(t)'x + r(t) for L = 1/2 (u'Ru + x'Qx).
struct LqValue {
  std::vector<double> times;
  std::vector<Mat> P;
  std::vector<Vec> q;
  std::vector<double> r;
  Mat A, B, Rinv;

  int index(double t) const {
    const double s = (t - times.front()) / (times.back() - times.front()) * (times.size() - 1);
    return std::min(std::max(static_cast<int>(std::lround(s)), 0), static_cast<int>(times.size()) - 1);
  }
  /// Linear interpolation between stored levels.
  void coefficients(double t, Mat& Pt, Vec& qt, double& rt) const {
    const double span = times.back() - times.front();
    const double s = std::min(std::max((t - times.front()) / span, 0.0), 1.0) * (times.size() - 1);
    const int k = std::min(static_cast<int>(std::floor(s)), static_cast<int>(times.size()) - 2);
    const double th = s - k;
    Pt = (1.0 - th) * P[k] + th * P[k + 1];
    qt = (1.0 - th) * q[k] + th * q[k + 1];
    rt = (1.0 - th) * r[k] + th * r[k + 1];
  }
  double value(double t, const Vec& x) const {
    Mat Pt;
    Vec qt;
    double rt;
    coefficients(t, Pt, qt, rt);
    return x.dot(Pt * x) + qt.dot(x) + rt;
  }
  Vec gradient(double t, const Vec& x) const {
    Mat Pt;
    Vec qt;
    double rt;
    coefficients(t, Pt, qt, rt);
    return 2.0 * Pt * x + qt;
  }
  Vec feedback(double t, const Vec& x) const { return Rinv * B.transpose() * gradient(t, x); }
};

/// RK4 on the coefficient ODEs
///   P' = -(PA + A'P) - 2 P S P + Q/2,  q' = -A'q - 2 P S q,  r' = -q'Sq/2,  S = B R^{-1} B'.
inline LqValue lq_value(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, double T, const Mat& P0,
                        const Vec& q0, double r0, int steps = 2000) {
  const Eigen::Index d = A.rows();
  if (A.cols() != d || B.rows() != d || Q.rows() != d || Q.cols() != d || R.rows() != B.cols() ||
      P0.rows() != d || P0.cols() != d || q0.size() != d)
    throw InvalidArgument("lq_value: dimension mismatch");
  if (!is_symmetric(P0, 1e-10)) throw InvalidArgument("lq_value: P0 must be symmetric");
  if (!is_pd(symmetrize(R))) throw InvalidCost("lq_value: R must be positive definite");
  if (kalman_rank(A, B) < d) throw UnsupportedSystem("lq_value: (A, B) is not controllable");
  if (!(T > 0.0) || steps < 1) throw InvalidArgument("lq_value: need T > 0 and steps >= 1");

  LqValue out;
  out.A = A;
  out.B = B;
  out.Rinv = symmetrize(R).inverse();
  const Mat S = B * out.Rinv * B.transpose();
  auto dP = [&](const Mat& P) -> Mat { return -(P * A + A.transpose() * P) - 2.0 * P * S * P + 0.5 * Q; };
  auto dq = [&](const Mat& P, const Vec& q) -> Vec { return -A.transpose() * q - 2.0 * P * S * q; };
  auto dr = [&](const Vec& q) { return -0.5 * q.dot(S * q); };

  const double h = T / steps;
  Mat P = P0;
  Vec q = q0;
  double r = r0;
  out.times.push_back(0.0);
  out.P.push_back(P);
  out.q.push_back(q);
  out.r.push_back(r);
  const double scale = 1.0 + max_abs_entry(P0) + q0.cwiseAbs().maxCoeff();
  for (int k = 0; k < steps; ++k) {
    const Mat k1P = dP(P);
    const Vec k1q = dq(P, q);
    const double k1r = dr(q);
    const Mat P2 = P + 0.5 * h * k1P;
    const Vec q2 = q + 0.5 * h * k1q;
    const Mat k2P = dP(P2);
    const Vec k2q = dq(P2, q2);
    const double k2r = dr(q2);
    const Mat P3 = P + 0.5 * h * k2P;
    const Vec q3 = q + 0.5 * h * k2q;
    const Mat k3P = dP(P3);
    const Vec k3q = dq(P3, q3);
    const double k3r = dr(q3);
    const Mat P4 = P + h * k3P;
    const Vec q4 = q + h * k3q;
    const Mat k4P = dP(P4);
    const Vec k4q = dq(P4, q4);
    const double k4r = dr(q4);
    P += h / 6.0 * (k1P + 2.0 * k2P + 2.0 * k3P + k4P);
    q += h / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
    r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
    P = symmetrize(P);
    const double t = (k + 1) * h;
    if (!P.allFinite() || !q.allFinite() || max_abs_entry(P) > 1e10 * scale) throw FiniteEscape(t);
    out.times.push_back(t);
    out.P.push_back(P);
    out.q.push_back(q);
    out.r.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feedback

/// u(t, x) on the grid: one n x cells block per time slot [t_k, t_{k+1}].
struct FeedbackField {
  SpaceTimeGrid grid;
  int channels = 0;
  std::vector<Mat> u;                  // nt blocks of n x cells
  std::vector<std::vector<char>> mask; // nt x cells; u = 0 where 0

  int slot(double t) const {
    return std::min(std::max(static_cast<int>(std::floor(t / grid.dt())), 0), grid.nt() - 1);
  }
  Vec at(double t, const Vec& x) const {
    const int k = slot(t);
    const detail::Stencil st = detail::stencil(grid, x);
    Vec out = Vec::Zero(channels);
    for (int i = 0; i < st.count; ++i) out += st.weight[i] * u[k].col(st.cell[i]);
    return out;
  }
};

/// Callable feedback used by the simulators.
using Feedback = std::function<Vec(double, const Vec&)>;

inline Feedback as_feedback(const FeedbackField& fb) {
  return [&fb](double t, const Vec& x) { return fb.at(t, x); };
}
inline Feedback as_feedback(const LqValue& v) {
  return [&v](double t, const Vec& x) { return v.feedback(t, x); };
}

/// u_i = g_i(x) . dV on slot k from the mean of levels k and k+1; zero off the mask.
/// An empty mask means every cell.
inline FeedbackField feedback_from_value(const ValueGrid& V, const ControlAffineSystem& sys,
                                         std::vector<std::vector<char>> mask = {}) {
  const SpaceTimeGrid& g = V.grid;
  FeedbackField fb;
  fb.grid = g;
  fb.channels = sys.inputs();
  if (mask.empty()) mask.assign(g.nt(), std::vector<char>(g.cells(), 1));
  if (static_cast<int>(mask.size()) != g.nt()) throw InvalidArgument("feedback_from_value: mask needs one row per time slot");
  for (int k = 0; k < g.nt(); ++k) {
    Mat u = Mat::Zero(fb.channels, g.cells());
    const Vec v0 = V.V.row(k).transpose(), v1 = V.V.row(k + 1).transpose();
    for (int c = 0; c < g.cells(); ++c) {
      if (!mask[k][c]) continue;
      const Vec p = 0.5 * (detail::grid_gradient(g, v0, c) + detail::grid_gradient(g, v1, c));
      u.col(c) = sys.control_matrix(g.center(c)).transpose() * p;
    }
    fb.u.push_back(std::move(u));
  }
  fb.mask = std::move(mask);
  return fb;
}

/// Time-independent mask from a predicate on cell centres.
inline std::vector<std::vector<char>> cell_mask(const SpaceTimeGrid& g, const std::function<bool(const Vec&)>& keep) {
  std::vector<char> row(g.cells());
  for (int c = 0; c < g.cells(); ++c) row[c] = keep(g.center(c)) ? 1 : 0;
  return std::vector<std::vector<char>>(g.nt(), row);
}

// ---------------------------------------------------------------------------
// Moving and static sets

struct MovingStaticSplit {
  std::vector<char> moving;  // per source support point
  std::vector<Vec> image;    // barycentric map
  int moving_count = 0;
  int static_count = 0;
};

inline MovingStaticSplit moving_static_split(const Mat& coupling, const std::vector<Vec>& X, const std::vector<Vec>& Y,
                                             double threshold) {
  if (coupling.rows() != static_cast<Eigen::Index>(X.size()) || coupling.cols() != static_cast<Eigen::Index>(Y.size()))
    throw InvalidArgument("moving_static_split: coupling shape differs from the supports");
  MovingStaticSplit s;
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double row = coupling.row(static_cast<Eigen::Index>(i)).sum();
    Vec img = X[i];
    if (row > 0.0) {
      img = Vec::Zero(X[i].size());
      for (std::size_t j = 0; j < Y.size(); ++j) img += coupling(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * Y[j];
      img /= row;
    }
    const bool mv = (img - X[i]).norm() > threshold;
    s.moving.push_back(mv ? 1 : 0);
    s.image.push_back(std::move(img));
    (mv ? s.moving_count : s.static_count)++;
  }
  return s;
}

/// Threshold of two cell diagonals.
inline double default_moving_threshold(const SpaceTimeGrid& g) {
  double s = 0.0;
  for (int a = 0; a < g.dim(); ++a) s += g.h(a) * g.h(a);
  return 2.0 * std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Closed-loop simulation

struct FeedbackSimulation {
  ParticleEnsemble ensemble;
  std::vector<char> escaped;
  std::vector<std::vector<double>> energy;  // accumulated 1/2 |u|^2 at each time
  double escaped_fraction = 0.0;
};

namespace detail {

struct ClosedLoopStep {
  Vec x;
  Vec u;          // RK4-weighted stage control
  double energy;  // increment of 1/2 |u|^2
};

inline ClosedLoopStep closed_loop_rk4(const ControlAffineSystem& sys, const Feedback& fb, double t, const Vec& x, double h) {
  const Vec u1 = fb(t, x);
  const Vec k1 = sys.velocity(x, u1);
  const Vec x2 = x + 0.5 * h * k1;
  const Vec u2 = fb(t + 0.5 * h, x2);
  const Vec k2 = sys.velocity(x2, u2);
  const Vec x3 = x + 0.5 * h * k2;
  const Vec u3 = fb(t + 0.5 * h, x3);
  const Vec k3 = sys.velocity(x3, u3);
  const Vec x4 = x + h * k3;
  const Vec u4 = fb(t + h, x4);
  const Vec k4 = sys.velocity(x4, u4);
  ClosedLoopStep s;
  s.x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  s.u = (u1 + 2.0 * u2 + 2.0 * u3 + u4) / 6.0;
  s.energy = h / 12.0 * (u1.squaredNorm() + 2.0 * u2.squaredNorm() + 2.0 * u3.squaredNorm() + u4.squaredNorm());
  return s;
}

}  // namespace detail

/// RK4 under the feedback with `steps` uniform steps on [0, T]. The time-slot
/// boundaries of grid feedback are respected when steps is a multiple of nt.
/// `box` (optional) flags particles that leave it; flagged particles are clamped.
inline FeedbackSimulation simulate_feedback(const ControlAffineSystem& sys, const Feedback& fb, const DiscreteMeasure& seeds,
                                            double T, int steps, const SpaceTimeGrid* box = nullptr, int threads = 1) {
  if (steps < 1 || !(T > 0.0)) throw InvalidArgument("simulate_feedback: need steps >= 1 and T > 0");
  seeds.validate(1e-9);
  FeedbackSimulation out;
  const int P = seeds.size();
  ParticleEnsemble& ens = out.ensemble;
  ens.weights = seeds.weights;
  ens.times = uniform_times(T, steps);
  ens.states.assign(P, {});
  ens.controls.assign(P, {});
  out.escaped.assign(P, 0);
  out.energy.assign(P, {});
  const double h = T / steps;
  parallel_for(P, threads, [&](int p) {
    Vec x = seeds.points[p];
    double e = 0.0;
    auto& xs = ens.states[p];
    auto& us = ens.controls[p];
    auto& es = out.energy[p];
    xs.reserve(steps + 1);
    us.reserve(steps);
    es.reserve(steps + 1);
    xs.push_back(x);
    es.push_back(0.0);
    for (int k = 0; k < steps; ++k) {
      const detail::ClosedLoopStep s = detail::closed_loop_rk4(sys, fb, k * h, x, h);
      x = s.x;
      e += s.energy;
      if (!x.allFinite()) throw DivergenceError(k, "simulate_feedback: trajectory became non-finite");
      if (box && !box->contains(x)) {
        out.escaped[p] = 1;
        x = x.cwiseMax(box->lo()).cwiseMin(box->hi());
      }
      xs.push_back(x);
      us.push_back(s.u);
      es.push_back(e);
    }
  });
  double lost = 0.0;
  for (int p = 0; p < P; ++p)
    if (out.escaped[p]) lost += seeds.weights(p);
  out.escaped_fraction = lost;
  return out;
}

inline FeedbackSimulation simulate_feedback(const ControlAffineSystem& sys, const FeedbackField& fb,
                                            const DiscreteMeasure& seeds, int steps, int threads = 1) {
  return simulate_feedback(sys, as_feedback(fb), seeds, fb.grid.horizon(), steps, &fb.grid, threads);
}

/// Terminal states of the particles that stayed inside, as a measure.
inline DiscreteMeasure terminal_measure(const FeedbackSimulation& sim) {
  DiscreteMeasure m;
  std::vector<double> w;
  for (int p = 0; p < sim.ensemble.size(); ++p) {
    if (sim.escaped[p]) continue;
    m.points.push_back(sim.ensemble.states[p].back());
    w.push_back(sim.ensemble.weights(p));
  }
  if (w.empty()) throw InvalidMeasure("terminal_measure: every particle escaped");
  m.weights = Eigen::Map<Vec>(w.data(), static_cast<Eigen::Index>(w.size()));
  m.weights /= m.weights.sum();
  return m;
}

/// max over particles and times of |V(t, x(t)) - V(0, x(0)) - accumulated 1/2 |u|^2|,
/// restricted to particles for which `keep` holds at the seed.
inline double value_along_flow_error(const ValueGrid& V, const FeedbackSimulation& sim,
                                     const std::function<bool(const Vec&)>& keep = {}) {
  double worst = 0.0;
  const ParticleEnsemble& ens = sim.ensemble;
  for (int p = 0; p < ens.size(); ++p) {
    if (sim.escaped[p] || (keep && !keep(ens.states[p].front()))) continue;
    const double v0 = V.at(0.0, ens.states[p].front());
    for (std::size_t k = 0; k < ens.times.size(); ++k) {
      const double dv = V.at(ens.times[k], ens.states[p][k]) - v0;
      worst = std::max(worst, std::abs(dv - sim.energy[p][k]));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Non-branching surrogate

struct BranchingReport {
  std::vector<double> ratios;    // per seed: max terminal spread / eps
  double max_ratio = 0.0;
  double duplicate_separation = 0.0;
  double step_halving_drift = 0.0;
  double escaped_fraction = 0.0;
};

/// Each seed is simulated with a duplicate and `copies` perturbed copies at
/// distance eps in seeded random directions, then re-simulated with half the step.
inline BranchingReport uniqueness_diagnostic(const ControlAffineSystem& sys, const Feedback& fb,
                                             const DiscreteMeasure& seeds, double T, double eps, int steps,
                                             const SpaceTimeGrid* box = nullptr, int copies = 4,
                                             std::uint64_t seed = 0, int threads = 1) {
  if (!(eps > 0.0)) throw InvalidArgument("uniqueness_diagnostic: eps must be positive");
  const int S = seeds.size(), d = seeds.dim();
  const int per = copies + 2;
  DiscreteMeasure cloud;
  cloud.weights = Vec::Constant(S * per, 1.0 / (S * per));
  std::mt19937_64 rng(mix_seed(seed, 0x5eed));
  std::normal_distribution<double> normal;
  for (int s = 0; s < S; ++s) {
    cloud.points.push_back(seeds.points[s]);
    cloud.points.push_back(seeds.points[s]);
    for (int c = 0; c < copies; ++c) {
      Vec dir(d);
      for (int a = 0; a < d; ++a) dir(a) = normal(rng);
      cloud.points.push_back(seeds.points[s] + eps * dir.normalized());
    }
  }
  const FeedbackSimulation coarse = simulate_feedback(sys, fb, cloud, T, steps, box, threads);
  const FeedbackSimulation fine = simulate_feedback(sys, fb, cloud, T, 2 * steps, box, threads);
  BranchingReport r;
  double lost = 0.0;
  for (int s = 0; s < S; ++s) {
    const int b = s * per;
    bool esc = false;
    for (int q = 0; q < per; ++q) esc = esc || coarse.escaped[b + q] || fine.escaped[b + q];
    if (esc) {
      lost += seeds.weights(s);
      r.ratios.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const Vec& end = coarse.ensemble.states[b].back();
    r.duplicate_separation = std::max(r.duplicate_separation, (coarse.ensemble.states[b + 1].back() - end).norm());
    double ratio = 0.0;
    for (int c = 0; c < copies; ++c) {
      const int q = b + 2 + c;
      const double start = (cloud.points[q] - cloud.points[b]).norm();
      ratio = std::max(ratio, (coarse.ensemble.states[q].back() - end).norm() / start);
    }
    r.ratios.push_back(ratio);
    r.max_ratio = std::max(r.max_ratio, ratio);
    for (int q = b; q < b + per; ++q)
      for (int k = 0; k <= steps; ++k)
        r.step_halving_drift = std::max(
            r.step_halving_drift, (coarse.ensemble.states[q][k] - fine.ensemble.states[q][2 * k]).norm());
  }
  r.escaped_fraction = lost;
  return r;
}

}  // namespace ctrlot
