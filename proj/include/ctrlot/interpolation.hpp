#pragma once

// Particle ensembles as empirical Young measures: displacement interpolation,
// costs, purification and weak-form diagnostics.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctrlot/errors.hpp"
#include "ctrlot/linalg.hpp"
#include "ctrlot/measures.hpp"
#include "ctrlot/point_cost.hpp"
#include "ctrlot/static_ot.hpp"
#include "ctrlot/systems.hpp"

namespace ctrlot {

/// Weighted particles on a shared time grid. states[p] has one entry per time,
/// controls[p] one per interval.
struct ParticleEnsemble {
  Vec weights;
  std::vector<double> times;
  std::vector<std::vector<Vec>> states;
  std::vector<std::vector<Vec>> controls;

  int size() const { return static_cast<int>(states.size()); }
  int steps() const { return static_cast<int>(times.size()) - 1; }
  int dim() const { return states.empty() ? 0 : static_cast<int>(states.front().front().size()); }

  Trajectory trajectory(int p) const {
    Trajectory tr;
    tr.times = times;
    tr.states = states[p];
    tr.controls = controls[p];
    return tr;
  }

  /// Empirical measure at time index k.
  DiscreteMeasure marginal(int k) const {
    DiscreteMeasure m;
    m.weights = weights;
    for (const auto& s : states) m.points.push_back(s[k]);
    return m;
  }

  void validate(double tol = 1e-12) const {
    if (states.empty()) throw InvalidMeasure("ensemble: no particles");
    if (weights.size() != size() || controls.size() != states.size())
      throw InvalidMeasure("ensemble: inconsistent particle counts");
    if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > tol)
      throw InvalidMeasure("ensemble: weights must be nonnegative and sum to 1");
    for (int p = 0; p < size(); ++p)
      if (states[p].size() != times.size() || controls[p].size() + 1 != times.size())
        throw InvalidMeasure("ensemble: particle " + std::to_string(p) + " does not match the time grid");
  }

  /// Largest re-simulation error over particles.
  double resimulation_error(const ControlAffineSystem& sys) const {
    double e = 0.0;
    for (int p = 0; p < size(); ++p) e = std::max(e, ctrlot::resimulation_error(sys, trajectory(p)));
    return e;
  }
};

class IncompleteSelector : public Error {
 public:
  explicit IncompleteSelector(std::vector<std::pair<int, int>> pairs)
      : Error(message(pairs)), pairs_(std::move(pairs)) {}
  const std::vector<std::pair<int, int>>& pairs() const noexcept { return pairs_; }

 private:
  static std::string message(const std::vector<std::pair<int, int>>& pairs) {
    std::string s = "selector has no trajectory for pairs";
    for (std::size_t k = 0; k < pairs.size() && k < 10; ++k)
      s += " (" + std::to_string(pairs[k].first) + "," + std::to_string(pairs[k].second) + ")";
    if (pairs.size() > 10) s += " ...";
    return s;
  }
  std::vector<std::pair<int, int>> pairs_;
};

/// Returns the cached minimizer for support pair (i, j), or nullptr.
using Selector = std::function<const CostResult*(int, int)>;

inline Selector selector_from(const CostMatrix& cm) {
  return [&cm](int i, int j) -> const CostResult* {
    if (cm.results.empty()) return nullptr;
    const CostResult& r = cm.result(i, j);
    return r.trajectory.states.empty() ? nullptr : &r;
  };
}

struct Interpolation {
  ParticleEnsemble ensemble;
  std::vector<std::pair<int, int>> pairs;  // support pair of each particle
  double dropped_mass = 0.0;
};

namespace detail {

/// State at time t along a piecewise-linear reading of tr, and the control active at t.
inline std::pair<Vec, Vec> sample_trajectory(const Trajectory& tr, double t) {
  const auto& ts = tr.times;
  if (t <= ts.front()) return {tr.states.front(), tr.controls.front()};
  if (t >= ts.back()) return {tr.states.back(), tr.controls.back()};
  const auto it = std::upper_bound(ts.begin(), ts.end(), t);
  const int k = static_cast<int>(it - ts.begin()) - 1;
  const double s = (t - ts[k]) / (ts[k + 1] - ts[k]);
  return {(1.0 - s) * tr.states[k] + s * tr.states[k + 1], tr.controls[k]};
}

}  // namespace detail

/// One particle per coupling entry above mass_floor, following its selector
/// trajectory. With `times` empty the selectors' own grid is used; otherwise
/// states are read piecewise linearly and controls at interval midpoints.
inline Interpolation displacement_interpolation(const TransportPlan& plan, const Selector& selector,
                                                const std::vector<double>& times = {},
                                                double mass_floor = 1e-10) {
  Interpolation out;
  std::vector<std::pair<int, int>> missing;
  std::vector<std::pair<int, int>> kept;
  double total = 0.0, dropped = 0.0;
  for (Eigen::Index i = 0; i < plan.coupling.rows(); ++i)
    for (Eigen::Index j = 0; j < plan.coupling.cols(); ++j) {
      const double w = plan.coupling(i, j);
      total += w;
      if (w <= mass_floor) {
        dropped += std::max(0.0, w);
        continue;
      }
      if (!selector(static_cast<int>(i), static_cast<int>(j))) missing.emplace_back(i, j);
      kept.emplace_back(i, j);
    }
  if (!missing.empty()) throw IncompleteSelector(std::move(missing));
  if (kept.empty()) throw InvalidMeasure("displacement_interpolation: plan has no mass above the floor");

  ParticleEnsemble& ens = out.ensemble;
  const CostResult* first = selector(kept.front().first, kept.front().second);
  ens.times = times.empty() ? first->trajectory.times : times;
  ens.weights.resize(static_cast<Eigen::Index>(kept.size()));
  for (std::size_t p = 0; p < kept.size(); ++p) {
    const auto [i, j] = kept[p];
    const Trajectory& tr = selector(i, j)->trajectory;
    ens.weights(static_cast<Eigen::Index>(p)) = plan.coupling(i, j);
    if (times.empty()) {
      if (tr.times.size() != ens.times.size())
        throw InvalidArgument("displacement_interpolation: selector trajectories use different grids");
      ens.states.push_back(tr.states);
      ens.controls.push_back(tr.controls);
    } else {
      std::vector<Vec> xs, us;
      for (double t : ens.times) xs.push_back(detail::sample_trajectory(tr, t).first);
      for (std::size_t k = 0; k + 1 < ens.times.size(); ++k)
        us.push_back(detail::sample_trajectory(tr, 0.5 * (ens.times[k] + ens.times[k + 1])).second);
      ens.states.push_back(std::move(xs));
      ens.controls.push_back(std::move(us));
    }
  }
  ens.weights /= ens.weights.sum();
  out.pairs = std::move(kept);
  out.dropped_mass = total > 0.0 ? dropped / total : 0.0;
  return out;
}

/// sum_p w_p * (trapezoid quadrature of L along particle p).
inline double ensemble_cost(const ParticleEnsemble& ens, const RunningCost& cost) {
  double J = 0.0;
  for (int p = 0; p < ens.size(); ++p) J += ens.weights(p) * trajectory_cost(cost, ens.trajectory(p));
  return J;
}

// ---------------------------------------------------------------------------
// Purification

struct PurifiedSample {
  int interval = 0;
  std::vector<int> cell;  // integer cell coordinates, side = bandwidth
  Vec x;                  // cell-mass-weighted mean state
  Vec u;                  // barycentric control
  double mass = 0.0;
};

struct Purification {
  std::vector<PurifiedSample> field;
  double purified_cost = 0.0;
  double raw_cost = 0.0;
};

/// Replaces each particle control by the mass-weighted mean control of the
/// particles sharing its box cell (side `bandwidth`) on the same interval.
/// Empty cells carry no control.
inline Purification purify(const ParticleEnsemble& ens, const RunningCost& cost, double bandwidth) {
  if (!(bandwidth > 0.0)) throw InvalidArgument("purify: bandwidth must be positive");
  ens.validate(1e-9);
  Purification out;
  const int d = ens.dim();
  for (int k = 0; k < ens.steps(); ++k) {
    const double t0 = ens.times[k], t1 = ens.times[k + 1], h = t1 - t0;
    std::map<std::vector<int>, std::vector<int>> cells;
    for (int p = 0; p < ens.size(); ++p) {
      const Vec xm = 0.5 * (ens.states[p][k] + ens.states[p][k + 1]);
      std::vector<int> key(d);
      for (int a = 0; a < d; ++a) key[a] = static_cast<int>(std::floor(xm(a) / bandwidth));
      cells[key].push_back(p);
    }
    for (const auto& [key, members] : cells) {
      double mass = 0.0;
      Vec ubar = Vec::Zero(ens.controls[members.front()][k].size());
      Vec xbar = Vec::Zero(d);
      for (int p : members) {
        mass += ens.weights(p);
        ubar += ens.weights(p) * ens.controls[p][k];
        xbar += ens.weights(p) * 0.5 * (ens.states[p][k] + ens.states[p][k + 1]);
      }
      if (!(mass > 0.0)) continue;
      ubar /= mass;
      xbar /= mass;
      for (int p : members) {
        const Vec& x0 = ens.states[p][k];
        const Vec& x1 = ens.states[p][k + 1];
        const Vec& u = ens.controls[p][k];
        out.raw_cost += ens.weights(p) * 0.5 * h * (cost(t0, x0, u) + cost(t1, x1, u));
        out.purified_cost += ens.weights(p) * 0.5 * h * (cost(t0, x0, ubar) + cost(t1, x1, ubar));
      }
      out.field.push_back({k, key, xbar, ubar, mass});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weak continuity equation

/// phi(t, x) = (1 + t/T) prod_a bump((x_a - c_a) / s), bump(r) = exp(-1 / (1 - r^2)).
struct BumpTestFunction {
  Vec center;
  double scale = 1.0;
  double T = 1.0;

  double spatial(const Vec& x, Vec* grad) const {
    const int d = static_cast<int>(x.size());
    Vec b(d), db(d);
    for (int a = 0; a < d; ++a) {
      const double r = (x(a) - center(a)) / scale;
      if (std::abs(r) >= 1.0) {
        if (grad) *grad = Vec::Zero(d);
        return 0.0;
      }
      const double q = 1.0 - r * r;
      b(a) = std::exp(-1.0 / q);
      db(a) = b(a) * (-2.0 * r / (q * q)) / scale;
    }
    const double prod = b.prod();
    if (grad) {
      grad->resize(d);
      for (int a = 0; a < d; ++a) {
        double g = db(a);
        for (int c = 0; c < d; ++c)
          if (c != a) g *= b(c);
        (*grad)(a) = g;
      }
    }
    return prod;
  }
  double value(double t, const Vec& x) const { return (1.0 + t / T) * spatial(x, nullptr); }
  /// d/dt phi + grad phi . v
  double transport(double t, const Vec& x, const Vec& v) const {
    Vec g;
    const double s = spatial(x, &g);
    return s / T + (1.0 + t / T) * g.dot(v);
  }
};

/// 3 scales x 5 centres spread along the diagonal of [lo, hi].
inline std::vector<BumpTestFunction> bump_battery(const Vec& lo, const Vec& hi, double T) {
  std::vector<BumpTestFunction> out;
  const Vec ext = hi - lo;
  const double L = ext.maxCoeff();
  for (double s : {0.25, 0.5, 1.0})
    for (double q : {0.2, 0.35, 0.5, 0.65, 0.8}) out.push_back({lo + q * ext, s * L, T});
  return out;
}

inline std::vector<BumpTestFunction> bump_battery(const ParticleEnsemble& ens) {
  Vec lo = ens.states.front().front(), hi = lo;
  for (const auto& s : ens.states)
    for (const auto& x : s) {
      lo = lo.cwiseMin(x);
      hi = hi.cwiseMax(x);
    }
  const Vec pad = 0.25 * (hi - lo) + Vec::Constant(lo.size(), 0.25);
  return bump_battery(lo - pad, hi + pad, ens.times.back() - ens.times.front());
}

/// max over test functions of | int phi(T) dmu_T - int phi(0) dmu_0 - int (phi_t + grad phi . f) deta |,
/// the time integral by the trapezoid rule along each particle.
inline double weak_residual(const ParticleEnsemble& ens, const ControlAffineSystem& sys,
                            const std::vector<BumpTestFunction>& tests) {
  double worst = 0.0;
  const int K = ens.steps();
  for (const auto& phi : tests) {
    double lhs = 0.0, rhs = 0.0;
    for (int p = 0; p < ens.size(); ++p) {
      const auto& xs = ens.states[p];
      lhs += ens.weights(p) * (phi.value(ens.times[K], xs[K]) - phi.value(ens.times[0], xs[0]));
      double integral = 0.0;
      for (int k = 0; k < K; ++k) {
        const double h = ens.times[k + 1] - ens.times[k];
        const Vec& u = ens.controls[p][k];
        integral += 0.5 * h *
                    (phi.transport(ens.times[k], xs[k], sys.velocity(xs[k], u)) +
                     phi.transport(ens.times[k + 1], xs[k + 1], sys.velocity(xs[k + 1], u)));
      }
      rhs += ens.weights(p) * integral;
    }
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Moments and the Gronwall envelope

inline std::vector<double> moment_curve(const ParticleEnsemble& ens, double p) {
  if (!(p >= 1.0)) throw InvalidArgument("moment_curve: p must be at least 1");
  std::vector<double> out(ens.times.size(), 0.0);
  for (int q = 0; q < ens.size(); ++q)
    for (std::size_t k = 0; k < ens.times.size(); ++k)
      out[k] += ens.weights(q) * std::pow(ens.states[q][k].norm(), p);
  return out;
}

/// Envelope (A + m(0)) e^{Bt} for t -> int |x|^p dmu_t under |f(x,u)| <= M (1 + |x| + |u|).
/// Young's inequality gives A = p M T + M U and B = M (3p - 1) with U = int |u|^p deta.
struct MomentEnvelope {
  double M = 0.0;
  double A = 0.0;
  double B = 0.0;
  double control_moment = 0.0;  // U
  std::vector<double> moments;
  std::vector<double> envelope;
  bool holds = true;
  double worst_ratio = 0.0;     // max moments / envelope
};

/// Largest |f(x,u)| / (1 + |x| + |u|) over the ensemble's visited pairs.
inline double estimate_growth(const ParticleEnsemble& ens, const ControlAffineSystem& sys) {
  double M = 0.0;
  for (int q = 0; q < ens.size(); ++q)
    for (int k = 0; k < ens.steps(); ++k) {
      const Vec& u = ens.controls[q][k];
      for (int e : {k, k + 1}) {
        const Vec& x = ens.states[q][e];
        M = std::max(M, sys.velocity(x, u).norm() / (1.0 + x.norm() + u.norm()));
      }
    }
  return M;
}

/// `growth` <= 0 means estimate M from the ensemble. When `coercive_cost` is
/// given, U is bounded by (cost - beta T) / alpha instead of measured.
inline MomentEnvelope moment_envelope(const ParticleEnsemble& ens, const ControlAffineSystem& sys, double p,
                                      double growth = 0.0, const RunningCost* coercive_cost = nullptr) {
  MomentEnvelope env;
  env.M = growth > 0.0 ? growth : estimate_growth(ens, sys);
  const double T = ens.times.back() - ens.times.front();
  if (coercive_cost) {
    const double c = ensemble_cost(ens, *coercive_cost);
    env.control_moment = std::max(0.0, (c - coercive_cost->beta * T) / coercive_cost->alpha);
  } else {
    for (int q = 0; q < ens.size(); ++q)
      for (int k = 0; k < ens.steps(); ++k)
        env.control_moment += ens.weights(q) * (ens.times[k + 1] - ens.times[k]) *
                              std::pow(ens.controls[q][k].norm(), p);
  }
  env.A = p * env.M * T + env.M * env.control_moment;
  env.B = env.M * (3.0 * p - 1.0);
  env.moments = moment_curve(ens, p);
  for (std::size_t k = 0; k < ens.times.size(); ++k) {
    const double t = ens.times[k] - ens.times.front();
    env.envelope.push_back((env.A + env.moments.front()) * std::exp(env.B * t));
    const double ratio = env.moments[k] / env.envelope.back();
    env.worst_ratio = std::max(env.worst_ratio, ratio);
    if (env.moments[k] > env.envelope.back() * (1.0 + 1e-12)) env.holds = false;
  }
  return env;
}

// ---------------------------------------------------------------------------
// Concentration on optimal trajectories

/// c(x, y) for a particle's endpoints; nullopt when the oracle fails.
using CostOracle = std::function<std::optional<double>(const Vec&, const Vec&)>;

struct GapReport {
  std::vector<double> gaps;  // NaN where the oracle failed
  double max_gap = 0.0;
  double mean_gap = 0.0;     // mass-weighted over known particles
  int unknown = 0;
};

/// Gaps against known endpoint costs, one per particle (NaN marks unknown).
inline GapReport optimality_gap(const ParticleEnsemble& ens, const RunningCost& cost,
                                const std::vector<double>& endpoint_costs) {
  if (static_cast<int>(endpoint_costs.size()) != ens.size())
    throw InvalidArgument("optimality_gap: one endpoint cost per particle required");
  GapReport r;
  double mass = 0.0;
  for (int p = 0; p < ens.size(); ++p) {
    if (!std::isfinite(endpoint_costs[p])) {
      r.gaps.push_back(std::numeric_limits<double>::quiet_NaN());
      ++r.unknown;
      continue;
    }
    const double g = trajectory_cost(cost, ens.trajectory(p)) - endpoint_costs[p];
    r.gaps.push_back(g);
    r.max_gap = std::max(r.max_gap, g);
    r.mean_gap += ens.weights(p) * g;
    mass += ens.weights(p);
  }
  if (mass > 0.0) r.mean_gap /= mass;
  return r;
}

inline GapReport optimality_gap(const ParticleEnsemble& ens, const RunningCost& cost, const CostOracle& oracle) {
  std::vector<double> c;
  for (int p = 0; p < ens.size(); ++p) {
    const std::optional<double> v = oracle(ens.states[p].front(), ens.states[p].back());
    c.push_back(v ? *v : std::numeric_limits<double>::quiet_NaN());
  }
  return optimality_gap(ens, cost, c);
}

inline CostOracle oracle_from(const PointCostSolver& solver) {
  return [&solver](const Vec& x, const Vec& y) -> std::optional<double> {
    try {
      return solver.value(x, y);
    } catch (const NonConvergence&) {
      return std::nullopt;
    } catch (const DivergenceError&) {
      return std::nullopt;
    }
  };
}

}  // namespace ctrlot
