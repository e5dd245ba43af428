#pragma once

// Limited-memory BFGS with a strong-Wolfe line search.

#include <cmath>
#include <deque>
#include <functional>
#include <limits>

#include "ctrlot/linalg.hpp"

namespace ctrlot {

struct LbfgsOptions {
  int memory = 12;
  int max_iters = 2000;
  double gradient_tol = 1e-9;  // on the sup norm of the (scaled) gradient
  double gradient_scale = 1.0;  // reported gradient = raw gradient * scale
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_linesearch = 40;
};

struct LbfgsResult {
  Vec x;
  double value = 0.0;
  double gradient_norm = 0.0;  // scaled sup norm
  int iterations = 0;
  bool converged = false;
};

/// Objective: returns f(x) and writes the gradient.
using Objective = std::function<double(const Vec&, Vec&)>;

namespace detail {

inline double cubic_min(double a, double fa, double ga, double b, double fb, double gb) {
  // minimizer of the cubic interpolating (a, fa, ga), (b, fb, gb), clamped into the bracket
  const double d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - ga * gb;
  const double lo = std::min(a, b), hi = std::max(a, b);
  if (disc < 0.0) return 0.5 * (a + b);
  const double d2 = std::copysign(std::sqrt(disc), b - a);
  double t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
  if (!std::isfinite(t) || t <= lo + 0.05 * (hi - lo) || t >= hi - 0.05 * (hi - lo))
    t = 0.5 * (a + b);
  return t;
}

}  // namespace detail

inline LbfgsResult lbfgs_minimize(const Objective& fun, Vec x0, const LbfgsOptions& opt = {}) {
  LbfgsResult res;
  Vec x = std::move(x0);
  Vec g(x.size());
  double f = fun(x, g);
  std::deque<Vec> S, Y;
  std::deque<double> rho;

  auto scaled_norm = [&](const Vec& v) {
    return v.size() ? v.cwiseAbs().maxCoeff() * opt.gradient_scale : 0.0;
  };

  int it = 0;
  for (; it < opt.max_iters; ++it) {
    if (scaled_norm(g) <= opt.gradient_tol) {
      res.converged = true;
      break;
    }
    // two-loop recursion
    Vec q = g;
    std::vector<double> alpha(S.size());
    for (int i = static_cast<int>(S.size()) - 1; i >= 0; --i) {
      alpha[i] = rho[i] * S[i].dot(q);
      q -= alpha[i] * Y[i];
    }
    if (!S.empty()) q *= S.back().dot(Y.back()) / Y.back().squaredNorm();
    for (std::size_t i = 0; i < S.size(); ++i) {
      const double beta = rho[i] * Y[i].dot(q);
      q += (alpha[i] - beta) * S[i];
    }
    Vec d = -q;
    double dg0 = d.dot(g);
    if (!(dg0 < 0.0)) {
      // not a descent direction: restart with steepest descent
      S.clear();
      Y.clear();
      rho.clear();
      d = -g;
      dg0 = d.dot(g);
    }

    // strong-Wolfe line search (bracketing + zoom)
    double step = S.empty() ? std::min(1.0, 1.0 / std::max(1e-300, g.cwiseAbs().maxCoeff())) : 1.0;
    double prev_step = 0.0, f_prev = f, dg_prev = dg0;
    Vec x_new(x.size()), g_new(x.size());
    double f_new = f;
    bool found = false;

    auto eval_at = [&](double s, Vec& xs, Vec& gs) {
      xs = x + s * d;
      return fun(xs, gs);
    };

    auto zoom = [&](double lo, double f_lo, double dg_lo, double hi, double f_hi, double dg_hi) {
      for (int k = 0; k < opt.max_linesearch; ++k) {
        const double s = detail::cubic_min(lo, f_lo, dg_lo, hi, f_hi, dg_hi);
        const double fs = eval_at(s, x_new, g_new);
        const double dgs = d.dot(g_new);
        if (!std::isfinite(fs) || fs > f + opt.c1 * s * dg0 || fs >= f_lo) {
          hi = s;
          f_hi = fs;
          dg_hi = std::isfinite(dgs) ? dgs : dg_hi;
        } else {
          if (std::abs(dgs) <= -opt.c2 * dg0) {
            f_new = fs;
            return true;
          }
          if (dgs * (hi - lo) >= 0.0) {
            hi = lo;
            f_hi = f_lo;
            dg_hi = dg_lo;
          }
          lo = s;
          f_lo = fs;
          dg_lo = dgs;
        }
        if (std::abs(hi - lo) < 1e-16 * std::max(1.0, std::abs(lo))) break;
      }
      // accept the best sufficient-decrease point if any
      if (f_lo < f) {
        f_new = eval_at(lo, x_new, g_new);
        return true;
      }
      return false;
    };

    for (int k = 0; k < opt.max_linesearch; ++k) {
      const double fs = eval_at(step, x_new, g_new);
      const double dgs = d.dot(g_new);
      if (!std::isfinite(fs) || fs > f + opt.c1 * step * dg0 || (k > 0 && fs >= f_prev)) {
        found = zoom(prev_step, f_prev, dg_prev, step, fs, std::isfinite(dgs) ? dgs : 0.0);
        break;
      }
      if (std::abs(dgs) <= -opt.c2 * dg0) {
        f_new = fs;
        found = true;
        break;
      }
      if (dgs >= 0.0) {
        found = zoom(step, fs, dgs, prev_step, f_prev, dg_prev);
        break;
      }
      prev_step = step;
      f_prev = fs;
      dg_prev = dgs;
      step *= 2.0;
    }
    if (!found) break;  // no progress is possible at this precision

    Vec s = x_new - x;
    Vec y = g_new - g;
    const double sy = s.dot(y);
    x = x_new;
    const double f_old = f;
    f = f_new;
    g = g_new;
    if (sy > 1e-16 * s.norm() * y.norm()) {
      S.push_back(std::move(s));
      Y.push_back(std::move(y));
      rho.push_back(1.0 / sy);
      if (static_cast<int>(S.size()) > opt.memory) {
        S.pop_front();
        Y.pop_front();
        rho.pop_front();
      }
    }
    if (std::abs(f_old - f) <= 1e-16 * std::max(1.0, std::abs(f)) && scaled_norm(g) <= 1e3 * opt.gradient_tol)
      break;
  }
  res.x = std::move(x);
  res.value = f;
  res.gradient_norm = scaled_norm(g);
  res.iterations = it;
  if (res.gradient_norm <= opt.gradient_tol) res.converged = true;
  return res;
}

/// Projected gradient with Barzilai-Borwein steps and Armijo backtracking on the box |x_i| <= bound.
inline LbfgsResult projected_gradient_minimize(const Objective& fun, Vec x0, double bound,
                                               const LbfgsOptions& opt = {}) {
  auto project = [bound](Vec v) { return Vec(v.cwiseMax(-bound).cwiseMin(bound)); };
  LbfgsResult res;
  Vec x = project(std::move(x0));
  Vec g(x.size());
  double f = fun(x, g);
  auto pg_norm = [&](const Vec& xs, const Vec& gs) {
    return xs.size() ? (xs - project(xs - gs)).cwiseAbs().maxCoeff() * opt.gradient_scale : 0.0;
  };
  double step = 1.0 / std::max(1e-12, g.cwiseAbs().maxCoeff());
  int it = 0;
  for (; it < opt.max_iters; ++it) {
    if (pg_norm(x, g) <= opt.gradient_tol) break;
    Vec x_new, g_new(x.size());
    double f_new = f;
    bool ok = false;
    for (int k = 0; k < opt.max_linesearch; ++k) {
      x_new = project(x - step * g);
      f_new = fun(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + opt.c1 * g.dot(x_new - x)) {
        ok = true;
        break;
      }
      step *= 0.5;
    }
    if (!ok) break;
    const Vec s = x_new - x, y = g_new - g;
    const double sy = s.dot(y);
    step = sy > 0.0 ? s.squaredNorm() / sy : 2.0 * step;
    x = std::move(x_new);
    g = std::move(g_new);
    f = f_new;
  }
  res.x = std::move(x);
  res.value = f;
  res.gradient_norm = pg_norm(res.x, g);
  res.iterations = it;
  res.converged = res.gradient_norm <= opt.gradient_tol;
  return res;
}

}  // namespace ctrlot
