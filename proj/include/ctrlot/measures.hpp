#pragma once

// Weighted point clouds, Gaussian sampling and sliced Wasserstein distances.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ctrlot/errors.hpp"
#include "ctrlot/linalg.hpp"

namespace ctrlot {

struct DiscreteMeasure {
  std::vector<Vec> points;
  Vec weights;

  static DiscreteMeasure uniform(std::vector<Vec> pts) {
    DiscreteMeasure m;
    const auto n = static_cast<Eigen::Index>(pts.size());
    m.points = std::move(pts);
    m.weights = Vec::Constant(n, n ? 1.0 / n : 0.0);
    return m;
  }
  static DiscreteMeasure dirac(Vec x) {
    DiscreteMeasure m;
    m.points.push_back(std::move(x));
    m.weights = Vec::Ones(1);
    return m;
  }

  int size() const { return static_cast<int>(points.size()); }
  int dim() const { return points.empty() ? 0 : static_cast<int>(points.front().size()); }

  /// Throws InvalidMeasure unless weights are nonnegative, sum to one and points are finite.
  void validate(double tol = 1e-12) const {
    if (points.empty()) throw InvalidMeasure("measure: no support points");
    if (weights.size() != size()) throw InvalidMeasure("measure: weight count differs from point count");
    if ((weights.array() < 0.0).any()) throw InvalidMeasure("measure: negative weight");
    if (std::abs(weights.sum() - 1.0) > tol)
      throw InvalidMeasure("measure: weights sum to " + std::to_string(weights.sum()));
    for (const auto& p : points) {
      if (p.size() != dim()) throw InvalidMeasure("measure: points differ in dimension");
      if (!p.allFinite()) throw InvalidMeasure("measure: non-finite point");
    }
  }

  Vec mean() const {
    Vec m = Vec::Zero(dim());
    for (int i = 0; i < size(); ++i) m += weights(i) * points[i];
    return m;
  }
  double moment(double p) const {
    double s = 0.0;
    for (int i = 0; i < size(); ++i) s += weights(i) * std::pow(points[i].norm(), p);
    return s;
  }
};

struct Gaussian {
  Vec mean;
  Mat cov;

  int dim() const { return static_cast<int>(mean.size()); }
  Mat cholesky() const {
    Eigen::LLT<Mat> llt(cov);
    if (llt.info() != Eigen::Success) throw InvalidMeasure("gaussian: covariance is not positive definite");
    return llt.matrixL();
  }
  double density(const Vec& x) const {
    const Mat L = cholesky();
    const Vec z = L.triangularView<Eigen::Lower>().solve(x - mean);
    const double logdet = 2.0 * L.diagonal().array().log().sum();
    return std::exp(-0.5 * z.squaredNorm() - 0.5 * logdet - 0.5 * dim() * std::log(2.0 * M_PI));
  }
};

/// Samples of N(mean, cov). With `lo`/`hi` given, draws are rejected outside the box.
inline std::vector<Vec> sample_gaussian(const Gaussian& g, int count, std::uint64_t seed,
                                        const Vec* lo = nullptr, const Vec* hi = nullptr) {
  const Mat L = g.cholesky();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vec> out;
  out.reserve(count);
  const int d = g.dim();
  long attempts = 0;
  while (static_cast<int>(out.size()) < count) {
    if (++attempts > 1000L * count + 1000) throw InvalidMeasure("sample_gaussian: truncation box holds no mass");
    Vec z(d);
    for (int a = 0; a < d; ++a) z(a) = gauss(rng);
    Vec x = g.mean + L * z;
    if (lo && ((x - *lo).array() < 0.0).any()) continue;
    if (hi && ((*hi - x).array() < 0.0).any()) continue;
    out.push_back(std::move(x));
  }
  return out;
}

/// Midpoint quantiles F^{-1}((k + 1/2) / count) of a 1-D Gaussian truncated to [lo, hi].
/// A low-discrepancy stand-in for i.i.d. draws.
inline std::vector<Vec> gaussian_quantiles(const Gaussian& g, int count, double lo, double hi) {
  if (g.dim() != 1) throw InvalidMeasure("gaussian_quantiles: only defined on the line");
  if (count < 1 || !(hi > lo)) throw InvalidArgument("gaussian_quantiles: need count >= 1 and lo < hi");
  const double m = g.mean(0), s = std::sqrt(g.cov(0, 0));
  auto cdf = [&](double x) { return 0.5 * std::erfc(-(x - m) / (s * std::sqrt(2.0))); };
  const double F0 = cdf(lo), F1 = cdf(hi);
  if (!(F1 > F0)) throw InvalidMeasure("gaussian_quantiles: truncation interval holds no mass");
  std::vector<Vec> out;
  out.reserve(count);
  for (int k = 0; k < count; ++k) {
    const double target = F0 + (F1 - F0) * (k + 0.5) / count;
    double a = lo, b = hi;
    for (int it = 0; it < 200 && b - a > 1e-15 * (1.0 + std::abs(a)); ++it) {
      const double mid = 0.5 * (a + b);
      (cdf(mid) < target ? a : b) = mid;
    }
    out.push_back(Vec::Constant(1, 0.5 * (a + b)));
  }
  return out;
}

/// Squared 2-Wasserstein distance between weighted samples on the line, by
/// matching quantile functions.
inline double wasserstein2_1d(std::vector<double> xa, Vec wa, std::vector<double> xb, Vec wb) {
  auto sorted = [](std::vector<double>& x, Vec& w) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> xs(x.size());
    Vec ws(w.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      xs[k] = x[idx[k]];
      ws(static_cast<Eigen::Index>(k)) = w(static_cast<Eigen::Index>(idx[k]));
    }
    x = std::move(xs);
    w = ws / ws.sum();
  };
  sorted(xa, wa);
  sorted(xb, wb);
  double total = 0.0;
  std::size_t i = 0, j = 0;
  double ra = wa.size() ? wa(0) : 0.0, rb = wb.size() ? wb(0) : 0.0;
  while (i < xa.size() && j < xb.size()) {
    const double m = std::min(ra, rb);
    const double dx = xa[i] - xb[j];
    total += m * dx * dx;
    ra -= m;
    rb -= m;
    if (ra <= 1e-15) {
      if (++i < xa.size()) ra = wa(static_cast<Eigen::Index>(i));
    }
    if (rb <= 1e-15) {
      if (++j < xb.size()) rb = wb(static_cast<Eigen::Index>(j));
    }
  }
  return total;
}

/// Sliced 2-Wasserstein distance: root of the mean squared 1D distance over
/// random unit directions (the single exact direction in 1D).
inline double sliced_wasserstein(const std::vector<Vec>& a, const Vec& wa, const std::vector<Vec>& b,
                                 const Vec& wb, int projections = 64, std::uint64_t seed = 7) {
  if (a.empty() || b.empty()) throw InvalidMeasure("sliced_wasserstein: empty measure");
  const int d = static_cast<int>(a.front().size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int P = d == 1 ? 1 : projections;
  double acc = 0.0;
  for (int k = 0; k < P; ++k) {
    Vec dir(d);
    if (d == 1) {
      dir(0) = 1.0;
    } else {
      for (int c = 0; c < d; ++c) dir(c) = gauss(rng);
      dir.normalize();
    }
    std::vector<double> pa(a.size()), pb(b.size());
    for (std::size_t i = 0; i < a.size(); ++i) pa[i] = dir.dot(a[i]);
    for (std::size_t i = 0; i < b.size(); ++i) pb[i] = dir.dot(b[i]);
    acc += wasserstein2_1d(std::move(pa), wa, std::move(pb), wb);
  }
  return std::sqrt(acc / P);
}

inline double sliced_wasserstein(const DiscreteMeasure& a, const DiscreteMeasure& b, int projections = 64,
                                 std::uint64_t seed = 7) {
  return sliced_wasserstein(a.points, a.weights, b.points, b.weights, projections, seed);
}

}  // namespace ctrlot
