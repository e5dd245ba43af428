#pragma once

// Axis-aligned space-time grids and rasterization of measures onto their cells.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ctrlot/errors.hpp"
#include "ctrlot/linalg.hpp"
#include "ctrlot/measures.hpp"

namespace ctrlot {

/// Cells are indexed with axis 0 fastest. Densities live at integer time levels
/// k = 0..nt, momenta at the half levels k + 1/2.
class SpaceTimeGrid {
 public:
  SpaceTimeGrid() = default;
  SpaceTimeGrid(Vec lo, Vec hi, std::vector<int> nx, int nt, double T)
      : lo_(std::move(lo)), hi_(std::move(hi)), nx_(std::move(nx)), nt_(nt), T_(T) {
    if (lo_.size() == 0 || lo_.size() != hi_.size() || static_cast<std::size_t>(lo_.size()) != nx_.size())
      throw InvalidArgument("grid: box bounds and cell counts differ in dimension");
    for (int a = 0; a < dim(); ++a) {
      if (nx_[a] < 4) throw InvalidArgument("grid: need at least 4 cells per axis");
      if (!(hi_(a) > lo_(a))) throw InvalidArgument("grid: empty box along axis " + std::to_string(a));
    }
    if (nt_ < 1) throw InvalidArgument("grid: need at least one time step");
    if (!(T_ > 0.0)) throw InvalidArgument("grid: horizon must be positive");
    cells_ = 1;
    for (int n : nx_) cells_ *= n;
  }

  static SpaceTimeGrid uniform(const Vec& lo, const Vec& hi, int n, int nt, double T) {
    return SpaceTimeGrid(lo, hi, std::vector<int>(lo.size(), n), nt, T);
  }

  int dim() const { return static_cast<int>(lo_.size()); }
  int cells() const { return cells_; }
  int nt() const { return nt_; }
  double horizon() const { return T_; }
  double dt() const { return T_ / nt_; }
  const Vec& lo() const { return lo_; }
  const Vec& hi() const { return hi_; }
  const std::vector<int>& nx() const { return nx_; }
  int nx(int a) const { return nx_[a]; }
  double h(int a) const { return (hi_(a) - lo_(a)) / nx_[a]; }
  double volume() const {
    double v = 1.0;
    for (int a = 0; a < dim(); ++a) v *= h(a);
    return v;
  }
  double time(int k) const { return T_ * k / nt_; }
  double half_time(int k) const { return T_ * (k + 0.5) / nt_; }

  /// Stride of axis a in the flat cell index.
  int stride(int a) const {
    int s = 1;
    for (int b = 0; b < a; ++b) s *= nx_[b];
    return s;
  }
  int coord(int c, int a) const { return (c / stride(a)) % nx_[a]; }

  Vec center(int c) const {
    Vec x(dim());
    for (int a = 0; a < dim(); ++a) x(a) = lo_(a) + (coord(c, a) + 0.5) * h(a);
    return x;
  }

  bool contains(const Vec& x) const {
    for (int a = 0; a < dim(); ++a)
      if (!(x(a) >= lo_(a) && x(a) <= hi_(a))) return false;
    return true;
  }

  /// Cell holding x, or -1 outside the box.
  int locate(const Vec& x) const {
    if (!contains(x)) return -1;
    int c = 0;
    for (int a = 0; a < dim(); ++a) {
      int i = static_cast<int>(std::floor((x(a) - lo_(a)) / h(a)));
      i = std::min(std::max(i, 0), nx_[a] - 1);
      c += i * stride(a);
    }
    return c;
  }

  std::vector<Vec> centers() const {
    std::vector<Vec> out(cells_);
    for (int c = 0; c < cells_; ++c) out[c] = center(c);
    return out;
  }

 private:
  Vec lo_, hi_;
  std::vector<int> nx_;
  int nt_ = 1;
  double T_ = 1.0;
  int cells_ = 0;
};

/// Cell masses summing to one, with the mass that fell outside the box before
/// renormalization.
struct Raster {
  Vec mass;
  double lost_mass = 0.0;
};

/// Cell masses of a density by tensor Gauss-Legendre quadrature inside each cell.
inline Raster rasterize_density(const SpaceTimeGrid& grid, const std::function<double(const Vec&)>& density,
                                int nodes = 4) {
  const Quadrature q = gauss_legendre(nodes, -0.5, 0.5);
  const int d = grid.dim();
  int combos = 1;
  for (int a = 0; a < d; ++a) combos *= nodes;
  Raster r;
  r.mass.resize(grid.cells());
  for (int c = 0; c < grid.cells(); ++c) {
    const Vec xc = grid.center(c);
    double s = 0.0;
    for (int k = 0; k < combos; ++k) {
      Vec x = xc;
      double w = 1.0;
      int rem = k;
      for (int a = 0; a < d; ++a) {
        const int i = rem % nodes;
        rem /= nodes;
        x(a) += q.nodes[i] * grid.h(a);
        w *= q.weights[i];
      }
      s += w * density(x);
    }
    r.mass(c) = s * grid.volume();
  }
  const double total = r.mass.sum();
  if (!(total > 0.0)) throw InvalidMeasure("rasterize: no mass inside the box");
  r.lost_mass = std::max(0.0, 1.0 - total);
  r.mass /= total;
  return r;
}

inline Raster rasterize_gaussian(const SpaceTimeGrid& grid, const Gaussian& g, int nodes = 4) {
  if (g.dim() != grid.dim()) throw InvalidMeasure("rasterize: gaussian dimension differs from the grid");
  const Mat L = g.cholesky();
  const double logdet = 2.0 * L.diagonal().array().log().sum();
  const double norm = -0.5 * logdet - 0.5 * g.dim() * std::log(2.0 * M_PI);
  return rasterize_density(
      grid,
      [&](const Vec& x) {
        const Vec z = L.triangularView<Eigen::Lower>().solve(x - g.mean);
        return std::exp(-0.5 * z.squaredNorm() + norm);
      },
      nodes);
}

/// Nearest-cell splat of weighted samples; samples outside the box count as lost.
inline Raster rasterize_samples(const SpaceTimeGrid& grid, const DiscreteMeasure& mu) {
  Raster r;
  r.mass = Vec::Zero(grid.cells());
  double lost = 0.0;
  for (int i = 0; i < mu.size(); ++i) {
    const int c = grid.locate(mu.points[i]);
    if (c < 0) lost += mu.weights(i);
    else r.mass(c) += mu.weights(i);
  }
  const double total = r.mass.sum();
  if (!(total > 0.0)) throw InvalidMeasure("rasterize: no sample inside the box");
  r.lost_mass = lost;
  r.mass /= total;
  return r;
}

}  // namespace ctrlot
