#pragma once

// Plot-ready CSV writers. Floats are written with 17 significant digits and the
// column order is fixed per schema (see README).

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "ctrlot/dynamic_ot.hpp"
#include "ctrlot/errors.hpp"
#include "ctrlot/grid.hpp"
#include "ctrlot/hjb.hpp"
#include "ctrlot/interpolation.hpp"
#include "ctrlot/point_cost.hpp"
#include "ctrlot/static_ot.hpp"
#include "ctrlot/systems.hpp"

namespace ctrlot::io {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& os) : os_(os) {}
  void header(const std::vector<std::string>& cols) {
    for (std::size_t i = 0; i < cols.size(); ++i) os_ << (i ? "," : "") << cols[i];
    os_ << '\n';
  }
  CsvWriter& cell(double v) { return raw(fmt(v)); }
  CsvWriter& cell(long v) { return raw(std::to_string(v)); }
  CsvWriter& cell(int v) { return raw(std::to_string(v)); }
  CsvWriter& cells(const Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) cell(v(i));
    return *this;
  }
  void end() {
    os_ << '\n';
    first_ = true;
  }

 private:
  CsvWriter& raw(const std::string& s) {
    if (!first_) os_ << ',';
    os_ << s;
    first_ = false;
    return *this;
  }
  std::ostream& os_;
  bool first_ = true;
};

inline std::vector<std::string> numbered(const std::string& stem, int n) {
  std::vector<std::string> out;
  for (int i = 1; i <= n; ++i) out.push_back(stem + std::to_string(i));
  return out;
}

inline std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

/// row i = source i, column j = target j; no header.
inline void write_cost_matrix(std::ostream& os, const Mat& C) {
  CsvWriter w(os);
  for (Eigen::Index i = 0; i < C.rows(); ++i) {
    w.cells(C.row(i).transpose());
    w.end();
  }
}

/// t, x1..xd, u1..un; u on row k is the control of interval [t_k, t_{k+1}], nan on the last row.
inline void write_trajectory(std::ostream& os, const Trajectory& tr) {
  CsvWriter w(os);
  const int d = static_cast<int>(tr.states.front().size());
  const int n = tr.controls.empty() ? 0 : static_cast<int>(tr.controls.front().size());
  w.header(concat(concat({"t"}, numbered("x", d)), numbered("u", n)));
  for (std::size_t k = 0; k < tr.times.size(); ++k) {
    w.cell(tr.times[k]).cells(tr.states[k]);
    if (k < tr.controls.size()) w.cells(tr.controls[k]);
    else w.cells(Vec::Constant(n, std::nan("")));
    w.end();
  }
}

/// i, j, mass for entries above `floor`.
inline void write_plan(std::ostream& os, const Mat& coupling, double floor = 0.0) {
  CsvWriter w(os);
  w.header({"i", "j", "mass"});
  for (Eigen::Index i = 0; i < coupling.rows(); ++i)
    for (Eigen::Index j = 0; j < coupling.cols(); ++j)
      if (coupling(i, j) > floor) {
        w.cell(static_cast<long>(i)).cell(static_cast<long>(j)).cell(coupling(i, j));
        w.end();
      }
}

/// One row per (half level, cell): t, x1..xd, rho, m1..mn, u1..un. rho and m are
/// densities (mass / cell volume) at t_{k+1/2}; rho averages the two adjacent levels.
inline void write_bb_fields(std::ostream& os, const DensityMomentumPath& path, const SpaceTimeGrid& grid,
                            const GridFeedback* fb = nullptr) {
  CsvWriter w(os);
  const int d = grid.dim(), n = path.channels();
  w.header(concat(concat(concat(concat({"t"}, numbered("x", d)), {"rho"}), numbered("m", n)), numbered("u", n)));
  const double vol = grid.volume();
  for (int k = 0; k < grid.nt(); ++k)
    for (int c = 0; c < grid.cells(); ++c) {
      w.cell(grid.half_time(k)).cells(grid.center(c));
      w.cell(0.5 * (path.rho[k](c) + path.rho[k + 1](c)) / vol);
      for (int i = 0; i < n; ++i) w.cell(path.m[i][k](c) / vol);
      for (int i = 0; i < n; ++i) w.cell(fb ? fb->u[i][k](c) : std::nan(""));
      w.end();
    }
}

/// particle_id, t, x1..xd, u1..un, weight; u is nan on each particle's last row.
inline void write_ensemble(std::ostream& os, const ParticleEnsemble& ens) {
  CsvWriter w(os);
  const int d = ens.dim();
  const int n = ens.controls.empty() || ens.controls.front().empty() ? 0
                                                                     : static_cast<int>(ens.controls.front().front().size());
  w.header(concat(concat(concat({"particle_id", "t"}, numbered("x", d)), numbered("u", n)), {"weight"}));
  for (int p = 0; p < ens.size(); ++p)
    for (std::size_t k = 0; k < ens.times.size(); ++k) {
      w.cell(p).cell(ens.times[k]).cells(ens.states[p][k]);
      if (k < ens.controls[p].size()) w.cells(ens.controls[p][k]);
      else w.cells(Vec::Constant(n, std::nan("")));
      w.cell(ens.weights(p));
      w.end();
    }
}

/// t, x1..xd, V for every level and cell.
inline void write_value_grid(std::ostream& os, const ValueGrid& V) {
  CsvWriter w(os);
  const SpaceTimeGrid& g = V.grid;
  w.header(concat(concat({"t"}, numbered("x", g.dim())), {"V"}));
  for (int k = 0; k <= g.nt(); ++k)
    for (int c = 0; c < g.cells(); ++c) {
      w.cell(g.time(k)).cells(g.center(c)).cell(V.V(k, c));
      w.end();
    }
}

/// Opens `path` for writing or throws.
inline std::ofstream open_output(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open " + path + " for writing");
  return f;
}

/// Points of a CSV file with one sample per row; an optional last column named
/// "weight" in the header supplies masses. Header is required.
inline DiscreteMeasure read_samples(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw InvalidMeasure(path + ": empty file");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
      if (ch == ',') {
        out.push_back(cur);
        cur.clear();
      } else if (ch != '\r') {
        cur += ch;
      }
    }
    out.push_back(cur);
    return out;
  };
  const std::vector<std::string> head = split(line);
  const bool weighted = !head.empty() && head.back() == "weight";
  const int d = static_cast<int>(head.size()) - (weighted ? 1 : 0);
  if (d < 1) throw InvalidMeasure(path + ": no coordinate columns");
  DiscreteMeasure m;
  std::vector<double> w;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cols = split(line);
    if (static_cast<int>(cols.size()) != static_cast<int>(head.size()))
      throw InvalidMeasure(path + ": row " + std::to_string(row) + " has the wrong number of columns");
    Vec x(d);
    try {
      for (int a = 0; a < d; ++a) x(a) = std::stod(cols[a]);
      w.push_back(weighted ? std::stod(cols.back()) : 1.0);
    } catch (const std::exception&) {
      throw InvalidMeasure(path + ": row " + std::to_string(row) + " is not numeric");
    }
    m.points.push_back(std::move(x));
  }
  if (m.points.empty()) throw InvalidMeasure(path + ": no samples");
  m.weights = Eigen::Map<Vec>(w.data(), static_cast<Eigen::Index>(w.size()));
  const double s = m.weights.sum();
  if (!(s > 0.0)) throw InvalidMeasure(path + ": weights sum to zero");
  m.weights /= s;
  m.validate(1e-9);
  return m;
}

}  // namespace ctrlot::io
