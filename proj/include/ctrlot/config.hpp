#pragma once

// Versioned JSON experiment configuration (schema version 1). Every field error
// names its JSON path.

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctrlot/dynamic_ot.hpp"
#include "ctrlot/errors.hpp"
#include "ctrlot/grid.hpp"
#include "ctrlot/io.hpp"
#include "ctrlot/linalg.hpp"
#include "ctrlot/measures.hpp"
#include "ctrlot/point_cost.hpp"
#include "ctrlot/systems.hpp"

namespace ctrlot {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

namespace cfg {

inline std::string join(const std::string& path, const std::string& key) { return path + "." + key; }
inline std::string join(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

inline void only_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw SchemaError(path, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw SchemaError(join(path, it.key()), "unknown field");
  }
}

inline double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw SchemaError(path, "expected a number");
  return j.get<double>();
}

inline double number(const json& parent, const std::string& path, const char* key, double fallback) {
  return parent.contains(key) ? number(parent.at(key), join(path, key)) : fallback;
}

inline double positive(const json& parent, const std::string& path, const char* key, double fallback) {
  const double v = number(parent, path, key, fallback);
  if (!(v > 0.0)) throw SchemaError(join(path, key), "must be positive");
  return v;
}

inline long integer(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw SchemaError(path, "expected an integer");
  return j.get<long>();
}

inline long integer(const json& parent, const std::string& path, const char* key, long fallback, long min = 0) {
  const long v = parent.contains(key) ? integer(parent.at(key), join(path, key)) : fallback;
  if (v < min) throw SchemaError(join(path, key), "must be at least " + std::to_string(min));
  return v;
}

inline std::string string(const json& parent, const std::string& path, const char* key,
                          std::optional<std::string> fallback = std::nullopt) {
  if (!parent.contains(key)) {
    if (fallback) return *fallback;
    throw SchemaError(join(path, key), "required field missing");
  }
  if (!parent.at(key).is_string()) throw SchemaError(join(path, key), "expected a string");
  return parent.at(key).get<std::string>();
}

inline const json& required(const json& parent, const std::string& path, const char* key) {
  if (!parent.contains(key)) throw SchemaError(join(path, key), "required field missing");
  return parent.at(key);
}

inline Vec vector(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw SchemaError(path, "expected a non-empty array of numbers");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = number(j[i], join(path, i));
  return v;
}

/// A matrix is an array of equal-length rows.
inline Mat matrix(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw SchemaError(path, "expected an array of rows");
  const Vec first = vector(j[0], join(path, std::size_t{0}));
  Mat M(static_cast<Eigen::Index>(j.size()), first.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const Vec r = vector(j[i], join(path, i));
    if (r.size() != first.size()) throw SchemaError(join(path, i), "row length differs from the first row");
    M.row(static_cast<Eigen::Index>(i)) = r.transpose();
  }
  return M;
}

inline json to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}
inline json to_json(const Mat& M) {
  json a = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) a.push_back(to_json(Vec(M.row(i).transpose())));
  return a;
}

}  // namespace cfg

struct SystemSpec {
  std::string preset = "single_integrator";
  int dim = 1;
  Mat A, B;

  ControlAffineSystem build() const {
    if (preset == "single_integrator") return single_integrator(dim);
    if (preset == "double_integrator") return double_integrator();
    if (preset == "heisenberg") return heisenberg();
    if (preset == "unicycle") return unicycle();
    return ControlAffineSystem::lti(A, B);
  }
};

struct CostSpec {
  std::string kind = "kinetic";
  Vec weights;  // kinetic; empty means unit
  Mat Q, R;     // quadratic

  RunningCost build(int d, int n) const {
    if (kind == "quadratic") {
      RunningCost c = RunningCost::quadratic(Q, R);
      c.validate(d, n);
      return c;
    }
    RunningCost c = weights.size() ? RunningCost::kinetic(weights) : RunningCost::kinetic(n, 1.0);
    c.validate(d, n);
    return c;
  }
};

struct MeasureSpec {
  std::string type = "gaussian";  // gaussian | points | file
  Vec mean;
  Mat cov;
  int samples = 200;
  std::string sampling = "random";  // random | quantile
  std::vector<Vec> points;
  Vec weights;
  std::string path;

  Gaussian gaussian() const {
    if (type != "gaussian") throw InvalidMeasure("measure is not a gaussian");
    return {mean, cov};
  }

  /// Samples restricted to the box when one is given.
  DiscreteMeasure build(std::uint64_t seed, const Vec* lo = nullptr, const Vec* hi = nullptr) const {
    if (type == "points") {
      DiscreteMeasure m;
      m.points = points;
      m.weights = weights.size() ? Vec(weights / weights.sum()) : Vec::Constant(points.size(), 1.0 / points.size());
      m.validate(1e-9);
      return m;
    }
    if (type == "file") return io::read_samples(path);
    const Gaussian g = gaussian();
    if (sampling == "quantile") {
      const double a = lo ? (*lo)(0) : g.mean(0) - 8.0 * std::sqrt(g.cov(0, 0));
      const double b = hi ? (*hi)(0) : g.mean(0) + 8.0 * std::sqrt(g.cov(0, 0));
      return DiscreteMeasure::uniform(gaussian_quantiles(g, samples, a, b));
    }
    return DiscreteMeasure::uniform(sample_gaussian(g, samples, seed, lo, hi));
  }
};

struct GridSpec {
  Vec lo, hi;
  std::vector<int> cells;
  int nt = 32;

  SpaceTimeGrid build(double T) const { return SpaceTimeGrid(lo, hi, cells, nt, T); }
};

struct ExperimentConfig {
  std::string name = "experiment";
  SystemSpec system;
  CostSpec cost;
  double horizon = 1.0;
  std::optional<MeasureSpec> source, target;
  std::optional<Vec> x, y;  // point pair for single point costs
  std::optional<GridSpec> grid;

  std::uint64_t seed = 0;
  unsigned threads = 1;
  TranscriptionParams transcription;
  std::vector<double> entropic_eps{1.0, 0.3, 0.1, 0.03};  // multiples of mean(C)
  BBParams bb;
  double hjb_cfl = 0.9;
  int particles = 1000;
  int sim_steps = 256;
  double bandwidth = 0.0;   // 0: two grid cells
  double perturbation = 1e-3;
  std::string output = "out";

  json raw;             // validated input document
  std::uint64_t hash = 0;

  bool has_measures() const { return source.has_value() && target.has_value(); }
  const GridSpec& grid_spec() const {
    if (!grid) throw SchemaError("$.grid", "required for this command");
    return *grid;
  }
};

namespace cfg {

inline MeasureSpec parse_measure(const json& j, const std::string& path, int d) {
  only_keys(j, path, {"type", "mean", "cov", "samples", "sampling", "points", "weights", "path"});
  MeasureSpec m;
  m.type = string(j, path, "type");
  if (m.type == "gaussian") {
    m.mean = vector(required(j, path, "mean"), join(path, "mean"));
    m.cov = matrix(required(j, path, "cov"), join(path, "cov"));
    if (m.mean.size() != d) throw SchemaError(join(path, "mean"), "dimension differs from the system");
    if (m.cov.rows() != d || m.cov.cols() != d) throw SchemaError(join(path, "cov"), "must be d x d");
    if (!is_symmetric(m.cov, 1e-12) || !is_pd(m.cov)) throw SchemaError(join(path, "cov"), "must be symmetric positive definite");
    m.samples = static_cast<int>(integer(j, path, "samples", 200, 1));
    m.sampling = string(j, path, "sampling", std::string("random"));
    if (m.sampling != "random" && m.sampling != "quantile")
      throw SchemaError(join(path, "sampling"), "must be \"random\" or \"quantile\"");
    if (m.sampling == "quantile" && d != 1) throw SchemaError(join(path, "sampling"), "quantile sampling is one-dimensional");
  } else if (m.type == "points") {
    const json& pts = required(j, path, "points");
    if (!pts.is_array() || pts.empty()) throw SchemaError(join(path, "points"), "expected a non-empty array");
    for (std::size_t i = 0; i < pts.size(); ++i) {
      Vec p = vector(pts[i], join(join(path, "points"), i));
      if (p.size() != d) throw SchemaError(join(join(path, "points"), i), "dimension differs from the system");
      m.points.push_back(std::move(p));
    }
    if (j.contains("weights")) {
      m.weights = vector(j.at("weights"), join(path, "weights"));
      if (m.weights.size() != static_cast<Eigen::Index>(m.points.size()))
        throw SchemaError(join(path, "weights"), "one weight per point required");
      if ((m.weights.array() < 0.0).any() || !(m.weights.sum() > 0.0))
        throw SchemaError(join(path, "weights"), "must be nonnegative with positive sum");
    }
  } else if (m.type == "file") {
    m.path = string(j, path, "path");
  } else {
    throw SchemaError(join(path, "type"), "must be \"gaussian\", \"points\" or \"file\"");
  }
  return m;
}

}  // namespace cfg

inline ExperimentConfig parse_config(const json& j) {
  using namespace cfg;
  const std::string root = "$";
  only_keys(j, root, {"version", "name", "system", "cost", "horizon", "source", "target", "points", "grid", "solver",
                      "output"});
  ExperimentConfig c;
  const long version = integer(required(j, root, "version"), "$.version");
  if (version != kSchemaVersion) throw SchemaError("$.version", "unsupported version " + std::to_string(version));
  c.name = string(j, root, "name", std::string("experiment"));

  const json& js = required(j, root, "system");
  only_keys(js, "$.system", {"preset", "dim", "A", "B"});
  c.system.preset = string(js, "$.system", "preset");
  const std::string& pr = c.system.preset;
  if (pr == "single_integrator") {
    c.system.dim = static_cast<int>(integer(js, "$.system", "dim", 1, 1));
  } else if (pr == "lti") {
    c.system.A = matrix(required(js, "$.system", "A"), "$.system.A");
    c.system.B = matrix(required(js, "$.system", "B"), "$.system.B");
    if (c.system.A.rows() != c.system.A.cols()) throw SchemaError("$.system.A", "must be square");
    if (c.system.B.rows() != c.system.A.rows()) throw SchemaError("$.system.B", "row count differs from A");
    c.system.dim = static_cast<int>(c.system.A.rows());
  } else if (pr == "double_integrator" || pr == "heisenberg" || pr == "unicycle") {
    if (js.contains("dim")) throw SchemaError("$.system.dim", "fixed by the preset");
    c.system.dim = pr == "double_integrator" ? 2 : 3;
  } else {
    throw SchemaError("$.system.preset", "unknown preset \"" + pr + "\"");
  }
  const int d = c.system.dim;
  const int n = c.system.build().inputs();

  if (j.contains("cost")) {
    const json& jc = j.at("cost");
    only_keys(jc, "$.cost", {"kind", "weights", "Q", "R"});
    c.cost.kind = string(jc, "$.cost", "kind");
    if (c.cost.kind == "kinetic") {
      if (jc.contains("weights")) {
        c.cost.weights = vector(jc.at("weights"), "$.cost.weights");
        if (c.cost.weights.size() != n) throw SchemaError("$.cost.weights", "one weight per control required");
        if ((c.cost.weights.array() <= 0.0).any()) throw SchemaError("$.cost.weights", "must be positive");
      }
    } else if (c.cost.kind == "quadratic") {
      c.cost.Q = jc.contains("Q") ? matrix(jc.at("Q"), "$.cost.Q") : Mat::Zero(d, d);
      c.cost.R = matrix(required(jc, "$.cost", "R"), "$.cost.R");
      if (c.cost.Q.rows() != d || c.cost.Q.cols() != d) throw SchemaError("$.cost.Q", "must be d x d");
      if (c.cost.R.rows() != n || c.cost.R.cols() != n) throw SchemaError("$.cost.R", "must be n x n");
    } else {
      throw SchemaError("$.cost.kind", "must be \"kinetic\" or \"quadratic\"");
    }
  }
  c.horizon = positive(j, root, "horizon", 1.0);

  if (j.contains("source")) c.source = parse_measure(j.at("source"), "$.source", d);
  if (j.contains("target")) c.target = parse_measure(j.at("target"), "$.target", d);
  if (c.source.has_value() != c.target.has_value())
    throw SchemaError(c.source ? "$.target" : "$.source", "source and target must be given together");

  if (j.contains("points")) {
    const json& jp = j.at("points");
    only_keys(jp, "$.points", {"x", "y"});
    c.x = vector(required(jp, "$.points", "x"), "$.points.x");
    c.y = vector(required(jp, "$.points", "y"), "$.points.y");
    if (c.x->size() != d) throw SchemaError("$.points.x", "dimension differs from the system");
    if (c.y->size() != d) throw SchemaError("$.points.y", "dimension differs from the system");
  }

  if (j.contains("grid")) {
    const json& jg = j.at("grid");
    only_keys(jg, "$.grid", {"lo", "hi", "cells", "nt"});
    GridSpec g;
    g.lo = vector(required(jg, "$.grid", "lo"), "$.grid.lo");
    g.hi = vector(required(jg, "$.grid", "hi"), "$.grid.hi");
    const json& cells = required(jg, "$.grid", "cells");
    if (!cells.is_array()) throw SchemaError("$.grid.cells", "expected an array of integers");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const long v = integer(cells[i], join(std::string("$.grid.cells"), i));
      if (v < 4) throw SchemaError(join(std::string("$.grid.cells"), i), "need at least 4 cells");
      g.cells.push_back(static_cast<int>(v));
    }
    if (g.lo.size() != d || g.hi.size() != d || static_cast<int>(g.cells.size()) != d)
      throw SchemaError("$.grid", "lo, hi and cells must match the state dimension");
    for (int a = 0; a < d; ++a)
      if (!(g.hi(a) > g.lo(a))) throw SchemaError("$.grid.hi", "must exceed lo on every axis");
    g.nt = static_cast<int>(integer(jg, "$.grid", "nt", 32, 1));
    c.grid = g;
  }

  if (j.contains("solver")) {
    const json& jv = j.at("solver");
    const std::string sp = "$.solver";
    only_keys(jv, sp, {"seed", "threads", "transcription", "entropic_eps", "bb", "hjb", "feedback", "interpolation"});
    c.seed = static_cast<std::uint64_t>(integer(jv, sp, "seed", 0, 0));
    c.threads = static_cast<unsigned>(integer(jv, sp, "threads", 1, 0));
    if (jv.contains("transcription")) {
      const json& jt = jv.at("transcription");
      const std::string tp = sp + ".transcription";
      only_keys(jt, tp, {"N", "restarts", "endpoint_tol", "gradient_tol", "max_iters"});
      c.transcription.N = static_cast<int>(integer(jt, tp, "N", c.transcription.N, 8));
      c.transcription.restarts = static_cast<int>(integer(jt, tp, "restarts", c.transcription.restarts, 1));
      c.transcription.endpoint_tol = positive(jt, tp, "endpoint_tol", c.transcription.endpoint_tol);
      c.transcription.gradient_tol = positive(jt, tp, "gradient_tol", c.transcription.gradient_tol);
      c.transcription.max_iters = static_cast<int>(integer(jt, tp, "max_iters", c.transcription.max_iters, 1));
    }
    if (jv.contains("entropic_eps")) {
      const Vec e = vector(jv.at("entropic_eps"), sp + ".entropic_eps");
      if ((e.array() <= 0.0).any()) throw SchemaError(sp + ".entropic_eps", "must be positive");
      c.entropic_eps.assign(e.data(), e.data() + e.size());
    }
    if (jv.contains("bb")) {
      const json& jb = jv.at("bb");
      const std::string bp = sp + ".bb";
      only_keys(jb, bp, {"gamma", "max_iters", "residual_tol", "value_tol", "linear_solver"});
      c.bb.gamma = positive(jb, bp, "gamma", c.bb.gamma);
      c.bb.max_iters = static_cast<int>(integer(jb, bp, "max_iters", c.bb.max_iters, 1));
      c.bb.residual_tol = positive(jb, bp, "residual_tol", c.bb.residual_tol);
      c.bb.value_tol = positive(jb, bp, "value_tol", c.bb.value_tol);
      const std::string ls = string(jb, bp, "linear_solver", std::string("cholesky"));
      if (ls == "cg") c.bb.linear_solver = LinearSolver::cg;
      else if (ls == "cholesky") c.bb.linear_solver = LinearSolver::cholesky;
      else throw SchemaError(bp + ".linear_solver", "must be \"cg\" or \"cholesky\"");
    }
    if (jv.contains("hjb")) {
      only_keys(jv.at("hjb"), sp + ".hjb", {"cfl"});
      c.hjb_cfl = positive(jv.at("hjb"), sp + ".hjb", "cfl", c.hjb_cfl);
      if (c.hjb_cfl > 1.0) throw SchemaError(sp + ".hjb.cfl", "must not exceed 1");
    }
    if (jv.contains("feedback")) {
      const json& jf = jv.at("feedback");
      only_keys(jf, sp + ".feedback", {"particles", "steps", "perturbation"});
      c.particles = static_cast<int>(integer(jf, sp + ".feedback", "particles", c.particles, 1));
      c.sim_steps = static_cast<int>(integer(jf, sp + ".feedback", "steps", c.sim_steps, 1));
      c.perturbation = positive(jf, sp + ".feedback", "perturbation", c.perturbation);
    }
    if (jv.contains("interpolation")) {
      only_keys(jv.at("interpolation"), sp + ".interpolation", {"bandwidth"});
      c.bandwidth = number(jv.at("interpolation"), sp + ".interpolation", "bandwidth", 0.0);
      if (c.bandwidth < 0.0) throw SchemaError(sp + ".interpolation.bandwidth", "must be nonnegative");
    }
  }
  c.bb.threads = c.threads;
  c.transcription.seed = c.seed;
  c.output = string(j, root, "output", std::string("out"));

  c.raw = j;
  const std::string canon = j.dump();
  c.hash = fnv1a(canon.data(), canon.size());
  return c;
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError("$", origin + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw SchemaError("$", "cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

inline std::string hash_string(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace ctrlot
