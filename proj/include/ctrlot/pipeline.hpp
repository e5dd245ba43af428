#pragma once

// End-to-end experiment runners behind the command line tool. Each runner
// consumes a validated config, writes its CSV artifacts into `out` (when
// non-empty) and returns a JSON report.

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "ctrlot/config.hpp"
#include "ctrlot/dynamic_ot.hpp"
#include "ctrlot/errors.hpp"
#include "ctrlot/grid.hpp"
#include "ctrlot/hjb.hpp"
#include "ctrlot/interpolation.hpp"
#include "ctrlot/io.hpp"
#include "ctrlot/measures.hpp"
#include "ctrlot/point_cost.hpp"
#include "ctrlot/static_ot.hpp"
#include "ctrlot/systems.hpp"

namespace ctrlot {

inline constexpr const char* kVersion = "1.0.0";

/// One named assumption with its verdict and the numbers behind it.
struct Check {
  std::string name;
  bool pass = false;
  json evidence;
};

struct Checklist {
  std::vector<Check> items;
  bool all_pass() const {
    for (const auto& c : items)
      if (!c.pass) return false;
    return true;
  }
  json to_json() const {
    json a = json::array();
    for (const auto& c : items) a.push_back({{"name", c.name}, {"pass", c.pass}, {"evidence", c.evidence}});
    return a;
  }
};

struct RunReport {
  json values = json::object();
  json diagnostics = json::object();
  json provenance = json::object();
  bool converged = true;

  json to_json() const {
    return {{"values", values}, {"diagnostics", diagnostics}, {"provenance", provenance}, {"converged", converged}};
  }
};

namespace pipeline {

inline json provenance(const ExperimentConfig& c, const std::string& command) {
  return {{"command", command},
          {"name", c.name},
          {"config_hash", hash_string(c.hash)},
          {"seed", c.seed},
          {"schema_version", kSchemaVersion},
          {"versions",
           {{"ctrlot", kVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)}}}};
}

inline void write_file(const std::string& out, const std::string& name, const std::function<void(std::ostream&)>& body) {
  if (out.empty()) return;
  std::filesystem::create_directories(out);
  std::ofstream f = io::open_output((std::filesystem::path(out) / name).string());
  body(f);
}

inline void write_report(const std::string& out, const RunReport& r, const ExperimentConfig& c) {
  write_file(out, "report.json", [&](std::ostream& os) { os << r.to_json().dump(2) << '\n'; });
  write_file(out, "config.json", [&](std::ostream& os) { os << c.raw.dump(2) << '\n'; });
}

/// Test points for the growth and bracket checks: the origin plus seeded points on spheres.
inline std::vector<Vec> probe_points(int d, double radius, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::vector<Vec> out;
  for (int k = 0; k < count; ++k) {
    Vec x(d);
    for (int a = 0; a < d; ++a) x(a) = n01(rng);
    out.push_back(radius * x.normalized());
  }
  return out;
}

struct Samples {
  DiscreteMeasure source, target;
};

inline Samples samples(const ExperimentConfig& c) {
  if (!c.has_measures()) throw SchemaError("$.source", "source and target measures are required");
  const Vec* lo = c.grid ? &c.grid->lo : nullptr;
  const Vec* hi = c.grid ? &c.grid->hi : nullptr;
  return {c.source->build(mix_seed(c.seed, 1), lo, hi), c.target->build(mix_seed(c.seed, 2), lo, hi)};
}

inline Raster raster(const MeasureSpec& m, const SpaceTimeGrid& g, std::uint64_t seed) {
  if (m.type == "gaussian") return rasterize_gaussian(g, m.gaussian());
  return rasterize_samples(g, m.build(seed, &g.lo(), &g.hi()));
}

struct Kantorovich {
  Samples s;
  CostMatrix costs;
  ExactResult exact;
  double c_entropic = 0.0;
  json entropic = json::array();
};

inline Kantorovich kantorovich(const ExperimentConfig& c, const ControlAffineSystem& sys, const RunningCost& cost,
                               bool keep_trajectories) {
  Kantorovich k;
  k.s = samples(c);
  const PointCostSolver solver(sys, cost, c.horizon, c.transcription);
  CostMatrixOptions o;
  o.keep_trajectories = keep_trajectories;
  o.threads = c.threads;
  o.seed = c.seed;
  k.costs = cost_matrix(solver, k.s.source.points, k.s.target.points, o);
  k.exact = solve_exact(k.costs.values, k.s.source.weights, k.s.target.weights);
  const double mean = k.costs.values.mean();
  for (double e : c.entropic_eps) {
    const EntropicResult r = solve_entropic(k.costs.values, k.s.source.weights, k.s.target.weights, e * mean);
    k.entropic.push_back({{"eps", e * mean}, {"value", r.plan.value}, {"converged", r.converged},
                          {"marginal_error", r.marginal_error}});
    k.c_entropic = r.plan.value;
  }
  return k;
}

}  // namespace pipeline

// ---------------------------------------------------------------------------

inline Checklist validate_assumptions(const ExperimentConfig& c) {
  Checklist out;
  const ControlAffineSystem sys = c.system.build();
  const int d = sys.dim(), n = sys.inputs();

  out.items.push_back({"control set closed and convex", true, {{"U", "R^" + std::to_string(n)}}});

  {
    Check k{"running cost continuous, coercive and convex in u", true, json::object()};
    if (c.cost.kind == "quadratic") {
      const double r = is_symmetric(c.cost.R, 1e-12) ? min_eigenvalue(c.cost.R) : -1.0;
      const double q = is_symmetric(c.cost.Q, 1e-12) ? min_eigenvalue(c.cost.Q) : -1.0;
      k.pass = r > 0.0 && q >= -1e-12;
      k.evidence = {{"kind", "quadratic"}, {"min_eig_R", r}, {"min_eig_Q", q}, {"p", 2}};
    } else {
      const Vec w = c.cost.weights.size() ? c.cost.weights : Vec::Constant(n, 1.0);
      k.pass = (w.array() > 0.0).all();
      k.evidence = {{"kind", "kinetic"}, {"alpha", w.minCoeff()}, {"beta", 0.0}, {"p", 2}};
    }
    out.items.push_back(k);
  }

  {
    // |f_i(x)| <= M (|x| + 1): the constant measured on spheres of growing radius must level off.
    Check k{"vector fields C1 with sublinear growth", true, json::object()};
    std::vector<VectorField> fields = sys.controls();
    if (!sys.is_driftless()) fields.insert(fields.begin(), sys.drift());
    double jac = 0.0;
    json radii = json::array();
    double m10 = 0.0, m100 = 0.0;
    for (double R : {1.0, 10.0, 100.0}) {
      const auto pts = pipeline::probe_points(d, R, 64, mix_seed(c.seed, 17, static_cast<std::uint64_t>(R)));
      double M = 0.0;
      for (const auto& f : fields) {
        M = std::max(M, growth_constant(f, pts));
        if (f.has_analytic_jacobian() && R == 1.0) jac = std::max(jac, jacobian_consistency(f, pts));
      }
      radii.push_back({{"radius", R}, {"M", M}});
      if (R == 10.0) m10 = M;
      if (R == 100.0) m100 = M;
    }
    k.pass = jac <= 1e-5 && m100 <= 1.5 * m10 + 1e-12;
    k.evidence = {{"growth", radii}, {"jacobian_consistency", jac}};
    out.items.push_back(k);
  }

  if (sys.is_driftless()) {
    Check k{"bracket generating (Hormander)", true, json::object()};
    const auto pts = pipeline::probe_points(d, 1.0, 16, mix_seed(c.seed, 23));
    std::vector<Vec> all{Vec::Zero(d)};
    all.insert(all.end(), pts.begin(), pts.end());
    int step = -1;
    json ranks = json::array();
    for (int r = 0; r <= 3 && step < 0; ++r) {
      int worst = d;
      for (const auto& x : all) worst = std::min(worst, bracket_rank(sys, r, x));
      ranks.push_back({{"r", r}, {"min_rank", worst}});
      if (worst == d) step = r;
    }
    k.pass = step >= 0;
    k.evidence = {{"ranks", ranks}, {"step", step}, {"two_generating", step >= 0 && step <= 1}};
    out.items.push_back(k);
  } else if (sys.is_lti()) {
    const int r = kalman_rank(sys.A(), sys.B());
    out.items.push_back({"Kalman rank condition", r == d, {{"rank", r}, {"dim", d}}});
  } else {
    const int r = accessibility_rank(sys, d, Vec::Zero(d));
    out.items.push_back({"accessibility rank at the origin", r == d, {{"rank", r}, {"dim", d}}});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct RunContext {
  std::string out;  // artifact directory; empty writes nothing
};

inline RunReport run_cost(const ExperimentConfig& c, const RunContext& ctx = {}) {
  const ControlAffineSystem sys = c.system.build();
  const RunningCost cost = c.cost.build(sys.dim(), sys.inputs());
  RunReport r;
  r.provenance = pipeline::provenance(c, "cost");
  const PointCostSolver solver(sys, cost, c.horizon, c.transcription);
  if (c.x && c.y) {
    CostResult res;
    try {
      res = solver.solve(*c.x, *c.y, c.seed);
    } catch (const NonConvergence& e) {
      res = e.best();
    }
    r.converged = res.converged;
    r.values = {{"c", res.value}};
    r.diagnostics = {{"method", res.method},
                     {"endpoint_error", res.endpoint_error},
                     {"gradient_norm", res.gradient_norm},
                     {"multistart_spread", res.multistart_spread},
                     {"restart", res.restart},
                     {"warnings", res.warnings}};
    pipeline::write_file(ctx.out, "trajectory.csv", [&](std::ostream& os) { io::write_trajectory(os, res.trajectory); });
  } else {
    const pipeline::Samples s = pipeline::samples(c);
    CostMatrixOptions o;
    o.threads = c.threads;
    o.seed = c.seed;
    const CostMatrix cm = cost_matrix(solver, s.source.points, s.target.points, o);
    r.converged = cm.defects.empty();
    r.values = {{"mean_cost", cm.values.mean()}};
    r.diagnostics = {{"method", solver.closed_form() ? "closed_form" : "transcription"},
                     {"rows", cm.values.rows()},
                     {"cols", cm.values.cols()},
                     {"defects", cm.defects.size()}};
    pipeline::write_file(ctx.out, "cost_matrix.csv", [&](std::ostream& os) { io::write_cost_matrix(os, cm.values); });
  }
  pipeline::write_report(ctx.out, r, c);
  return r;
}

inline RunReport run_kantorovich(const ExperimentConfig& c, const RunContext& ctx = {}) {
  const ControlAffineSystem sys = c.system.build();
  const RunningCost cost = c.cost.build(sys.dim(), sys.inputs());
  const pipeline::Kantorovich k = pipeline::kantorovich(c, sys, cost, false);
  RunReport r;
  r.provenance = pipeline::provenance(c, "kantorovich");
  r.values = {{"c_kan_exact", k.exact.plan.value}, {"c_kan_entropic", k.c_entropic}};
  r.diagnostics = {{"duality_gap", k.exact.duality_gap},
                   {"pivots", k.exact.pivots},
                   {"cost_defects", k.costs.defects.size()},
                   {"entropic", k.entropic},
                   {"marginal_error", k.exact.plan.marginal_error(k.s.source.weights, k.s.target.weights)}};
  r.converged = k.costs.defects.empty();
  pipeline::write_file(ctx.out, "cost_matrix.csv", [&](std::ostream& os) { io::write_cost_matrix(os, k.costs.values); });
  pipeline::write_file(ctx.out, "plan.csv", [&](std::ostream& os) { io::write_plan(os, k.exact.plan.coupling); });
  pipeline::write_report(ctx.out, r, c);
  return r;
}

inline RunReport run_bb(const ExperimentConfig& c, const RunContext& ctx = {}) {
  const ControlAffineSystem sys = c.system.build();
  const RunningCost cost = c.cost.build(sys.dim(), sys.inputs());
  const SpaceTimeGrid g = c.grid_spec().build(c.horizon);
  if (!c.has_measures()) throw SchemaError("$.source", "source and target measures are required");
  const Raster r0 = pipeline::raster(*c.source, g, mix_seed(c.seed, 1));
  const Raster r1 = pipeline::raster(*c.target, g, mix_seed(c.seed, 2));
  const BBSolution s = solve_bb(sys, cost, g, r0.mass, r1.mass, c.bb);
  const GridFeedback fb = recover_feedback(s.path, g, 1e-6);
  RunReport r;
  r.provenance = pipeline::provenance(c, "bb");
  r.converged = s.converged;
  r.values = {{"c_bb", s.value}};
  r.diagnostics = {{"residual", s.residual},
                   {"iterations", s.iterations},
                   {"mass_error", s.mass_error},
                   {"lost_mass", {r0.lost_mass, r1.lost_mass}},
                   {"below_floor_mass", fb.below_floor_mass}};
  pipeline::write_file(ctx.out, "bb_fields.csv", [&](std::ostream& os) { io::write_bb_fields(os, s.path, g, &fb); });
  pipeline::write_report(ctx.out, r, c);
  return r;
}

inline RunReport run_interpolate(const ExperimentConfig& c, const RunContext& ctx = {}) {
  const ControlAffineSystem sys = c.system.build();
  const RunningCost cost = c.cost.build(sys.dim(), sys.inputs());
  const pipeline::Kantorovich k = pipeline::kantorovich(c, sys, cost, true);
  const Interpolation in = displacement_interpolation(k.exact.plan, selector_from(k.costs));
  const ParticleEnsemble& ens = in.ensemble;
  double bw = c.bandwidth;
  if (!(bw > 0.0)) {
    if (c.grid) {
      const SpaceTimeGrid g = c.grid->build(c.horizon);
      for (int a = 0; a < g.dim(); ++a) bw = std::max(bw, 2.0 * g.h(a));
    } else {
      bw = 0.25;
    }
  }
  const Purification pur = purify(ens, cost, bw);
  const double weak = weak_residual(ens, sys, bump_battery(ens));
  const MomentEnvelope env = moment_envelope(ens, sys, 2.0);
  // endpoint costs come from the cost matrix, so the gap measures selector quality
  std::vector<double> ends;
  for (const auto& [i, j] : in.pairs) ends.push_back(k.costs.values(i, j));
  const GapReport gap = optimality_gap(ens, cost, ends);

  RunReport r;
  r.provenance = pipeline::provenance(c, "interpolate");
  r.converged = k.costs.defects.empty();
  r.values = {{"c_kan_exact", k.exact.plan.value}, {"ensemble_cost", ensemble_cost(ens, cost)}};
  r.diagnostics = {{"particles", ens.size()},
                   {"dropped_mass", in.dropped_mass},
                   {"purified_cost", pur.purified_cost},
                   {"raw_cost", pur.raw_cost},
                   {"jensen_holds", pur.purified_cost <= pur.raw_cost + 1e-10},
                   {"bandwidth", bw},
                   {"weak_residual", weak},
                   {"moments", env.moments},
                   {"envelope", env.envelope},
                   {"envelope_holds", env.holds},
                   {"growth_M", env.M},
                   {"max_gap", gap.max_gap},
                   {"mean_gap", gap.mean_gap}};
  pipeline::write_file(ctx.out, "ensemble.csv", [&](std::ostream& os) { io::write_ensemble(os, ens); });
  pipeline::write_report(ctx.out, r, c);
  return r;
}

/// Kantorovich duals -> initial potential -> grid HJB -> feedback -> closed-loop particles.
/// Needs a driftless system with unit kinetic weights (the grid Hamiltonian is 1/2 |G'p|^2).
inline RunReport run_feedback(const ExperimentConfig& c, const RunContext& ctx = {}) {
  const ControlAffineSystem sys = c.system.build();
  const RunningCost cost = c.cost.build(sys.dim(), sys.inputs());
  if (!sys.is_driftless() || cost.kind != CostKind::kinetic || !(cost.weights.array() == 1.0).all())
    throw UnsupportedSystem("hjb: needs a driftless system with unit kinetic weights");
  const SpaceTimeGrid g = c.grid_spec().build(c.horizon);
  const pipeline::Kantorovich k = pipeline::kantorovich(c, sys, cost, false);

  const PointCostSolver solver(sys, cost, c.horizon, c.transcription);
  const bool cheap = sys.is_lti();
  const CostOracle half = [&](const Vec& a, const Vec& b) -> std::optional<double> {
    if (cheap) return 0.5 * solver.value(a, b);
    try {
      return 0.5 * solver.value(a, b, c.seed);
    } catch (const Error&) {
      return std::nullopt;
    }
  };
  const InitialPotential f = kantorovich_potential(k.exact.duals, k.s.target.points, g, half, 0.5, cheap ? 1 : 4);
  const ValueGrid V = solve_hjb_driftless(sys, f.f, g, c.hjb_cfl, static_cast<int>(c.threads));
  const FeedbackField fb = feedback_from_value(V, sys);
  const MovingStaticSplit split =
      moving_static_split(k.exact.plan.coupling, k.s.source.points, k.s.target.points, default_moving_threshold(g));

  MeasureSpec src = *c.source, tgt = *c.target;
  src.samples = tgt.samples = c.particles;
  if (src.sampling == "quantile") src.sampling = "random";
  if (tgt.sampling == "quantile") tgt.sampling = "random";
  const DiscreteMeasure seeds = src.build(mix_seed(c.seed, 3), &g.lo(), &g.hi());
  const DiscreteMeasure fresh = tgt.build(mix_seed(c.seed, 4), &g.lo(), &g.hi());
  const int steps = ((c.sim_steps + g.nt() - 1) / g.nt()) * g.nt();
  const FeedbackSimulation sim = simulate_feedback(sys, fb, seeds, steps, static_cast<int>(c.threads));
  const DiscreteMeasure landed = terminal_measure(sim);
  const double d0 = sliced_wasserstein(seeds, fresh), d1 = sliced_wasserstein(landed, fresh);

  DiscreteMeasure few;
  const int nf = std::min(20, seeds.size());
  for (int i = 0; i < nf; ++i) few.points.push_back(seeds.points[i]);
  few.weights = Vec::Constant(nf, 1.0 / nf);
  const BranchingReport br =
      uniqueness_diagnostic(sys, as_feedback(fb), few, c.horizon, c.perturbation, steps, &g, 4, c.seed,
                            static_cast<int>(c.threads));

  RunReport r;
  r.provenance = pipeline::provenance(c, "hjb");
  r.values = {{"c_kan_exact", k.exact.plan.value}, {"sw_initial", d0}, {"sw_terminal", d1}, {"sw_ratio", d1 / d0}};
  r.diagnostics = {{"potential_method", f.method},
                   {"potential_failures", f.failures},
                   {"hjb_substeps", V.substeps},
                   {"escaped_fraction", sim.escaped_fraction},
                   {"moving_support_points", split.moving_count},
                   {"static_support_points", split.static_count},
                   {"value_along_flow_error", value_along_flow_error(V, sim)},
                   {"branching_max_ratio", br.max_ratio},
                   {"duplicate_separation", br.duplicate_separation},
                   {"step_halving_drift", br.step_halving_drift}};
  pipeline::write_file(ctx.out, "value.csv", [&](std::ostream& os) { io::write_value_grid(os, V); });
  pipeline::write_file(ctx.out, "branching.json", [&](std::ostream& os) {
    json ratios = json::array();
    for (double x : br.ratios) ratios.push_back(std::isfinite(x) ? json(x) : json(nullptr));
    os << json{{"ratios", ratios},
               {"max_ratio", br.max_ratio},
               {"duplicate_separation", br.duplicate_separation},
               {"step_halving_drift", br.step_halving_drift},
               {"escaped_fraction", br.escaped_fraction}}
              .dump(2)
       << '\n';
  });
  pipeline::write_report(ctx.out, r, c);
  return r;
}

inline RunReport run_equivalence(const ExperimentConfig& c, const RunContext& ctx = {}) {
  const ControlAffineSystem sys = c.system.build();
  const RunningCost cost = c.cost.build(sys.dim(), sys.inputs());
  const pipeline::Kantorovich k = pipeline::kantorovich(c, sys, cost, false);
  RunContext quiet;
  const RunReport bb = run_bb(c, quiet);
  const double ck = k.exact.plan.value, cb = bb.values.at("c_bb").get<double>();
  RunReport r;
  r.provenance = pipeline::provenance(c, "equivalence");
  r.converged = bb.converged && k.costs.defects.empty();
  r.values = {{"c_kan_exact", ck},
              {"c_kan_entropic", k.c_entropic},
              {"c_bb", cb},
              {"relative_gap", std::abs(ck - cb) / std::max(1.0, ck)}};
  r.diagnostics = bb.diagnostics;
  r.diagnostics["duality_gap"] = k.exact.duality_gap;
  r.diagnostics["entropic"] = k.entropic;
  pipeline::write_file(ctx.out, "plan.csv", [&](std::ostream& os) { io::write_plan(os, k.exact.plan.coupling); });
  pipeline::write_report(ctx.out, r, c);
  return r;
}

}  // namespace ctrlot
