#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "ctrlot/interpolation.hpp"
#include "generators.hpp"

using namespace ctrlot;

namespace {

// Solves support pairs on demand and keeps them alive for the selector.
struct LazySelector {
  const PointCostSolver& solver;
  const std::vector<Vec>& X;
  const std::vector<Vec>& Y;
  std::map<std::pair<int, int>, CostResult> cache;

  Selector get() {
    return [this](int i, int j) -> const CostResult* {
      auto it = cache.find({i, j});
      if (it == cache.end()) it = cache.emplace(std::make_pair(i, j), solver.solve(X[i], Y[j])).first;
      return &it->second;
    };
  }
};

TransportPlan plan_of(const Mat& coupling) { return {coupling, 0.0}; }

ParticleEnsemble static_ensemble(const std::vector<Vec>& pts, int K, int n) {
  ParticleEnsemble e;
  e.times = uniform_times(1.0, K);
  e.weights = Vec::Constant(static_cast<Eigen::Index>(pts.size()), 1.0 / pts.size());
  for (const auto& x : pts) {
    e.states.emplace_back(K + 1, x);
    e.controls.emplace_back(K, Vec::Zero(n));
  }
  return e;
}

ParticleEnsemble random_ensemble(gen::Rng& rng, int P, int K, int d, int n) {
  ParticleEnsemble e;
  e.times = uniform_times(1.0, K);
  e.weights = rng.simplex(P);
  for (int p = 0; p < P; ++p) {
    std::vector<Vec> xs, us;
    for (int k = 0; k <= K; ++k) xs.push_back(rng.vec(d, 0.8));
    for (int k = 0; k < K; ++k) us.push_back(rng.vec(n, 2.0));
    e.states.push_back(xs);
    e.controls.push_back(us);
  }
  return e;
}

struct GaussLine {
  ControlAffineSystem sys = single_integrator(1);
  RunningCost cost = RunningCost::kinetic(1);
  std::vector<Vec> X, Y;
  Vec w;
  Mat C;
  ExactResult lp;

  explicit GaussLine(int count) {
    X = gaussian_quantiles({Vec::Constant(1, -1.0), Mat::Constant(1, 1, 0.25)}, count, -4.0, 4.0);
    Y = gaussian_quantiles({Vec::Constant(1, 1.0), Mat::Constant(1, 1, 0.25)}, count, -4.0, 4.0);
    w = Vec::Constant(count, 1.0 / count);
    C = cost_matrix(sys, cost, X, Y, 1.0).values;
    lp = solve_exact(C, w, w);
  }
};

}  // namespace

TEST(Displacement, DiracFollowsTheStraightLine) {
  const ControlAffineSystem sys = single_integrator(2);
  const Vec x = (Vec(2) << 0.2, -0.5).finished(), y = (Vec(2) << 1.1, 0.7).finished();
  const double T = 2.0;
  const CostMatrix cm = cost_matrix(sys, RunningCost::kinetic(2), {x}, {y}, T, {}, {.keep_trajectories = true});
  const Interpolation I = displacement_interpolation(plan_of(Mat::Ones(1, 1)), selector_from(cm));
  ASSERT_EQ(I.ensemble.size(), 1);
  EXPECT_EQ(I.pairs.front(), std::make_pair(0, 0));
  const auto& ens = I.ensemble;
  for (int k = 0; k <= ens.steps(); ++k)
    EXPECT_LT((ens.states[0][k] - (x + ens.times[k] / T * (y - x))).norm(), 1e-10);
  EXPECT_NEAR(ensemble_cost(ens, RunningCost::kinetic(2)), (y - x).squaredNorm() / T, 1e-10);
  EXPECT_LT(ens.resimulation_error(sys), 1e-10);
}

TEST(Displacement, ResamplesOntoRequestedTimes) {
  const ControlAffineSystem sys = single_integrator(1);
  const Vec x = Vec::Constant(1, -0.3), y = Vec::Constant(1, 0.9);
  const CostMatrix cm = cost_matrix(sys, RunningCost::kinetic(1), {x}, {y}, 1.0, {}, {.keep_trajectories = true});
  const auto ts = uniform_times(1.0, 7);
  const Interpolation I = displacement_interpolation(plan_of(Mat::Ones(1, 1)), selector_from(cm), ts);
  ASSERT_EQ(I.ensemble.times.size(), ts.size());
  for (std::size_t k = 0; k < ts.size(); ++k) EXPECT_NEAR(I.ensemble.states[0][k](0), -0.3 + 1.2 * ts[k], 1e-10);
  for (const auto& u : I.ensemble.controls[0]) EXPECT_NEAR(u(0), 1.2, 1e-10);
}

TEST(Displacement, IdentityPlanKeepsParticlesStill) {
  gen::Rng rng(3);
  const auto P = rng.points(5, 2);
  const ControlAffineSystem sys = single_integrator(2);
  const CostMatrix cm = cost_matrix(sys, RunningCost::kinetic(2), P, P, 1.0, {}, {.keep_trajectories = true});
  const Vec w = rng.simplex(5);
  const ExactResult lp = solve_exact(cm.values, w, w);
  const Interpolation I = displacement_interpolation(lp.plan, selector_from(cm));
  ASSERT_EQ(I.ensemble.size(), 5);
  for (int p = 0; p < 5; ++p) {
    EXPECT_EQ(I.pairs[p].first, I.pairs[p].second);
    for (const auto& s : I.ensemble.states[p]) EXPECT_LT((s - I.ensemble.states[p].front()).norm(), 1e-12);
  }
  EXPECT_NEAR(ensemble_cost(I.ensemble, RunningCost::kinetic(2)), 0.0, 1e-14);
}

TEST(Displacement, MissingSelectorEntriesAreListed) {
  Mat c(2, 2);
  c << 0.5, 0.0, 0.25, 0.25;
  const CostMatrix cm = cost_matrix(single_integrator(1), RunningCost::kinetic(1), {Vec::Zero(1), Vec::Ones(1)},
                                    {Vec::Zero(1), Vec::Ones(1)}, 1.0, {}, {.keep_trajectories = true});
  const Selector full = selector_from(cm);
  const Selector holes = [&](int i, int j) -> const CostResult* { return i == 1 ? nullptr : full(i, j); };
  try {
    displacement_interpolation(plan_of(c), holes);
    FAIL() << "expected IncompleteSelector";
  } catch (const IncompleteSelector& e) {
    const std::vector<std::pair<int, int>> want{{1, 0}, {1, 1}};
    EXPECT_EQ(e.pairs(), want);
  }
  // (0,1) carries no mass, so it is never asked for
  const Selector no01 = [&](int i, int j) -> const CostResult* { return i == 0 && j == 1 ? nullptr : full(i, j); };
  EXPECT_NO_THROW(displacement_interpolation(plan_of(c), no01));
}

TEST(Displacement, SubFloorMassIsDroppedAndReported) {
  Mat c(2, 2);
  c << 0.5 - 1e-12, 1e-12, 0.0, 0.5;
  const CostMatrix cm = cost_matrix(single_integrator(1), RunningCost::kinetic(1), {Vec::Zero(1), Vec::Ones(1)},
                                    {Vec::Zero(1), Vec::Ones(1)}, 1.0, {}, {.keep_trajectories = true});
  const Interpolation I = displacement_interpolation(plan_of(c), selector_from(cm));
  EXPECT_EQ(I.ensemble.size(), 2);
  EXPECT_NEAR(I.dropped_mass, 1e-12, 1e-15);
  EXPECT_NEAR(I.ensemble.weights.sum(), 1.0, 1e-15);
  EXPECT_NO_THROW(I.ensemble.validate());
}

TEST(Displacement, MarginalsMatchThePlan) {
  gen::Rng rng(17);
  const ControlAffineSystem sys = double_integrator();
  const RunningCost q = RunningCost::quadratic(Mat::Identity(2, 2), Mat::Identity(1, 1));
  for (int rep = 0; rep < 5; ++rep) {
    const auto X = rng.points(7, 2), Y = rng.points(6, 2);
    const Vec a = rng.simplex(7), b = rng.simplex(6);
    const CostMatrix cm = cost_matrix(sys, q, X, Y, 1.0, {}, {.keep_trajectories = true});
    const ExactResult lp = solve_exact(cm.values, a, b);
    const Interpolation I = displacement_interpolation(lp.plan, selector_from(cm));
    DiscreteMeasure mu{X, a}, nu{Y, b};
    EXPECT_LT(sliced_wasserstein(I.ensemble.marginal(0), mu), 1e-6);
    EXPECT_LT(sliced_wasserstein(I.ensemble.marginal(I.ensemble.steps()), nu), 1e-6);
    // cost of the particle path equals the plan value up to the selector's
    // trapezoid error on 256 steps, O(h^2) ~ 1.5e-5 relative
    EXPECT_NEAR(ensemble_cost(I.ensemble, q), lp.plan.value, 1e-4 * std::max(1.0, lp.plan.value));
  }
}

TEST(Displacement, SlicedWassersteinModulusOfContinuity) {
  gen::Rng rng(5);
  const ControlAffineSystem sys = double_integrator();
  const RunningCost q = RunningCost::quadratic(Mat::Zero(2, 2), Mat::Identity(1, 1));
  const auto X = rng.points(6, 2), Y = rng.points(6, 2);
  const Vec w = Vec::Constant(6, 1.0 / 6);
  const CostMatrix cm = cost_matrix(sys, q, X, Y, 1.0, {}, {.keep_trajectories = true});
  const Interpolation I = displacement_interpolation(solve_exact(cm.values, w, w).plan, selector_from(cm),
                                                     uniform_times(1.0, 32));
  const auto& e = I.ensemble;
  for (int k = 0; k < e.steps(); ++k) {
    double speed = 0.0;
    for (int p = 0; p < e.size(); ++p) speed = std::max(speed, (e.states[p][k + 1] - e.states[p][k]).norm());
    EXPECT_LE(sliced_wasserstein(e.marginal(k), e.marginal(k + 1)), speed + 1e-12);
  }
}

TEST(Displacement, GaussianLineMatchesTargetAndValue) {
  const GaussLine G(200);
  const PointCostSolver solver(G.sys, G.cost, 1.0);
  LazySelector sel{solver, G.X, G.Y, {}};
  const Interpolation I = displacement_interpolation(G.lp.plan, sel.get());
  const auto& e = I.ensemble;
  double target = 0.0;
  for (const auto& y : G.Y) target += y.squaredNorm() / G.Y.size();
  const double m2 = moment_curve(e, 2.0).back();
  EXPECT_LE(std::abs(m2 - target), 0.02 * target);
  const double J = ensemble_cost(e, G.cost);
  EXPECT_LE(std::abs(J - G.lp.plan.value), 0.03 * G.lp.plan.value);
  const GapReport gap = optimality_gap(e, G.cost, oracle_from(solver));
  EXPECT_EQ(gap.unknown, 0);
  EXPECT_LE(gap.mean_gap, 1e-4);
}

TEST(EnsembleCost, ZeroControlsCostNothing) {
  gen::Rng rng(1);
  EXPECT_EQ(ensemble_cost(static_ensemble(rng.points(4, 3), 5, 2), RunningCost::kinetic(2)), 0.0);
}

TEST(Purify, OpposingControlsAverageOut) {
  ParticleEnsemble two;
  two.times = {0.0, 1.0};
  two.weights = Vec::Constant(2, 0.5);
  two.states = {{Vec::Zero(1), Vec::Zero(1)}, {Vec::Zero(1), Vec::Zero(1)}};
  two.controls = {{Vec::Constant(1, 1.0)}, {Vec::Constant(1, -1.0)}};
  const Purification p = purify(two, RunningCost::kinetic(1), 0.5);
  EXPECT_EQ(p.purified_cost, 0.0);
  EXPECT_EQ(p.raw_cost, 1.0);
  ASSERT_EQ(p.field.size(), 1u);
  EXPECT_EQ(p.field[0].u(0), 0.0);
  EXPECT_EQ(p.field[0].mass, 1.0);
}

TEST(Purify, SharedControlIsUnchanged) {
  gen::Rng rng(8);
  ParticleEnsemble e = random_ensemble(rng, 30, 6, 2, 2);
  const Vec u = rng.vec(2);
  for (auto& c : e.controls)
    for (auto& v : c) v = u;
  const Purification p = purify(e, RunningCost::kinetic(2), 0.3);
  EXPECT_NEAR(p.purified_cost, p.raw_cost, 1e-13);
  for (const auto& s : p.field) EXPECT_LT((s.u - u).norm(), 1e-14);
}

TEST(Purify, JensenOnRandomEnsembles) {
  for (int s = 0; s < 100; ++s) {
    gen::Rng rng(1000 + s);
    const int d = 1 + s % 3, n = 1 + s % 2;
    const ParticleEnsemble e = random_ensemble(rng, 10 + s % 40, 3 + s % 6, d, n);
    const Mat Q = rng.uniform(0.0, 1.0) * Mat::Identity(d, d);
    const Purification p = purify(e, RunningCost::quadratic(Q, rng.spd(n)), rng.uniform(0.1, 1.0));
    EXPECT_LE(p.purified_cost, p.raw_cost + 1e-10) << "seed " << s;
    double mass = 0.0;
    for (const auto& f : p.field) mass += f.mass;
    EXPECT_NEAR(mass, e.steps(), 1e-10);
  }
}

TEST(Purify, RejectsNonPositiveBandwidth) {
  gen::Rng rng(2);
  EXPECT_THROW(purify(random_ensemble(rng, 3, 2, 1, 1), RunningCost::kinetic(1), 0.0), InvalidArgument);
}

TEST(WeakResidual, StaticDriftlessEnsembleIsExact) {
  gen::Rng rng(4);
  const ParticleEnsemble e = static_ensemble(rng.points(20, 3, 0.5), 8, 2);
  const ControlAffineSystem sys = heisenberg();
  EXPECT_LT(weak_residual(e, sys, bump_battery(e)), 1e-15);
}

TEST(WeakResidual, StraightLineQuadratureError) {
  const ControlAffineSystem sys = single_integrator(1);
  const Vec lo = Vec::Constant(1, -1.5), hi = Vec::Constant(1, 1.5);
  auto residual = [&](int K) {
    ParticleEnsemble e;
    e.times = uniform_times(1.0, K);
    e.weights = Vec::Ones(1);
    std::vector<Vec> xs;
    for (double t : e.times) xs.push_back(Vec::Constant(1, -0.6 + 1.2 * t));
    e.states = {xs};
    e.controls = {std::vector<Vec>(K, Vec::Constant(1, 1.2))};
    return weak_residual(e, sys, bump_battery(lo, hi, 1.0));
  };
  double prev = residual(8);
  EXPECT_LT(prev, 1.0 / 8);
  for (int K : {16, 32, 64}) {
    const double r = residual(K);
    EXPECT_LE(r, 0.6 * prev) << K;
    EXPECT_LT(r, 1.0 / K);
    prev = r;
  }
}

TEST(WeakResidual, RefinementOnPresets) {
  // Gaussian line ensemble at K and 2K samples
  const GaussLine G(40);
  const PointCostSolver solver(G.sys, G.cost, 1.0);
  LazySelector sel{solver, G.X, G.Y, {}};
  auto line = [&](int K) {
    const auto e = displacement_interpolation(G.lp.plan, sel.get(), uniform_times(1.0, K)).ensemble;
    return weak_residual(e, G.sys, bump_battery(e));
  };
  // double integrator with state cost: curved trajectories
  gen::Rng rng(12);
  const ControlAffineSystem di = double_integrator();
  const RunningCost q = RunningCost::quadratic(Mat::Identity(2, 2), Mat::Identity(1, 1));
  const auto X = rng.points(5, 2), Y = rng.points(5, 2);
  const Vec w = Vec::Constant(5, 0.2);
  const CostMatrix cm = cost_matrix(di, q, X, Y, 1.0, {}, {.keep_trajectories = true});
  const TransportPlan plan = solve_exact(cm.values, w, w).plan;
  auto curved = [&](int K) {
    const auto e = displacement_interpolation(plan, selector_from(cm), uniform_times(1.0, K)).ensemble;
    return weak_residual(e, di, bump_battery(e));
  };
  for (int K : {8, 16, 32}) {
    EXPECT_LE(line(2 * K), 0.6 * line(K)) << K;
    EXPECT_LE(curved(2 * K), 0.6 * curved(K)) << K;
  }
}

TEST(Moments, StaticCurveIsConstant) {
  gen::Rng rng(6);
  const auto m = moment_curve(static_ensemble(rng.points(10, 2), 6, 1), 3.0);
  for (double v : m) EXPECT_DOUBLE_EQ(v, m.front());
}

TEST(Moments, StraightLineSecondMoment) {
  const ControlAffineSystem sys = single_integrator(2);
  const Vec x = (Vec(2) << 1.0, -0.5).finished(), y = (Vec(2) << -0.4, 0.8).finished();
  const double T = 1.5;
  const CostMatrix cm = cost_matrix(sys, RunningCost::kinetic(2), {x}, {y}, T, {}, {.keep_trajectories = true});
  const auto e = displacement_interpolation(plan_of(Mat::Ones(1, 1)), selector_from(cm)).ensemble;
  const auto m = moment_curve(e, 2.0);
  for (std::size_t k = 0; k < m.size(); ++k)
    EXPECT_NEAR(m[k], (x + e.times[k] / T * (y - x)).squaredNorm(), 1e-10);
  EXPECT_THROW(moment_curve(e, 0.5), InvalidArgument);
}

TEST(Moments, EnvelopeHoldsOnPresets) {
  {
    const GaussLine G(60);
    const PointCostSolver solver(G.sys, G.cost, 1.0);
    LazySelector sel{solver, G.X, G.Y, {}};
    const auto e = displacement_interpolation(G.lp.plan, sel.get()).ensemble;
    for (double p : {1.0, 2.0, 3.0}) {
      EXPECT_TRUE(moment_envelope(e, G.sys, p).holds) << p;
      EXPECT_TRUE(moment_envelope(e, G.sys, p, 1.0).holds) << p;
    }
    EXPECT_TRUE(moment_envelope(e, G.sys, 2.0, 1.0, &G.cost).holds);
  }
  gen::Rng rng(30);
  const ControlAffineSystem di = double_integrator();
  const RunningCost q = RunningCost::quadratic(Mat::Zero(2, 2), Mat::Identity(1, 1));
  const auto X = rng.points(6, 2, 2.0), Y = rng.points(6, 2, 2.0);
  const Vec w = Vec::Constant(6, 1.0 / 6);
  const CostMatrix cm = cost_matrix(di, q, X, Y, 2.0, {}, {.keep_trajectories = true});
  const auto e = displacement_interpolation(solve_exact(cm.values, w, w).plan, selector_from(cm)).ensemble;
  const MomentEnvelope env = moment_envelope(e, di, 2.0);
  EXPECT_TRUE(env.holds);
  EXPECT_LE(env.worst_ratio, 1.0);
  EXPECT_EQ(env.moments.size(), e.times.size());
  EXPECT_GT(env.M, 0.0);
}

TEST(OptimalityGap, OptimalSelectorHasNoGap) {
  const ControlAffineSystem sys = single_integrator(2);
  const PointCostSolver solver(sys, RunningCost::kinetic(2), 1.0);
  const Vec x = (Vec(2) << 0.0, 0.3).finished(), y = (Vec(2) << 0.7, -0.2).finished();
  const CostMatrix cm = cost_matrix(solver, {x}, {y}, {.keep_trajectories = true});
  const auto e = displacement_interpolation(plan_of(Mat::Ones(1, 1)), selector_from(cm)).ensemble;
  const GapReport g = optimality_gap(e, RunningCost::kinetic(2), oracle_from(solver));
  EXPECT_NEAR(g.max_gap, 0.0, 1e-10);
  EXPECT_NEAR(g.mean_gap, 0.0, 1e-10);
}

TEST(OptimalityGap, HurriedParticleIsSuboptimal) {
  // u = 2(y - x)/T on the first half, then rest: cost 2|y-x|^2/T against |y-x|^2/T
  const int K = 16;
  const double T = 1.0, x = 0.1, y = 0.9;
  ParticleEnsemble e;
  e.times = uniform_times(T, K);
  e.weights = Vec::Ones(1);
  std::vector<Vec> xs, us;
  for (double t : e.times) xs.push_back(Vec::Constant(1, t <= 0.5 * T ? x + 2.0 * (y - x) * t / T : y));
  for (int k = 0; k < K; ++k) us.push_back(Vec::Constant(1, k < K / 2 ? 2.0 * (y - x) / T : 0.0));
  e.states = {xs};
  e.controls = {us};
  EXPECT_LT(e.resimulation_error(single_integrator(1)), 1e-12);
  const GapReport g = optimality_gap(e, RunningCost::kinetic(1), std::vector<double>{(y - x) * (y - x) / T});
  EXPECT_GT(g.max_gap, 0.0);
  EXPECT_NEAR(g.max_gap, (y - x) * (y - x) / T, 1e-12);
}

TEST(OptimalityGap, OracleFailureIsFlagged) {
  gen::Rng rng(9);
  const ParticleEnsemble e = static_ensemble(rng.points(3, 1), 4, 1);
  const CostOracle flaky = [](const Vec& a, const Vec&) -> std::optional<double> {
    if (a(0) > 0.0) return std::nullopt;
    return 0.0;
  };
  const GapReport g = optimality_gap(e, RunningCost::kinetic(1), flaky);
  int known = 0;
  for (double v : g.gaps) known += std::isfinite(v);
  EXPECT_EQ(known + g.unknown, 3);
  for (int p = 0; p < 3; ++p) EXPECT_EQ(std::isnan(g.gaps[p]), e.states[p][0](0) > 0.0);
  EXPECT_THROW(optimality_gap(e, RunningCost::kinetic(1), std::vector<double>{0.0}), InvalidArgument);
}
