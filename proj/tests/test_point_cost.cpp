#include <gtest/gtest.h>

#include <cmath>

#include <unsupported/Eigen/MatrixFunctions>

#include "ctrlot/point_cost.hpp"
#include "generators.hpp"

using namespace ctrlot;

namespace {

Vec v(std::initializer_list<double> xs) {
  Vec out(static_cast<Eigen::Index>(xs.size()));
  int i = 0;
  for (double x : xs) out(i++) = x;
  return out;
}

const Mat I1 = Mat::Identity(1, 1);

// Riemann-sum Gramian on a fine grid, independent of the quadrature in the library.
Mat riemann_gramian(const Mat& A, const Mat& B, double T, int n = 20000) {
  Mat W = Mat::Zero(A.rows(), A.rows());
  const double h = T / n;
  for (int k = 0; k < n; ++k) {
    const Mat E = (A * ((k + 0.5) * h)).exp() * B;
    W += h * E * E.transpose();
  }
  return W;
}

}  // namespace

TEST(Gramian, DoubleIntegrator) {
  const auto di = double_integrator();
  const Mat W = gramian(di.A(), di.B(), I1, 1.0);
  Mat expect(2, 2);
  expect << 1.0 / 3, 0.5, 0.5, 1.0;
  EXPECT_LE((W - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Gramian, SingleIntegratorAndZeroInput) {
  EXPECT_LE((gramian(Mat::Zero(3, 3), Mat::Identity(3, 3), Mat::Identity(3, 3), 2.5) - 2.5 * Mat::Identity(3, 3))
                .cwiseAbs()
                .maxCoeff(),
            1e-13);
  EXPECT_EQ(gramian(Mat::Zero(2, 2), Mat::Zero(2, 1), I1, 1.0).norm(), 0.0);
}

TEST(Gramian, RandomPairsMatchRiemannSum) {
  gen::Rng rng(21);
  for (int k = 0; k < 5; ++k) {
    const Mat A = rng.mat(3, 3), B = rng.mat(3, 1);
    EXPECT_LE((gramian(A, B, I1, 1.0) - riemann_gramian(A, B, 1.0)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Gramian, RejectsIndefiniteWeight) {
  EXPECT_THROW(gramian(Mat::Zero(1, 1), I1, Mat::Zero(1, 1), 1.0), InvalidCost);
}

TEST(LqCostMatrices, SingleIntegratorEnergy) {
  const LqMatrices m = lq_cost_matrices(Mat::Zero(2, 2), Mat::Identity(2, 2), Mat::Zero(2, 2), Mat::Identity(2, 2), 1.0);
  EXPECT_LE((m.D - Mat::Identity(2, 2)).norm(), 1e-12);
  EXPECT_LE((m.E - 2 * Mat::Identity(2, 2)).norm(), 1e-12);
  EXPECT_LE((m.F - Mat::Identity(2, 2)).norm(), 1e-12);
}

TEST(LqCostMatrices, DoubleIntegratorInverseGramian) {
  const auto di = double_integrator();
  const LqMatrices m = lq_cost_matrices(di.A(), di.B(), Mat::Zero(2, 2), I1, 1.0);
  Mat F(2, 2);
  F << 12, -6, -6, 4;
  EXPECT_LE((m.F - F).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(LqCostMatrices, UncontrollableRejected) {
  EXPECT_THROW(lq_cost_matrices(Mat::Identity(2, 2), Mat::Ones(2, 1), Mat::Zero(2, 2), I1, 1.0), SingularGramian);
}

TEST(LqCostMatrices, StateCostSatisfiesQuadraticStructure) {
  // with Q > 0 the form must still be convex in each endpoint and reproduce trajectory costs
  gen::Rng rng(22);
  const auto di = double_integrator();
  const Mat Q = rng.spd(2);
  const LqMatrices m = lq_cost_matrices(di.A(), di.B(), Q, I1, 1.0);
  EXPECT_GT(min_eigenvalue(m.D), 0.0);
  EXPECT_GT(min_eigenvalue(m.F), 0.0);
  EXPECT_GT(std::abs(m.E.determinant()), 1e-8);
  for (int k = 0; k < 10; ++k) {
    const Vec x = rng.vec(2), y = rng.vec(2);
    const CostResult r = lq_point_cost(di.A(), di.B(), Q, I1, 1.0, x, y, 512);
    EXPECT_NEAR(r.trajectory.cost, m.cost(x, y), 1e-8 * (1 + m.cost(x, y)));
    // controls are interval averages of a smooth signal: O(h^2) resimulation error
    EXPECT_LE(resimulation_error(di, r.trajectory), 1e-5);
  }
}

TEST(LqPointCost, StayPutIsFree) {
  const CostResult r = lq_point_cost(Mat::Zero(2, 2), Mat::Identity(2, 2), Mat::Zero(2, 2), Mat::Identity(2, 2), 1.0,
                                     v({0.3, 0.4}), v({0.3, 0.4}));
  EXPECT_NEAR(r.value, 0.0, 1e-14);
  for (const auto& x : r.trajectory.states) EXPECT_NEAR((x - v({0.3, 0.4})).norm(), 0.0, 1e-14);
}

TEST(LqPointCost, DoubleIntegratorTwelve) {
  const auto di = double_integrator();
  const CostResult r = lq_point_cost(di.A(), di.B(), Mat::Zero(2, 2), I1, 1.0, v({0, 0}), v({1, 0}));
  EXPECT_NEAR(r.value, 12.0, 1e-9);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.trajectory.cost, 12.0, 1e-8);
  // optimal control is u(t) = 6 - 12 t
  for (int k = 0; k < r.trajectory.steps(); ++k) {
    const double tm = 0.5 * (r.trajectory.times[k] + r.trajectory.times[k + 1]);
    EXPECT_NEAR(r.trajectory.controls[k](0), 6 - 12 * tm, 1e-9);
  }
}

TEST(LqPointCost, FreeDriftIsFree) {
  gen::Rng rng(23);
  const Mat A = rng.mat(2, 2), B = v({0, 1});
  const Vec x = rng.vec(2), y = (A * 1.3).exp() * x;
  const CostResult r = lq_point_cost(A, B, Mat::Zero(2, 2), I1, 1.3, x, y);
  EXPECT_NEAR(r.value, 0.0, 1e-10);
  for (const auto& u : r.trajectory.controls) EXPECT_NEAR(u.norm(), 0.0, 1e-9);
}

TEST(LqPointCost, EndpointsAndValueConsistency) {
  gen::Rng rng(24);
  for (int s = 0; s < 20; ++s) {
    const int d = rng.integer(1, 3);
    const Mat A = rng.mat(d, d), B = rng.mat(d, d);
    const Mat Q = s % 2 ? Mat(rng.spd(d, 0.0)) : Mat(Mat::Zero(d, d));
    const Mat R = rng.spd(d);
    const Vec x = rng.vec(d), y = rng.vec(d);
    const CostResult r = lq_point_cost(A, B, Q, R, 1.0, x, y, 400);
    EXPECT_LE((r.trajectory.end() - y).norm(), 1e-6 * (1 + y.norm()));
    EXPECT_NEAR(r.trajectory.cost, r.value, 1e-6 * (1 + r.value));
    EXPECT_GE(r.value, -1e-12);
  }
}

TEST(LqPointCost, RejectsBadWeights) {
  const auto di = double_integrator();
  EXPECT_THROW(lq_point_cost(di.A(), di.B(), Mat::Zero(2, 2), Mat::Zero(1, 1), 1.0, v({0, 0}), v({1, 0})), InvalidCost);
  EXPECT_THROW(lq_point_cost(di.A(), di.B(), -Mat::Identity(2, 2), I1, 1.0, v({0, 0}), v({1, 0})), InvalidCost);
}

TEST(DriftlessPointCost, SingleIntegratorPlane) {
  const auto s = ControlAffineSystem::driftless(
      {VectorField::constant(v({1, 0})), VectorField::constant(v({0, 1}))}, "plane");
  TranscriptionParams p;
  p.N = 16;
  const CostResult r = driftless_point_cost(s, RunningCost::kinetic(2), v({0, 0}), v({3, 4}), 1.0, p);
  EXPECT_NEAR(r.value, 25.0, 1e-6);
  for (const auto& u : r.trajectory.controls) EXPECT_NEAR((u - v({3, 4})).norm(), 0.0, 1e-4);
}

TEST(DriftlessPointCost, HeisenbergHorizontalLine) {
  const CostResult r = driftless_point_cost(heisenberg(), RunningCost::kinetic(2), Vec::Zero(3), v({1, 0, 0}), 1.0);
  EXPECT_NEAR(r.value, 1.0, 1e-3);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.endpoint_error, 1e-5);
  EXPECT_NEAR(trajectory_cost(RunningCost::kinetic(2), r.trajectory), r.value, 1e-6);
}

TEST(DriftlessPointCost, HeisenbergCircleAndShootingAgree) {
  const auto h = heisenberg();
  const auto k = RunningCost::kinetic(2);
  const Vec y = v({0, 0, 1.0 / (4 * M_PI)});
  const CostResult r = driftless_point_cost(h, k, Vec::Zero(3), y, 1.0);
  EXPECT_NEAR(r.value, 1.0, 1e-2);
  const ShootingResult s = shooting(h, k, Vec::Zero(3), y, 1.0, r.costate);
  ASSERT_TRUE(s.converged);
  EXPECT_LE((s.trajectory.end() - y).norm(), 1e-3);
  EXPECT_NEAR(trajectory_cost(k, s.trajectory), 1.0, 1e-2);
  // the minimizer is a circle of length 1: constant speed 1
  for (const auto& u : s.trajectory.controls) EXPECT_NEAR(u.norm(), 1.0, 1e-3);
}

TEST(DriftlessPointCost, RejectsDriftAndNonKinetic) {
  EXPECT_THROW(driftless_point_cost(double_integrator(), RunningCost::kinetic(1), v({0, 0}), v({1, 0}), 1.0),
               UnsupportedSystem);
  EXPECT_THROW(driftless_point_cost(heisenberg(), RunningCost::quadratic(Mat::Zero(3, 3), Mat::Identity(2, 2)),
                                    Vec::Zero(3), v({1, 0, 0}), 1.0),
               InvalidCost);
}

TEST(GenericPointCost, MatchesClosedFormOnLtiSystems) {
  gen::Rng rng(25);
  const auto di = double_integrator();
  for (int s = 0; s < 3; ++s) {
    const Mat Q = s ? Mat(rng.spd(2, 0.0)) : Mat(Mat::Zero(2, 2));
    const Vec x = rng.vec(2), y = rng.vec(2);
    const double exact = lq_point_cost(di.A(), di.B(), Q, I1, 1.0, x, y).value;
    TranscriptionParams p;
    p.N = 96;
    const CostResult r = generic_point_cost(di, RunningCost::quadratic(Q, I1), x, y, 1.0, p);
    EXPECT_NEAR(r.value, exact, 1e-3 * exact);
  }
}

TEST(GenericPointCost, EquilibriumIsFree) {
  VectorField drift{2, [](const Vec& x) { return Vec(x.array().square()); }, {}};
  const ControlAffineSystem s(drift, {VectorField::constant(v({1, 0})), VectorField::constant(v({0, 1}))});
  TranscriptionParams p;
  p.N = 16;
  const CostResult r = generic_point_cost(s, RunningCost::kinetic(2), Vec::Zero(2), Vec::Zero(2), 1.0, p);
  EXPECT_NEAR(r.value, 0.0, 1e-8);
}

TEST(GenericPointCost, DriftlessRoutedHereAgrees) {
  const auto u = unicycle();
  const auto k = RunningCost::kinetic(2);
  TranscriptionParams p;
  p.N = 32;
  const Vec y = v({0.5, 0.2, 0.3});
  const double a = driftless_point_cost(u, k, Vec::Zero(3), y, 1.0, p).value;
  const double b = generic_point_cost(u, k, Vec::Zero(3), y, 1.0, p).value;
  EXPECT_NEAR(a, b, 1e-6 * (1 + a));
}

TEST(CostMatrix, SingleIntegratorClosedForm) {
  gen::Rng rng(26);
  const auto X = rng.points(7, 2), Y = rng.points(5, 2);
  const CostMatrix C = cost_matrix(single_integrator(2), RunningCost::kinetic(2), X, Y, 2.0);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(C.values(i, j), (Y[j] - X[i]).squaredNorm() / 2.0, 1e-12);
  EXPECT_TRUE(C.defects.empty());
}

TEST(CostMatrix, HeisenbergZeroDiagonalAndSymmetry) {
  gen::Rng rng(27);
  const auto X = rng.points(2, 3, 0.5), Y = rng.points(2, 3, 0.5);
  TranscriptionParams p;
  p.N = 48;
  const auto h = heisenberg();
  const auto k = RunningCost::kinetic(2);
  const CostMatrix self = cost_matrix(h, k, X, X, 1.0, p);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(self.values(i, i), 0.0, 1e-8);
  const CostMatrix xy = cost_matrix(h, k, X, Y, 1.0, p), yx = cost_matrix(h, k, Y, X, 1.0, p);
  EXPECT_LE((xy.values - yx.values.transpose()).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(CostMatrix, ThreadCountDoesNotChangeValues) {
  gen::Rng rng(28);
  const auto X = rng.points(3, 3, 0.5), Y = rng.points(2, 3, 0.5);
  TranscriptionParams p;
  p.N = 24;
  const auto h = heisenberg();
  const PointCostSolver solver(h, RunningCost::kinetic(2), 1.0, p);
  CostMatrixOptions one, three;
  three.threads = 3;
  const Mat a = cost_matrix(solver, X, Y, one).values, b = cost_matrix(solver, X, Y, three).values;
  EXPECT_EQ((a - b).cwiseAbs().maxCoeff(), 0.0);
}

TEST(CostMatrix, RejectsNonFinitePoints) {
  std::vector<Vec> X{v({0, NAN})}, Y{v({0, 0})};
  EXPECT_THROW(cost_matrix(single_integrator(2), RunningCost::kinetic(2), X, Y, 1.0), InvalidArgument);
}

TEST(EndpointMap, SingleIntegratorGramianIsTIdentity) {
  const Trajectory tr = flow(single_integrator(2), v({0, 0}), v({1, 2}), 1.7, 20);
  EXPECT_NEAR(endpoint_map_singularity(single_integrator(2), tr), 1.7, 1e-10);
}

TEST(EndpointMap, HeisenbergLineIsRegular) {
  const Trajectory tr = flow(heisenberg(), Vec::Zero(3), v({1, 0}), 1.0, 50);
  EXPECT_GT(endpoint_map_singularity(heisenberg(), tr), 1e-3);
}

TEST(EndpointMap, ZeroInputFieldIsSingular) {
  const ControlAffineSystem s(VectorField::zero(2), {VectorField::zero(2)});
  const Trajectory tr = flow(s, v({1, 1}), v({0}), 1.0, 10);
  EXPECT_NEAR(endpoint_map_singularity(s, tr), 0.0, 1e-14);
}

TEST(Pontryagin, ZeroCostateStays) {
  const Trajectory tr = pontryagin_reconstruct(heisenberg(), RunningCost::kinetic(2), v({1, 2, 3}), Vec::Zero(3), 1.0, 30);
  for (const auto& x : tr.states) EXPECT_NEAR((x - v({1, 2, 3})).norm(), 0.0, 1e-15);
}

TEST(Pontryagin, SingleIntegratorStraightLine) {
  // u = -p/2, so p0 = -2 (y - x) / T reaches y
  const Vec x = v({1, -1}), y = v({2, 3});
  const Trajectory tr = pontryagin_reconstruct(single_integrator(2), RunningCost::kinetic(2), x, -2.0 * (y - x), 1.0, 20);
  EXPECT_NEAR((tr.end() - y).norm(), 0.0, 1e-12);
  EXPECT_NEAR(tr.cost, (y - x).squaredNorm(), 1e-12);
}

TEST(Pontryagin, LqCostateReproducesClosedForm) {
  gen::Rng rng(29);
  const auto di = double_integrator();
  const Mat Q = rng.spd(2, 0.0);
  const LqProblem lq(di.A(), di.B(), Q, I1, 1.0);
  const Vec x = rng.vec(2), y = rng.vec(2);
  const Trajectory tr = pontryagin_reconstruct(di, RunningCost::quadratic(Q, I1), x, lq.initial_costate(x, y), 1.0, 400);
  EXPECT_LE((tr.end() - y).norm(), 1e-8);
  EXPECT_NEAR(tr.cost, lq.value(x, y), 1e-8);
}

TEST(RunningCostChecks, KineticEqualsEnergy) {
  gen::Rng rng(30);
  const RunningCost k = RunningCost::kinetic(3);
  for (int s = 0; s < 10; ++s) {
    const Vec u = rng.vec(3, 4.0);
    EXPECT_NEAR(k(0.0, rng.vec(2), u), u.squaredNorm(), 1e-14);
  }
}

TEST(DriftlessInvariants, TimeScaling) {
  const auto u = unicycle();
  const auto k = RunningCost::kinetic(2);
  TranscriptionParams p;
  p.N = 32;
  const Vec y = v({0.4, -0.3, 0.5});
  const double c1 = driftless_point_cost(u, k, Vec::Zero(3), y, 1.0, p).value;
  const double c2 = driftless_point_cost(u, k, Vec::Zero(3), y, 2.0, p).value;
  EXPECT_NEAR(c2, c1 / 2.0, 1e-5 * c1);
}

TEST(DriftlessInvariants, RefinementDoesNotIncreaseCost) {
  const auto h = heisenberg();
  const auto k = RunningCost::kinetic(2);
  gen::Rng rng(31);
  for (int s = 0; s < 2; ++s) {
    const Vec x = rng.vec(3, 0.5), y = rng.vec(3, 0.5);
    TranscriptionParams p;
    p.N = 16;
    const CostResult coarse = driftless_point_cost(h, k, x, y, 1.0, p);
    p.N = 32;
    const CostResult fine = driftless_point_cost(h, k, x, y, 1.0, p);
    EXPECT_LE(fine.value, coarse.value + 1e-5 * (1 + coarse.value));
  }
}

TEST(DriftlessInvariants, SquareRootTriangleInequality) {
  const auto h = heisenberg();
  const PointCostSolver solver(h, RunningCost::kinetic(2), 1.0);
  // a stalled gradient test still leaves a feasible curve; its endpoint must be tight
  auto dist = [&](const Vec& x, const Vec& y) {
    CostResult r;
    try {
      r = solver.solve(x, y);
    } catch (const NonConvergence& e) {
      r = e.best();
    }
    EXPECT_LE(r.endpoint_error, 1e-5);
    return std::sqrt(r.value);
  };
  gen::Rng rng(32);
  for (int s = 0; s < 3; ++s) {
    const Vec a = rng.vec(3, 0.6), b = rng.vec(3, 0.6), c = rng.vec(3, 0.6);
    const double ab = dist(a, b), bc = dist(b, c), ac = dist(a, c);
    EXPECT_LE(ac, ab + bc + 1e-3);
  }
}

TEST(DriftlessInvariants, MultistartIsDeterministic) {
  const auto h = heisenberg();
  const PointCostSolver solver(h, RunningCost::kinetic(2), 1.0);
  const Vec y = v({0.1, 0.2, 0.3});
  const CostResult a = solver.solve(Vec::Zero(3), y, 5), b = solver.solve(Vec::Zero(3), y, 5);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.restart, b.restart);
}
