#include <gtest/gtest.h>

#include <unsupported/Eigen/MatrixFunctions>

#include "ctrlot/systems.hpp"
#include "generators.hpp"

using namespace ctrlot;

namespace {

Vec v(std::initializer_list<double> xs) {
  Vec out(static_cast<Eigen::Index>(xs.size()));
  int i = 0;
  for (double x : xs) out(i++) = x;
  return out;
}

// Bracket by central differences of the fields themselves, no Jacobians involved.
Vec fd_bracket(const VectorField& f, const VectorField& g, const Vec& x, double h = 1e-5) {
  auto dir = [&](const VectorField& F, const Vec& w) { return Vec((F(x + h * w) - F(x - h * w)) / (2 * h)); };
  return dir(g, f(x)) - dir(f, g(x));
}

}  // namespace

TEST(EvalDynamics, DriftlessZeroControlIsAtRest) {
  const auto h = heisenberg();
  gen::Rng rng(1);
  for (int k = 0; k < 20; ++k) EXPECT_EQ(eval_dynamics(h, rng.vec(3, 5.0), Vec::Zero(2)).norm(), 0.0);
}

TEST(EvalDynamics, DoubleIntegratorProduct) {
  EXPECT_TRUE(eval_dynamics(double_integrator(), v({0, 1}), v({0})).isApprox(v({1, 0})));
}

TEST(EvalDynamics, HeisenbergFields) {
  const Vec out = eval_dynamics(heisenberg(), v({1, 2, 3}), v({1, 1}));
  EXPECT_NEAR((out - v({1, 1, -0.5})).norm(), 0.0, 1e-15);
}

TEST(EvalDynamics, RejectsWrongLengths) {
  EXPECT_THROW(eval_dynamics(heisenberg(), v({1, 2}), v({1, 1})), InvalidArgument);
  EXPECT_THROW(eval_dynamics(heisenberg(), v({1, 2, 3}), v({1})), InvalidArgument);
}

TEST(LieBracket, HeisenbergIsVertical) {
  const auto h = heisenberg();
  const VectorField b = lie_bracket(h.controls()[0], h.controls()[1]);
  gen::Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    const Vec x = rng.vec(3, 3.0);
    EXPECT_NEAR((b(x) - v({0, 0, 1})).norm(), 0.0, 1e-12);
    EXPECT_NEAR((fd_bracket(h.controls()[0], h.controls()[1], x) - v({0, 0, 1})).norm(), 0.0, 1e-8);
  }
}

TEST(LieBracket, LinearAgainstConstant) {
  gen::Rng rng(3);
  for (int k = 0; k < 10; ++k) {
    const Mat A = rng.mat(3, 3);
    const Vec b = rng.vec(3);
    const VectorField f = VectorField::linear(A), g = VectorField::constant(b);
    const Vec x = rng.vec(3);
    EXPECT_NEAR((lie_bracket(f, g)(x) + A * b).norm(), 0.0, 1e-12);
    EXPECT_NEAR((fd_bracket(f, g, x) + A * b).norm(), 0.0, 1e-8);
  }
}

TEST(LieBracket, SelfBracketVanishes) {
  const auto u = unicycle();
  gen::Rng rng(4);
  for (int k = 0; k < 10; ++k) EXPECT_NEAR(lie_bracket(u.controls()[0], u.controls()[0])(rng.vec(3)).norm(), 0.0, 1e-12);
}

TEST(LieBracket, Antisymmetric) {
  const auto u = unicycle();
  gen::Rng rng(5);
  for (int k = 0; k < 10; ++k) {
    const Vec x = rng.vec(3, 2.0);
    const Vec ab = lie_bracket(u.controls()[0], u.controls()[1])(x);
    const Vec ba = lie_bracket(u.controls()[1], u.controls()[0])(x);
    EXPECT_NEAR((ab + ba).norm(), 0.0, 1e-9);
  }
}

TEST(BracketRank, HeisenbergSteps) {
  const auto h = heisenberg();
  gen::Rng rng(6);
  for (int k = 0; k < 10; ++k) {
    const Vec x = rng.vec(3, 4.0);
    EXPECT_EQ(bracket_rank(h, 0, x), 2);
    EXPECT_EQ(bracket_rank(h, 1, x), 3);
  }
}

TEST(BracketRank, SingleIntegratorPlane) {
  const auto s = ControlAffineSystem::driftless(
      {VectorField::constant(v({1, 0})), VectorField::constant(v({0, 1}))}, "plane");
  EXPECT_EQ(bracket_rank(s, 0, v({0.3, -2})), 2);
}

TEST(BracketRank, UnicycleNeedsOneBracket) {
  const auto u = unicycle();
  EXPECT_EQ(bracket_rank(u, 0, v({0, 0, 0.4})), 2);
  EXPECT_EQ(bracket_rank(u, 1, v({0, 0, 0.4})), 3);
}

TEST(BracketRank, RejectsDrift) { EXPECT_THROW(bracket_rank(double_integrator(), 1, v({0, 0})), UnsupportedSystem); }

TEST(KalmanRank, Examples) {
  const auto di = double_integrator();
  EXPECT_EQ(kalman_rank(di.A(), di.B()), 2);
  EXPECT_EQ(kalman_rank(Mat::Zero(2, 2), Mat::Zero(2, 1)), 0);
  Mat A = Mat::Zero(2, 2);
  A(0, 0) = 1;
  A(1, 1) = 2;
  EXPECT_EQ(kalman_rank(A, Mat::Ones(2, 1)), 2);
  // repeated eigenvalue with one input is never controllable
  EXPECT_EQ(kalman_rank(Mat::Identity(2, 2), Mat::Ones(2, 1)), 1);
}

TEST(KalmanRank, MatchesAccessibilityRankOnRandomPairs) {
  gen::Rng rng(7);
  for (int k = 0; k < 30; ++k) {
    const int d = rng.integer(1, 4), n = rng.integer(1, 2);
    const Mat A = rng.mat(d, d), B = rng.mat(d, n);
    const auto sys = ControlAffineSystem::lti(A, B);
    EXPECT_EQ(kalman_rank(A, B), accessibility_rank(sys, d - 1, rng.vec(d)));
  }
}

TEST(Flow, DriftlessZeroControlStays) {
  const Vec x0 = v({0.2, -1, 3});
  const Trajectory tr = flow(heisenberg(), x0, Vec::Zero(2), 1.0, 50);
  for (const auto& x : tr.states) EXPECT_EQ((x - x0).norm(), 0.0);
}

TEST(Flow, SingleIntegratorStraightLine) {
  const Vec x0 = v({1, 2}), u = v({-3, 0.5});
  const Trajectory tr = flow(single_integrator(2), x0, u, 2.0, 40);
  for (std::size_t k = 0; k < tr.times.size(); ++k)
    EXPECT_NEAR((tr.states[k] - (x0 + tr.times[k] * u)).norm(), 0.0, 1e-13);
}

TEST(Flow, DoubleIntegratorMatchesExponential) {
  const auto di = double_integrator();
  const Trajectory tr = flow(di, v({0, 1}), v({0}), 1.0, 100);
  for (std::size_t k = 0; k < tr.times.size(); ++k) {
    const Vec exact = (di.A() * tr.times[k]).exp() * v({0, 1});
    EXPECT_NEAR((tr.states[k] - exact).norm(), 0.0, 1e-10);
  }
}

TEST(Flow, TrajectoryInvariants) {
  gen::Rng rng(8);
  const auto u = unicycle();
  for (int s = 0; s < 10; ++s) {
    std::vector<Vec> ctrl;
    const int N = rng.integer(5, 40);
    for (int k = 0; k < N; ++k) ctrl.push_back(rng.vec(2, 2.0));
    const Trajectory tr = flow(u, rng.vec(3), ctrl, 1.5);
    EXPECT_TRUE(tr.well_formed());
    EXPECT_LE(resimulation_error(u, tr), 1e-12);
    EXPECT_DOUBLE_EQ(tr.horizon(), 1.5);
  }
}

TEST(Flow, RejectsBadInput) {
  EXPECT_THROW(flow(heisenberg(), v({0, 0, 0}), Vec::Zero(2), -1.0, 5), InvalidArgument);
  EXPECT_THROW(flow(heisenberg(), v({0, 0, 0}), Vec::Zero(2), 1.0, 0), InvalidArgument);
  EXPECT_THROW(flow(heisenberg(), v({0, 0}), Vec::Zero(2), 1.0, 5), InvalidArgument);
}

TEST(Flow, BlowUpIsReported) {
  VectorField sq{1, [](const Vec& x) { return Vec(x.array().square()); }, {}};
  const ControlAffineSystem s(sq, {VectorField::constant(v({1}))});
  EXPECT_THROW(flow(s, v({1}), v({0}), 5.0, 200), DivergenceError);
}

TEST(VectorFieldProperties, AnalyticJacobiansMatchFiniteDifferences) {
  gen::Rng rng(9);
  const std::vector<Vec> pts = rng.points(50, 3, 3.0);
  for (const auto& sys : {heisenberg(), unicycle()})
    for (const auto& f : sys.controls()) EXPECT_LE(jacobian_consistency(f, pts), 1e-6);
}

TEST(VectorFieldProperties, GrowthConstantBoundsSamples) {
  gen::Rng rng(10);
  const auto h = heisenberg();
  const std::vector<Vec> pts = rng.points(100, 3, 10.0);
  for (const auto& f : h.controls()) {
    const double M = growth_constant(f, pts);
    for (const auto& x : pts) EXPECT_LE(f(x).norm(), M * (x.norm() + 1.0) + 1e-12);
  }
}

TEST(SystemKinds, TagsAreConsistent) {
  gen::Rng rng(11);
  const std::vector<Vec> p3 = rng.points(20, 3, 5.0), p2 = rng.points(20, 2, 5.0);
  EXPECT_TRUE(heisenberg().kind_consistent(p3));
  EXPECT_TRUE(unicycle().kind_consistent(p3));
  EXPECT_TRUE(double_integrator().kind_consistent(p2));
  EXPECT_TRUE(heisenberg().is_driftless());
  EXPECT_FALSE(double_integrator().is_driftless());
  EXPECT_TRUE(single_integrator(2).is_driftless());
}

TEST(SystemKinds, MismatchedFieldsRejected) {
  EXPECT_THROW(ControlAffineSystem(VectorField::zero(2), {VectorField::zero(3)}), InvalidArgument);
  EXPECT_THROW(ControlAffineSystem::lti(Mat::Zero(2, 3), Mat::Zero(2, 1)), InvalidArgument);
}

TEST(Invariants, DynamicsAffineInControl) {
  gen::Rng rng(12);
  for (const auto& sys : {heisenberg(), unicycle(), double_integrator()}) {
    for (int k = 0; k < 20; ++k) {
      const Vec x = rng.vec(sys.dim(), 3.0), u = rng.vec(sys.inputs(), 3.0), w = rng.vec(sys.inputs(), 3.0);
      const double l = rng.uniform(0.0, 1.0);
      const Vec lhs = eval_dynamics(sys, x, l * u + (1 - l) * w);
      const Vec rhs = l * eval_dynamics(sys, x, u) + (1 - l) * eval_dynamics(sys, x, w);
      EXPECT_LE((lhs - rhs).norm(), 1e-13 * (1 + lhs.norm()));
    }
  }
}

TEST(Invariants, JacobiIdentity) {
  // fields with nonconstant Jacobians so the nested brackets are nontrivial
  VectorField f{3, [](const Vec& x) { return Vec((Vec(3) << std::sin(x(1)), x(0) * x(2), 1.0).finished()); }, {}};
  VectorField g{3, [](const Vec& x) { return Vec((Vec(3) << x(2), std::cos(x(0)), x(1) * x(1)).finished()); }, {}};
  VectorField h{3, [](const Vec& x) { return Vec((Vec(3) << 1.0, x(2), x(0)).finished()); }, {}};
  gen::Rng rng(13);
  for (int k = 0; k < 10; ++k) {
    const Vec x = rng.vec(3);
    const Vec s = lie_bracket(f, lie_bracket(g, h))(x) + lie_bracket(g, lie_bracket(h, f))(x) +
                  lie_bracket(h, lie_bracket(f, g))(x);
    EXPECT_LE(s.norm(), 1e-4);
  }
}

TEST(Invariants, FlowIsFourthOrder) {
  const auto u = unicycle();
  auto endpoint = [&](int N) {
    std::vector<Vec> ctrl;
    for (int k = 0; k < N; ++k) ctrl.push_back(v({1.0, 2.0}));
    return flow(u, v({0, 0, 0.3}), ctrl, 2.0).end();
  };
  const Vec ref = endpoint(4096);
  const double e1 = (endpoint(16) - ref).norm(), e2 = (endpoint(32) - ref).norm();
  EXPECT_GE(e1 / e2, 8.0);
}
