#include <gtest/gtest.h>

#include <cmath>

#include "mcslam/error.hpp"
#include "mcslam/trajectory.hpp"
#include "test_util.hpp"

using namespace mcslam;
using mcslam::testing::pose_distance;
using mcslam::testing::random_twist;

namespace {

// Random walk sampled at 100 Hz with moderate per-step motion.
Trajectory random_trajectory(Rng& rng, std::size_t n, double t0 = 0.0) {
  std::vector<TimedPose> s;
  Pose T = mcslam::testing::random_pose(rng);
  for (std::size_t i = 0; i < n; ++i) {
    s.push_back({t0 + 0.01 * static_cast<double>(i), T});
    T = exp_se3(random_twist(rng, 0.05, 0.02)) * T;
  }
  return Trajectory(std::move(s));
}

Trajectory identity_trajectory(std::size_t n) {
  std::vector<TimedPose> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back({0.01 * static_cast<double>(i), Pose()});
  return Trajectory(std::move(s));
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kIo;  // sentinel: nothing thrown
}

}  // namespace

TEST(Trajectory, RejectsNonIncreasingTimestamps) {
  std::vector<TimedPose> s = {{0.0, Pose()}, {0.01, Pose()}, {0.01, Pose()}};
  EXPECT_EQ(code_of([&] { Trajectory t(s); }), ErrorCode::kInvalidArgument);
}

TEST(Trajectory, RejectsIrregularSpacing) {
  std::vector<TimedPose> s = {{0.0, Pose()}, {0.01, Pose()}, {0.0205, Pose()}};
  EXPECT_EQ(code_of([&] { Trajectory t(s); }), ErrorCode::kInvalidArgument);
  std::vector<TimedPose> ok = {{0.0, Pose()}, {0.01, Pose()}, {0.02009, Pose()}};
  EXPECT_NO_THROW(Trajectory t(ok));
}

TEST(TrajectorySample, ExactAtSamples) {
  Rng rng(1);
  const Trajectory traj = random_trajectory(rng, 50);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    EXPECT_EQ(traj.sample(traj[k].time).matrix(), traj[k].pose.matrix());
  }
}

TEST(TrajectorySample, TwoSampleTranslation) {
  const Trajectory traj({{0.0, Pose()}, {1.0, Pose::from_translation(Vec3(1, 0, 0))}}, 1.0);
  EXPECT_LT(pose_distance(traj.sample(0.25), Pose::from_translation(Vec3(0.25, 0, 0))), 1e-15);
}

TEST(TrajectorySample, OutOfRange) {
  const Trajectory traj = identity_trajectory(10);
  EXPECT_EQ(code_of([&] { traj.sample(-0.001); }), ErrorCode::kOutOfRange);
  EXPECT_EQ(code_of([&] { traj.sample(0.0901); }), ErrorCode::kOutOfRange);
}

TEST(TrajectorySample, LiesOnBracketGeodesic) {
  Rng rng(2);
  const Trajectory traj = random_trajectory(rng, 200);
  for (int i = 0; i < 500; ++i) {
    const double tau = rng.uniform(traj.start_time(), traj.end_time());
    const std::size_t k = traj.bracket(tau);
    const Pose& a = traj[k].pose;
    const Pose& b = traj[k + 1].pose;
    const double alpha = (tau - traj[k].time) / (traj[k + 1].time - traj[k].time);
    const Twist lhs = log_se3(a.inverse() * traj.sample(tau));
    const Twist rhs = alpha * log_se3(a.inverse() * b);
    EXPECT_LT((lhs - rhs).norm(), 1e-9);
  }
}

TEST(TrajectorySample, LinearModeInterpolatesTranslationLinearly) {
  const Pose a = Pose::from_translation(Vec3(0, 0, 0));
  const Pose b(exp_so3(Vec3(0, 0, 1.0)), Vec3(2, 0, 0));
  const Trajectory traj({{0.0, a}, {0.01, b}});
  const Pose mid = traj.sample(0.005, InterpolationMode::kLinear);
  EXPECT_LT((mid.translation() - Vec3(1, 0, 0)).norm(), 1e-12);
  EXPECT_LT((mid.rotation() - exp_so3(Vec3(0, 0, 0.5))).norm(), 1e-12);
  // The se(3) geodesic bends the translation.
  EXPECT_GT((traj.sample(0.005).translation() - Vec3(1, 0, 0)).norm(), 1e-3);
}

TEST(CubicBasis, PartitionOfUnity) {
  for (int i = 0; i <= 1000; ++i) {
    const double u = i / 1000.0;
    const auto w = cubic_bspline_weights(u);
    EXPECT_NEAR(w[0] + w[1] + w[2] + w[3], 1.0, 1e-15);
    for (double x : w) EXPECT_GE(x, 0.0);
  }
}

TEST(CubicBasis, WeightsAtSegmentStart) {
  const auto w = cubic_bspline_weights(0.0);
  EXPECT_DOUBLE_EQ(w[0], 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(w[1], 4.0 / 6.0);
  EXPECT_DOUBLE_EQ(w[2], 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(w[3], 0.0);
}

TEST(BsplineCorrection, ZeroGridIsIdentity) {
  const ControlGrid grid(0.0, 0.1, 11);
  for (double tau = 0.0; tau <= 1.0; tau += 0.037) {
    EXPECT_EQ(bspline_correction(grid, tau).matrix(), Eigen::Matrix4d::Identity());
  }
}

TEST(BsplineCorrection, EqualControlsReproduceValue) {
  ControlGrid grid(0.0, 0.1, 11);
  for (std::size_t i = 3; i <= 6; ++i) grid.knot(i) = make_twist(Vec3::Zero(), Vec3(0.1, 0, 0));
  // Segment 4 (tau in [0.4, 0.5)) uses knots 3..6.
  for (double tau : {0.4, 0.43, 0.47, 0.4999}) {
    const Pose dT = bspline_correction(grid, tau);
    EXPECT_NEAR(dT.translation().x(), 0.1, 1e-15);
    EXPECT_EQ(dT.rotation(), Mat3::Identity());
  }
}

TEST(BsplineCorrection, SingleKnotAtSegmentStart) {
  ControlGrid grid(0.0, 0.1, 11);
  grid.knot(5) = make_twist(Vec3::Zero(), Vec3(1, 0, 0));
  const Pose dT = bspline_correction(grid, 0.5);
  EXPECT_NEAR(dT.translation().x(), 4.0 / 6.0, 1e-15);
  EXPECT_NEAR(bspline_correction(grid, 0.4).translation().x(), 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(bspline_correction(grid, 0.6).translation().x(), 1.0 / 6.0, 1e-15);
}

TEST(BsplineCorrection, RotationIsExponentialOfBlend) {
  ControlGrid grid(0.0, 0.1, 11);
  Rng rng(4);
  for (std::size_t i = 0; i < grid.knot_count(); ++i) grid.knot(i) = random_twist(rng, 0.3, 0.1);
  const double tau = 0.537;
  const Vec6 c = grid.evaluate(tau);
  EXPECT_LT((bspline_correction(grid, tau).rotation() - exp_so3(c.head<3>())).norm(), 1e-15);
}

TEST(BsplineCorrection, BoundaryKnotsReplicated) {
  ControlGrid grid(0.0, 0.1, 11);
  for (std::size_t i = 0; i < grid.knot_count(); ++i) {
    grid.knot(i) = make_twist(Vec3::Zero(), Vec3(static_cast<double>(i), 0, 0));
  }
  // At tau=0 the k-1 neighbour folds onto knot 0: (1/6 + 4/6) * 0 + 1/6 * 1.
  EXPECT_NEAR(grid.evaluate(0.0)(3), 1.0 / 6.0, 1e-15);
  // At the last knot the k+2 neighbour folds onto knot 10.
  EXPECT_NEAR(grid.evaluate(1.0)(3), 9.0 / 6.0 + 10.0 * 4.0 / 6.0 + 10.0 / 6.0, 1e-12);
  const KnotWeights kw = grid.weights(0.0);
  double sum = 0.0;
  for (std::size_t j = 0; j < kw.count; ++j) sum += kw.weight[j];
  EXPECT_NEAR(sum, 1.0, 1e-15);
}

TEST(BsplineCorrection, OutsideSupport) {
  const ControlGrid grid(0.0, 0.1, 11);
  EXPECT_EQ(code_of([&] { bspline_correction(grid, 1.01); }), ErrorCode::kMissingSupport);
  EXPECT_EQ(code_of([&] { bspline_correction(grid, -0.01); }), ErrorCode::kMissingSupport);
}

TEST(BsplineCorrection, SecondOrderContinuousAcrossKnots) {
  ControlGrid grid(0.0, 0.1, 11);
  Rng rng(5);
  for (std::size_t i = 0; i < grid.knot_count(); ++i) grid.knot(i) = rng.normal(0.0, 1.0) * Vec6::Ones();
  // Each segment is a cubic, so four-point one-sided stencils are exact.
  const double h = 0.02;
  for (std::size_t k = 2; k <= 8; ++k) {
    const double tk = grid.knot_time(k);
    auto f = [&](double tau) { return grid.evaluate(tau)(3); };
    const double d1_left = (11 * f(tk) - 18 * f(tk - h) + 9 * f(tk - 2 * h) - 2 * f(tk - 3 * h)) / (6 * h);
    const double d1_right = (-11 * f(tk) + 18 * f(tk + h) - 9 * f(tk + 2 * h) + 2 * f(tk + 3 * h)) / (6 * h);
    const double d2_left = (2 * f(tk) - 5 * f(tk - h) + 4 * f(tk - 2 * h) - f(tk - 3 * h)) / (h * h);
    const double d2_right = (2 * f(tk) - 5 * f(tk + h) + 4 * f(tk + 2 * h) - f(tk + 3 * h)) / (h * h);
    const double s1 = std::max(1.0, std::abs(d1_left));
    const double s2 = std::max(1.0, std::abs(d2_left));
    EXPECT_LT(std::abs(d1_left - d1_right) / s1, 1e-6) << "knot " << k;
    EXPECT_LT(std::abs(d2_left - d2_right) / s2, 1e-6) << "knot " << k;
  }
}

TEST(BsplineCorrection, AnalyticDerivativesContinuous) {
  // Exact polynomial derivatives of the basis at u=1 and u=0 of the next segment.
  auto d1 = [](double u) {
    return std::array<double, 4>{-(1 - u) * (1 - u) / 2, (3 * u * u - 4 * u) / 2,
                                 (-3 * u * u + 2 * u + 1) / 2, u * u / 2};
  };
  auto d2 = [](double u) { return std::array<double, 4>{1 - u, 3 * u - 2, -3 * u + 1, u}; };
  // Segment k at u=1 uses knots k-1..k+2; segment k+1 at u=0 uses k..k+3.
  const auto a1 = d1(1.0), b1 = d1(0.0), a2 = d2(1.0), b2 = d2(0.0);
  EXPECT_DOUBLE_EQ(a1[0], 0.0);
  EXPECT_DOUBLE_EQ(a2[0], 0.0);
  for (int j = 0; j < 3; ++j) {
    EXPECT_NEAR(a1[j + 1], b1[j], 1e-15);
    EXPECT_NEAR(a2[j + 1], b2[j], 1e-15);
  }
  EXPECT_DOUBLE_EQ(b1[3], 0.0);
  EXPECT_DOUBLE_EQ(b2[3], 0.0);
  // And they match the value basis by differentiation.
  const double u = 0.3, h = 1e-6;
  const auto wp = cubic_bspline_weights(u + h), wm = cubic_bspline_weights(u - h);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR((wp[j] - wm[j]) / (2 * h), d1(u)[j], 1e-9);
}

TEST(ApplyCorrection, ZeroGridIsIdentityMap) {
  Rng rng(6);
  const Trajectory traj = random_trajectory(rng, 101);
  const ControlGrid grid(0.0, 0.1, 11);
  const Trajectory out = apply_correction(traj, grid);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    EXPECT_EQ(out[k].pose.matrix(), traj[k].pose.matrix());
    EXPECT_EQ(out[k].time, traj[k].time);
  }
}

TEST(ApplyCorrection, ConstantTranslation) {
  const Trajectory traj = identity_trajectory(101);
  ControlGrid grid(0.0, 0.1, 11);
  for (std::size_t i = 0; i < grid.knot_count(); ++i) grid.knot(i) = make_twist(Vec3::Zero(), Vec3(0.05, 0, 0));
  const Trajectory out = apply_correction(traj, grid);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    EXPECT_LT(pose_distance(out[k].pose, Pose::from_translation(Vec3(0.05, 0, 0))), 1e-15);
  }
}

TEST(ApplyCorrection, PointwiseComposition) {
  Rng rng(7);
  const Trajectory traj = random_trajectory(rng, 101);
  ControlGrid grid(0.0, 0.1, 11);
  for (std::size_t i = 0; i < grid.knot_count(); ++i) grid.knot(i) = random_twist(rng, 0.2, 0.1);
  const Trajectory out = apply_correction(traj, grid);
  for (std::size_t i = 0; i < grid.knot_count(); ++i) {
    const double tau = grid.knot_time(i);
    const Pose expect = bspline_correction(grid, tau) * traj.sample(tau);
    EXPECT_LT(pose_distance(out.sample(tau), expect), 1e-9) << "knot " << i;
  }
}

TEST(ApplyCorrection, So3R3UpdateAddsTranslation) {
  const Trajectory traj({{0.0, Pose::from_translation(Vec3(10, 0, 0))},
                         {0.01, Pose::from_translation(Vec3(10, 0, 0))}});
  ControlGrid grid(0.0, 0.02, 2);
  for (std::size_t i = 0; i < 2; ++i) grid.knot(i) = make_twist(Vec3(0, 0, 0.1), Vec3(0, 1, 0));
  const Pose se3 = apply_correction(traj, grid, UpdateMode::kSe3)[0].pose;
  const Pose r3 = apply_correction(traj, grid, UpdateMode::kSo3R3)[0].pose;
  EXPECT_LT((r3.translation() - Vec3(10, 1, 0)).norm(), 1e-14);
  EXPECT_LT((se3.translation() - (exp_so3(Vec3(0, 0, 0.1)) * Vec3(10, 0, 0) + Vec3(0, 1, 0))).norm(), 1e-14);
  EXPECT_LT((se3.rotation() - r3.rotation()).norm(), 1e-15);
}

TEST(ApplyCorrection, LinearBasisInterpolatesKnots) {
  const Trajectory traj = identity_trajectory(11);
  ControlGrid grid(0.0, 0.1, 2);
  grid.knot(1) = make_twist(Vec3::Zero(), Vec3(1, 0, 0));
  const Trajectory out = apply_correction(traj, grid, UpdateMode::kSo3R3, CorrectionBasis::kLinear);
  for (std::size_t k = 0; k < out.size(); ++k) {
    EXPECT_NEAR(out[k].pose.translation().x(), out[k].time / 0.1, 1e-12);
  }
}

TEST(ApplyCorrection, MissingSupportListsTimestamps) {
  const Trajectory traj = identity_trajectory(101);
  const ControlGrid grid(0.0, 0.1, 8);
  try {
    apply_correction(traj, grid);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingSupport);
    EXPECT_NE(std::string(e.what()).find("30 uncovered"), std::string::npos) << e.what();
  }
}

TEST(ApplyCorrection, RejectsKnotSpacingAtSampleInterval) {
  const Trajectory traj = identity_trajectory(11);
  const ControlGrid grid(0.0, 0.01, 11);
  EXPECT_EQ(code_of([&] { apply_correction(traj, grid); }), ErrorCode::kInvalidArgument);
}

TEST(ControlGrid, CoveringSpansWindow) {
  const ControlGrid g = ControlGrid::covering(0.0, 5.0, 0.1);
  EXPECT_EQ(g.knot_count(), 51u);
  EXPECT_EQ(ControlGrid::covering(0.0, 5.0, 0.5).knot_count(), 11u);
  EXPECT_EQ(ControlGrid::covering(0.0, 5.0, 0.05).knot_count(), 101u);
  EXPECT_GE(ControlGrid::covering(0.0, 4.99, 0.3).end_time(), 4.99);
}
