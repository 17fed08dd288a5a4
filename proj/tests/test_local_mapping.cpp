#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mcslam/error.hpp"
#include "mcslam/local_mapping.hpp"
#include "mcslam/simulation.hpp"
#include "test_util.hpp"

using namespace mcslam;

namespace {

Trajectory static_trajectory(std::size_t n, const Pose& T = Pose()) {
  std::vector<TimedPose> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back({0.01 * static_cast<double>(i), T});
  return Trajectory(std::move(s));
}

ControlGrid zero_grid(const Trajectory& traj, double spacing = 0.1) {
  return ControlGrid::covering(traj.start_time(), traj.end_time(), spacing);
}

SimConfig noise_free(std::uint64_t seed, double window) {
  SimConfig sc;
  sc.seed = seed;
  sc.window = window;
  sc.bias_accel.setZero();
  sc.bias_gyro.setZero();
  sc.sigma_accel = sc.sigma_gyro = 0.0;
  sc.sigma_surfel = sc.sigma_prior = 0.0;
  return sc;
}

LocalConstraints scene_constraints(const SimConfig& sc, const SimulatedWindow& w) {
  LocalConstraints c = gen_surfel_scene(sc, w.truth).constraints;
  c.imu = w.imu;
  return c;
}

struct Mode {
  OptimizationModel model;
  UpdateMode update;
  CorrectionBasis basis;
  InterpolationMode interp;
};

const Mode kModes[] = {
    {OptimizationModel::kComposition, UpdateMode::kSe3, CorrectionBasis::kCubicBSpline, InterpolationMode::kSe3},
    {OptimizationModel::kComposition, UpdateMode::kSo3R3, CorrectionBasis::kLinear, InterpolationMode::kLinear},
    {OptimizationModel::kComposition, UpdateMode::kSo3R3, CorrectionBasis::kCubicBSpline, InterpolationMode::kSe3},
    {OptimizationModel::kSplineDirect, UpdateMode::kSe3, CorrectionBasis::kCubicBSpline, InterpolationMode::kSe3},
};

LocalMappingConfig config_for(const Mode& m, double spacing) {
  LocalMappingConfig cfg;
  cfg.model = m.model;
  cfg.update = m.update;
  cfg.basis = m.basis;
  cfg.interpolation = m.interp;
  cfg.knot_spacing = spacing;
  return cfg;
}

}  // namespace

TEST(SurfelResidual, ZeroForIdenticalWorldPoints) {
  const Trajectory traj = static_trajectory(101, exp_se3(make_twist(Vec3(0.1, -0.2, 0.3), Vec3(1, 2, 3))));
  const Pose T = traj[0].pose;
  const Vec3 x(4.0, -1.0, 2.5);
  SurfelPairConstraint c;
  c.u_a = c.u_b = T.inverse() * x;
  c.tau_a = 0.2;
  c.tau_b = 0.7;
  c.n_ab = Vec3(1, 2, 2) / 3.0;
  EXPECT_NEAR(residual_surfel_pair(c, traj, zero_grid(traj)), 0.0, 1e-12);
}

TEST(SurfelResidual, OffsetAlongNormal) {
  const Trajectory traj = static_trajectory(101);
  SurfelPairConstraint c;
  c.n_ab = Vec3(0, 0, 1);
  c.u_b = Vec3(1, 1, 1);
  c.u_a = c.u_b + 0.001 * c.n_ab;
  c.tau_a = 0.1;
  c.tau_b = 0.5;
  EXPECT_NEAR(residual_surfel_pair(c, traj, zero_grid(traj)), 0.001, 1e-15);
}

TEST(SurfelResidual, OffsetOrthogonalToNormal) {
  const Trajectory traj = static_trajectory(101);
  SurfelPairConstraint c;
  c.n_ab = Vec3(0, 0, 1);
  c.u_b = Vec3(1, 1, 1);
  c.u_a = c.u_b + Vec3(0.3, -0.2, 0.0);
  c.tau_a = 0.1;
  c.tau_b = 0.5;
  EXPECT_NEAR(residual_surfel_pair(c, traj, zero_grid(traj)), 0.0, 1e-15);
}

TEST(SurfelResidual, OutsideSupportThrows) {
  const Trajectory traj = static_trajectory(101);
  SurfelPairConstraint c;
  c.tau_a = 0.1;
  c.tau_b = 1.5;
  EXPECT_THROW(residual_surfel_pair(c, traj, zero_grid(traj)), Error);
}

TEST(MapPriorResidual, ZeroWhenAligned) {
  const Trajectory traj = static_trajectory(101, exp_se3(make_twist(Vec3(0.3, 0.1, -0.2), Vec3(-1, 0, 2))));
  MapPriorConstraint c;
  c.u_c = Vec3(2, -3, 5);
  c.tau_c = 0.33;
  c.u_m = traj.sample(c.tau_c) * c.u_c;
  c.n_mc = Vec3(0, 0.6, 0.8);
  EXPECT_NEAR(residual_map_prior(c, traj, zero_grid(traj)), 0.0, 1e-12);
}

TEST(MapPriorResidual, TranslationAlongNormalGivesNegativeOffset) {
  const Trajectory traj = static_trajectory(101);
  MapPriorConstraint c;
  c.u_c = Vec3(2, -3, 5);
  c.tau_c = 0.33;
  c.u_m = c.u_c;
  c.n_mc = Vec3(0, 0.6, 0.8);
  const double delta = 0.037;
  const Trajectory moved = static_trajectory(101, Pose(Mat3::Identity(), delta * c.n_mc));
  EXPECT_NEAR(residual_map_prior(c, moved, zero_grid(moved)), -delta, 1e-14);
  // The same shift expressed as a constant correction.
  ControlGrid g = zero_grid(traj);
  for (std::size_t i = 0; i < g.knot_count(); ++i) g.knot(i) << Vec3::Zero(), delta * c.n_mc;
  EXPECT_NEAR(residual_map_prior(c, traj, g), -delta, 1e-14);
}

TEST(MapPriorResidual, MatchesDirectFormula) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TimedPose> s;
    Pose T = mcslam::testing::random_pose(rng);
    for (int i = 0; i < 101; ++i) {
      s.push_back({0.01 * i, T});
      T = exp_se3(mcslam::testing::random_twist(rng, 0.02, 0.01)) * T;
    }
    const Trajectory traj(std::move(s));
    ControlGrid g = zero_grid(traj, 0.25);
    for (std::size_t i = 0; i < g.knot_count(); ++i) g.knot(i) = mcslam::testing::random_twist(rng, 0.05, 0.05);
    MapPriorConstraint c;
    c.u_m = rng.normal3(5.0);
    c.u_c = rng.normal3(5.0);
    c.n_mc = rng.unit_vector();
    c.tau_c = rng.uniform(0.0, 1.0);

    // Independent evaluation: correct both bracketing samples, then interpolate.
    const std::size_t k = traj.bracket(c.tau_c);
    const std::size_t k1 = std::min(k + 1, traj.size() - 1);
    const auto correct = [&](std::size_t i) {
      const Vec6 v = g.evaluate(traj[i].time);
      return Pose(exp_so3(v.head<3>()), v.tail<3>()) * traj[i].pose;
    };
    const Pose A = correct(k), B = correct(k1);
    const double alpha = k1 == k ? 0.0 : (c.tau_c - traj[k].time) / (traj[k1].time - traj[k].time);
    const Pose P = A * exp_se3(alpha * log_se3(A.inverse() * B));
    const double expected = c.n_mc.dot(c.u_m - (P.rotation() * c.u_c + P.translation()));
    EXPECT_NEAR(residual_map_prior(c, traj, g), expected, 1e-10);
  }
}

TEST(ImuResidual, ZeroAtRest) {
  const Trajectory traj = static_trajectory(101);
  ImuSample s;
  s.tau = 0.5;
  s.accel = Vec3(0, 0, 9.80665);
  s.gyro.setZero();
  const Vec6 r = residual_imu(s, traj, zero_grid(traj), OptState{});
  EXPECT_LT(r.norm(), 1e-12);
}

TEST(ImuResidual, GyroBiasPassesThrough) {
  const Trajectory traj = static_trajectory(101);
  ImuSample s;
  s.tau = 0.5;
  s.accel = Vec3(0, 0, 9.80665);
  OptState st;
  st.bias_gyro = Vec3(0.01, 0, 0);
  const Vec6 r = residual_imu(s, traj, zero_grid(traj), st);
  EXPECT_LT(r.head<3>().norm(), 1e-12);
  EXPECT_NEAR(r(3), 0.01, 1e-15);
  EXPECT_NEAR(r(4), 0.0, 1e-15);
  EXPECT_NEAR(r(5), 0.0, 1e-15);
}

TEST(ImuResidual, StencilOutsideSupportThrows) {
  const Trajectory traj = static_trajectory(101);
  ImuSample s;
  s.tau = 0.0;
  try {
    residual_imu(s, traj, zero_grid(traj), OptState{});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingSupport);
  }
}

TEST(ImuResidual, SelfConsistentWithSimulator) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    SimConfig sc = noise_free(seed, 5.0);
    const SimulatedWindow w = gen_trajectory_and_imu(sc);
    const ControlGrid g = zero_grid(w.truth);
    double worst = 0.0;
    for (const ImuSample& s : w.imu) worst = std::max(worst, residual_imu(s, w.truth, g, OptState{}).cwiseAbs().maxCoeff());
    EXPECT_LT(worst, 1e-3) << "seed " << seed;
  }
}

TEST(SplineDirect, FitReproducesSmoothTrajectory) {
  std::vector<TimedPose> s;
  for (int i = 0; i <= 100; ++i) {
    const double t = 0.01 * i;
    s.push_back({t, Pose(exp_so3(Vec3(0.1 * t, -0.05 * t, 0.2)), Vec3(t, 2.0 * t, -0.5))});
  }
  const Trajectory traj(std::move(s));
  const ControlGrid g = fit_spline_direct(traj, 0.1);
  EXPECT_EQ(g.knot_count(), 11u);
  for (const TimedPose& tp : traj.samples()) {
    EXPECT_LT(mcslam::testing::pose_distance(spline_direct_pose(g, tp.time), tp.pose), 2e-2);
  }
}

TEST(LinearizeWindow, AnalyticMatchesCentralDifferences) {
  // 100 random states spread over the four model variants.
  Rng rng(11);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Mode& mode = kModes[trial % 4];
    SimConfig sc;
    sc.seed = static_cast<std::uint64_t>(100 + trial);
    sc.window = 1.0;
    sc.n_features = 40;
    const SimulatedWindow w = gen_trajectory_and_imu(sc);
    LocalConstraints cons = scene_constraints(sc, w);
    LocalMappingConfig cfg = config_for(mode, 0.25);
    cfg.window = 1.0;
    OptState st = initial_state(w.init, cfg);
    for (std::size_t i = 0; i < st.grid.knot_count(); ++i) {
      st.grid.knot(i) += mcslam::testing::random_twist(rng, 0.02, 0.02);
    }
    st.bias_accel = rng.normal3(0.05);
    st.bias_gyro = rng.normal3(0.005);
    st.time_lag = rng.uniform(-0.004, 0.004);
    const LinearizedWindow a = linearize_window(cons, w.init, st, cfg, JacobianMode::kAnalytic);
    const LinearizedWindow n = linearize_window(cons, w.init, st, cfg, JacobianMode::kCentralDifference);
    ASSERT_EQ(a.jacobian.rows(), n.jacobian.rows());
    ASSERT_EQ(a.jacobian.cols(), n.jacobian.cols());
    EXPECT_LT((a.residuals - n.residuals).norm(), 1e-12 * (1.0 + n.residuals.norm()));
    const double rel = (a.jacobian - n.jacobian).norm() / n.jacobian.norm();
    EXPECT_LT(rel, 1e-5) << "trial " << trial;
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(OptimizeWindow, GroundTruthIsFixedPoint) {
  const SimConfig sc = noise_free(5, 2.0);
  const SimulatedWindow w = gen_trajectory_and_imu(sc);
  const LocalConstraints cons = scene_constraints(sc, w);
  LocalMappingConfig cfg;
  cfg.window = 2.0;
  cfg.knot_spacing = 0.1;
  const WindowResult r = optimize_window(cons, w.truth, initial_state(w.truth, cfg), cfg);
  EXPECT_TRUE(r.report.converged);
  EXPECT_LE(r.report.iterations.size(), 3u);  // initial entry plus at most two
  EXPECT_LT(r.report.iterations.back().cost, 1e-16);
  for (std::size_t i = 0; i < r.state.grid.knot_count(); ++i) EXPECT_LT(r.state.grid.knot(i).norm(), 1e-9);
  EXPECT_LT(trajectory_error(r.trajectory, w.truth).translation_rms, 1e-9);
}

TEST(OptimizeWindow, CostNonIncreasingAndRecoversDrift) {
  for (const Mode& mode : {kModes[0], kModes[1]}) {
    SimConfig sc;
    sc.seed = 3;
    const SimulatedWindow w = gen_trajectory_and_imu(sc);
    const LocalConstraints cons = scene_constraints(sc, w);
    const LocalMappingConfig cfg = config_for(mode, 0.5);
    const WindowResult r = optimize_window(cons, w.init, initial_state(w.init, cfg), cfg);
    const auto& it = r.report.iterations;
    ASSERT_GE(it.size(), 2u);
    for (std::size_t i = 1; i < it.size(); ++i) EXPECT_LE(it[i].cost, it[i - 1].cost);
    EXPECT_LT(trajectory_error(r.trajectory, w.truth).translation_rms,
              0.5 * trajectory_error(w.init, w.truth).translation_rms);
  }
}

TEST(OptimizeWindow, TooFewResidualsIsDegenerate) {
  const Trajectory traj = static_trajectory(101);
  LocalConstraints cons;
  SurfelPairConstraint c;
  c.tau_a = 0.1;
  c.tau_b = 0.6;
  cons.pairs.push_back(c);
  LocalMappingConfig cfg;
  try {
    optimize_window(cons, traj, initial_state(traj, cfg), cfg);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateGeometry);
  }
}

TEST(OptimizeWindow, ImuOnlyIsRankDeficient) {
  SimConfig sc;
  sc.seed = 4;
  sc.window = 2.0;
  const SimulatedWindow w = gen_trajectory_and_imu(sc);
  LocalConstraints cons;
  cons.imu = w.imu;
  LocalMappingConfig cfg;
  cfg.window = 2.0;
  cfg.knot_spacing = 0.5;
  try {
    optimize_window(cons, w.init, initial_state(w.init, cfg), cfg);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateGeometry);
    EXPECT_NE(std::string(e.what()).find("null-space dimension"), std::string::npos) << e.what();
  }
}

TEST(OptimizeWindow, RejectsTrajectoryLongerThanWindow) {
  const Trajectory traj = static_trajectory(601);
  LocalMappingConfig cfg;
  EXPECT_THROW(optimize_window(LocalConstraints{}, traj, initial_state(traj, cfg), cfg), Error);
}

TEST(OptimizeWindow, ReportCsvHeader) {
  OptimizationReport rep;
  rep.iterations.push_back({0, 2.5, 0.1, 0.2, 0.3, 0.4, 0.0});
  std::ostringstream os;
  write_report_csv(os, rep);
  const std::string out = os.str();
  EXPECT_EQ(out.substr(0, out.find('\n')), "iter,cost,rms_surfel,rms_prior,rms_accel,rms_gyro,step_norm");
  EXPECT_NE(out.find("\n0,2.5,"), std::string::npos);
}

TEST(TrajectoryError, ZeroForIdenticalAndKnownOffset) {
  const Trajectory a = static_trajectory(11);
  EXPECT_EQ(trajectory_error(a, a).translation_rms, 0.0);
  const Trajectory b = static_trajectory(11, Pose(exp_so3(Vec3(0, 0, 0.01)), Vec3(0.003, 0.004, 0)));
  const TrajectoryError e = trajectory_error(b, a);
  EXPECT_NEAR(e.translation_rms, 0.005, 1e-15);
  EXPECT_NEAR(e.rotation_rms, 0.01, 1e-12);
}
