#include <gtest/gtest.h>

#include <sstream>

#include "mcslam/error.hpp"
#include "mcslam/io.hpp"
#include "mcslam/pipeline.hpp"

using namespace mcslam;

namespace {

std::string outputs(const SlamResult& r) {
  std::ostringstream os;
  write_surfel_ply(os, r.map.dense);
  write_poses_csv(os, r.trajectory);
  write_fusion_metrics(os, r.fusion);
  write_closures_csv(os, r.closures);
  write_planes_csv(os, r.planes);
  return os.str();
}

const SlamResult& two_pass() {
  static const SlamResult r = run_slam();
  return r;
}

}  // namespace

TEST(RoomDistance, NearestFace) {
  const Vec3 room(8, 8, 3);
  EXPECT_DOUBLE_EQ(room_distance(Vec3(4, 4, 0.1), room).distance, 0.1);
  EXPECT_EQ(room_distance(Vec3(4, 4, 0.1), room).normal, Vec3::UnitZ());
  EXPECT_DOUBLE_EQ(room_distance(Vec3(7.8, 4, 1), room).distance, 8.0 - 7.8);
  EXPECT_EQ(room_distance(Vec3(7.8, 4, 1), room).normal, -Vec3::UnitX());
  EXPECT_DOUBLE_EQ(room_distance(Vec3(4, -0.05, 1), room).distance, 0.05);
}

TEST(RunSlam, SinglePassFiresNoDeformation) {
  SlamConfig cfg;
  cfg.n_passes = 1;
  const SlamResult r = run_slam(cfg);
  EXPECT_TRUE(r.closures.empty());
  EXPECT_FALSE(r.last_graph.has_value());
  for (const FusionStats& s : r.fusion) EXPECT_FALSE(s.triggered);
  EXPECT_EQ(r.windows.size(), cfg.windows_per_pass);
  EXPECT_EQ(r.trajectory.size(), r.truth.size());
}

TEST(RunSlam, SecondPassFiresExactlyOneDeformation) {
  const SlamResult& r = two_pass();
  ASSERT_EQ(r.closures.size(), 1u);
  const ClosureRecord& c = r.closures.front();
  EXPECT_EQ(c.step, 4u);
  EXPECT_TRUE(c.localized);
  EXPECT_GE(c.reduction, 0.9);
  EXPECT_LE(c.map_error_after, 0.1 * c.map_error_before);
  EXPECT_LT(c.alignment_error_t, 0.05);
  std::size_t triggered = 0;
  for (const FusionStats& s : r.fusion) triggered += s.triggered;
  EXPECT_EQ(triggered, 1u);
}

TEST(RunSlam, WellFusedSurfelsHalveRawError) {
  const PlaneMetrics& m = two_pass().planes;
  ASSERT_GT(m.n_fused, 100u);
  EXPECT_LE(m.fused_distance, 0.5 * m.raw_distance);
}

TEST(RunSlam, DeformedTrajectoryFollowsTruthAfterClosure) {
  const SlamResult& r = two_pass();
  ASSERT_EQ(r.trajectory.size(), r.truth.size());
  const double closure_start = r.windows[r.closures.front().step].start;
  double worst = 0.0;
  for (std::size_t i = 0; i < r.truth.size(); ++i) {
    if (r.truth[i].time < closure_start) continue;
    worst = std::max(worst, (r.trajectory[i].pose.translation() - r.truth[i].pose.translation()).norm());
  }
  EXPECT_LT(worst, 0.1);
}

TEST(RunSlam, SameSeedIsBitIdentical) {
  SlamConfig cfg;
  cfg.points_per_window = 20000;
  EXPECT_EQ(outputs(run_slam(cfg)), outputs(run_slam(cfg)));
}

TEST(RunSlam, RejectsEmptyScenario) {
  SlamConfig cfg;
  cfg.windows_per_pass = 0;
  EXPECT_THROW(run_slam(cfg), Error);
}
