#include <gtest/gtest.h>

#include <sstream>

#include "mcslam/error.hpp"
#include "mcslam/experiments.hpp"
#include "mcslam/rng.hpp"
#include "mcslam/temporal_fusion.hpp"

using namespace mcslam;

namespace {

// Floor and two walls of a 4 m room corner, on a 1 cm grid.
std::vector<TimedPoint> room(double t, double x_max = 4.0) {
  std::vector<TimedPoint> pts;
  const double step = 0.01;
  for (double a = 0.0; a < 4.0; a += step) {
    for (double b = 0.0; b < 3.0; b += step) {
      if (a < x_max) pts.push_back({Vec3(a, b + 0.5, 0.0), t});          // floor
      if (a < x_max) pts.push_back({Vec3(a, 0.0, b), t});                // wall y = 0
      if (b + 0.5 < 4.0) pts.push_back({Vec3(0.0, b + 0.5, a * 0.6), t});  // wall x = 0
    }
  }
  return pts;
}

LocalMap make_local(const std::vector<TimedPoint>& pts, double time, bool dense = true,
                    const Vec3& sensor = Vec3(2.0, 2.0, 1.5)) {
  LocalMap l;
  l.sparse = voxelize_sparse(pts);
  if (dense) {
    DenseConfig dc;
    dc.radius = 0.05;
    l.dense = extract_dense_world(pts, sensor, dc);
  }
  l.time = time;
  return l;
}

std::vector<TimedPoint> shifted(std::vector<TimedPoint> pts, const Vec3& d) {
  for (auto& p : pts) p.p += d;
  return pts;
}

}  // namespace

TEST(TemporalFusion, IdenticalLocalFusesEverything) {
  GlobalMap g(0.05);
  TemporalConfig cfg;
  cfg.match.theta_r = 0.05;
  const LocalMap first = make_local(room(0.0), 0.0);
  const TemporalStepResult r0 = temporal_fusion_step(first, g, cfg, 0);
  EXPECT_EQ(r0.stats.n_new, first.dense.size());
  EXPECT_EQ(g.dense.size(), first.dense.size());

  LocalMap again = first;
  again.time = 1.0;
  const TemporalStepResult r1 = temporal_fusion_step(again, g, cfg, 1);
  EXPECT_EQ(r1.stats.n_fused, first.dense.size());
  EXPECT_EQ(r1.stats.n_new, 0u);
  EXPECT_FALSE(r1.trigger.has_value());
  // Surfels observed twice in one step become stable and may collapse onto a
  // stable neighbour.
  EXPECT_EQ(g.dense.size() + r1.stats.n_resolved, first.dense.size());
  EXPECT_EQ(r1.stats.n_active, g.dense.size());
}

TEST(TemporalFusion, ShiftedRevisitTriggersWithMisalignment) {
  GlobalMap g(0.05);
  TemporalConfig cfg;
  cfg.match.theta_r = 0.05;
  temporal_fusion_step(make_local(room(0.0), 0.0, false), g, cfg, 0);
  // 80% of the room, seen again 40 s later with a 0.2 m drift in x.
  const LocalMap revisit = make_local(shifted(room(40.0, 3.2), Vec3(0.2, 0.0, 0.0)), 40.0, false);
  const TemporalStepResult r = temporal_fusion_step(revisit, g, cfg, 1);
  ASSERT_TRUE(r.trigger.has_value()) << "inlier " << r.stats.icp_inlier << " dist " << r.stats.icp_dist;
  EXPECT_TRUE(r.stats.triggered);
  EXPECT_GT(r.stats.icp_inlier, cfg.theta_in);
  EXPECT_LT((r.trigger->misalignment.translation() - Vec3(0.2, 0.0, 0.0)).norm(), 0.01);
  EXPECT_LT(rotation_angle(r.trigger->misalignment.rotation()), 0.01);
  for (const auto& [src, dst] : r.trigger->pairs) EXPECT_NEAR((src - dst).x(), 0.2, 0.02);
}

TEST(TemporalFusion, AlignedRevisitDoesNotTrigger) {
  GlobalMap g(0.05);
  TemporalConfig cfg;
  temporal_fusion_step(make_local(room(0.0), 0.0, false), g, cfg, 0);
  const TemporalStepResult r = temporal_fusion_step(make_local(room(40.0, 3.2), 40.0, false), g, cfg, 1);
  EXPECT_FALSE(r.trigger.has_value());
  EXPECT_GT(r.stats.icp_inlier, cfg.theta_in);
  EXPECT_LT(r.stats.icp_dist, 1e-3);
}

TEST(TemporalFusion, DisjointLocalIsPureInsertion) {
  GlobalMap g(0.05);
  TemporalConfig cfg;
  cfg.match.theta_r = 0.05;
  temporal_fusion_step(make_local(room(0.0), 0.0), g, cfg, 0);
  const std::size_t before = g.dense.size();
  const LocalMap far = make_local(shifted(room(1.0), Vec3(50.0, 0.0, 0.0)), 1.0, true, Vec3(52.0, 2.0, 1.5));
  const TemporalStepResult r = temporal_fusion_step(far, g, cfg, 1);
  EXPECT_EQ(g.dense.size(), before + far.dense.size());
  EXPECT_EQ(r.stats.n_new, far.dense.size());
  EXPECT_EQ(r.stats.n_fused, 0u);
}

TEST(TemporalFusion, UnstableSurfelsCulledAfterCullAge) {
  GlobalMap g(0.05);
  TemporalConfig cfg;
  cfg.match.theta_r = 0.05;
  const LocalMap first = make_local(room(0.0), 0.0);
  temporal_fusion_step(first, g, cfg, 0);
  const LocalMap far = make_local(shifted(room(61.0), Vec3(50.0, 0.0, 0.0)), 61.0, true, Vec3(52.0, 2.0, 1.5));
  const TemporalStepResult r = temporal_fusion_step(far, g, cfg, 1);
  EXPECT_EQ(r.stats.n_culled, first.dense.size());
  EXPECT_EQ(g.dense.size(), far.dense.size());
}

TEST(TemporalFusion, StabilityAfterThreeObservationsSurvivesCull) {
  GlobalMap g(0.05);
  TemporalConfig cfg;
  cfg.match.theta_r = 0.05;
  const LocalMap first = make_local(room(0.0), 0.0);
  for (int k = 0; k < 3; ++k) {
    LocalMap l = first;
    l.time = k;
    temporal_fusion_step(l, g, cfg, k);
  }
  std::size_t stable = 0;
  for (const auto& [id, s] : g.dense.surfels()) stable += s.stable ? 1 : 0;
  EXPECT_GT(stable, first.dense.size() / 2);
  const TemporalStepResult r = temporal_fusion_step(make_local(shifted(room(100.0), Vec3(50, 0, 0)), 100.0, true, Vec3(52.0, 2.0, 1.5)), g, cfg, 3);
  EXPECT_EQ(r.stats.n_inactive, stable);
}

TEST(TemporalFusion, InactiveOverlapFoldsIntoActiveWhenAligned) {
  GlobalMap g(0.05);
  TemporalConfig cfg;
  cfg.match.theta_r = 0.05;
  const LocalMap first = make_local(room(0.0), 0.0);
  temporal_fusion_step(first, g, cfg, 0);
  const TemporalStepResult r = temporal_fusion_step(make_local(room(40.0), 40.0), g, cfg, 1);
  EXPECT_FALSE(r.trigger.has_value());
  EXPECT_GT(r.stats.n_merged, first.dense.size() / 2);
  EXPECT_EQ(r.stats.n_inactive + r.stats.n_merged, first.dense.size());
}

TEST(TemporalFusion, MetricsCsv) {
  std::ostringstream os;
  FusionStats s;
  s.step = 3;
  s.n_new = 2;
  s.triggered = true;
  write_fusion_metrics(os, {s});
  EXPECT_EQ(os.str(), "step,n_active,n_inactive,n_new,n_fused,n_culled,icp_inlier,icp_dist,triggered\n3,0,0,2,0,0,0,0,1\n");
}

TEST(SparseIcp, RecoversSmallRigidMotion) {
  const std::vector<SparseSurfel> ref = voxelize_sparse(room(0.0));
  const Pose M = exp_se3(make_twist(Vec3(0.01, -0.02, 0.03), Vec3(0.05, -0.04, 0.03)));
  std::vector<TimedPoint> moved = room(0.0);
  for (auto& p : moved) p.p = M * p.p;
  const IcpResult r = sparse_icp(voxelize_sparse(moved), ref);
  EXPECT_TRUE(r.converged);
  const Pose err = r.T * M;
  EXPECT_LT(err.translation().norm(), 5e-3);
  EXPECT_LT(rotation_angle(err.rotation()), 2e-3);
  EXPECT_GT(r.inlier_fraction, 0.9);
}

TEST(SparseIcp, EmptyInputsGiveNoOverlap) {
  const IcpResult r = sparse_icp({}, voxelize_sparse(room(0.0)));
  EXPECT_EQ(r.inlier_fraction, 0.0);
  EXPECT_FALSE(r.converged);
  IcpConfig bad;
  bad.max_iterations = 0;
  EXPECT_THROW(sparse_icp({}, {}, Pose(), bad), Error);
}

TEST(SparseMerge, PooledMomentsMatchDirect) {
  Rng rng(9);
  std::vector<TimedPoint> a, b, all;
  for (int i = 0; i < 50; ++i) a.push_back({Vec3(rng.uniform(), rng.uniform(), 0.1 * rng.uniform()), 1.0});
  for (int i = 0; i < 70; ++i) b.push_back({Vec3(rng.uniform(), rng.uniform(), 0.1 * rng.uniform()), 2.0});
  all = a;
  all.insert(all.end(), b.begin(), b.end());
  SparseConfig cfg;
  cfg.resolutions = {10.0};
  const SparseSurfel m = merge_sparse(voxelize_sparse(a, cfg)[0], voxelize_sparse(b, cfg)[0], 0.1);
  const SparseSurfel d = voxelize_sparse(all, cfg)[0];
  EXPECT_LT((m.centroid - d.centroid).norm(), 1e-12);
  EXPECT_LT((m.covariance - d.covariance).norm(), 1e-12);
  EXPECT_EQ(m.count, 120u);
  EXPECT_EQ(m.timestamp, 2.0);
}

TEST(PlaneFusion, FusedSurfelsBeatRawPointsAndKeepResolution) {
  PlaneFusionConfig cfg;
  cfg.seed = 11;
  const PlaneFusionResult r = plane_fusion_experiment(cfg);
  EXPECT_GT(r.n_fused_surfels, 1000u);
  EXPECT_LE(r.fused_distance, 0.5 * r.raw_distance);
  EXPECT_GT(r.n_updates, 10000u);
  EXPECT_EQ(r.trace_violations, 0u);
  EXPECT_EQ(r.resolution_violations, 0u);
  // Error shrinks with the number of fusions.
  EXPECT_LT(r.by_fusions.at(8).distance, r.by_fusions.at(0).distance);
}
