#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <Eigen/Eigenvalues>

#include "mcslam/error.hpp"
#include "mcslam/octree.hpp"
#include "mcslam/rng.hpp"
#include "mcslam/surfel_map.hpp"
#include "test_util.hpp"

using namespace mcslam;

namespace {

Vec3 uniform_box(Rng& rng, double half) {
  return Vec3(rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(-half, half));
}

std::vector<SurfelId> scan_radius(const std::map<SurfelId, Vec3>& pts, const Vec3& p, double r) {
  std::vector<SurfelId> out;
  for (const auto& [id, q] : pts) {
    if ((q - p).norm() <= r) out.push_back(id);
  }
  return out;
}

// Points on the plane through c with unit normal n, uniform in a square.
std::vector<TimedPoint> plane_points(Rng& rng, const Vec3& c, const Vec3& n, double half, std::size_t count,
                                     double noise) {
  const Vec3 u = n.unitOrthogonal();
  const Vec3 v = n.cross(u);
  std::vector<TimedPoint> out;
  for (std::size_t i = 0; i < count; ++i) {
    const Vec3 p = c + rng.uniform(-half, half) * u + rng.uniform(-half, half) * v + rng.normal(0.0, noise) * n;
    out.push_back({p, 0.001 * static_cast<double>(i)});
  }
  return out;
}

bool is_psd(const Mat3& M) {
  if ((M - M.transpose()).norm() > 0.0) return false;
  Eigen::SelfAdjointEigenSolver<Mat3> es(M);
  return es.eigenvalues().minCoeff() >= -1e-12;
}

}  // namespace

TEST(SurfelIndex, EmptyQueriesReturnNothing) {
  SurfelIndex idx;
  EXPECT_TRUE(idx.query_radius(Vec3::Zero(), 10.0).empty());
  SurfelId id;
  double d;
  EXPECT_FALSE(idx.nearest(Vec3::Zero(), id, d));
}

TEST(SurfelIndex, QueryOnStoredCentroid) {
  SurfelIndex idx;
  idx.insert(7, Vec3(1.25, -3.5, 2.0));
  idx.insert(8, Vec3(1.30, -3.5, 2.0));
  const auto ids = idx.query_radius(Vec3(1.25, -3.5, 2.0), 1e-12);
  ASSERT_EQ(ids.size(), 1u);
  EXPECT_EQ(ids[0], 7u);
  EXPECT_THROW(idx.insert(7, Vec3::Zero()), Error);
}

TEST(SurfelIndex, RandomQueriesMatchLinearScan) {
  Rng rng(1);
  SurfelIndex idx(8, 1.0);
  std::map<SurfelId, Vec3> shadow;
  for (SurfelId i = 0; i < 10000; ++i) {
    const Vec3 p = uniform_box(rng, 20.0);
    idx.insert(i, p);
    shadow[i] = p;
  }
  for (int q = 0; q < 100; ++q) {
    const Vec3 p = uniform_box(rng, 22.0);
    const double r = rng.uniform(0.1, 4.0);
    EXPECT_EQ(idx.query_radius(p, r), scan_radius(shadow, p, r));
  }
}

TEST(SurfelIndex, RandomOperationSequenceMatchesShadow) {
  Rng rng(2);
  SurfelIndex idx(4, 0.5);
  std::map<SurfelId, Vec3> shadow;
  SurfelId next = 0;
  for (int op = 0; op < 10000; ++op) {
    const double u = rng.uniform();
    if (u < 0.5 || shadow.empty()) {
      const Vec3 p = uniform_box(rng, 5.0) + (op % 500 == 0 ? Vec3(100.0, -60.0, 30.0) : Vec3::Zero());
      idx.insert(next, p);
      shadow[next++] = p;
    } else if (u < 0.75) {
      auto it = shadow.begin();
      std::advance(it, static_cast<long>(rng.index(shadow.size())));
      EXPECT_TRUE(idx.remove(it->first));
      shadow.erase(it);
    } else if (u < 0.85) {
      auto it = shadow.begin();
      std::advance(it, static_cast<long>(rng.index(shadow.size())));
      it->second = uniform_box(rng, 5.0);
      idx.move(it->first, it->second);
    } else {
      const Vec3 p = uniform_box(rng, 6.0);
      const double r = rng.uniform(0.0, 3.0);
      ASSERT_EQ(idx.query_radius(p, r), scan_radius(shadow, p, r)) << "op " << op;
      if (!shadow.empty()) {
        SurfelId id = 0;
        double d = 0.0;
        ASSERT_TRUE(idx.nearest(p, id, d));
        double best = 1e300;
        for (const auto& [i, q] : shadow) best = std::min(best, (q - p).norm());
        EXPECT_DOUBLE_EQ(d, best);
      }
    }
    ASSERT_EQ(idx.size(), shadow.size());
  }
  EXPECT_FALSE(idx.remove(next + 5));
}

TEST(SurfelIndex, CopyIsIndependent) {
  SurfelIndex a;
  a.insert(1, Vec3(1, 2, 3));
  SurfelIndex b = a;
  b.insert(2, Vec3(1, 2, 3.1));
  EXPECT_EQ(a.query_radius(Vec3(1, 2, 3), 1.0).size(), 1u);
  EXPECT_EQ(b.query_radius(Vec3(1, 2, 3), 1.0).size(), 2u);
}

TEST(VoxelizeSparse, CubeCornersGiveOneSurfelAtCenter) {
  std::vector<TimedPoint> pts;
  for (int i = 0; i < 8; ++i) pts.push_back({Vec3(1.0 + (i & 1), 1.0 + ((i >> 1) & 1), 1.0 + ((i >> 2) & 1)), 0.5});
  SparseConfig cfg;
  cfg.resolutions = {10.0};
  const auto s = voxelize_sparse(pts, cfg);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_LT((s[0].centroid - Vec3(1.5, 1.5, 1.5)).norm(), 1e-15);
  EXPECT_EQ(s[0].count, 8u);
  EXPECT_DOUBLE_EQ(s[0].timestamp, 0.5);
}

TEST(VoxelizeSparse, CoplanarPointsAreRankTwo) {
  Rng rng(3);
  const Vec3 n = Vec3(1, -2, 0.5).normalized();
  const auto pts = plane_points(rng, Vec3(0.3, 0.3, 0.3), n, 0.2, 200, 0.0);
  SparseConfig cfg;
  cfg.resolutions = {4.0};
  const auto s = voxelize_sparse(pts, cfg);
  ASSERT_FALSE(s.empty());
  for (const SparseSurfel& x : s) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(x.covariance);
    EXPECT_LT(es.eigenvalues()(0), 1e-12 * es.eigenvalues()(2));
    EXPECT_GT(std::abs(x.normal.dot(n)), 1.0 - 1e-9);
    EXPECT_FALSE(x.degenerate);
  }
}

TEST(VoxelizeSparse, MomentsMatchGroupedOracle) {
  Rng rng(4);
  std::vector<TimedPoint> pts;
  for (int i = 0; i < 10000; ++i) pts.push_back({uniform_box(rng, 3.0), rng.uniform(0.0, 5.0)});
  SparseConfig cfg;
  cfg.resolutions = {1.0, 0.5};
  const auto surfels = voxelize_sparse(pts, cfg);

  // Oracle: group by exhaustive key comparison, two-pass moments.
  std::size_t expected = 0;
  std::size_t matched = 0;
  for (std::size_t level = 0; level < 2; ++level) {
    const double res = cfg.resolutions[level];
    std::vector<std::array<long long, 3>> keys;
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const std::array<long long, 3> k{static_cast<long long>(std::floor(pts[i].p.x() / res)),
                                       static_cast<long long>(std::floor(pts[i].p.y() / res)),
                                       static_cast<long long>(std::floor(pts[i].p.z() / res))};
      auto it = std::find(keys.begin(), keys.end(), k);
      if (it == keys.end()) {
        keys.push_back(k);
        groups.push_back({i});
      } else {
        groups[static_cast<std::size_t>(it - keys.begin())].push_back(i);
      }
    }
    for (const auto& g : groups) {
      if (g.size() < cfg.min_points) continue;
      ++expected;
      Vec3 mean = Vec3::Zero();
      for (std::size_t i : g) mean += pts[i].p;
      mean /= static_cast<double>(g.size());
      Mat3 cov = Mat3::Zero();
      for (std::size_t i : g) cov += (pts[i].p - mean) * (pts[i].p - mean).transpose();
      cov /= static_cast<double>(g.size() - 1);
      for (const SparseSurfel& s : surfels) {
        if (s.level == static_cast<int>(level) && s.count == g.size() && (s.centroid - mean).norm() < 1e-12) {
          EXPECT_LT((s.covariance - cov).norm(), 1e-12);
          ++matched;
          break;
        }
      }
    }
  }
  EXPECT_EQ(surfels.size(), expected);
  EXPECT_EQ(matched, expected);
}

TEST(VoxelizeSparse, EmptyInputIsEmpty) {
  EXPECT_TRUE(voxelize_sparse({}).empty());
  SparseConfig cfg;
  cfg.resolutions.clear();
  EXPECT_THROW(voxelize_sparse({}, cfg), Error);
}

TEST(VoxelizeSparse, LinePointsAreFlaggedDegenerate) {
  std::vector<TimedPoint> pts;
  for (int i = 0; i < 20; ++i) pts.push_back({Vec3(0.01 * i + 0.05, 0.3, 0.3), 0.0});
  SparseConfig cfg;
  cfg.resolutions = {1.0};
  const auto s = voxelize_sparse(pts, cfg);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_TRUE(s[0].degenerate);
}

TEST(GreedySeeds, PairwiseSeparatedAndCovering) {
  Rng rng(5);
  std::vector<Vec3> pts;
  for (int i = 0; i < 3000; ++i) pts.push_back(uniform_box(rng, 0.3));
  const double r = 0.05;
  const auto seeds = greedy_seeds(pts, r);
  for (std::size_t a = 0; a < seeds.size(); ++a) {
    for (std::size_t b = a + 1; b < seeds.size(); ++b) EXPECT_GE((pts[seeds[a]] - pts[seeds[b]]).norm(), r);
  }
  for (const Vec3& p : pts) {
    double best = 1e300;
    for (std::size_t s : seeds) best = std::min(best, (pts[s] - p).norm());
    EXPECT_LT(best, r);
  }
}

TEST(ExtractDense, ExactPlaneNormalsParallel) {
  Rng rng(6);
  const Vec3 n = Vec3(0.2, 0.3, 1.0).normalized();
  const Vec3 c(0.0, 0.0, -2.0);
  const auto pts = plane_points(rng, c, n, 0.3, 20000, 0.0);
  const auto surfels = extract_dense_world(pts, Vec3::Zero());
  ASSERT_GT(surfels.size(), 50u);
  for (const DenseSurfel& s : surfels) {
    EXPECT_GE(s.normal.dot(n), 1.0 - 1e-9);  // faces the origin above the plane
    EXPECT_GE(s.dof, 5.0);
    EXPECT_TRUE(is_psd(s.scatter));
    EXPECT_TRUE(is_psd(s.cov_position));
  }
}

TEST(ExtractDense, SensorFrameUsesTrajectory) {
  Rng rng(7);
  std::vector<TimedPose> poses;
  for (int i = 0; i <= 100; ++i) poses.push_back({0.01 * i, Pose(Mat3::Identity(), Vec3(0.5 * 0.01 * i, 0, 0))});
  const Trajectory traj(std::move(poses));
  // World plane z = -1 observed from the moving sensor.
  std::vector<TimedPoint> sensor;
  for (int i = 0; i < 20000; ++i) {
    const double t = rng.uniform(0.0, 1.0);
    const Vec3 w(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), -1.0);
    sensor.push_back({traj.sample(t).inverse() * w, t});
  }
  const auto surfels = extract_dense(sensor, traj);
  ASSERT_FALSE(surfels.empty());
  for (const DenseSurfel& s : surfels) {
    EXPECT_NEAR(s.position.z(), -1.0, 1e-12);
    EXPECT_GE(s.normal.z(), 1.0 - 1e-9);
  }
}

TEST(ExtractDense, NoisyPlaneCentroidsCloserThanRawPoints) {
  Rng rng(8);
  const Vec3 n = Vec3::UnitZ();
  const auto pts = plane_points(rng, Vec3::Zero(), n, 0.3, 30000, 0.005);
  double raw = 0.0;
  for (const TimedPoint& p : pts) raw += std::abs(p.p.dot(n));
  raw /= static_cast<double>(pts.size());
  const auto surfels = extract_dense_world(pts, Vec3(0, 0, 1));
  double fit = 0.0;
  for (const DenseSurfel& s : surfels) fit += std::abs(s.position.dot(n));
  fit /= static_cast<double>(surfels.size());
  EXPECT_LT(fit, raw);
}

TEST(SurfelMap, InsertUpdateRemoveKeepsIndexConsistent) {
  SurfelMap map(0.02);
  DenseSurfel s;
  s.position = Vec3(1, 2, 3);
  const SurfelId a = map.insert(s);
  s.position = Vec3(1, 2, 3.01);
  const SurfelId b = map.insert(s);
  EXPECT_NE(a, b);
  EXPECT_EQ(map.query_radius(Vec3(1, 2, 3), 0.015).size(), 2u);
  s.position = Vec3(5, 5, 5);
  map.update(b, s);
  EXPECT_EQ(map.query_radius(Vec3(1, 2, 3), 0.015), std::vector<SurfelId>{a});
  EXPECT_EQ(map.query_radius(Vec3(5, 5, 5), 0.001), std::vector<SurfelId>{b});
  EXPECT_TRUE(map.remove(a));
  EXPECT_FALSE(map.remove(a));
  EXPECT_EQ(map.size(), 1u);
  EXPECT_THROW(map.at(a), Error);
}

TEST(SurfelMap, StoredCovariancesStaySymmetricPsd) {
  Rng rng(9);
  SurfelMap map;
  std::vector<SurfelId> ids;
  for (int op = 0; op < 2000; ++op) {
    DenseSurfel s;
    s.position = uniform_box(rng, 1.0);
    Mat3 A;
    for (int i = 0; i < 9; ++i) A(i / 3, i % 3) = rng.normal();
    s.cov_position = A;           // arbitrary, possibly indefinite and asymmetric
    s.scatter = A * A.transpose() - 0.1 * Mat3::Identity();
    if (ids.empty() || rng.uniform() < 0.6) {
      ids.push_back(map.insert(s));
    } else {
      map.update(ids[rng.index(ids.size())], s);
    }
  }
  for (const auto& [id, s] : map.surfels()) {
    EXPECT_TRUE(is_psd(s.cov_position)) << id;
    EXPECT_TRUE(is_psd(s.scatter)) << id;
  }
}

TEST(MakePsd, ClampsNegativeEigenvalues) {
  Mat3 M = Vec3(1.0, -0.5, 2.0).asDiagonal();
  EXPECT_TRUE(make_psd(M));
  EXPECT_NEAR(M(1, 1), 0.0, 1e-15);
  EXPECT_NEAR(M(2, 2), 2.0, 1e-15);
  Mat3 P = Mat3::Identity();
  EXPECT_FALSE(make_psd(P));
}
