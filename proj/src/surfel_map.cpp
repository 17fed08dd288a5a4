#include "mcslam/surfel_map.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include <Eigen/Eigenvalues>

#include "mcslam/error.hpp"

namespace mcslam {

namespace {

using VoxelKey = std::array<long long, 3>;

VoxelKey voxel_of(const Vec3& p, double res) {
  return {static_cast<long long>(std::floor(p.x() / res)), static_cast<long long>(std::floor(p.y() / res)),
          static_cast<long long>(std::floor(p.z() / res))};
}

struct Moments {
  Vec3 mean = Vec3::Zero();
  Mat3 scatter = Mat3::Zero();  // sum of outer products about the mean
  double t = 0.0;
  std::size_t n = 0;
};

Moments moments(const std::vector<TimedPoint>& pts, const std::vector<std::size_t>& idx) {
  Moments m;
  m.n = idx.size();
  for (std::size_t i : idx) {
    m.mean += pts[i].p;
    m.t += pts[i].t;
  }
  m.mean /= static_cast<double>(m.n);
  m.t /= static_cast<double>(m.n);
  for (std::size_t i : idx) {
    const Vec3 d = pts[i].p - m.mean;
    m.scatter += d * d.transpose();
  }
  return m;
}

Vec3 smallest_eigenvector(const Mat3& M) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(M);
  return es.eigenvectors().col(0).normalized();
}

}  // namespace

bool make_psd(Mat3& M) {
  M = (0.5 * (M + M.transpose())).eval();
  Eigen::SelfAdjointEigenSolver<Mat3> es(M);
  if (es.eigenvalues().minCoeff() >= 0.0) return false;
  const Vec3 ev = es.eigenvalues().cwiseMax(0.0);
  M = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  M = (0.5 * (M + M.transpose())).eval();
  return true;
}

void refresh_shape(SparseSurfel& s, double min_planarity) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(s.covariance);
  const Vec3 ev = es.eigenvalues();  // ascending
  s.planarity = ev(2) > 0.0 ? (ev(1) - ev(0)) / ev(2) : 0.0;
  s.degenerate = s.planarity < min_planarity;
  Vec3 n = es.eigenvectors().col(0).normalized();
  if (n.dot(s.normal) < 0.0) n = -n;
  s.normal = n;
}

SparseSurfel merge_sparse(const SparseSurfel& a, const SparseSurfel& b, double min_planarity) {
  if (a.count < 2 || b.count < 2) throw Error(ErrorCode::kInvalidArgument, "sparse surfels need two points each");
  const double na = static_cast<double>(a.count), nb = static_cast<double>(b.count), n = na + nb;
  SparseSurfel out = a;
  out.centroid = (na * a.centroid + nb * b.centroid) / n;
  const Vec3 d = b.centroid - a.centroid;
  const Mat3 scatter = (na - 1.0) * a.covariance + (nb - 1.0) * b.covariance + (na * nb / n) * d * d.transpose();
  out.covariance = scatter / (n - 1.0);
  make_psd(out.covariance);
  out.count = a.count + b.count;
  out.timestamp = std::max(a.timestamp, b.timestamp);
  refresh_shape(out, min_planarity);
  return out;
}

std::vector<SparseSurfel> voxelize_sparse(const std::vector<TimedPoint>& points, const SparseConfig& cfg) {
  if (cfg.resolutions.empty()) throw Error(ErrorCode::kInvalidArgument, "at least one voxel resolution required");
  std::vector<SparseSurfel> out;
  for (std::size_t level = 0; level < cfg.resolutions.size(); ++level) {
    const double res = cfg.resolutions[level];
    if (!(res > 0.0)) throw Error(ErrorCode::kInvalidArgument, "voxel resolution must be positive");
    std::map<VoxelKey, std::vector<std::size_t>> voxels;
    for (std::size_t i = 0; i < points.size(); ++i) voxels[voxel_of(points[i].p, res)].push_back(i);
    for (const auto& [key, idx] : voxels) {
      if (idx.size() < std::max<std::size_t>(cfg.min_points, 2)) continue;
      const Moments m = moments(points, idx);
      SparseSurfel s;
      s.centroid = m.mean;
      s.covariance = m.scatter / static_cast<double>(m.n - 1);
      make_psd(s.covariance);
      s.count = m.n;
      s.level = static_cast<int>(level);
      s.timestamp = m.t;
      refresh_shape(s, cfg.min_planarity);
      out.push_back(s);
    }
  }
  return out;
}

std::vector<std::size_t> greedy_seeds(const std::vector<Vec3>& points, double radius) {
  SurfelIndex seeds;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    SurfelId near = 0;
    double d = 0.0;
    if (seeds.nearest(points[i], near, d) && d < radius) continue;
    seeds.insert(i, points[i]);
    out.push_back(i);
  }
  return out;
}

namespace {

std::vector<DenseSurfel> extract(const std::vector<TimedPoint>& world, const DenseConfig& cfg,
                                 const auto& origin_at) {
  if (!(cfg.radius > 0.0)) throw Error(ErrorCode::kInvalidArgument, "surfel radius must be positive");
  SurfelIndex points;
  for (std::size_t i = 0; i < world.size(); ++i) points.insert(i, world[i].p);
  std::vector<Vec3> pos(world.size());
  for (std::size_t i = 0; i < world.size(); ++i) pos[i] = world[i].p;
  std::vector<DenseSurfel> out;
  for (std::size_t s : greedy_seeds(pos, cfg.radius)) {
    const std::vector<SurfelId> ids = points.query_radius(world[s].p, cfg.radius);
    if (ids.size() < std::max<std::size_t>(cfg.min_points, 2)) continue;
    const std::vector<std::size_t> idx(ids.begin(), ids.end());
    const Moments m = moments(world, idx);
    DenseSurfel d;
    d.position = m.mean;
    d.scatter = m.scatter;
    make_psd(d.scatter);
    const double n = static_cast<double>(m.n);
    const Vec3 origin = origin_at(m.t);
    d.normal = smallest_eigenvector(d.scatter);
    if (d.normal.dot(origin - d.position) < 0.0) d.normal = -d.normal;
    if (cfg.beam_noise && (d.position - origin).norm() > 0.0) {
      d.noise = beam_noise_world(beam_noise_for(origin, d.position, d.normal, Mat3::Identity(), cfg.noise));
    }
    d.cov_position = d.scatter / (n * (n - 1.0)) + d.noise / n + cfg.floor_variance * Mat3::Identity();
    d.dof = n;
    d.obs_count = 1;
    d.timestamp = m.t;
    d.created = m.t;
    out.push_back(d);
  }
  return out;
}

}  // namespace

std::vector<DenseSurfel> extract_dense(const std::vector<TimedPoint>& points, const Trajectory& traj,
                                       const DenseConfig& cfg) {
  std::vector<TimedPoint> world(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) world[i] = {traj.sample(points[i].t) * points[i].p, points[i].t};
  const double t0 = traj.start_time(), t1 = traj.end_time();
  return extract(world, cfg, [&](double t) { return traj.sample(std::clamp(t, t0, t1)).translation(); });
}

std::vector<DenseSurfel> extract_dense_world(const std::vector<TimedPoint>& points, const Vec3& sensor_origin,
                                             const DenseConfig& cfg) {
  return extract(points, cfg, [&](double) { return sensor_origin; });
}

int SurfelMap::trace_class(double trace) {
  if (!(trace > kTraceClassBase)) return 0;
  return static_cast<int>(std::ceil(std::log(trace / kTraceClassBase) / std::log(4.0)));
}

double SurfelMap::trace_class_bound(int k) { return kTraceClassBase * std::pow(4.0, k); }

void SurfelMap::class_insert(SurfelId id, const DenseSurfel& s) {
  const int k = trace_class(s.cov_position.trace());
  TraceClass& c = classes_[k];
  c.bound = std::max({c.bound, trace_class_bound(k), s.cov_position.trace()});
  c.index.insert(id, s.position);
}

void SurfelMap::class_remove(SurfelId id, const DenseSurfel& s) {
  auto it = classes_.find(trace_class(s.cov_position.trace()));
  it->second.index.remove(id);
  if (it->second.index.empty()) classes_.erase(it);
}

SurfelId SurfelMap::insert(DenseSurfel s) {
  make_psd(s.cov_position);
  make_psd(s.scatter);
  return insert_verbatim(std::move(s));
}

SurfelId SurfelMap::insert_verbatim(DenseSurfel s) {
  const SurfelId id = next_id_++;
  index_.insert(id, s.position);
  class_insert(id, s);
  surfels_.emplace(id, std::move(s));
  return id;
}

void SurfelMap::update(SurfelId id, DenseSurfel s) {
  auto it = surfels_.find(id);
  if (it == surfels_.end()) throw Error(ErrorCode::kInvalidArgument, "unknown surfel id");
  make_psd(s.cov_position);
  make_psd(s.scatter);
  if (s.position != it->second.position) index_.move(id, s.position);
  class_remove(id, it->second);
  class_insert(id, s);
  it->second = std::move(s);
}

bool SurfelMap::remove(SurfelId id) {
  auto it = surfels_.find(id);
  if (it == surfels_.end()) return false;
  class_remove(id, it->second);
  surfels_.erase(it);
  index_.remove(id);
  return true;
}

void SurfelMap::clear() {
  surfels_.clear();
  index_.clear();
  classes_.clear();
}

const DenseSurfel& SurfelMap::at(SurfelId id) const {
  auto it = surfels_.find(id);
  if (it == surfels_.end()) throw Error(ErrorCode::kInvalidArgument, "unknown surfel id");
  return it->second;
}

}  // namespace mcslam
