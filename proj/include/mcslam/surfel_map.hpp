#pragma once

#include <map>
#include <vector>

#include "mcslam/beam_noise.hpp"
#include "mcslam/lie.hpp"
#include "mcslam/octree.hpp"
#include "mcslam/trajectory.hpp"

namespace mcslam {

struct TimedPoint {
  Vec3 p = Vec3::Zero();
  double t = 0.0;
};

/// Ellipsoid surfel from one voxel at one resolution.
struct SparseSurfel {
  Vec3 centroid = Vec3::Zero();
  Mat3 covariance = Mat3::Zero();
  std::size_t count = 0;
  int level = 0;  // index into the resolution list
  double timestamp = 0.0;
  /// (l2 - l3) / l1 with l1 >= l2 >= l3 the covariance eigenvalues.
  double planarity = 0.0;
  bool degenerate = false;  // planarity below the configured floor
  Vec3 normal = Vec3::UnitZ();
};

struct SparseConfig {
  std::vector<double> resolutions{1.0, 0.5, 0.25};  // coarsest first
  std::size_t min_points = 5;
  double min_planarity = 0.1;
};

/// Grouped voxel moments. Empty input gives an empty result.
std::vector<SparseSurfel> voxelize_sparse(const std::vector<TimedPoint>& points, const SparseConfig& cfg = {});

/// Planarity, degeneracy flag and normal from the covariance. The normal keeps
/// the sign of the previous one.
void refresh_shape(SparseSurfel& s, double min_planarity);

/// Pooled moments of two voxels at the same level; timestamp is the later one.
SparseSurfel merge_sparse(const SparseSurfel& a, const SparseSurfel& b, double min_planarity);

/// Disc surfel. Radius is a map-wide constant held by SurfelMap.
struct DenseSurfel {
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Mat3 cov_position = Mat3::Zero();  // centroid uncertainty
  Mat3 scatter = Mat3::Zero();       // accrued scatter
  double dof = 0.0;                  // Wishart degrees of freedom
  std::size_t obs_count = 1;
  double timestamp = 0.0;
  Vec3 colour = Vec3::Constant(0.5);
  double colour_sigma = 1.0;
  bool stable = false;
  double created = 0.0;  // time of the founding observation
  Mat3 noise = Mat3::Zero();  // world-frame beam noise of the founding observation
};

struct DenseConfig {
  double radius = 0.02;
  std::size_t min_points = 5;
  double floor_variance = 1e-8;  // m^2 added to the centroid uncertainty
  bool beam_noise = true;        // add Q_w / n to the centroid uncertainty
  NoiseModel noise;
};

/// Indices of greedily chosen seeds, in input order: a point becomes a seed
/// unless an earlier seed lies closer than radius.
std::vector<std::size_t> greedy_seeds(const std::vector<Vec3>& points, double radius);

/// Fixed-radius neighbourhoods around greedily chosen seeds. Points are in the
/// sensor frame and are moved to the world frame with traj at their own time;
/// normals face the sensor position at the neighbourhood's mean time.
std::vector<DenseSurfel> extract_dense(const std::vector<TimedPoint>& points, const Trajectory& traj,
                                       const DenseConfig& cfg = {});
/// Same for points already in the world frame seen from one sensor origin.
std::vector<DenseSurfel> extract_dense_world(const std::vector<TimedPoint>& points, const Vec3& sensor_origin,
                                             const DenseConfig& cfg = {});

/// Symmetrize and clamp negative eigenvalues to zero. Returns true if clamped.
bool make_psd(Mat3& M);

/// Dense surfel store with stable ids and a spatial index over centroids.
/// Single writer; concurrent const queries are safe.
class SurfelMap {
 public:
  explicit SurfelMap(double radius = 0.02) : radius_(radius) {}

  double radius() const { return radius_; }
  std::size_t size() const { return surfels_.size(); }
  bool empty() const { return surfels_.empty(); }

  SurfelId insert(DenseSurfel s);
  /// No PSD projection; for values read back from a stored map.
  SurfelId insert_verbatim(DenseSurfel s);
  /// Keeps the id; re-indexes if the centroid moved.
  void update(SurfelId id, DenseSurfel s);
  bool remove(SurfelId id);
  void clear();

  bool contains(SurfelId id) const { return surfels_.count(id) != 0; }
  const DenseSurfel& at(SurfelId id) const;
  const std::map<SurfelId, DenseSurfel>& surfels() const { return surfels_; }
  std::vector<SurfelId> query_radius(const Vec3& p, double r) const { return index_.query_radius(p, r); }
  const SurfelIndex& index() const { return index_; }
  SurfelId next_id() const { return next_id_; }

  /// Surfels grouped by the trace of their centroid uncertainty. Every member
  /// of a class has trace <= bound.
  struct TraceClass {
    double bound = 0.0;
    SurfelIndex index;
  };
  const std::map<int, TraceClass>& trace_classes() const { return classes_; }

 private:
  static constexpr double kTraceClassBase = 1e-6;  // m^2
  static int trace_class(double trace);
  static double trace_class_bound(int k);
  void class_insert(SurfelId id, const DenseSurfel& s);
  void class_remove(SurfelId id, const DenseSurfel& s);

  double radius_;
  std::map<SurfelId, DenseSurfel> surfels_;
  SurfelIndex index_;
  std::map<int, TraceClass> classes_;
  SurfelId next_id_ = 0;
};

}  // namespace mcslam
