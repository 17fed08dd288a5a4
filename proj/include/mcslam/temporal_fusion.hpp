#pragma once

#include <iosfwd>
#include <optional>
#include <vector>

#include "mcslam/fusion.hpp"
#include "mcslam/surfel_map.hpp"

namespace mcslam {

struct IcpConfig {
  int max_iterations = 20;
  double max_correspondence = 0.5;  // m
  double inlier_distance = 0.05;    // m, point-to-plane
  double min_normal_dot = 0.7;      // |cos| between corresponding normals
  double converged_step = 1e-6;
};

/// T maps local sparse centroids onto the reference map.
struct IcpResult {
  Pose T;
  double inlier_fraction = 0.0;  // inliers / local surfels
  double dist = 0.0;             // rms displacement of inlier centroids under T
  bool converged = false;
  int iterations = 0;
  std::vector<std::pair<std::size_t, std::size_t>> inliers;  // (local, reference)
};

/// Weighted point-to-plane ICP of sparse centroids against sparse reference
/// planes of the same level. Weights are the reference planarity; degenerate
/// reference surfels are skipped.
IcpResult sparse_icp(const std::vector<SparseSurfel>& local, const std::vector<SparseSurfel>& reference,
                     const Pose& T0 = Pose(), const IcpConfig& cfg = {});

struct GlobalMap {
  explicit GlobalMap(double radius = 0.02) : dense(radius) {}
  SurfelMap dense;
  std::vector<SparseSurfel> sparse;
};

/// One local window in the world frame.
struct LocalMap {
  std::vector<SparseSurfel> sparse;
  std::vector<DenseSurfel> dense;
  double time = 0.0;  // end of the window
};

struct TemporalConfig {
  double active_window = 30.0;  // s
  double cull_age = 60.0;       // s
  MatchParams match;
  double theta_in = 0.35;
  double theta_dist = 0.05;  // m
  double theta_n = 0.01;     // m, mean along-normal active/inactive gap
  double min_planarity = 0.1;
  std::vector<double> sparse_resolutions = SparseConfig{}.resolutions;  // by level, for voxel keys
  IcpConfig icp;
};

/// Misalignment between the current local map and the inactive map:
/// local ~= misalignment * inactive.
struct DeformTrigger {
  Pose misalignment;
  double inlier_fraction = 0.0;
  double dist = 0.0;
  std::vector<std::pair<Vec3, Vec3>> pairs;  // (local centroid, aligned centroid)
  /// Moves the local map onto the inactive one.
  Pose alignment() const { return misalignment.inverse(); }
};

struct FusionStats {
  std::size_t step = 0;
  std::size_t n_active = 0;
  std::size_t n_inactive = 0;
  std::size_t n_new = 0;
  std::size_t n_fused = 0;
  std::size_t n_culled = 0;
  std::size_t n_merged = 0;    // inactive surfels folded into active ones
  std::size_t n_resolved = 0;  // overlapping stable pairs collapsed
  double icp_inlier = 0.0;
  double icp_dist = 0.0;
  bool icp_converged = false;
  bool triggered = false;
};

struct TemporalStepResult {
  FusionStats stats;
  std::optional<DeformTrigger> trigger;
};

bool is_active(double timestamp, double now, const TemporalConfig& cfg);

/// One step of active/inactive fusion. The global map is modified in place.
TemporalStepResult temporal_fusion_step(const LocalMap& local, GlobalMap& global, const TemporalConfig& cfg = {},
                                        std::size_t step = 0);

/// Header plus one row per step.
void write_fusion_metrics(std::ostream& os, const std::vector<FusionStats>& rows);

}  // namespace mcslam
