#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <vector>

#include "mcslam/deformation.hpp"
#include "mcslam/local_mapping.hpp"
#include "mcslam/metric_localization.hpp"
#include "mcslam/simulation.hpp"
#include "mcslam/temporal_fusion.hpp"

namespace mcslam {

/// Multi-pass synthetic run through a box room. Every window's trajectory
/// and IMU/feature constraints come from the window simulator; the optimized
/// estimate is placed at a waypoint of the room and drives dense and sparse
/// extraction of room points observed along the true trajectory. Later
/// passes carry a compounding rigid drift about the room centre.
struct SlamConfig {
  std::uint64_t seed = 1;
  std::size_t n_passes = 2;
  std::size_t windows_per_pass = 4;
  double pass_gap = 40.0;  // s without data between passes

  Vec3 room = Vec3(8.0, 8.0, 3.0);  // m, floor at z = 0, walls at x, y = 0 and room
  double path_radius = 2.0;         // m, waypoints on a circle about the centre
  double sensor_height = 1.2;       // m
  double max_range = 7.0;           // m
  std::size_t points_per_window = 60000;
  double point_noise = 0.008;  // m, isotropic
  std::size_t n_keypoints = 300;

  Vec3 drift_rotation = Vec3(0.0, 0.0, 0.02);      // rad per pass, about the room centre
  Vec3 drift_translation = Vec3(0.2, -0.1, 0.03);  // m per pass

  SimConfig sim;
  LocalMappingConfig local;
  DenseConfig dense;
  SparseConfig sparse;
  TemporalConfig temporal;
  SessionConfig session;
  FeatureNoise features;
  DeformConfig deform;  // an infinite temporal gate is replaced by the active window

  SlamConfig();
};

struct ClosureRecord {
  std::size_t step = 0;
  Pose icp_alignment;                // from the temporal trigger
  Pose alignment;                    // used for the loop constraints
  bool localized = false;            // metric localization accepted; else the ICP alignment
  double alignment_error_t = 0.0;    // m, against the true correction
  double alignment_error_r = 0.0;    // rad
  std::size_t n_nodes = 0;
  std::size_t n_constraints = 0;
  double initial_residual = 0.0;  // mean |p_src - p_dest|, m
  double final_residual = 0.0;    // mean |phi(p_src) - p_dest|, m
  double reduction = 0.0;
  double map_error_before = 0.0;  // mean distance of this window's surfels to the true room, m
  double map_error_after = 0.0;
  bool converged = false;
};

struct WindowRecord {
  std::size_t step = 0;
  std::size_t pass = 0;
  std::size_t waypoint = 0;
  double start = 0.0;  // s
  double local_t_mm = 0.0;  // optimized window against its truth
  double local_r_mrad = 0.0;
  std::string termination;
};

struct PlaneMetrics {
  double raw_distance = 0.0;  // mean |distance| of raw points to the true room, m
  double fused_distance = 0.0;  // surfels fused >= min_fusions times
  std::size_t n_fused = 0;
  std::size_t min_fusions = 4;
  struct Bucket {
    std::size_t count = 0;
    double distance = 0.0;      // m
    double normal_error = 0.0;  // rad
  };
  std::map<std::size_t, Bucket> by_fusions;  // keyed by obs_count - 1
};

struct SlamResult {
  GlobalMap map;
  std::vector<TimedPose> trajectory;  // estimated, deformed, all windows
  std::vector<TimedPose> truth;
  std::vector<WindowRecord> windows;
  std::vector<FusionStats> fusion;
  std::vector<ClosureRecord> closures;
  std::optional<DeformGraph> last_graph;
  PlaneMetrics planes;
};

SlamResult run_slam(const SlamConfig& cfg = {});

/// Unsigned distance to the nearest room face and that face's normal.
struct RoomDistance {
  double distance = 0.0;
  Vec3 normal = Vec3::UnitZ();
};
RoomDistance room_distance(const Vec3& p, const Vec3& room);

/// time,tx,ty,tz,r00..r22 for samples that need not be uniformly spaced.
void write_poses_csv(std::ostream& os, const std::vector<TimedPose>& poses);
/// step,pass,waypoint,start,local_t_mm,local_r_mrad,termination
void write_windows_csv(std::ostream& os, const std::vector<WindowRecord>& rows);
/// step,localized,alignment_error_t,alignment_error_r,n_nodes,n_constraints,initial_residual,final_residual,reduction,map_error_before,map_error_after,converged
void write_closures_csv(std::ostream& os, const std::vector<ClosureRecord>& rows);
/// fusions,count,distance,normal_error plus raw and fused summary rows.
void write_planes_csv(std::ostream& os, const PlaneMetrics& m);

}  // namespace mcslam
