#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mcslam/deformation.hpp"
#include "mcslam/metric_localization.hpp"
#include "mcslam/simulation.hpp"
#include "mcslam/temporal_fusion.hpp"

namespace mcslam {

struct PlaneFusionConfig {
  std::uint64_t seed = 1;
  std::size_t n_scans = 12;
  PlaneScanConfig scan;
  DenseConfig dense;
  TemporalConfig temporal;
  std::size_t min_fusions = 4;
};

struct PlaneFusionResult {
  double raw_distance = 0.0;    // mean |distance to the true plane| of raw points
  double fused_distance = 0.0;  // same for surfels fused >= min_fusions times
  std::size_t n_fused_surfels = 0;
  std::size_t n_stable = 0;
  std::size_t n_updates = 0;             // surfel updates checked for trace decrease
  std::size_t trace_violations = 0;
  std::size_t resolution_violations = 0;  // overlapping stable pairs
  std::size_t true_plane_pairs = 0;       // stable pairs closer than theta_r in the true plane
  struct Bucket {
    std::size_t count = 0;
    double distance = 0.0;      // mean, m
    double normal_error = 0.0;  // mean, rad
  };
  std::map<std::size_t, Bucket> by_fusions;
};

/// Repeated noisy scans of one plane patch from varying sensor positions, each
/// fused into a growing map.
PlaneFusionResult plane_fusion_experiment(const PlaneFusionConfig& cfg = {});

struct BentMapConfig {
  double extent = 8.0;        // m, side of the floor and wall patches
  double spacing = 0.05;      // m, point grid
  double pass_duration = 50.0;  // s
  double pass_gap = 50.0;       // s between the passes
  Vec3 drift_rotation = Vec3(0.01, -0.02, 0.05);  // rad, about the scene centre
  Vec3 drift_translation = Vec3(0.3, 0.2, 0.05);  // m, of the scene centre
  std::size_t dense_count = 160000;  // sets the node count
  double surfel_radius = 0.02;
  DeformConfig deform;  // temporal_gate infinite means pass_duration is used
};

struct BentMapResult {
  std::size_t n_nodes = 0;
  std::size_t n_constraints = 0;
  double initial_residual = 0.0;  // mean |p_src - p_dest|, m
  double final_residual = 0.0;    // mean |phi(p_src) - p_dest|, m
  double reduction = 0.0;         // 1 - final / initial
  double max_pin_displacement = 0.0;  // max |phi(p_dest) - p_dest|, m
  double pin_ratio = 0.0;             // max pin displacement / initial residual
  double new_pass_error = 0.0;        // mean centroid error of the deformed second pass, m
  bool converged = false;
  int iterations = 0;
};

/// Two passes over a floor and two walls. The second pass drifts by a rigid
/// motion; loop constraints pull it back onto the first.
BentMapResult bent_map_experiment(const BentMapConfig& cfg = {});

struct Table5Config {
  MisalignProtocol protocol = MisalignProtocol::hard();
  std::uint64_t seed = 1;
  std::size_t n_sessions = 50;
  std::size_t n_places = 10;
  PlaceSceneConfig scene;
  SessionConfig session;
  FeatureNoise features;
};

struct Table5Row {
  std::size_t session = 0;
  std::size_t trigger_place = 0;
  double init_t = 0.0;  // m
  double init_r = 0.0;  // rad
  double e_t = 0.0;     // combined, sequential over places
  double e_r = 0.0;
  std::size_t places_used = 0;
  std::size_t accepted = 0;
  bool success = false;
  double icp_e_t = 0.0;  // surfel-only registration at the trigger place
  double icp_e_r = 0.0;
};

struct Table5Summary {
  std::string protocol;
  std::size_t sessions = 0;
  std::size_t successes = 0;
  double median_e_t = 0.0, mean_e_t = 0.0, std_e_t = 0.0;
  double median_e_r = 0.0, mean_e_r = 0.0, std_e_r = 0.0;
  double icp_median_e_t = 0.0, icp_mean_e_t = 0.0, icp_std_e_t = 0.0;
  double icp_median_e_r = 0.0, icp_mean_e_r = 0.0, icp_std_e_r = 0.0;
};

/// Sessions triggered at successive places of one scene. Each draws a
/// misalignment about its trigger place; the ablation runs surfel-only
/// registration without a correspondence gate.
std::vector<Table5Row> table5_experiment(const Table5Config& cfg);
Table5Summary summarize_table5(const std::string& protocol, const std::vector<Table5Row>& rows);

enum class Table2Mode { kLinearComposition, kSe3Composition, kDirect11, kDirect51, kDirect101 };
inline constexpr Table2Mode kTable2Modes[] = {Table2Mode::kLinearComposition, Table2Mode::kSe3Composition,
                                              Table2Mode::kDirect11, Table2Mode::kDirect51, Table2Mode::kDirect101};
const char* to_string(Table2Mode m);

/// Optimizer settings of one column over a window of the given length.
LocalMappingConfig table2_mode_config(Table2Mode m, double window);

struct Table2Row {
  std::uint64_t seed = 0;
  Table2Mode mode = Table2Mode::kSe3Composition;
  double init_t_mm = 0.0;
  double final_t_mm = 0.0;
  double final_r_mrad = 0.0;
  int iterations = 0;
  std::string termination;  // "no_progress" when the best state was taken from NoProgressError
};

/// All five columns on one simulated window.
std::vector<Table2Row> table2_seed(std::uint64_t seed, const SimConfig& base = {});

struct Table2Median {
  Table2Mode mode = Table2Mode::kSe3Composition;
  double final_t_mm = 0.0;
  double final_r_mrad = 0.0;
};
std::vector<Table2Median> table2_medians(const std::vector<Table2Row>& rows);

/// SE(3) spline composition below linear composition and the 11-knot direct
/// model in both translation and rotation medians.
bool table2_ordering_holds(const std::vector<Table2Median>& medians);

/// seed,mode,init_t_mm,final_t_mm,final_r_mrad,iterations,termination then
/// median rows with seed "median".
void write_table2_csv(std::ostream& os, const std::vector<Table2Row>& rows, bool header = true);
void write_table2_medians(std::ostream& os, const std::vector<Table2Median>& medians);

/// protocol,session,trigger_place,init_t,init_r,e_t,e_r,places_used,accepted,success,icp_e_t,icp_e_r
void write_table5_csv(std::ostream& os, const std::string& protocol, const std::vector<Table5Row>& rows, bool header = true);

}  // namespace mcslam
