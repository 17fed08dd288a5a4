#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <vector>

#include "mcslam/lie.hpp"
#include "mcslam/rng.hpp"
#include "mcslam/surfel_map.hpp"

namespace mcslam {

struct DeformConfig {
  double node_density = 0.5;  // nodes per m^2 of surfel area
  std::size_t k_node = 4;     // temporal neighbours per node
  std::size_t k_blend = 4;    // spatial neighbours per deformed point
  double max_influence = std::numeric_limits<double>::infinity();  // m
  double temporal_gate = std::numeric_limits<double>::infinity();  // s
  double w_reg = 1.0;
  double w_pin = 100.0;
  double w_loop = 100.0;
  int max_iterations = 50;
  double step_tolerance = 1e-8;
  double cost_tolerance = 1e-10;
  int max_damping_retries = 5;
  std::size_t n_loop = 256;
  std::uint64_t seed = 1;
};

struct DeformNode {
  Vec3 g = Vec3::Zero();
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  double timestamp = 0.0;
  std::vector<std::size_t> neighbors;  // temporal
};

struct DeformGraph {
  std::vector<DeformNode> nodes;  // ascending timestamp
  std::size_t k_blend = 4;
  double max_influence = std::numeric_limits<double>::infinity();
  double temporal_gate = std::numeric_limits<double>::infinity();
};

/// n = ceil(density * dense_count * pi * radius^2) nodes, at least k_node + 1,
/// drawn without replacement from the sparse centroids and ordered by time.
DeformGraph build_graph(const std::vector<SparseSurfel>& sparse, std::size_t dense_count, double radius,
                        const DeformConfig& cfg = {});

/// Node count of build_graph before clamping to the available surfels.
std::size_t graph_node_count(std::size_t dense_count, double radius, double density, std::size_t k_node);

/// Blending weights over the k_blend nearest admissible nodes. A NaN time
/// admits every node.
struct BlendWeights {
  std::vector<std::pair<std::size_t, double>> weights;  // sum to 1
  bool supported = false;
};
BlendWeights blend_weights(const Vec3& p, const DeformGraph& graph,
                           double time = std::numeric_limits<double>::quiet_NaN());

Vec3 deform_point(const Vec3& p, const DeformGraph& graph, double time = std::numeric_limits<double>::quiet_NaN(),
                  bool* supported = nullptr);
Vec3 deform_point(const Vec3& p, const DeformGraph& graph, const BlendWeights& w);

struct DeformedNormal {
  Vec3 normal = Vec3::UnitZ();
  bool degenerate = false;  // blended vector vanished; input kept
};
DeformedNormal deform_normal(const Vec3& n, const Vec3& p, const DeformGraph& graph,
                             double time = std::numeric_limits<double>::quiet_NaN());

/// R' S R'^T with R' the (non-orthogonal) blended rotation, symmetrized.
Mat3 deform_covariance(const Mat3& S, const Vec3& p, const DeformGraph& graph,
                       double time = std::numeric_limits<double>::quiet_NaN());

/// Writes one rigid motion into every node so that deform_point applies it
/// exactly.
void set_rigid(DeformGraph& graph, const Pose& T);

struct LoopConstraint {
  Vec3 p_src = Vec3::Zero();
  Vec3 p_dest = Vec3::Zero();
  double weight = 1.0;
  double t_src = std::numeric_limits<double>::quiet_NaN();
  double t_dest = std::numeric_limits<double>::quiet_NaN();
};

/// Up to n_loop sources drawn from the local sparse centroids, p_dest =
/// R p_src + t. Destination times come from the nearest inactive surfel
/// (NaN when there is none). A short supply is reported on std::clog.
std::vector<LoopConstraint> make_loop_constraints(const std::vector<SparseSurfel>& local_sparse,
                                                  const std::vector<SparseSurfel>& inactive_sparse, const Pose& Rt,
                                                  const DeformConfig& cfg = {});

struct GraphCost {
  double reg = 0.0;
  double pin = 0.0;
  double loop = 0.0;
  double total = 0.0;  // weighted
};
GraphCost graph_cost(const DeformGraph& graph, const std::vector<LoopConstraint>& loop, const DeformConfig& cfg);

struct GraphOptimization {
  DeformGraph graph;
  GraphCost initial;
  GraphCost final_cost;
  int iterations = 0;
  bool converged = false;
};

/// Damped Gauss-Newton over every node. Each node (R, t) is updated by a
/// left-applied twist. Returns the best graph seen; converged is false on divergence
/// or when the iteration budget runs out.
GraphOptimization optimize_graph(const DeformGraph& graph, const std::vector<LoopConstraint>& loop,
                                 const DeformConfig& cfg = {});

/// Deforms centroids, normals and all covariance-like matrices of both maps.
void deform_surfels(const DeformGraph& graph, SurfelMap& dense, std::vector<SparseSurfel>& sparse);

/// Position deformed as a point; rotation pre-multiplied by the orthonormalized
/// blended rotation.
Pose deform_pose(const Pose& T, const DeformGraph& graph, double time = std::numeric_limits<double>::quiet_NaN());

/// node,gx,gy,gz,tx,ty,tz,rx,ry,rz,timestamp
void write_graph_csv(std::ostream& os, const DeformGraph& graph);

}  // namespace mcslam
