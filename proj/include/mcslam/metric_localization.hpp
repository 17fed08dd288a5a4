#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mcslam/lie.hpp"
#include "mcslam/rng.hpp"
#include "mcslam/surfel_map.hpp"

namespace mcslam {

struct AlignmentEstimate {
  Pose T;  // maps source (misaligned) coordinates onto the reference
  Mat6 covariance = Mat6::Identity();  // twist coordinates (rot, trans)
  double inlier_fraction = 0.0;
  std::size_t place = 0;
  bool reliable = true;
};

struct OrientedPoint {
  Vec3 p = Vec3::Zero();
  Vec3 n = Vec3::UnitZ();
};

/// Centroids and normals of non-degenerate sparse surfels at one level
/// (negative level keeps all levels).
std::vector<OrientedPoint> oriented_points(const std::vector<SparseSurfel>& sparse, int level = -1);

struct FeaturePair {
  Vec3 p_ref = Vec3::Zero();
  Vec3 p_src = Vec3::Zero();
  bool outlier = false;  // simulation label, never read by the estimator
};

struct RegistrationConfig {
  double beta = 0.5;                 // m per unit normal difference in the 6-D metric
  double max_correspondence = 1.0;   // m, 6-D gate on surfel pairs
  double w_surfel = 1.0;
  double w_feature = 1.0;
  bool use_features = true;
  double cauchy_surfel = 0.2;  // m, fixed
  double cauchy_feature = 0.05;  // m, floor on the median-based scale
  double inlier_distance = 0.1;  // m, |e_p| for the inlier fraction
  double min_inlier = 0.3;       // below this the estimate is unreliable
  int max_iterations = 50;
  double step_tolerance = 1e-8;
};

/// Iteratively re-matched Gauss-Newton over point-to-plane surfel pairs and
/// fixed feature pairs, Cauchy-weighted. Surfel pairs are re-found each
/// iteration as exact nearest neighbours under |dp|^2 + beta^2 |dn|^2 (normal
/// sign ignored). Throws kInsufficientOverlap when fewer than 10 pairs exist.
AlignmentEstimate combined_registration(const std::vector<FeaturePair>& features, const std::vector<OrientedPoint>& src,
                                        const std::vector<OrientedPoint>& ref, const Pose& T0,
                                        const RegistrationConfig& cfg = {});

/// Two-estimate SE(3) fusion iterated to convergence. Throws
/// kDegenerateFusion on a singular information matrix.
AlignmentEstimate sequential_fuse(const AlignmentEstimate& current, const AlignmentEstimate& next);

/// All estimates jointly, same cost.
AlignmentEstimate batch_fuse(const std::vector<AlignmentEstimate>& estimates);

/// Mahalanobis distance squared of log(Tc Tn^-1) under Sc + Sn.
double gate_distance(const AlignmentEstimate& current, const AlignmentEstimate& next);

/// 0.99 quantile of chi-square with 6 degrees of freedom.
inline constexpr double kChi2_6_099 = 16.811893829770927;

struct SessionConfig {
  RegistrationConfig registration;
  double sigma_stop = 1e-4;  // trace of the fused covariance
  std::size_t max_places = 10;
  double gate = kChi2_6_099;
};

struct PlaceData {
  std::vector<OrientedPoint> src;
  std::vector<OrientedPoint> ref;
  std::vector<FeaturePair> features;
};
using PlaceProvider = std::function<PlaceData(std::size_t place)>;

enum class PlaceDecision { kFirst, kAccepted, kRejected, kUnreliable, kNoOverlap };
const char* to_string(PlaceDecision d);

struct PlaceRecord {
  std::size_t place = 0;
  PlaceDecision decision = PlaceDecision::kUnreliable;
  std::optional<AlignmentEstimate> estimate;
  double trace_cov = 0.0;  // fused covariance after this place; 0 if none yet
};

struct SessionResult {
  std::optional<AlignmentEstimate> fused;
  bool success = false;  // false: abstain
  std::vector<PlaceRecord> places;
};

/// Registration at successive places from T0, chi-square cross-gating and
/// sequential fusion until the fused trace drops below sigma_stop.
SessionResult localization_session(const PlaceProvider& provider, const Pose& T0, const SessionConfig& cfg = {});

/// place,e_t,e_r,inlier,accepted,trace_cov,decision; errors against truth.
void write_session_csv(std::ostream& os, const SessionResult& r, const Pose& truth);

struct FeatureNoise {
  double outlier_fraction = 0.3;
  double jitter_3sigma = 0.05;  // m
};

/// Ground-truth feature pairs: p_ref = x + e, p_src = M (x + e'), and an
/// outlier_fraction share with p_ref replaced by a different keypoint.
std::vector<FeaturePair> simulate_features(const std::vector<Vec3>& keypoints, const Pose& M, Rng& rng,
                                           const FeatureNoise& noise = {});

}  // namespace mcslam
