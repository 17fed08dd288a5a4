#pragma once

#include <functional>
#include <vector>

#include "mcslam/beam_noise.hpp"
#include "mcslam/surfel_map.hpp"

namespace mcslam {

struct MatchParams {
  double theta_r = 0.02;  // m, in-plane gate
  double theta_d = 3.0;   // along-normal gate in units of sigma
};

/// In-plane and along-normal offset of src from dst, measured in dst's plane.
struct PlaneOffset {
  double r = 0.0;
  double d = 0.0;      // absolute
  double sigma = 0.0;  // sqrt(n_s' S_s n_s + n_d' S_d n_d)
};
PlaneOffset plane_offset(const DenseSurfel& src, const DenseSurfel& dst);

/// Both gates: r < theta_r and d / sigma < theta_d.
bool passes_gates(const PlaneOffset& o, const MatchParams& p);

/// Closer than theta_r in-plane and along the normal, in either surfel's
/// tangent plane.
bool surfels_overlap(const DenseSurfel& a, const DenseSurfel& b, double theta_r);

using SurfelFilter = std::function<bool(SurfelId, const DenseSurfel&)>;

/// Candidates from per-trace-class radius queries that cover every surfel able
/// to pass both gates, then the gates. Ids ascending.
std::vector<SurfelId> match_surfel(const DenseSurfel& src, const SurfelMap& map, const MatchParams& p = {},
                                   const SurfelFilter& filter = nullptr);

/// Query radius covering every destination with centroid trace <= dst_trace.
double match_radius(const DenseSurfel& src, double dst_trace, const MatchParams& p);

/// A new observation of one surfel: mean, scatter about the mean, point count
/// and world-frame beam noise.
struct SurfelMeasurement {
  Vec3 mean = Vec3::Zero();
  Mat3 scatter = Mat3::Zero();
  double count = 1.0;
  Mat3 noise = Mat3::Zero();
};

struct FuseResult {
  DenseSurfel surfel;
  bool regularized = false;     // a singular matrix was lifted by 1e-12 I
  bool clamped = false;         // a PSD repair was needed
  bool ambiguous_normal = false;
};

/// Normal-inverse-Wishart update. Requires dst.dof > 4 and count >= 1.
FuseResult fuse_surfel(const DenseSurfel& dst, const SurfelMeasurement& meas, double timestamp);

struct NormalResult {
  Vec3 normal = Vec3::UnitZ();
  bool ambiguous = false;
};
/// Smallest-eigenvalue eigenvector of the scatter, sign-continuous with
/// previous. Keeps previous when the two smallest eigenvalues coincide.
NormalResult extract_normal(const Mat3& scatter, const Vec3& previous);

struct ColourCue {
  double r = 0.0;     // px from the optical centre
  double r_th = 1.0;  // px
  double depth[5] = {1.0, 1.0, 1.0, 1.0, 1.0};  // centre, down, up, left, right
  double e = 1.0, f = 1.0, g = 1.0, w = 4.0;
};
/// Logistic of the summed cue terms, in (0, 1).
double colour_uncertainty(const ColourCue& cue);

struct ColourEstimate {
  Vec3 colour = Vec3::Constant(0.5);
  double sigma = 1.0;
};
/// Precision-weighted mean per channel; combined sigma is the harmonic sum.
ColourEstimate fuse_colour(const ColourEstimate& dst, const ColourEstimate& src);

}  // namespace mcslam
