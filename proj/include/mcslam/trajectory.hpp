#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "mcslam/lie.hpp"

namespace mcslam {

/// How poses between two discrete samples are evaluated.
enum class InterpolationMode {
  kSe3,     // Ta * exp(alpha * log(Ta^-1 Tb)), on-manifold ("Linear se(3)")
  kLinear,  // translation linear in R^3, rotation along the SO(3) geodesic
};

/// How a correction (r, t) is composed with a trajectory sample.
enum class UpdateMode {
  kSe3,    // T' = Pose(exp(r), t) * T
  kSo3R3,  // R' = exp(r) R, t' = t + dt
};

/// Shape of the correction between control knots.
enum class CorrectionBasis {
  kCubicBSpline,
  kLinear,
};

struct TimedPose {
  double time = 0.0;
  Pose pose;
};

/// Densely sampled trajectory with interpolation between samples.
class Trajectory {
 public:
  static constexpr double kDefaultRateHz = 100.0;

  Trajectory() = default;
  /// Throws kInvalidArgument unless timestamps are strictly increasing and
  /// every spacing is within 1% of 1/nominal_rate_hz.
  explicit Trajectory(std::vector<TimedPose> samples, double nominal_rate_hz = kDefaultRateHz);

  const std::vector<TimedPose>& samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const TimedPose& operator[](std::size_t i) const { return samples_[i]; }
  double start_time() const { return samples_.front().time; }
  double end_time() const { return samples_.back().time; }
  double nominal_rate() const { return rate_hz_; }
  double sample_interval() const { return 1.0 / rate_hz_; }
  bool contains(double tau) const {
    return !samples_.empty() && tau >= start_time() && tau <= end_time();
  }

  /// Index k with t_k <= tau <= t_{k+1} (k = size-2 at the last sample).
  std::size_t bracket(double tau) const;

  /// Interpolated pose; exact sample when tau hits a timestamp.
  /// Throws kOutOfRange outside [start_time, end_time].
  Pose sample(double tau, InterpolationMode mode = InterpolationMode::kSe3) const;

  /// Replace the pose of sample i (timestamps are immutable).
  void set_pose(std::size_t i, const Pose& pose) { samples_[i].pose = pose; }

 private:
  std::vector<TimedPose> samples_;
  double rate_hz_ = kDefaultRateHz;
};

/// Interpolate between two poses with the given mode.
Pose interpolate(const Pose& a, const Pose& b, double alpha, InterpolationMode mode);

/// Up to four knot indices with their basis weights.
struct KnotWeights {
  std::array<std::size_t, 4> index{};
  std::array<double, 4> weight{};
  std::size_t count = 0;
};

/// Uniform cubic B-spline blending weights on knots k-1..k+2 for normalized
/// offset u in [0, 1]: (1-u)^3/6, (3u^3-6u^2+4)/6, (-3u^3+3u^2+3u+1)/6, u^3/6.
std::array<double, 4> cubic_bspline_weights(double u);

/// Uniform grid of control knots; each knot is a 6-vector (c_r, c_t) in twist
/// ordering. Knot i sits at start_time + i * step. Indices k-1..k+2 that fall
/// outside the grid are clamped to the boundary knots (replicated padding).
class ControlGrid {
 public:
  ControlGrid() = default;
  ControlGrid(double start_time, double step, std::size_t knot_count);

  /// Smallest grid starting at t0 whose last knot is at or beyond t1.
  static ControlGrid covering(double t0, double t1, double step);

  double start_time() const { return start_; }
  double step() const { return step_; }
  double end_time() const { return start_ + step_ * static_cast<double>(knots_.size() - 1); }
  std::size_t knot_count() const { return knots_.size(); }
  double knot_time(std::size_t i) const { return start_ + step_ * static_cast<double>(i); }

  Vec6& knot(std::size_t i) { return knots_[i]; }
  const Vec6& knot(std::size_t i) const { return knots_[i]; }
  void set_zero();

  bool supports(double tau) const;
  /// Throws kMissingSupport when tau lies outside [start_time, end_time].
  KnotWeights weights(double tau, CorrectionBasis basis = CorrectionBasis::kCubicBSpline) const;
  /// Blended 6-vector (r_tau, t_tau).
  Vec6 evaluate(double tau, CorrectionBasis basis = CorrectionBasis::kCubicBSpline) const;

 private:
  double start_ = 0.0;
  double step_ = 0.1;
  std::vector<Vec6> knots_;
};

/// Pose(exp([r]x), t) built from the blended control values at tau.
Pose bspline_correction(const ControlGrid& grid, double tau,
                        CorrectionBasis basis = CorrectionBasis::kCubicBSpline);

/// Compose a correction (r, t) with a pose according to the update mode.
Pose apply_update(const Pose& pose, const Vec6& correction, UpdateMode mode);

/// T'_k = dT(tau_k) T_k for every sample. Throws kInvalidArgument when the
/// grid step does not exceed the sample interval and kMissingSupport (listing
/// the uncovered timestamps) when the grid does not span the trajectory.
Trajectory apply_correction(const Trajectory& traj, const ControlGrid& grid,
                            UpdateMode mode = UpdateMode::kSe3,
                            CorrectionBasis basis = CorrectionBasis::kCubicBSpline);

}  // namespace mcslam
