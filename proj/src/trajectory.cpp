#include "mcslam/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mcslam/error.hpp"

namespace mcslam {

Trajectory::Trajectory(std::vector<TimedPose> samples, double nominal_rate_hz)
    : samples_(std::move(samples)), rate_hz_(nominal_rate_hz) {
  if (!(rate_hz_ > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "nominal rate must be positive");
  }
  const double dt = 1.0 / rate_hz_;
  for (std::size_t i = 1; i < samples_.size(); ++i) {
    const double gap = samples_[i].time - samples_[i - 1].time;
    if (!(gap > 0.0)) {
      throw Error(ErrorCode::kInvalidArgument, "timestamps must be strictly increasing");
    }
    if (std::abs(gap - dt) > 0.01 * dt) {
      std::ostringstream msg;
      msg << "sample spacing " << gap << " s at index " << i << " deviates >1% from " << dt;
      throw Error(ErrorCode::kInvalidArgument, msg.str());
    }
  }
}

std::size_t Trajectory::bracket(double tau) const {
  if (!contains(tau)) {
    std::ostringstream msg;
    msg << "time " << tau << " outside trajectory";
    throw Error(ErrorCode::kOutOfRange, msg.str());
  }
  if (samples_.size() < 2) return 0;
  // Uniform sampling makes the direct index a near-exact guess.
  const double rel = (tau - samples_.front().time) * rate_hz_;
  std::size_t k = static_cast<std::size_t>(std::clamp(rel, 0.0, static_cast<double>(size() - 2)));
  while (k > 0 && samples_[k].time > tau) --k;
  while (k + 2 < samples_.size() && samples_[k + 1].time < tau) ++k;
  return k;
}

Pose interpolate(const Pose& a, const Pose& b, double alpha, InterpolationMode mode) {
  if (mode == InterpolationMode::kSe3) return interp_pose(a, b, alpha);
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error(ErrorCode::kOutOfRange, "interpolation ratio outside [0,1]");
  }
  const Mat3 R = a.rotation() * exp_so3(alpha * log_so3(a.rotation().transpose() * b.rotation()));
  return Pose(R, (1.0 - alpha) * a.translation() + alpha * b.translation());
}

Pose Trajectory::sample(double tau, InterpolationMode mode) const {
  const std::size_t k = bracket(tau);
  const TimedPose& a = samples_[k];
  if (tau == a.time || samples_.size() == 1) return a.pose;
  const TimedPose& b = samples_[k + 1];
  if (tau == b.time) return b.pose;
  const double alpha = std::clamp((tau - a.time) / (b.time - a.time), 0.0, 1.0);
  return interpolate(a.pose, b.pose, alpha, mode);
}

std::array<double, 4> cubic_bspline_weights(double u) {
  const double u2 = u * u, u3 = u2 * u;
  return {(1.0 - 3.0 * u + 3.0 * u2 - u3) / 6.0,
          (4.0 - 6.0 * u2 + 3.0 * u3) / 6.0,
          (1.0 + 3.0 * u + 3.0 * u2 - 3.0 * u3) / 6.0,
          u3 / 6.0};
}

ControlGrid::ControlGrid(double start_time, double step, std::size_t knot_count)
    : start_(start_time), step_(step), knots_(knot_count, Vec6::Zero()) {
  if (!(step > 0.0) || knot_count < 2) {
    throw Error(ErrorCode::kInvalidArgument, "grid needs a positive step and at least two knots");
  }
}

ControlGrid ControlGrid::covering(double t0, double t1, double step) {
  const double span = (t1 - t0) / step;
  const auto segments = static_cast<std::size_t>(std::max(1.0, std::ceil(span - 1e-9)));
  return ControlGrid(t0, step, segments + 1);
}

void ControlGrid::set_zero() {
  for (Vec6& k : knots_) k.setZero();
}

bool ControlGrid::supports(double tau) const {
  // Half a nanosecond of slack absorbs rounding in knot_time().
  return tau >= start_ - 5e-10 && tau <= end_time() + 5e-10;
}

KnotWeights ControlGrid::weights(double tau, CorrectionBasis basis) const {
  if (!supports(tau)) {
    std::ostringstream msg;
    msg << "time " << tau << " outside spline support [" << start_ << ", " << end_time() << "]";
    throw Error(ErrorCode::kMissingSupport, msg.str());
  }
  const std::size_t n = knots_.size();
  const double rel = std::max(0.0, (tau - start_) / step_);
  const std::size_t k = std::min(static_cast<std::size_t>(rel), n - 2);
  const double u = std::clamp(rel - static_cast<double>(k), 0.0, 1.0);

  KnotWeights out;
  if (basis == CorrectionBasis::kLinear) {
    out.count = 2;
    out.index = {k, k + 1, 0, 0};
    out.weight = {1.0 - u, u, 0.0, 0.0};
    return out;
  }
  const std::array<double, 4> w = cubic_bspline_weights(u);
  // Replicated padding: out-of-grid neighbours fold onto the boundary knot.
  out.count = 0;
  for (int j = 0; j < 4; ++j) {
    const long raw = static_cast<long>(k) - 1 + j;
    const std::size_t idx = static_cast<std::size_t>(std::clamp(raw, 0L, static_cast<long>(n - 1)));
    if (out.count > 0 && out.index[out.count - 1] == idx) {
      out.weight[out.count - 1] += w[j];
    } else {
      out.index[out.count] = idx;
      out.weight[out.count] = w[j];
      ++out.count;
    }
  }
  return out;
}

Vec6 ControlGrid::evaluate(double tau, CorrectionBasis basis) const {
  const KnotWeights kw = weights(tau, basis);
  Vec6 v = Vec6::Zero();
  for (std::size_t j = 0; j < kw.count; ++j) v += kw.weight[j] * knots_[kw.index[j]];
  return v;
}

Pose bspline_correction(const ControlGrid& grid, double tau, CorrectionBasis basis) {
  const Vec6 c = grid.evaluate(tau, basis);
  return Pose(exp_so3(c.head<3>()), c.tail<3>());
}

Pose apply_update(const Pose& pose, const Vec6& correction, UpdateMode mode) {
  const Mat3 dR = exp_so3(correction.head<3>());
  if (mode == UpdateMode::kSe3) {
    return Pose(dR * pose.rotation(), dR * pose.translation() + correction.tail<3>());
  }
  return Pose(dR * pose.rotation(), pose.translation() + correction.tail<3>());
}

Trajectory apply_correction(const Trajectory& traj, const ControlGrid& grid, UpdateMode mode,
                            CorrectionBasis basis) {
  if (!traj.empty() && !(grid.step() > traj.sample_interval())) {
    throw Error(ErrorCode::kInvalidArgument, "knot spacing must exceed the sample interval");
  }
  std::vector<double> uncovered;
  for (const TimedPose& s : traj.samples()) {
    if (!grid.supports(s.time)) uncovered.push_back(s.time);
  }
  if (!uncovered.empty()) {
    std::ostringstream msg;
    msg << uncovered.size() << " uncovered timestamps:";
    for (std::size_t i = 0; i < uncovered.size() && i < 8; ++i) msg << ' ' << uncovered[i];
    if (uncovered.size() > 8) msg << " ...";
    throw Error(ErrorCode::kMissingSupport, msg.str());
  }
  Trajectory out = traj;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    out.set_pose(i, apply_update(traj[i].pose, grid.evaluate(traj[i].time, basis), mode));
  }
  return out;
}

}  // namespace mcslam
