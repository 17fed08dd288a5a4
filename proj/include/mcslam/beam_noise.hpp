#pragma once

#include "mcslam/lie.hpp"

namespace mcslam {

/// Per-beam measurement noise. The beam frame has z along the ray.
struct BeamNoise {
  double sigma_r2 = 0.0;  // m^2, beam radius (x and y)
  double sigma_d2 = 0.0;  // m^2, nominal depth
  double sigma_i2 = 0.0;  // m^2, incidence-angle term (along the ray)
  Mat3 R_wl = Mat3::Identity();  // lidar to world
  Mat3 R_lb = Mat3::Identity();  // beam to lidar
};

struct NoiseModel {
  double sigma_r = 0.003;           // m
  double sigma_d0 = 0.008;          // m at zero range
  double sigma_d_slope = 0.0005;    // m per m of range
  double beam_divergence = 0.003;   // rad
  double grazing_margin = 1e-3;     // rad below pi/2
};

/// Q_w = (R_wl R_lb) diag(sr2, sr2, si2 + sd2) (R_wl R_lb)^T, symmetrized.
Mat3 beam_noise_world(const BeamNoise& bn);

struct IncidenceVariance {
  double value = 0.0;
  bool clamped = false;  // angle at or beyond the grazing cutoff
};
/// (range * tan(angle) * divergence)^2; angles at the cutoff or beyond are
/// clamped to the cutoff value.
IncidenceVariance incidence_variance(double angle, double range, const NoiseModel& m = {});

/// Beam noise of a point on a surface with the given normal seen from sensor.
BeamNoise beam_noise_for(const Vec3& sensor, const Vec3& point, const Vec3& normal, const Mat3& R_wl,
                         const NoiseModel& m = {});

}  // namespace mcslam
