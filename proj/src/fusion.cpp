#include "mcslam/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "mcslam/error.hpp"

namespace mcslam {

Mat3 beam_noise_world(const BeamNoise& bn) {
  const Mat3 R = bn.R_wl * bn.R_lb;
  const Vec3 q(bn.sigma_r2, bn.sigma_r2, bn.sigma_i2 + bn.sigma_d2);
  const Mat3 Q = R * q.asDiagonal() * R.transpose();
  return 0.5 * (Q + Q.transpose());
}

IncidenceVariance incidence_variance(double angle, double range, const NoiseModel& m) {
  if (!(angle >= 0.0) || !(range >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "angle and range must be non-negative");
  IncidenceVariance out;
  const double cutoff = 0.5 * std::numbers::pi - m.grazing_margin;
  if (angle >= cutoff) {
    angle = cutoff;
    out.clamped = true;
  }
  const double s = range * std::tan(angle) * m.beam_divergence;
  out.value = s * s;
  return out;
}

BeamNoise beam_noise_for(const Vec3& sensor, const Vec3& point, const Vec3& normal, const Mat3& R_wl,
                         const NoiseModel& m) {
  const Vec3 ray = point - sensor;
  const double range = ray.norm();
  if (!(range > 0.0)) throw Error(ErrorCode::kInvalidArgument, "point coincides with the sensor");
  const Vec3 z = R_wl.transpose() * ray / range;
  const Vec3 x = z.unitOrthogonal();
  BeamNoise bn;
  bn.R_wl = R_wl;
  bn.R_lb.col(0) = x;
  bn.R_lb.col(1) = z.cross(x);
  bn.R_lb.col(2) = z;
  const double cos_inc = std::clamp(std::abs(normal.normalized().dot(ray / range)), 0.0, 1.0);
  const double sd = m.sigma_d0 + m.sigma_d_slope * range;
  bn.sigma_r2 = m.sigma_r * m.sigma_r;
  bn.sigma_d2 = sd * sd;
  bn.sigma_i2 = incidence_variance(std::acos(cos_inc), range, m).value;
  return bn;
}

PlaneOffset plane_offset(const DenseSurfel& src, const DenseSurfel& dst) {
  const Vec3 delta = src.position - dst.position;
  const double along = dst.normal.dot(delta);
  PlaneOffset o;
  o.d = std::abs(along);
  o.r = (delta - along * dst.normal).norm();
  o.sigma = std::sqrt(std::max(0.0, src.normal.dot(src.cov_position * src.normal) +
                                        dst.normal.dot(dst.cov_position * dst.normal)));
  return o;
}

bool surfels_overlap(const DenseSurfel& a, const DenseSurfel& b, double theta_r) {
  const auto within = [theta_r](const PlaneOffset& o) { return o.r < theta_r && o.d < theta_r; };
  return within(plane_offset(a, b)) || within(plane_offset(b, a));
}

bool passes_gates(const PlaneOffset& o, const MatchParams& p) { return o.r < p.theta_r && o.d < p.theta_d * o.sigma; }

double match_radius(const DenseSurfel& src, double dst_trace, const MatchParams& p) {
  // |delta|^2 = r^2 + d^2 < theta_r^2 + theta_d^2 sigma^2, and sigma^2 is
  // bounded by the source term plus the destination trace.
  const double s2 = std::max(0.0, src.normal.dot(src.cov_position * src.normal)) + std::max(0.0, dst_trace);
  return std::sqrt(p.theta_r * p.theta_r + p.theta_d * p.theta_d * s2);
}

std::vector<SurfelId> match_surfel(const DenseSurfel& src, const SurfelMap& map, const MatchParams& p,
                                   const SurfelFilter& filter) {
  if (!(p.theta_r > 0.0) || !(p.theta_d > 0.0)) throw Error(ErrorCode::kInvalidArgument, "match thresholds must be positive");
  std::vector<SurfelId> out;
  for (const auto& [k, cls] : map.trace_classes()) {
    for (SurfelId id : cls.index.query_radius(src.position, match_radius(src, cls.bound, p))) {
      const DenseSurfel& dst = map.at(id);
      if (filter && !filter(id, dst)) continue;
      if (passes_gates(plane_offset(src, dst), p)) out.push_back(id);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

constexpr double kNz = 3.0;
constexpr std::size_t kStableObservations = 3;

// Lower Cholesky factor, lifting a singular input by 1e-12 I.
Mat3 cholesky(const Mat3& A, bool& regularized) {
  Eigen::LLT<Mat3> llt(A);
  if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0) {
    return llt.matrixL();
  }
  regularized = true;
  Eigen::LLT<Mat3> lifted(A + 1e-12 * Mat3::Identity());
  if (lifted.info() != Eigen::Success) throw Error(ErrorCode::kDegenerateFusion, "matrix not positive semidefinite");
  return lifted.matrixL();
}

}  // namespace

NormalResult extract_normal(const Mat3& scatter, const Vec3& previous) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (scatter + scatter.transpose()));
  const Vec3 ev = es.eigenvalues();
  NormalResult out;
  if (ev(1) - ev(0) <= 1e-9 * std::max(std::abs(ev(1)), 1e-300)) {
    out.normal = previous;
    out.ambiguous = true;
    return out;
  }
  out.normal = es.eigenvectors().col(0).normalized();
  if (out.normal.dot(previous) < 0.0) out.normal = -out.normal;
  return out;
}

FuseResult fuse_surfel(const DenseSurfel& dst, const SurfelMeasurement& meas, double timestamp) {
  if (!(dst.dof > kNz + 1.0)) throw Error(ErrorCode::kInvalidArgument, "destination dof must exceed 4");
  if (!(meas.count >= 1.0)) throw Error(ErrorCode::kInvalidArgument, "measurement needs at least one point");
  FuseResult res;
  const Vec3& mu = dst.position;
  const Mat3& Sigma = dst.cov_position;
  const Mat3 X = dst.scatter / (dst.dof - kNz - 1.0);
  const Mat3 Y = X + meas.noise;
  const Mat3 S = Sigma + Y / meas.count;

  const Mat3 Ls = cholesky(S, res.regularized);
  const Mat3 Ly = cholesky(Y, res.regularized);
  const Mat3 Lx = cholesky(X, res.regularized);
  const Mat3 Ls_inv = Ls.triangularView<Eigen::Lower>().solve(Mat3::Identity());
  const Mat3 Ly_inv = Ly.triangularView<Eigen::Lower>().solve(Mat3::Identity());

  // K = Sigma S^-1 via the Cholesky factor.
  const Mat3 S_inv = Ls_inv.transpose() * Ls_inv;
  const Mat3 K = Sigma * S_inv;
  const Vec3 innov = meas.mean - mu;

  DenseSurfel out = dst;
  out.position = mu + K * innov;
  out.cov_position = Sigma - K * Sigma;
  const Mat3 N = innov * innov.transpose();
  const Mat3 A = Lx * Ls_inv;
  const Mat3 B = Lx * Ly_inv;
  const Mat3 Nbar = A * N * A.transpose();
  const Mat3 Ybar = B * meas.scatter * B.transpose();
  out.scatter = dst.scatter + Nbar + Ybar;
  out.dof = dst.dof + meas.count;
  out.obs_count = dst.obs_count + 1;
  out.timestamp = std::max(dst.timestamp, timestamp);
  out.stable = out.obs_count >= kStableObservations;
  if (make_psd(out.cov_position)) res.clamped = true;
  if (make_psd(out.scatter)) res.clamped = true;

  const NormalResult n = extract_normal(out.scatter, dst.normal);
  out.normal = n.normal;
  res.ambiguous_normal = n.ambiguous;
  res.surfel = out;
  return res;
}

double colour_uncertainty(const ColourCue& cue) {
  if (!(cue.r_th > 0.0)) throw Error(ErrorCode::kInvalidArgument, "r_th must be positive");
  double mean = 0.0;
  for (double d : cue.depth) {
    if (!(d > 0.0)) throw Error(ErrorCode::kInvalidArgument, "depths must be positive");
    mean += d;
  }
  mean /= 5.0;
  double var = 0.0;
  for (double d : cue.depth) var += (d - mean) * (d - mean);
  const double stddev = std::sqrt(var / 5.0);
  const double a_r = cue.e * (cue.r / cue.r_th) - 0.5;
  const double a_v = cue.f * stddev - 0.5;
  const double a_d = cue.g * cue.depth[0] - 0.5;
  const double s = 1.0 / (1.0 + std::exp(-cue.w * (a_r + a_v + a_d)));
  return std::clamp(s, 1e-300, 1.0 - 1e-16);
}

ColourEstimate fuse_colour(const ColourEstimate& dst, const ColourEstimate& src) {
  if (!(dst.sigma > 0.0) || !(src.sigma > 0.0)) throw Error(ErrorCode::kInvalidArgument, "colour sigma must be positive");
  const double pd = 1.0 / dst.sigma, ps = 1.0 / src.sigma;
  ColourEstimate out;
  out.sigma = 1.0 / (pd + ps);
  out.colour = (pd * dst.colour + ps * src.colour) / (pd + ps);
  return out;
}

}  // namespace mcslam
