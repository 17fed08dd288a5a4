#include "mcslam/lie.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "mcslam/error.hpp"

namespace mcslam {
namespace {

// Below this angle the trigonometric coefficients are evaluated from their
// Taylor series; the closed forms lose digits to cancellation well above 1e-8.
constexpr double kSeriesAngle = 1e-2;
constexpr double kLogAngleLimit = std::numbers::pi - 1e-6;

struct So3Coeffs {
  double a;  // sin(t)/t
  double b;  // (1-cos t)/t^2
  double c;  // (t - sin t)/t^3
};

So3Coeffs so3_coeffs(double theta) {
  const double t2 = theta * theta;
  if (theta < kSeriesAngle) {
    const double t4 = t2 * t2, t6 = t4 * t2;
    return {1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0,
            0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362880.0};
  }
  const double s = std::sin(theta), c = std::cos(theta);
  return {s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta)};
}

// (1 - a/(2b)) / t^2, the W^2 coefficient of the inverse SO(3) Jacobian.
double inv_jacobian_coeff(double theta) {
  const double t2 = theta * theta;
  if (theta < kSeriesAngle) {
    return 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  }
  const double s = std::sin(theta), c = std::cos(theta);
  return (1.0 - theta * s / (2.0 * (1.0 - c))) / t2;
}

void require_finite(const Twist& xi) {
  if (!xi.allFinite()) {
    throw Error(ErrorCode::kInvalidArgument, "non-finite twist");
  }
}

// Q block of the SE(3) left Jacobian (translational coupling).
Mat3 se3_q(const Vec3& omega, const Vec3& rho) {
  const double theta = omega.norm();
  const Mat3 W = hat(omega);
  const Mat3 P = hat(rho);
  const Mat3 WP = W * P, PW = P * W, WPW = WP * W;
  double c1, c2, c3;
  if (theta < kSeriesAngle) {
    const double t2 = theta * theta, t4 = t2 * t2, t6 = t4 * t2;
    c1 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362880.0;
    c2 = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0 - t6 / 3628800.0;
    c3 = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0;
  } else {
    const double s = std::sin(theta), c = std::cos(theta);
    const double t2 = theta * theta;
    c1 = (theta - s) / (t2 * theta);
    c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2);
    c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta);
  }
  return 0.5 * P + c1 * (WP + PW + WPW) + c2 * (W * WP + PW * W - 3.0 * WPW) +
         c3 * (WPW * W + W * WPW);
}

}  // namespace

Pose Pose::checked(const Mat3& R, const Vec3& t, double tol) {
  Pose p(R, t);
  if (!p.is_valid(tol)) {
    throw Error(ErrorCode::kInvalidArgument, "rotation is not orthonormal");
  }
  return p;
}

Pose Pose::operator*(const Pose& other) const {
  Pose out(R_ * other.R_, R_ * other.t_ + t_);
  out.chain_ = std::max(chain_, other.chain_) + 1;
  if (out.chain_ >= kReorthonormalizeEvery) {
    out.R_ = orthonormalize(out.R_);
    out.chain_ = 0;
  }
  return out;
}

Pose Pose::inverse() const {
  Pose out(R_.transpose(), -(R_.transpose() * t_));
  out.chain_ = chain_;
  return out;
}

Eigen::Matrix4d Pose::matrix() const {
  Eigen::Matrix4d M = Eigen::Matrix4d::Identity();
  M.topLeftCorner<3, 3>() = R_;
  M.topRightCorner<3, 1>() = t_;
  return M;
}

bool Pose::is_valid(double tol) const {
  if (!R_.allFinite() || !t_.allFinite()) return false;
  return (R_.transpose() * R_ - Mat3::Identity()).norm() < tol &&
         std::abs(R_.determinant() - 1.0) < tol;
}

Mat3 hat(const Vec3& v) {
  Mat3 M;
  M << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return M;
}

Vec3 vee(const Mat3& M) { return Vec3(M(2, 1), M(0, 2), M(1, 0)); }

Mat3 orthonormalize(const Mat3& R) {
  Eigen::JacobiSVD<Mat3> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU();
  const Mat3 V = svd.matrixV();
  if ((U * V.transpose()).determinant() < 0.0) U.col(2) *= -1.0;
  return U * V.transpose();
}

Mat3 exp_so3(const Vec3& omega) {
  const double theta = omega.norm();
  const So3Coeffs k = so3_coeffs(theta);
  const Mat3 W = hat(omega);
  return Mat3::Identity() + k.a * W + k.b * W * W;
}

Vec3 log_so3(const Mat3& R) {
  // v = sin(theta) * axis; atan2 keeps precision at both ends of the range.
  const Vec3 v = 0.5 * vee(R - R.transpose());
  const double cos_theta = std::clamp(0.5 * (R.trace() - 1.0), -1.0, 1.0);
  const double sin_theta = v.norm();
  const double theta = std::atan2(sin_theta, cos_theta);
  if (!(theta < kLogAngleLimit)) {
    throw Error(ErrorCode::kAmbiguousLogarithm,
                "rotation angle " + std::to_string(theta) + " too close to pi");
  }
  return v / so3_coeffs(theta).a;
}

Mat3 left_jacobian_so3(const Vec3& omega) {
  const So3Coeffs k = so3_coeffs(omega.norm());
  const Mat3 W = hat(omega);
  return Mat3::Identity() + k.b * W + k.c * W * W;
}

Mat3 left_jacobian_inv_so3(const Vec3& omega) {
  const Mat3 W = hat(omega);
  return Mat3::Identity() - 0.5 * W + inv_jacobian_coeff(omega.norm()) * W * W;
}

Pose exp_se3(const Twist& xi) {
  require_finite(xi);
  const Vec3 omega = rot_part(xi);
  return Pose(exp_so3(omega), left_jacobian_so3(omega) * trans_part(xi));
}

Twist log_se3(const Pose& T) {
  if (!T.rotation().allFinite() || !T.translation().allFinite()) {
    throw Error(ErrorCode::kInvalidArgument, "non-finite pose");
  }
  const Vec3 omega = log_so3(T.rotation());
  return make_twist(omega, left_jacobian_inv_so3(omega) * T.translation());
}

Mat6 left_jacobian_se3(const Twist& xi) {
  require_finite(xi);
  const Vec3 omega = rot_part(xi);
  const Mat3 J = left_jacobian_so3(omega);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = J;
  out.bottomRightCorner<3, 3>() = J;
  out.bottomLeftCorner<3, 3>() = se3_q(omega, trans_part(xi));
  return out;
}

Mat6 left_jacobian_inv_se3(const Twist& xi) {
  require_finite(xi);
  const Vec3 omega = rot_part(xi);
  const Mat3 Jinv = left_jacobian_inv_so3(omega);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = Jinv;
  out.bottomRightCorner<3, 3>() = Jinv;
  out.bottomLeftCorner<3, 3>() = -Jinv * se3_q(omega, trans_part(xi)) * Jinv;
  return out;
}

Mat6 adjoint(const Pose& T) {
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = T.rotation();
  out.bottomRightCorner<3, 3>() = T.rotation();
  out.bottomLeftCorner<3, 3>() = hat(T.translation()) * T.rotation();
  return out;
}

Pose interp_pose(const Pose& Ta, const Pose& Tb, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error(ErrorCode::kOutOfRange,
                "interpolation ratio " + std::to_string(alpha) + " outside [0,1]");
  }
  if (alpha == 0.0) return Ta;
  if (alpha == 1.0) return Tb;
  return Ta * exp_se3(alpha * log_se3(Ta.inverse() * Tb));
}

double rotation_angle(const Mat3& R) {
  const Vec3 v = 0.5 * vee(R - R.transpose());
  const double cos_theta = std::clamp(0.5 * (R.trace() - 1.0), -1.0, 1.0);
  return std::atan2(v.norm(), cos_theta);
}

}  // namespace mcslam
