#pragma once

// SE(3)/SO(3) algebra.
//
// Twist ordering is fixed throughout the library as (rotational, translational):
//   xi = [omega_x, omega_y, omega_z, rho_x, rho_y, rho_z]
// with omega a rotation vector in radians and rho in meters. All Jacobians
// are left Jacobians and perturbations are applied on the left:
//   T <- exp(delta) * T.

#include <Eigen/Dense>
#include <cstdint>

namespace mcslam {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Twist = Vec6;

inline Vec3 rot_part(const Twist& xi) { return xi.head<3>(); }
inline Vec3 trans_part(const Twist& xi) { return xi.tail<3>(); }
inline Twist make_twist(const Vec3& omega, const Vec3& rho) {
  Twist xi;
  xi << omega, rho;
  return xi;
}

/// Rigid transform with a 3x3 rotation matrix and a translation in meters.
///
/// Composition keeps a chain counter; every 1000 compositions the rotation is
/// projected back onto SO(3) (polar decomposition) to bound drift.
class Pose {
 public:
  static constexpr std::uint32_t kReorthonormalizeEvery = 1000;

  Pose() : R_(Mat3::Identity()), t_(Vec3::Zero()) {}
  Pose(const Mat3& R, const Vec3& t) : R_(R), t_(t) {}

  /// Throws kInvalidArgument when R is not a proper rotation within `tol`.
  static Pose checked(const Mat3& R, const Vec3& t, double tol = 1e-9);
  static Pose identity() { return Pose(); }
  static Pose from_translation(const Vec3& t) { return Pose(Mat3::Identity(), t); }
  static Pose from_rotation(const Mat3& R) { return Pose(R, Vec3::Zero()); }

  const Mat3& rotation() const { return R_; }
  const Vec3& translation() const { return t_; }
  std::uint32_t chain_length() const { return chain_; }

  Pose operator*(const Pose& other) const;
  Vec3 operator*(const Vec3& p) const { return R_ * p + t_; }
  Pose inverse() const;
  Eigen::Matrix4d matrix() const;

  /// ||R^T R - I||_F and |det R - 1| both below tol, entries finite.
  bool is_valid(double tol = 1e-9) const;

 private:
  Mat3 R_;
  Vec3 t_;
  std::uint32_t chain_ = 0;
};

Mat3 hat(const Vec3& v);
Vec3 vee(const Mat3& M);

/// Nearest rotation in Frobenius norm (polar projection).
Mat3 orthonormalize(const Mat3& R);

Mat3 exp_so3(const Vec3& omega);
/// Throws kAmbiguousLogarithm when the angle is within 1e-6 of pi.
Vec3 log_so3(const Mat3& R);
Mat3 left_jacobian_so3(const Vec3& omega);
Mat3 left_jacobian_inv_so3(const Vec3& omega);

/// Matrix exponential of [xi]x. Throws kInvalidArgument on non-finite input.
Pose exp_se3(const Twist& xi);
/// Inverse of exp_se3 for rotation angles below pi - 1e-6.
Twist log_se3(const Pose& T);

/// Left Jacobian of SE(3): exp(xi + d) ~= exp(J(xi) d) exp(xi).
Mat6 left_jacobian_se3(const Twist& xi);
/// Inverse left Jacobian: log(exp(d) exp(xi)) ~= xi + J^{-1}(xi) d.
Mat6 left_jacobian_inv_se3(const Twist& xi);

/// Adjoint so that T exp(d) T^{-1} = exp(Ad_T d).
Mat6 adjoint(const Pose& T);

/// Ta * exp(alpha * log(Ta^{-1} Tb)); alpha outside [0, 1] throws kOutOfRange.
Pose interp_pose(const Pose& Ta, const Pose& Tb, double alpha);

/// Geodesic distance helpers used by the evaluation code.
double rotation_angle(const Mat3& R);

}  // namespace mcslam
