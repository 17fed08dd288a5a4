#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "mcslam/error.hpp"
#include "mcslam/lie.hpp"
#include "test_util.hpp"

using namespace mcslam;
using mcslam::testing::pose_distance;
using mcslam::testing::random_twist;

namespace {

// Truncated power series of the 4x4 twist matrix; independent of the closed
// forms used by exp_se3.
Eigen::Matrix4d series_exp(const Twist& xi, int terms) {
  Eigen::Matrix4d X = Eigen::Matrix4d::Zero();
  X.topLeftCorner<3, 3>() = hat(rot_part(xi));
  X.topRightCorner<3, 1>() = trans_part(xi);
  Eigen::Matrix4d term = Eigen::Matrix4d::Identity();
  Eigen::Matrix4d sum = term;
  for (int k = 1; k < terms; ++k) {
    term = term * X / static_cast<double>(k);
    sum += term;
  }
  return sum;
}

// Left Jacobian by fourth-order central differences of
// d -> log(exp(xi + d) exp(xi)^{-1}).
Mat6 numeric_left_jacobian(const Twist& xi) {
  const double h = 1e-3;
  const Pose base_inv = exp_se3(xi).inverse();
  Mat6 J;
  for (int i = 0; i < 6; ++i) {
    auto f = [&](double s) {
      Twist d = Twist::Zero();
      d(i) = s;
      return log_se3(exp_se3(xi + d) * base_inv);
    };
    J.col(i) = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
  }
  return J;
}

}  // namespace

TEST(ExpSe3, ZeroTwistIsIdentity) {
  const Pose T = exp_se3(Twist::Zero());
  EXPECT_EQ(T.rotation(), Mat3::Identity());
  EXPECT_EQ(T.translation(), Vec3::Zero());
}

TEST(ExpSe3, PureTranslation) {
  const Pose T = exp_se3(make_twist(Vec3::Zero(), Vec3(1, 2, 3)));
  EXPECT_EQ(T.rotation(), Mat3::Identity());
  EXPECT_TRUE(T.translation().isApprox(Vec3(1, 2, 3), 1e-15));
}

TEST(ExpSe3, QuarterTurnMatchesSeries) {
  const Twist xi = make_twist(Vec3(std::numbers::pi / 2, 0, 0), Vec3::Zero());
  const Eigen::Matrix4d oracle = series_exp(xi, 20);
  EXPECT_LT((exp_se3(xi).matrix() - oracle).norm(), 1e-12);
  // And the rotation really is 90 degrees about x.
  Mat3 Rx;
  Rx << 1, 0, 0, 0, 0, -1, 0, 1, 0;
  EXPECT_LT((exp_se3(xi).rotation() - Rx).norm(), 1e-12);
}

TEST(ExpSe3, GeneralTwistMatchesSeries) {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const Twist xi = random_twist(rng, 2.0, 1.0);
    EXPECT_LT((exp_se3(xi).matrix() - series_exp(xi, 40)).norm(), 1e-11);
  }
}

TEST(ExpSe3, RejectsNonFinite) {
  Twist xi = Twist::Zero();
  xi(0) = std::numeric_limits<double>::quiet_NaN();
  try {
    exp_se3(xi);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}

TEST(LogSe3, IdentityIsZero) {
  EXPECT_EQ(log_se3(Pose()), Twist::Zero());
}

TEST(LogSe3, PureTranslation) {
  const Twist xi = log_se3(Pose::from_translation(Vec3(-1, 0.5, 4)));
  EXPECT_EQ(rot_part(xi), Vec3::Zero());
  EXPECT_TRUE(trans_part(xi).isApprox(Vec3(-1, 0.5, 4), 1e-15));
}

TEST(LogSe3, RoundTripThousandTwists) {
  Rng rng(11);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Twist xi = random_twist(rng, 3.0, 2.0);
    worst = std::max(worst, (log_se3(exp_se3(xi)) - xi).norm());
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(LogSe3, ExpLogReproducesPoseNearPi) {
  Rng rng(12);
  for (int i = 0; i < 200; ++i) {
    const double angle = rng.uniform(1e-7, std::numbers::pi - 1e-3);
    const Pose T = exp_se3(make_twist(rng.unit_vector() * angle, rng.normal3(1.0)));
    EXPECT_LT(pose_distance(exp_se3(log_se3(T)), T), 1e-9) << "angle " << angle;
  }
}

TEST(LogSe3, AmbiguousAtPi) {
  const Pose T = Pose::from_rotation(exp_so3(Vec3(0, 0, std::numbers::pi)));
  try {
    log_se3(T);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kAmbiguousLogarithm);
  }
}

TEST(LeftJacobian, IdentityAtZero) {
  EXPECT_EQ(left_jacobian_inv_se3(Twist::Zero()), Mat6::Identity());
  EXPECT_EQ(left_jacobian_se3(Twist::Zero()), Mat6::Identity());
}

TEST(LeftJacobian, CompositionDefect) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Twist xi = random_twist(rng, 2.5, 1.0);
    const Twist small = 1e-4 * make_twist(rng.unit_vector(), rng.unit_vector()).normalized();
    const Pose lhs = exp_se3(left_jacobian_inv_se3(xi) * small + xi);
    const Pose rhs = exp_se3(small) * exp_se3(xi);
    EXPECT_LT(pose_distance(lhs, rhs), 1e-7);
  }
}

TEST(LeftJacobian, InverseTimesNumericJacobianIsIdentity) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const Twist xi = random_twist(rng, 2.5, 1.0);
    const Mat6 J = numeric_left_jacobian(xi);
    EXPECT_LT((left_jacobian_inv_se3(xi) * J - Mat6::Identity()).norm(), 1e-9);
    EXPECT_LT((left_jacobian_se3(xi) - J).norm(), 1e-9);
  }
}

TEST(LeftJacobian, SmallAngleSeriesBranch) {
  Rng rng(6);
  for (double angle : {1e-9, 1e-6, 1e-3, 9e-3, 1.1e-2}) {
    const Twist xi = make_twist(rng.unit_vector() * angle, rng.normal3(1.0));
    const Mat6 J = numeric_left_jacobian(xi);
    EXPECT_LT((left_jacobian_inv_se3(xi) * J - Mat6::Identity()).norm(), 1e-9);
  }
}

TEST(Adjoint, ConjugatesExponential) {
  Rng rng(8);
  const Pose T = mcslam::testing::random_pose(rng);
  const Twist d = random_twist(rng, 1.0, 1.0);
  EXPECT_LT(pose_distance(T * exp_se3(d) * T.inverse(), exp_se3(adjoint(T) * d)), 1e-12);
}

TEST(InterpPose, Endpoints) {
  Rng rng(9);
  const Pose a = mcslam::testing::random_pose(rng), b = mcslam::testing::random_pose(rng);
  EXPECT_LT(pose_distance(interp_pose(a, b, 0.0), a), 1e-15);
  EXPECT_LT(pose_distance(interp_pose(a, b, 1.0), b), 1e-15);
}

TEST(InterpPose, TranslationMidpoint) {
  const Pose mid = interp_pose(Pose(), Pose::from_translation(Vec3(2, 0, 0)), 0.5);
  EXPECT_LT(pose_distance(mid, Pose::from_translation(Vec3(1, 0, 0))), 1e-15);
}

TEST(InterpPose, RotationScalesAngle) {
  const double q = std::numbers::pi / 2;
  const Pose third = interp_pose(Pose(), Pose::from_rotation(exp_so3(Vec3(0, 0, q))), 1.0 / 3.0);
  // Axis-angle scaling: a third of 90 degrees about z.
  Mat3 Rz;
  const double c = std::cos(q / 3), s = std::sin(q / 3);
  Rz << c, -s, 0, s, c, 0, 0, 0, 1;
  EXPECT_LT((third.rotation() - Rz).norm(), 1e-12);
}

TEST(InterpPose, SymmetricInDirection) {
  Rng rng(10);
  for (int i = 0; i < 200; ++i) {
    const Pose a = mcslam::testing::random_pose(rng, 1.5);
    const Pose b = a * mcslam::testing::random_pose(rng, 1.5);
    const double alpha = rng.uniform();
    EXPECT_LT(pose_distance(interp_pose(a, b, alpha), interp_pose(b, a, 1.0 - alpha)), 1e-9);
  }
}

TEST(InterpPose, RejectsOutOfRange) {
  try {
    interp_pose(Pose(), Pose(), 1.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kOutOfRange);
  }
}

TEST(Pose, LongCompositionChainStaysOrthonormal) {
  Rng rng(13);
  Pose acc;
  for (int i = 0; i < 10000; ++i) {
    acc = acc * exp_se3(random_twist(rng, 0.3, 0.1));
  }
  EXPECT_LT((acc.rotation().transpose() * acc.rotation() - Mat3::Identity()).norm(), 1e-9);
  EXPECT_NEAR(acc.rotation().determinant(), 1.0, 1e-9);
  EXPECT_LT(acc.chain_length(), Pose::kReorthonormalizeEvery);
}

TEST(Pose, CheckedRejectsReflection) {
  Mat3 M = Mat3::Identity();
  M(2, 2) = -1.0;
  EXPECT_THROW(Pose::checked(M, Vec3::Zero()), Error);
}
