#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mcslam/lie.hpp"
#include "mcslam/local_mapping.hpp"
#include "mcslam/rng.hpp"
#include "mcslam/surfel_map.hpp"
#include "mcslam/trajectory.hpp"

namespace mcslam {

enum class MotionProfile {
  kSinusoid,
  kRandomWalk,
  kStationary,
};

struct SimConfig {
  std::uint64_t seed = 1;
  double window = 5.0;      // s
  double imu_rate = 100.0;  // Hz
  std::size_t n_features = 1000;

  Vec3 bias_accel = Vec3(0.006, -0.005, 0.004);  // m/s^2
  Vec3 bias_gyro = Vec3(1.5e-3, -1.5e-3, 1e-3);  // rad/s
  double sigma_accel = 0.05;                     // m/s^2 per sample
  double sigma_gyro = 0.005;                     // rad/s per sample
  double sigma_surfel = 0.02;                    // m, pair residual std
  double sigma_prior = 0.02;                     // m, prior residual std

  MotionProfile motion = MotionProfile::kSinusoid;
  double linear_speed = 0.9;    // m/s envelope
  double angular_speed = 0.7;   // rad/s envelope
  double hf_frequency = 5.0;    // Hz
  double hf_translation = 0.002;  // m
  double hf_rotation = 0.002;     // rad

  double range_min = 3.0;   // m, feature distance from the window origin
  double range_max = 20.0;
  double patch_radius = 0.5;  // m, in-plane spread of one feature's observations
  double prior_fraction = 0.3;
  double min_pair_gap = 0.1;  // s
};

struct SimulatedWindow {
  Trajectory truth;
  std::vector<ImuSample> imu;
  Trajectory init;
};

/// Feature planes and the observations derived from them.
struct SimFeature {
  Vec3 point = Vec3::Zero();   // world
  Vec3 normal = Vec3::UnitZ();
};

struct SimScene {
  std::vector<SimFeature> features;
  LocalConstraints constraints;  // pairs and priors; imu left empty
};

/// Truth, IMU stream (samples 1..N-2) synthesized with the optimizer's own
/// finite-difference operators, and the dead-reckoned initial trajectory.
/// IMU readings follow measured = true - bias + noise.
SimulatedWindow gen_trajectory_and_imu(const SimConfig& cfg);

/// Throws kInvalidArgument for an empty feature volume.
SimScene gen_surfel_scene(const SimConfig& cfg, const Trajectory& truth);

/// Dead reckoning from pose/velocity at samples 0 and 1.
Trajectory dead_reckon(const Pose& T0, const Pose& T1, double t0, double rate,
                       const std::vector<ImuSample>& imu, std::size_t n_samples);

struct MisalignProtocol {
  std::string name = "custom";
  double sigma_theta_z = 0.0;   // deg
  double sigma_theta_xy = 0.0;  // deg
  double sigma_t = 0.0;         // m, x and y; z uses kZTranslationScale
  std::size_t n_places = 10;
  std::size_t n_repeats = 50;

  static constexpr double kZTranslationScale = 1.5;

  static MisalignProtocol easy() { return {"easy", 10.0, 1.0, 0.5}; }
  static MisalignProtocol medium() { return {"medium", 50.0, 5.0, 5.0}; }
  static MisalignProtocol hard() { return {"hard", 100.0, 20.0, 50.0}; }
};

/// Random misalignments: rotation vector ~ N(0, diag(sxy, sxy, sz)) and
/// translation ~ N(0, diag(st, st, 1.5 st)).
std::vector<Pose> gen_misalignment(const MisalignProtocol& p, std::uint64_t seed, std::size_t count);

struct PlaneScanConfig {
  Vec3 origin = Vec3::Zero();  // patch centre
  Vec3 normal = Vec3::UnitZ();
  double half_extent = 1.0;    // m, square patch
  std::size_t n_points = 40000;
  NoiseModel noise;
};

/// Points drawn uniformly on a square plane patch, each perturbed by the world
/// beam noise of its ray from sensor.
std::vector<TimedPoint> gen_plane_scan(Rng& rng, const Vec3& sensor, double time, const PlaneScanConfig& cfg);

struct PlaceSceneConfig {
  double half_extent = 8.0;     // m, ground patch
  std::size_t n_boxes = 6;
  double point_density = 25.0;  // points per m^2
  double point_noise = 0.01;    // m, isotropic
  std::size_t n_keypoints = 100;
  double spacing = 10.0;        // m between place centres; place 0 at the origin
  SparseConfig sparse{{0.5}, 5, 0.1};
};

struct PlaceScene {
  Vec3 centre = Vec3::Zero();
  std::vector<SparseSurfel> ref;  // first visit
  std::vector<SparseSurfel> src;  // second visit, still in the true frame
  std::vector<Vec3> keypoints;
};

/// Ground patch with randomly placed and yawed boxes, sampled twice with
/// independent points and noise.
std::vector<PlaceScene> gen_place_scenes(std::uint64_t seed, std::size_t n_places, const PlaceSceneConfig& cfg = {});

}  // namespace mcslam
