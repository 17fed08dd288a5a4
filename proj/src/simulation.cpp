#include "mcslam/simulation.hpp"

#include <cmath>
#include <numbers>

#include "mcslam/error.hpp"
#include "mcslam/rng.hpp"

namespace mcslam {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Harmonic {
  Vec3 amp = Vec3::Zero();
  Vec3 freq = Vec3::Zero();
  Vec3 phase = Vec3::Zero();

  Vec3 at(double t) const {
    Vec3 v;
    for (int i = 0; i < 3; ++i) v(i) = amp(i) * std::sin(kTwoPi * freq(i) * t + phase(i));
    return v;
  }
};

struct Motion {
  std::vector<Harmonic> translation;
  std::vector<Harmonic> rotation;

  Pose at(double t) const {
    Vec3 p = Vec3::Zero(), r = Vec3::Zero();
    for (const Harmonic& h : translation) p += h.at(t);
    for (const Harmonic& h : rotation) r += h.at(t);
    return Pose(exp_so3(r), p);
  }
};

// Amplitudes chosen so the per-axis peak rate equals speed * share.
Harmonic envelope(Rng& rng, double speed, const Vec3& share, double fmin, double fmax) {
  Harmonic h;
  for (int i = 0; i < 3; ++i) {
    h.freq(i) = rng.uniform(fmin, fmax);
    h.phase(i) = rng.uniform(0.0, kTwoPi);
    h.amp(i) = speed * share(i) / (kTwoPi * h.freq(i));
  }
  return h;
}

Harmonic fixed_frequency(Rng& rng, double amp, double freq) {
  Harmonic h;
  h.amp = Vec3::Constant(amp);
  h.freq = Vec3::Constant(freq);
  for (int i = 0; i < 3; ++i) h.phase(i) = rng.uniform(0.0, kTwoPi);
  return h;
}

Motion make_motion(const SimConfig& cfg) {
  Rng rng = Rng::stream(cfg.seed, "trajectory");
  Motion m;
  const Vec3 lin_share(0.7, 0.7, 0.3);
  const Vec3 ang_share(0.3, 0.3, 0.9);
  switch (cfg.motion) {
    case MotionProfile::kStationary:
      break;
    case MotionProfile::kSinusoid:
      m.translation.push_back(envelope(rng, cfg.linear_speed, lin_share, 0.6, 1.0));
      m.rotation.push_back(envelope(rng, cfg.angular_speed, ang_share, 0.6, 1.0));
      m.translation.push_back(fixed_frequency(rng, cfg.hf_translation, cfg.hf_frequency));
      m.rotation.push_back(fixed_frequency(rng, cfg.hf_rotation, cfg.hf_frequency));
      break;
    case MotionProfile::kRandomWalk:
      // Band-limited random motion: several random low-frequency components.
      for (int k = 0; k < 6; ++k) {
        m.translation.push_back(envelope(rng, cfg.linear_speed / 3.0, lin_share, 0.05, 1.2));
        m.rotation.push_back(envelope(rng, cfg.angular_speed / 3.0, ang_share, 0.05, 1.2));
      }
      break;
  }
  return m;
}

}  // namespace

Trajectory dead_reckon(const Pose& T0, const Pose& T1, double t0, double rate,
                       const std::vector<ImuSample>& imu, std::size_t n_samples) {
  const double h = 1.0 / rate;
  std::vector<Mat3> R(n_samples);
  std::vector<Vec3> p(n_samples);
  R[0] = T0.rotation();
  p[0] = T0.translation();
  if (n_samples > 1) {
    R[1] = T1.rotation();
    p[1] = T1.translation();
  }
  // imu[i] sits at sample i+1.
  for (std::size_t k = 1; k + 1 < n_samples; ++k) {
    const ImuSample& m = imu.at(k - 1);
    p[k + 1] = 2.0 * p[k] - p[k - 1] + h * h * (R[k] * m.accel + kGravity);
    R[k + 1] = orthonormalize(R[k] * exp_so3(h * m.gyro));
  }
  std::vector<TimedPose> s(n_samples);
  for (std::size_t k = 0; k < n_samples; ++k) s[k] = {t0 + h * static_cast<double>(k), Pose(R[k], p[k])};
  return Trajectory(std::move(s), rate);
}

SimulatedWindow gen_trajectory_and_imu(const SimConfig& cfg) {
  if (!(cfg.window > 0.0) || !(cfg.imu_rate > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "window and IMU rate must be positive");
  }
  const Motion motion = make_motion(cfg);
  const double h = 1.0 / cfg.imu_rate;
  const auto n = static_cast<std::size_t>(std::llround(cfg.window * cfg.imu_rate)) + 1;
  std::vector<TimedPose> s(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double t = h * static_cast<double>(k);
    s[k] = {t, motion.at(t)};
  }
  SimulatedWindow out;
  out.truth = Trajectory(std::move(s), cfg.imu_rate);

  Rng noise = Rng::stream(cfg.seed, "imu-noise");
  for (std::size_t k = 1; k + 1 < n; ++k) {
    const Pose& Pm = out.truth[k - 1].pose;
    const Pose& P0 = out.truth[k].pose;
    const Pose& Pp = out.truth[k + 1].pose;
    const Vec3 a = (Pp.translation() - 2.0 * P0.translation() + Pm.translation()) / (h * h);
    ImuSample m;
    m.tau = out.truth[k].time;
    m.accel = P0.rotation().transpose() * (a - kGravity) - cfg.bias_accel + noise.normal3(cfg.sigma_accel);
    m.gyro = log_so3(P0.rotation().transpose() * Pp.rotation()) / h - cfg.bias_gyro +
             noise.normal3(cfg.sigma_gyro);
    out.imu.push_back(m);
  }
  out.init = dead_reckon(out.truth[0].pose, out.truth[std::min<std::size_t>(1, n - 1)].pose, 0.0,
                         cfg.imu_rate, out.imu, n);
  return out;
}

SimScene gen_surfel_scene(const SimConfig& cfg, const Trajectory& truth) {
  if (cfg.n_features == 0 || !(cfg.range_max > cfg.range_min) || !(cfg.range_min >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "empty feature volume");
  }
  if (truth.size() < 2) throw Error(ErrorCode::kInvalidArgument, "trajectory too short for a scene");
  Rng rng = Rng::stream(cfg.seed, "scene");
  const double t0 = truth.start_time(), t1 = truth.end_time();
  const Vec3 origin = truth[0].pose.translation();
  SimScene scene;

  auto in_plane = [&](const SimFeature& f) -> Vec3 {
    // Random offset within the patch, orthogonal to the normal.
    Vec3 d = rng.normal3(cfg.patch_radius);
    d -= f.normal * f.normal.dot(d);
    return f.point + d;
  };
  const double pair_noise = cfg.sigma_surfel / std::sqrt(2.0);
  const double prior_noise = cfg.sigma_prior / std::sqrt(2.0);

  for (std::size_t i = 0; i < cfg.n_features; ++i) {
    SimFeature f;
    const double range = rng.uniform(cfg.range_min, cfg.range_max);
    f.point = origin + rng.unit_vector() * range;
    f.normal = rng.unit_vector();
    scene.features.push_back(f);

    const double ta = rng.uniform(t0, t1);
    double tb = rng.uniform(t0, t1);
    while (std::abs(tb - ta) < cfg.min_pair_gap) tb = rng.uniform(t0, t1);
    const Vec3 xa = in_plane(f) + f.normal * rng.normal(0.0, pair_noise);
    const Vec3 xb = in_plane(f) + f.normal * rng.normal(0.0, pair_noise);
    SurfelPairConstraint c;
    c.tau_a = ta;
    c.tau_b = tb;
    c.u_a = truth.sample(ta).inverse() * xa;
    c.u_b = truth.sample(tb).inverse() * xb;
    c.n_ab = f.normal;
    scene.constraints.pairs.push_back(c);

    if (rng.uniform() < cfg.prior_fraction) {
      MapPriorConstraint p;
      p.tau_c = rng.uniform(t0, t1);
      p.u_m = in_plane(f) + f.normal * rng.normal(0.0, prior_noise);
      p.u_c = truth.sample(p.tau_c).inverse() * (in_plane(f) + f.normal * rng.normal(0.0, prior_noise));
      p.n_mc = f.normal;
      scene.constraints.priors.push_back(p);
    }
  }
  return scene;
}

std::vector<Pose> gen_misalignment(const MisalignProtocol& p, std::uint64_t seed, std::size_t count) {
  if (p.sigma_theta_z < 0.0 || p.sigma_theta_xy < 0.0 || p.sigma_t < 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "misalignment sigmas must be non-negative");
  }
  Rng rng = Rng::stream(seed, "misalign");
  const double deg = std::numbers::pi / 180.0;
  std::vector<Pose> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Vec3 r(rng.normal(0.0, p.sigma_theta_xy * deg), rng.normal(0.0, p.sigma_theta_xy * deg),
                 rng.normal(0.0, p.sigma_theta_z * deg));
    const Vec3 t(rng.normal(0.0, p.sigma_t), rng.normal(0.0, p.sigma_t),
                 rng.normal(0.0, MisalignProtocol::kZTranslationScale * p.sigma_t));
    out.emplace_back(exp_so3(r), t);
  }
  return out;
}

std::vector<TimedPoint> gen_plane_scan(Rng& rng, const Vec3& sensor, double time, const PlaneScanConfig& cfg) {
  if (!(cfg.half_extent > 0.0)) throw Error(ErrorCode::kInvalidArgument, "plane patch must have positive extent");
  const Vec3 n = cfg.normal.normalized();
  const Vec3 u = n.unitOrthogonal();
  const Vec3 v = n.cross(u);
  std::vector<TimedPoint> out;
  out.reserve(cfg.n_points);
  for (std::size_t i = 0; i < cfg.n_points; ++i) {
    const Vec3 p = cfg.origin + rng.uniform(-cfg.half_extent, cfg.half_extent) * u +
                   rng.uniform(-cfg.half_extent, cfg.half_extent) * v;
    const Mat3 Q = beam_noise_world(beam_noise_for(sensor, p, n, Mat3::Identity(), cfg.noise));
    const Eigen::LLT<Mat3> L(Q);
    out.push_back({p + L.matrixL() * rng.normal3(1.0), time});
  }
  return out;
}

}  // namespace mcslam

namespace mcslam {

namespace {

struct Face {
  Vec3 origin;
  Vec3 u;  // edge vectors
  Vec3 v;
};

std::vector<TimedPoint> sample_faces(const std::vector<Face>& faces, double density, double noise, double time,
                                     Rng& rng) {
  std::vector<TimedPoint> pts;
  for (const Face& f : faces) {
    const double area = f.u.cross(f.v).norm();
    const auto n = static_cast<std::size_t>(std::llround(area * density));
    for (std::size_t i = 0; i < n; ++i)
      pts.push_back({f.origin + rng.uniform() * f.u + rng.uniform() * f.v + rng.normal3(noise), time});
  }
  return pts;
}

}  // namespace

std::vector<PlaceScene> gen_place_scenes(std::uint64_t seed, std::size_t n_places, const PlaceSceneConfig& cfg) {
  if (!(cfg.half_extent > 0.0) || !(cfg.point_density > 0.0) || cfg.point_noise < 0.0)
    throw Error(ErrorCode::kInvalidArgument, "place extent and density must be positive");
  Rng layout = Rng::stream(seed, "places");
  Rng sampling = Rng::stream(seed, "place-points");
  std::vector<PlaceScene> out(n_places);
  for (std::size_t k = 0; k < n_places; ++k) {
    PlaceScene& place = out[k];
    place.centre = Vec3(cfg.spacing * static_cast<double>(k), 0.0, 0.0);
    const double h = cfg.half_extent;
    std::vector<Face> faces{{place.centre + Vec3(-h, -h, 0.0), Vec3(2 * h, 0, 0), Vec3(0, 2 * h, 0)}};
    for (std::size_t b = 0; b < cfg.n_boxes; ++b) {
      const Vec3 c = place.centre + Vec3(layout.uniform(-0.7 * h, 0.7 * h), layout.uniform(-0.7 * h, 0.7 * h), 0.0);
      const double yaw = layout.uniform(0.0, std::numbers::pi);
      const Vec3 ex = Vec3(std::cos(yaw), std::sin(yaw), 0.0) * layout.uniform(1.0, 4.0);
      const Vec3 ey = Vec3(-std::sin(yaw), std::cos(yaw), 0.0) * layout.uniform(1.0, 4.0);
      const Vec3 ez(0.0, 0.0, layout.uniform(1.0, 3.0));
      const Vec3 o = c - 0.5 * ex - 0.5 * ey;
      faces.push_back({o, ex, ez});
      faces.push_back({o + ey, ex, ez});
      faces.push_back({o, ey, ez});
      faces.push_back({o + ex, ey, ez});
      faces.push_back({o + ez, ex, ey});
    }
    const std::vector<TimedPoint> first = sample_faces(faces, cfg.point_density, cfg.point_noise, 0.0, sampling);
    const std::vector<TimedPoint> second = sample_faces(faces, cfg.point_density, cfg.point_noise, 1.0, sampling);
    place.ref = voxelize_sparse(first, cfg.sparse);
    place.src = voxelize_sparse(second, cfg.sparse);
    for (std::size_t i = 0; i < cfg.n_keypoints && !first.empty(); ++i)
      place.keypoints.push_back(first[layout.index(first.size())].p);
  }
  return out;
}

}  // namespace mcslam
