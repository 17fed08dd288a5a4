#include "mcslam/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>

#include "mcslam/error.hpp"

namespace mcslam {

SlamConfig::SlamConfig() {
  local.knot_spacing = 0.5;
  dense.radius = 0.1;
  temporal.match.theta_r = 0.1;
  temporal.cull_age = 120.0;
  session.max_places = 1;
}

namespace {

struct Face {
  Vec3 origin, u, v, normal;
  double area() const { return u.norm() * v.norm(); }
};

std::vector<Face> room_faces(const Vec3& L) {
  const Vec3 X(L.x(), 0, 0), Y(0, L.y(), 0), Z(0, 0, L.z());
  return {{Vec3::Zero(), X, Y, Vec3::UnitZ()},
          {Vec3::Zero(), Y, Z, Vec3::UnitX()},
          {X, Y, Z, -Vec3::UnitX()},
          {Vec3::Zero(), X, Z, Vec3::UnitY()},
          {Y, X, Z, -Vec3::UnitY()}};
}

Vec3 sample_face_point(Rng& rng, const std::vector<Face>& faces, double total_area) {
  double pick = rng.uniform(0.0, total_area);
  for (const Face& f : faces) {
    if (pick <= f.area() || &f == &faces.back()) return f.origin + rng.uniform() * f.u + rng.uniform() * f.v;
    pick -= f.area();
  }
  return faces.back().origin;
}

Pose about(const Vec3& centre, const Vec3& rotation, const Vec3& translation) {
  const Mat3 R = exp_so3(rotation);
  return Pose(R, centre + translation - R * centre);
}

Pose pose_power(const Pose& P, std::size_t n) {
  Pose out;
  for (std::size_t i = 0; i < n; ++i) out = P * out;
  return out;
}

// Prefixes the failing stage to library errors.
template <typename F>
auto staged(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const NoProgressError&) {
    throw;
  } catch (const Error& e) {
    throw Error(e.code(), std::string("stage ") + stage + ": " + e.what());
  }
}

double window_map_error(const SurfelMap& map, double since, const Vec3& room) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [id, s] : map.surfels()) {
    if (s.created < since) continue;
    sum += room_distance(s.position, room).distance;
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace

RoomDistance room_distance(const Vec3& p, const Vec3& room) {
  const double d[5] = {std::abs(p.z()), std::abs(p.x()), std::abs(room.x() - p.x()), std::abs(p.y()),
                       std::abs(room.y() - p.y())};
  const Vec3 n[5] = {Vec3::UnitZ(), Vec3::UnitX(), -Vec3::UnitX(), Vec3::UnitY(), -Vec3::UnitY()};
  const auto i = static_cast<std::size_t>(std::min_element(d, d + 5) - d);
  return {d[i], n[i]};
}

SlamResult run_slam(const SlamConfig& cfg) {
  if (cfg.n_passes == 0 || cfg.windows_per_pass == 0 || cfg.points_per_window == 0)
    throw Error(ErrorCode::kInvalidArgument, "passes, windows and points must be positive");
  if (!(cfg.room.minCoeff() > 0.0) || !(cfg.max_range > 0.0) || cfg.pass_gap < 0.0)
    throw Error(ErrorCode::kInvalidArgument, "room, range and pass gap must be positive");

  const std::vector<Face> faces = room_faces(cfg.room);
  double total_area = 0.0;
  for (const Face& f : faces) total_area += f.area();
  const Vec3 centre(0.5 * cfg.room.x(), 0.5 * cfg.room.y(), 0.0);
  const Pose drift_step = about(centre, cfg.drift_rotation, cfg.drift_translation);

  Rng key_rng = Rng::stream(cfg.seed, "room-keypoints");
  std::vector<Vec3> keypoints(cfg.n_keypoints);
  for (Vec3& k : keypoints) k = sample_face_point(key_rng, faces, total_area);

  DeformConfig dc = cfg.deform;
  if (!std::isfinite(dc.temporal_gate)) dc.temporal_gate = cfg.temporal.active_window;

  SlamResult out;
  out.map = GlobalMap(cfg.dense.radius);
  GlobalMap& global = out.map;
  Pose correction;  // accumulated loop-closure alignment
  double raw_sum = 0.0;
  std::size_t raw_count = 0;

  const double pass_length = static_cast<double>(cfg.windows_per_pass) * cfg.sim.window + cfg.pass_gap;
  std::size_t step = 0;
  for (std::size_t pass = 0; pass < cfg.n_passes; ++pass) {
    const Pose drift = pose_power(drift_step, pass);
    for (std::size_t k = 0; k < cfg.windows_per_pass; ++k, ++step) {
      const double t0 = static_cast<double>(pass) * pass_length + static_cast<double>(k) * cfg.sim.window;
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(cfg.windows_per_pass);
      const Pose W(exp_so3(Vec3(0, 0, angle + 0.5 * std::numbers::pi)),
                   centre + Vec3(cfg.path_radius * std::cos(angle), cfg.path_radius * std::sin(angle), cfg.sensor_height));
      const std::uint64_t window_seed = cfg.seed ^ Rng::splitmix64(step + 1);

      // Local trajectory optimization in the simulator frame.
      SimConfig sc = cfg.sim;
      sc.seed = window_seed;
      const SimulatedWindow sim = staged("simulate", [&] { return gen_trajectory_and_imu(sc); });
      LocalConstraints cons = staged("simulate", [&] { return gen_surfel_scene(sc, sim.truth).constraints; });
      cons.imu = sim.imu;
      LocalMappingConfig lc = cfg.local;
      lc.window = sc.window;
      WindowResult wr;
      try {
        wr = staged("optimize", [&] { return optimize_window(cons, sim.init, initial_state(sim.init, lc), lc); });
      } catch (const NoProgressError& e) {
        wr = e.best();
        wr.report.termination = "no_progress";
      }
      const TrajectoryError le = trajectory_error(wr.trajectory, sim.truth);
      out.windows.push_back({step, pass, k, t0, le.translation_rms * 1e3, le.rotation_rms * 1e3, wr.report.termination});

      const Pose placement = correction * drift * W;
      std::vector<TimedPose> truth_w, est_w;
      for (const TimedPose& s : sim.truth.samples()) truth_w.push_back({s.time + t0, W * s.pose});
      for (const TimedPose& s : wr.trajectory.samples()) est_w.push_back({s.time + t0, placement * s.pose});
      const Trajectory truth_traj(truth_w, sim.truth.nominal_rate());
      const Trajectory est_traj(est_w, sim.truth.nominal_rate());

      // Room points seen along the true trajectory, in the sensor frame.
      Rng prng = Rng::stream(window_seed, "room-points");
      std::vector<TimedPoint> sensor_pts, world_pts;
      sensor_pts.reserve(cfg.points_per_window);
      world_pts.reserve(cfg.points_per_window);
      const Vec3 origin = W.translation();
      while (sensor_pts.size() < cfg.points_per_window) {
        const Vec3 x = sample_face_point(prng, faces, total_area);
        if ((x - origin).norm() > cfg.max_range) continue;
        const double t = prng.uniform(truth_traj.start_time(), truth_traj.end_time());
        const Vec3 noisy = x + cfg.point_noise * Vec3(prng.normal(), prng.normal(), prng.normal());
        const Vec3 ps = truth_traj.sample(t).inverse() * noisy;
        sensor_pts.push_back({ps, t});
        const Vec3 pw = est_traj.sample(t) * ps;
        world_pts.push_back({pw, t});
        if (pass == 0) {
          raw_sum += room_distance(pw, cfg.room).distance;
          ++raw_count;
        }
      }

      LocalMap local;
      local.dense = staged("extract", [&] { return extract_dense(sensor_pts, est_traj, cfg.dense); });
      local.sparse = staged("extract", [&] { return voxelize_sparse(world_pts, cfg.sparse); });
      local.time = est_traj.end_time();
      out.truth.insert(out.truth.end(), truth_w.begin(), truth_w.end());
      out.trajectory.insert(out.trajectory.end(), est_w.begin(), est_w.end());

      const TemporalStepResult ts =
          staged("fuse", [&] { return temporal_fusion_step(local, global, cfg.temporal, step); });
      out.fusion.push_back(ts.stats);
      if (!ts.trigger) continue;

      // Loop closure: metric localization, then deformation.
      ClosureRecord rec;
      rec.step = step;
      rec.icp_alignment = ts.trigger->alignment();
      const double now = local.time;
      std::vector<SparseSurfel> inactive;
      for (const SparseSurfel& s : global.sparse)
        if (!is_active(s.timestamp, now, cfg.temporal)) inactive.push_back(s);

      const Pose misalignment = correction * drift;  // local ~= misalignment * truth
      std::vector<Vec3> visible;
      for (const Vec3& kp : keypoints)
        if ((kp - origin).norm() <= cfg.max_range) visible.push_back(kp);
      const PlaceProvider provider = [&](std::size_t) {
        Rng frng = Rng::stream(window_seed, "loop-features");
        PlaceData d;
        d.src = oriented_points(local.sparse);
        d.ref = oriented_points(inactive);
        d.features = simulate_features(visible, misalignment, frng, cfg.features);
        return d;
      };
      const SessionResult session =
          staged("localize", [&] { return localization_session(provider, rec.icp_alignment, cfg.session); });
      rec.localized = session.success && session.fused.has_value();
      rec.alignment = rec.localized ? session.fused->T : rec.icp_alignment;
      const Pose true_alignment = misalignment.inverse();
      rec.alignment_error_t = (rec.alignment.translation() - true_alignment.translation()).norm();
      rec.alignment_error_r = rotation_angle(rec.alignment.rotation() * true_alignment.rotation().transpose());

      rec.map_error_before = window_map_error(global.dense, t0, cfg.room);
      const DeformGraph graph =
          staged("deform", [&] { return build_graph(global.sparse, global.dense.size(), cfg.dense.radius, dc); });
      const std::vector<LoopConstraint> loop =
          staged("deform", [&] { return make_loop_constraints(local.sparse, inactive, rec.alignment, dc); });
      const GraphOptimization opt = staged("deform", [&] { return optimize_graph(graph, loop, dc); });
      rec.n_nodes = graph.nodes.size();
      rec.n_constraints = loop.size();
      rec.converged = opt.converged;
      for (const LoopConstraint& c : loop) {
        rec.initial_residual += (c.p_src - c.p_dest).norm();
        rec.final_residual += (deform_point(c.p_src, opt.graph, c.t_src) - c.p_dest).norm();
      }
      rec.initial_residual /= static_cast<double>(loop.size());
      rec.final_residual /= static_cast<double>(loop.size());
      rec.reduction = 1.0 - rec.final_residual / rec.initial_residual;

      deform_surfels(opt.graph, global.dense, global.sparse);
      for (TimedPose& s : out.trajectory) s.pose = deform_pose(s.pose, opt.graph, s.time);
      rec.map_error_after = window_map_error(global.dense, t0, cfg.room);
      correction = rec.alignment * correction;
      out.last_graph = opt.graph;
      out.closures.push_back(rec);
    }
  }

  PlaneMetrics& pm = out.planes;
  pm.raw_distance = raw_count ? raw_sum / static_cast<double>(raw_count) : 0.0;
  double fused_sum = 0.0;
  for (const auto& [id, s] : global.dense.surfels()) {
    const RoomDistance rd = room_distance(s.position, cfg.room);
    auto& b = pm.by_fusions[s.obs_count - 1];
    const double w = 1.0 / static_cast<double>(++b.count);
    b.distance += w * (rd.distance - b.distance);
    b.normal_error += w * (std::acos(std::min(1.0, std::abs(rd.normal.dot(s.normal)))) - b.normal_error);
    if (s.obs_count - 1 >= pm.min_fusions) {
      fused_sum += rd.distance;
      ++pm.n_fused;
    }
  }
  pm.fused_distance = pm.n_fused ? fused_sum / static_cast<double>(pm.n_fused) : 0.0;
  return out;
}

void write_poses_csv(std::ostream& os, const std::vector<TimedPose>& poses) {
  os << "time,tx,ty,tz,r00,r01,r02,r10,r11,r12,r20,r21,r22\n"
     << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const TimedPose& s : poses) {
    const Vec3& t = s.pose.translation();
    const Mat3& R = s.pose.rotation();
    os << s.time << ',' << t.x() << ',' << t.y() << ',' << t.z();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) os << ',' << R(i, j);
    os << '\n';
  }
}

void write_windows_csv(std::ostream& os, const std::vector<WindowRecord>& rows) {
  os << "step,pass,waypoint,start,local_t_mm,local_r_mrad,termination\n"
     << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const WindowRecord& r : rows)
    os << r.step << ',' << r.pass << ',' << r.waypoint << ',' << r.start << ',' << r.local_t_mm << ','
       << r.local_r_mrad << ',' << r.termination << '\n';
}

void write_closures_csv(std::ostream& os, const std::vector<ClosureRecord>& rows) {
  os << "step,localized,alignment_error_t,alignment_error_r,n_nodes,n_constraints,initial_residual,final_residual,"
        "reduction,map_error_before,map_error_after,converged\n"
     << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const ClosureRecord& r : rows)
    os << r.step << ',' << (r.localized ? 1 : 0) << ',' << r.alignment_error_t << ',' << r.alignment_error_r << ','
       << r.n_nodes << ',' << r.n_constraints << ',' << r.initial_residual << ',' << r.final_residual << ','
       << r.reduction << ',' << r.map_error_before << ',' << r.map_error_after << ',' << (r.converged ? 1 : 0) << '\n';
}

void write_planes_csv(std::ostream& os, const PlaneMetrics& m) {
  os << "fusions,count,distance,normal_error\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& [f, b] : m.by_fusions) os << f << ',' << b.count << ',' << b.distance << ',' << b.normal_error << '\n';
  os << "raw,," << m.raw_distance << ",\n";
  os << "fused_min_" << m.min_fusions << ',' << m.n_fused << ',' << m.fused_distance << ",\n";
}

}  // namespace mcslam
