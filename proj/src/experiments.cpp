#include "mcslam/experiments.hpp"

#include <algorithm>
#include <iomanip>
#include <limits>
#include <ostream>
#include <cmath>
#include <numbers>

#include "mcslam/error.hpp"

namespace mcslam {

PlaneFusionResult plane_fusion_experiment(const PlaneFusionConfig& cfg) {
  if (cfg.n_scans == 0) throw Error(ErrorCode::kInvalidArgument, "at least one scan required");
  Rng rng = Rng::stream(cfg.seed, "plane");
  const Vec3 n = cfg.scan.normal.normalized();
  GlobalMap global(cfg.dense.radius);
  PlaneFusionResult out;
  double raw_sum = 0.0;
  std::size_t raw_count = 0;

  for (std::size_t k = 0; k < cfg.n_scans; ++k) {
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double rho = rng.uniform(0.0, 0.8) * cfg.scan.half_extent;
    const Vec3 u = n.unitOrthogonal();
    const Vec3 sensor = cfg.scan.origin + rho * (std::cos(phi) * u + std::sin(phi) * n.cross(u)) +
                        rng.uniform(1.0, 2.0) * n;
    const double t = static_cast<double>(k);
    const std::vector<TimedPoint> pts = gen_plane_scan(rng, sensor, t, cfg.scan);
    for (const TimedPoint& p : pts) raw_sum += std::abs(n.dot(p.p - cfg.scan.origin));
    raw_count += pts.size();

    LocalMap local;
    local.dense = extract_dense_world(pts, sensor, cfg.dense);
    local.time = t;

    std::map<SurfelId, std::pair<std::size_t, double>> before;
    for (const auto& [id, s] : global.dense.surfels()) before[id] = {s.obs_count, s.cov_position.trace()};
    temporal_fusion_step(local, global, cfg.temporal, k);
    for (const auto& [id, s] : global.dense.surfels()) {
      const auto it = before.find(id);
      if (it == before.end() || s.obs_count == it->second.first) continue;
      ++out.n_updates;
      if (!(s.cov_position.trace() < it->second.second)) ++out.trace_violations;
    }
  }
  out.raw_distance = raw_sum / static_cast<double>(raw_count);

  double fused_sum = 0.0;
  const double theta_r = cfg.temporal.match.theta_r;
  for (const auto& [id, s] : global.dense.surfels()) {
    const double d = std::abs(n.dot(s.position - cfg.scan.origin));
    auto& bucket = out.by_fusions[s.obs_count - 1];
    const double w = 1.0 / static_cast<double>(++bucket.count);
    bucket.distance += w * (d - bucket.distance);
    bucket.normal_error += w * (std::acos(std::min(1.0, std::abs(n.dot(s.normal)))) - bucket.normal_error);
    if (s.obs_count - 1 >= cfg.min_fusions) {
      fused_sum += d;
      ++out.n_fused_surfels;
    }
    if (!s.stable) continue;
    ++out.n_stable;
    for (SurfelId o : global.dense.query_radius(s.position, 2.0 * theta_r)) {
      if (o <= id || !global.dense.at(o).stable) continue;
      const DenseSurfel& other = global.dense.at(o);
      if (surfels_overlap(s, other, theta_r)) ++out.resolution_violations;
      const Vec3 delta = other.position - s.position;
      if ((delta - n.dot(delta) * n).norm() < theta_r) ++out.true_plane_pairs;
    }
  }
  if (out.n_fused_surfels > 0) out.fused_distance = fused_sum / static_cast<double>(out.n_fused_surfels);
  return out;
}

}  // namespace mcslam

namespace mcslam {

namespace {

std::vector<TimedPoint> corner_scene(double extent, double spacing, double t0, double duration) {
  std::vector<TimedPoint> pts;
  const auto n = static_cast<int>(std::floor(extent / spacing));
  for (int i = 0; i < n; ++i) {
    const double a = (i + 0.5) * spacing;
    const double t = t0 + duration * a / extent;
    for (int j = 0; j < n; ++j) {
      const double b = (j + 0.5) * spacing;
      pts.push_back({Vec3(a, b, 0.0), t});
      if (b < 3.0) {
        pts.push_back({Vec3(a, 0.0, b), t});
        pts.push_back({Vec3(0.0, a, b), t});
      }
    }
  }
  return pts;
}

}  // namespace

BentMapResult bent_map_experiment(const BentMapConfig& cfg) {
  if (!(cfg.extent > 0.0) || !(cfg.spacing > 0.0) || !(cfg.pass_duration > 0.0) || cfg.pass_gap < 0.0)
    throw Error(ErrorCode::kInvalidArgument, "bent map extent, spacing and durations must be positive");
  const double t1 = cfg.pass_duration + cfg.pass_gap;
  const std::vector<SparseSurfel> old_pass = voxelize_sparse(corner_scene(cfg.extent, cfg.spacing, 0.0, cfg.pass_duration));
  const std::vector<SparseSurfel> truth_new = voxelize_sparse(corner_scene(cfg.extent, cfg.spacing, t1, cfg.pass_duration));

  const Vec3 centre(0.5 * cfg.extent, 0.5 * cfg.extent, 0.0);
  const Mat3 Rd = exp_so3(cfg.drift_rotation);
  const Pose drift(Rd, centre + cfg.drift_translation - Rd * centre);
  std::vector<SparseSurfel> new_pass = truth_new;
  for (SparseSurfel& s : new_pass) {
    s.centroid = drift * s.centroid;
    s.covariance = Rd * s.covariance * Rd.transpose();
    s.normal = Rd * s.normal;
  }

  DeformConfig dc = cfg.deform;
  if (!std::isfinite(dc.temporal_gate)) dc.temporal_gate = cfg.pass_duration;
  std::vector<SparseSurfel> all = old_pass;
  all.insert(all.end(), new_pass.begin(), new_pass.end());
  const DeformGraph graph = build_graph(all, cfg.dense_count, cfg.surfel_radius, dc);
  const std::vector<LoopConstraint> loop = make_loop_constraints(new_pass, old_pass, drift.inverse(), dc);
  const GraphOptimization opt = optimize_graph(graph, loop, dc);

  BentMapResult out;
  out.n_nodes = graph.nodes.size();
  out.n_constraints = loop.size();
  out.converged = opt.converged;
  out.iterations = opt.iterations;
  for (const LoopConstraint& c : loop) {
    out.initial_residual += (c.p_src - c.p_dest).norm();
    out.final_residual += (deform_point(c.p_src, opt.graph, c.t_src) - c.p_dest).norm();
    out.max_pin_displacement =
        std::max(out.max_pin_displacement, (deform_point(c.p_dest, opt.graph, c.t_dest) - c.p_dest).norm());
  }
  const auto n = static_cast<double>(loop.size());
  out.initial_residual /= n;
  out.final_residual /= n;
  out.reduction = 1.0 - out.final_residual / out.initial_residual;
  out.pin_ratio = out.max_pin_displacement / out.initial_residual;
  for (std::size_t i = 0; i < new_pass.size(); ++i)
    out.new_pass_error += (deform_point(new_pass[i].centroid, opt.graph, new_pass[i].timestamp) - truth_new[i].centroid).norm();
  out.new_pass_error /= static_cast<double>(new_pass.size());
  return out;
}

}  // namespace mcslam

namespace mcslam {

namespace {

struct Stats {
  double median = 0.0, mean = 0.0, stddev = 0.0;
};

Stats stats_of(std::vector<double> v) {
  Stats s;
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  s.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(n);
  for (double x : v) s.stddev += (x - s.mean) * (x - s.mean);
  s.stddev = n > 1 ? std::sqrt(s.stddev / static_cast<double>(n - 1)) : 0.0;
  return s;
}

PlaceData place_data(const PlaceScene& place, const Pose& M, Rng& rng, const FeatureNoise& noise) {
  PlaceData d;
  d.ref = oriented_points(place.ref);
  d.src = oriented_points(place.src);
  for (OrientedPoint& o : d.src) {
    o.p = M * o.p;
    o.n = M.rotation() * o.n;
  }
  d.features = simulate_features(place.keypoints, M, rng, noise);
  return d;
}

void errors(const Pose& est, const Pose& truth, double& e_t, double& e_r) {
  e_t = (est.translation() - truth.translation()).norm();
  e_r = rotation_angle(est.rotation().transpose() * truth.rotation());
}

}  // namespace

std::vector<Table5Row> table5_experiment(const Table5Config& cfg) {
  if (cfg.n_places == 0) throw Error(ErrorCode::kInvalidArgument, "at least one place required");
  const std::vector<PlaceScene> places = gen_place_scenes(cfg.seed, cfg.n_places, cfg.scene);
  const std::vector<Pose> draws = gen_misalignment(cfg.protocol, cfg.seed, cfg.n_sessions);
  std::vector<Table5Row> rows;
  rows.reserve(cfg.n_sessions);
  for (std::size_t s = 0; s < cfg.n_sessions; ++s) {
    Table5Row row;
    row.session = s;
    row.trigger_place = s % cfg.n_places;
    const Pose Tc(Mat3::Identity(), places[row.trigger_place].centre);
    const Pose M = Tc * draws[s] * Tc.inverse();
    const Pose truth = M.inverse();
    errors(Pose(), truth, row.init_t, row.init_r);

    Rng rng = Rng::stream(cfg.seed ^ Rng::splitmix64(s), "features");
    const PlaceProvider provider = [&](std::size_t k) {
      return place_data(places[(row.trigger_place + k) % cfg.n_places], M, rng, cfg.features);
    };
    SessionConfig sc = cfg.session;
    sc.max_places = std::min(sc.max_places, cfg.n_places);
    const SessionResult r = localization_session(provider, Pose(), sc);
    row.places_used = r.places.size();
    for (const PlaceRecord& p : r.places)
      row.accepted += (p.decision == PlaceDecision::kFirst || p.decision == PlaceDecision::kAccepted) ? 1 : 0;
    row.success = r.success;
    errors(r.fused ? r.fused->T : Pose(), truth, row.e_t, row.e_r);

    Rng icp_rng = Rng::stream(cfg.seed ^ Rng::splitmix64(s), "icp-features");
    const PlaceData d = place_data(places[row.trigger_place], M, icp_rng, cfg.features);
    RegistrationConfig icp = cfg.session.registration;
    icp.use_features = false;
    icp.max_correspondence = std::numeric_limits<double>::infinity();
    Pose icp_T;
    try {
      icp_T = combined_registration(d.features, d.src, d.ref, Pose(), icp).T;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kInsufficientOverlap) throw;
    }
    errors(icp_T, truth, row.icp_e_t, row.icp_e_r);
    rows.push_back(row);
  }
  return rows;
}

Table5Summary summarize_table5(const std::string& protocol, const std::vector<Table5Row>& rows) {
  Table5Summary out;
  out.protocol = protocol;
  out.sessions = rows.size();
  std::vector<double> et, er, it, ir;
  for (const Table5Row& r : rows) {
    out.successes += r.success ? 1 : 0;
    et.push_back(r.e_t);
    er.push_back(r.e_r);
    it.push_back(r.icp_e_t);
    ir.push_back(r.icp_e_r);
  }
  const Stats a = stats_of(et), b = stats_of(er), c = stats_of(it), d = stats_of(ir);
  out.median_e_t = a.median, out.mean_e_t = a.mean, out.std_e_t = a.stddev;
  out.median_e_r = b.median, out.mean_e_r = b.mean, out.std_e_r = b.stddev;
  out.icp_median_e_t = c.median, out.icp_mean_e_t = c.mean, out.icp_std_e_t = c.stddev;
  out.icp_median_e_r = d.median, out.icp_mean_e_r = d.mean, out.icp_std_e_r = d.stddev;
  return out;
}

void write_table5_csv(std::ostream& os, const std::string& protocol, const std::vector<Table5Row>& rows, bool header) {
  if (header) os << "protocol,session,trigger_place,init_t,init_r,e_t,e_r,places_used,accepted,success,icp_e_t,icp_e_r\n";
  os << std::setprecision(17);
  for (const Table5Row& r : rows)
    os << protocol << ',' << r.session << ',' << r.trigger_place << ',' << r.init_t << ',' << r.init_r << ',' << r.e_t
       << ',' << r.e_r << ',' << r.places_used << ',' << r.accepted << ',' << (r.success ? 1 : 0) << ',' << r.icp_e_t
       << ',' << r.icp_e_r << '\n';
}

}  // namespace mcslam

namespace mcslam {

const char* to_string(Table2Mode m) {
  switch (m) {
    case Table2Mode::kLinearComposition: return "linear_composition";
    case Table2Mode::kSe3Composition: return "se3_composition";
    case Table2Mode::kDirect11: return "direct_11";
    case Table2Mode::kDirect51: return "direct_51";
    case Table2Mode::kDirect101: return "direct_101";
  }
  return "unknown";
}

LocalMappingConfig table2_mode_config(Table2Mode m, double window) {
  LocalMappingConfig cfg;
  cfg.window = window;
  switch (m) {
    case Table2Mode::kLinearComposition:
      cfg.update = UpdateMode::kSo3R3;
      cfg.basis = CorrectionBasis::kLinear;
      cfg.interpolation = InterpolationMode::kLinear;
      cfg.knot_spacing = window / 10.0;
      break;
    case Table2Mode::kSe3Composition:
      cfg.knot_spacing = window / 10.0;
      break;
    case Table2Mode::kDirect11:
      cfg.model = OptimizationModel::kSplineDirect;
      cfg.knot_spacing = window / 10.0;
      break;
    case Table2Mode::kDirect51:
      cfg.model = OptimizationModel::kSplineDirect;
      cfg.knot_spacing = window / 50.0;
      break;
    case Table2Mode::kDirect101:
      cfg.model = OptimizationModel::kSplineDirect;
      cfg.knot_spacing = window / 100.0;
      break;
  }
  return cfg;
}

std::vector<Table2Row> table2_seed(std::uint64_t seed, const SimConfig& base) {
  SimConfig sc = base;
  sc.seed = seed;
  const SimulatedWindow w = gen_trajectory_and_imu(sc);
  LocalConstraints cons = gen_surfel_scene(sc, w.truth).constraints;
  cons.imu = w.imu;
  const double init_t = trajectory_error(w.init, w.truth).translation_rms * 1e3;

  std::vector<Table2Row> rows;
  for (Table2Mode m : kTable2Modes) {
    const LocalMappingConfig cfg = table2_mode_config(m, sc.window);
    WindowResult r;
    try {
      r = optimize_window(cons, w.init, initial_state(w.init, cfg), cfg);
    } catch (const NoProgressError& e) {
      r = e.best();
      r.report.termination = "no_progress";
    }
    const TrajectoryError e = trajectory_error(r.trajectory, w.truth);
    Table2Row row;
    row.seed = seed;
    row.mode = m;
    row.init_t_mm = init_t;
    row.final_t_mm = e.translation_rms * 1e3;
    row.final_r_mrad = e.rotation_rms * 1e3;
    row.iterations = r.report.iterations.empty() ? 0 : static_cast<int>(r.report.iterations.size()) - 1;
    row.termination = r.report.termination;
    rows.push_back(row);
  }
  return rows;
}

std::vector<Table2Median> table2_medians(const std::vector<Table2Row>& rows) {
  std::vector<Table2Median> out;
  for (Table2Mode m : kTable2Modes) {
    std::vector<double> t, r;
    for (const Table2Row& row : rows) {
      if (row.mode != m) continue;
      t.push_back(row.final_t_mm);
      r.push_back(row.final_r_mrad);
    }
    if (t.empty()) continue;
    out.push_back({m, stats_of(t).median, stats_of(r).median});
  }
  return out;
}

bool table2_ordering_holds(const std::vector<Table2Median>& medians) {
  auto find = [&](Table2Mode m) -> const Table2Median* {
    for (const Table2Median& x : medians)
      if (x.mode == m) return &x;
    return nullptr;
  };
  const Table2Median* se3 = find(Table2Mode::kSe3Composition);
  const Table2Median* lin = find(Table2Mode::kLinearComposition);
  const Table2Median* d11 = find(Table2Mode::kDirect11);
  if (!se3 || !lin || !d11) return false;
  return se3->final_t_mm < lin->final_t_mm && se3->final_t_mm < d11->final_t_mm &&
         se3->final_r_mrad < lin->final_r_mrad && se3->final_r_mrad < d11->final_r_mrad;
}

void write_table2_csv(std::ostream& os, const std::vector<Table2Row>& rows, bool header) {
  if (header) os << "seed,mode,init_t_mm,final_t_mm,final_r_mrad,iterations,termination\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const Table2Row& r : rows)
    os << r.seed << ',' << to_string(r.mode) << ',' << r.init_t_mm << ',' << r.final_t_mm << ',' << r.final_r_mrad << ','
       << r.iterations << ',' << r.termination << '\n';
}

void write_table2_medians(std::ostream& os, const std::vector<Table2Median>& medians) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const Table2Median& m : medians)
    os << "median," << to_string(m.mode) << ",," << m.final_t_mm << ',' << m.final_r_mrad << ",,\n";
}

}  // namespace mcslam
