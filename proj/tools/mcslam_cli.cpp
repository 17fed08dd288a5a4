#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mcslam/error.hpp"
#include "mcslam/experiments.hpp"
#include "mcslam/io.hpp"
#include "mcslam/pipeline.hpp"
#include "mcslam/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mcslam;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitInvariant = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;
constexpr int kSchemaVersion = 1;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::kIo:
    case ErrorCode::kParse:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kOutOfRange:
      return kExitIo;
    default:
      return kExitNumerical;
  }
}

// ---------------------------------------------------------------- config

// Reads keys of one JSON object and rejects any it did not consume.
class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    if (!root.at(name).is_object()) throw ConfigError(name + " must be an object");
    obj_ = root.at(name);
  }

  template <typename T>
  void get(const char* key, T& value) {
    seen_.push_back(key);
    if (!obj_.contains(key)) return;
    try {
      value = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  void get(const char* key, Vec3& v) {
    std::vector<double> a{v.x(), v.y(), v.z()};
    get(key, a);
    if (a.size() != 3) throw ConfigError(name_ + "." + key + ": expected 3 numbers");
    v = Vec3(a[0], a[1], a[2]);
  }

  void finish() const {
    for (const auto& [k, _] : obj_.items())
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) throw ConfigError("unknown key " + name_ + "." + k);
  }

 private:
  std::string name_;
  json obj_ = json::object();
  std::vector<std::string> seen_;
};

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

const char* motion_name(MotionProfile m) {
  switch (m) {
    case MotionProfile::kSinusoid: return "sinusoid";
    case MotionProfile::kRandomWalk: return "random_walk";
    case MotionProfile::kStationary: return "stationary";
  }
  return "sinusoid";
}

MotionProfile parse_motion(const std::string& s) {
  if (s == "sinusoid") return MotionProfile::kSinusoid;
  if (s == "random_walk") return MotionProfile::kRandomWalk;
  if (s == "stationary") return MotionProfile::kStationary;
  throw ConfigError("unknown motion profile " + s);
}

MisalignProtocol parse_protocol(const std::string& s) {
  if (s == "easy") return MisalignProtocol::easy();
  if (s == "medium") return MisalignProtocol::medium();
  if (s == "hard") return MisalignProtocol::hard();
  if (s == "identity") {
    MisalignProtocol p;
    p.name = "identity";
    return p;
  }
  throw ConfigError("unknown protocol " + s);
}

struct Config {
  SimConfig table2;
  std::vector<std::string> protocols{"easy", "medium", "hard"};
  Table5Config table5;
  SlamConfig slam;
};

void read_sim(Section& s, SimConfig& c) {
  std::string motion = motion_name(c.motion);
  s.get("window", c.window);
  s.get("imu_rate", c.imu_rate);
  s.get("n_features", c.n_features);
  s.get("bias_accel", c.bias_accel);
  s.get("bias_gyro", c.bias_gyro);
  s.get("sigma_accel", c.sigma_accel);
  s.get("sigma_gyro", c.sigma_gyro);
  s.get("sigma_surfel", c.sigma_surfel);
  s.get("sigma_prior", c.sigma_prior);
  s.get("motion", motion);
  c.motion = parse_motion(motion);
}

json sim_json(const SimConfig& c) {
  return {{"window", c.window},           {"imu_rate", c.imu_rate},         {"n_features", c.n_features},
          {"bias_accel", vec_json(c.bias_accel)}, {"bias_gyro", vec_json(c.bias_gyro)},
          {"sigma_accel", c.sigma_accel}, {"sigma_gyro", c.sigma_gyro},     {"sigma_surfel", c.sigma_surfel},
          {"sigma_prior", c.sigma_prior}, {"motion", motion_name(c.motion)}};
}

Config load_config(const std::optional<fs::path>& path) {
  Config cfg;
  json root = json::object();
  if (path) {
    std::ifstream is(*path);
    if (!is) throw Error(ErrorCode::kIo, "cannot open config " + path->string());
    try {
      root = json::parse(is);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::kParse, "config " + path->string() + " byte " + std::to_string(e.byte) + ": " + e.what());
    }
    if (!root.is_object()) throw ConfigError("config must be a JSON object");
    if (!root.contains("schema_version") || root.at("schema_version") != kSchemaVersion)
      throw ConfigError("schema_version must be " + std::to_string(kSchemaVersion));
    for (const auto& [k, _] : root.items())
      if (k != "schema_version" && k != "table2" && k != "table5" && k != "run_slam") throw ConfigError("unknown key " + k);
  }

  Section t2(root, "table2");
  read_sim(t2, cfg.table2);
  t2.finish();

  Section t5(root, "table5");
  t5.get("protocols", cfg.protocols);
  t5.get("n_sessions", cfg.table5.n_sessions);
  t5.get("n_places", cfg.table5.n_places);
  t5.get("outlier_fraction", cfg.table5.features.outlier_fraction);
  t5.get("jitter_3sigma", cfg.table5.features.jitter_3sigma);
  t5.get("sigma_stop", cfg.table5.session.sigma_stop);
  t5.get("max_places", cfg.table5.session.max_places);
  t5.finish();
  for (const std::string& p : cfg.protocols) parse_protocol(p);

  Section rs(root, "run_slam");
  SlamConfig& s = cfg.slam;
  rs.get("n_passes", s.n_passes);
  rs.get("windows_per_pass", s.windows_per_pass);
  rs.get("pass_gap", s.pass_gap);
  rs.get("room", s.room);
  rs.get("path_radius", s.path_radius);
  rs.get("sensor_height", s.sensor_height);
  rs.get("max_range", s.max_range);
  rs.get("points_per_window", s.points_per_window);
  rs.get("point_noise", s.point_noise);
  rs.get("n_keypoints", s.n_keypoints);
  rs.get("drift_rotation", s.drift_rotation);
  rs.get("drift_translation", s.drift_translation);
  rs.get("dense_radius", s.dense.radius);
  rs.get("theta_r", s.temporal.match.theta_r);
  rs.get("active_window", s.temporal.active_window);
  rs.get("cull_age", s.temporal.cull_age);
  rs.finish();
  return cfg;
}

json effective_json(const Config& c) {
  const SlamConfig& s = c.slam;
  return {{"schema_version", kSchemaVersion},
          {"table2", sim_json(c.table2)},
          {"table5",
           {{"protocols", c.protocols},
            {"n_sessions", c.table5.n_sessions},
            {"n_places", c.table5.n_places},
            {"outlier_fraction", c.table5.features.outlier_fraction},
            {"jitter_3sigma", c.table5.features.jitter_3sigma},
            {"sigma_stop", c.table5.session.sigma_stop},
            {"max_places", c.table5.session.max_places}}},
          {"run_slam",
           {{"n_passes", s.n_passes},
            {"windows_per_pass", s.windows_per_pass},
            {"pass_gap", s.pass_gap},
            {"room", vec_json(s.room)},
            {"path_radius", s.path_radius},
            {"sensor_height", s.sensor_height},
            {"max_range", s.max_range},
            {"points_per_window", s.points_per_window},
            {"point_noise", s.point_noise},
            {"n_keypoints", s.n_keypoints},
            {"drift_rotation", vec_json(s.drift_rotation)},
            {"drift_translation", vec_json(s.drift_translation)},
            {"dense_radius", s.dense.radius},
            {"theta_r", s.temporal.match.theta_r},
            {"active_window", s.temporal.active_window},
            {"cull_age", s.temporal.cull_age}}}};
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// ---------------------------------------------------------------- output

// Files are written into <out>.tmp and moved to <out> at the end.
class OutputDir {
 public:
  OutputDir(fs::path out, bool force) : out_(std::move(out)), tmp_(out_.string() + ".tmp"), force_(force) {
    if (fs::exists(out_) && !force_) throw Error(ErrorCode::kIo, out_.string() + " exists; use --force to overwrite");
    std::error_code ec;
    fs::remove_all(tmp_, ec);
    fs::create_directories(tmp_, ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot create " + tmp_.string() + ": " + ec.message());
  }

  fs::path path(const std::string& name) const { return tmp_ / name; }

  std::ofstream open(const std::string& name) const {
    fs::create_directories(path(name).parent_path());
    std::ofstream os(path(name), std::ios::binary);
    if (!os) throw Error(ErrorCode::kIo, "cannot open " + path(name).string());
    return os;
  }

  void commit() {
    if (committed_) return;
    std::error_code ec;
    if (fs::exists(out_)) fs::remove_all(out_, ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot replace " + out_.string() + ": " + ec.message());
    if (out_.has_parent_path()) fs::create_directories(out_.parent_path());
    fs::rename(tmp_, out_, ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot move output into " + out_.string() + ": " + ec.message());
    committed_ = true;
  }

 private:
  fs::path out_, tmp_;
  bool force_;
  bool committed_ = false;
};

void write_json(const OutputDir& dir, const std::string& name, const json& j) {
  std::ofstream os = dir.open(name);
  os << j.dump(2) << '\n';
  if (!os) throw Error(ErrorCode::kIo, "write failed: " + name);
}

struct Run {
  std::string command;
  Config cfg;
  std::string config_hash;
  std::uint64_t seed_lo = 1, seed_hi = 1;
  unsigned threads = 1;
  bool verbose = false;
};

void log(const Run& run, const std::string& msg) {
  if (run.verbose) std::cerr << "[" << run.command << "] " << msg << '\n';
}

// Runs job(i) for i in [0, n) on up to `threads` workers; the first failure
// is rethrown after all workers stop.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex m;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next++;
      if (i >= n) return;
      {
        std::lock_guard<std::mutex> lock(m);
        if (failure) return;
      }
      try {
        job(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(m);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const unsigned k = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  for (unsigned t = 1; t < k; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

json manifest(const Run& run) {
  return {{"command", run.command},
          {"config_hash", run.config_hash},
          {"seeds", {run.seed_lo, run.seed_hi}},
          {"config", effective_json(run.cfg)}};
}

// ---------------------------------------------------------------- commands

int cmd_table2(const Run& run, OutputDir& dir) {
  const std::size_t n = run.seed_hi - run.seed_lo + 1;
  std::vector<std::optional<std::vector<Table2Row>>> rows(n);
  std::exception_ptr failure;
  try {
    parallel_for(n, run.threads, [&](std::size_t i) {
      rows[i] = table2_seed(run.seed_lo + i, run.cfg.table2);
      log(run, "seed " + std::to_string(run.seed_lo + i) + " done");
    });
  } catch (...) {
    failure = std::current_exception();
  }
  std::vector<Table2Row> all;
  for (const auto& r : rows)
    if (r) all.insert(all.end(), r->begin(), r->end());
  const std::vector<Table2Median> medians = table2_medians(all);
  {
    std::ofstream os = dir.open("table2.csv");
    write_table2_csv(os, all);
    if (!failure) write_table2_medians(os, medians);
  }
  if (failure) std::rethrow_exception(failure);

  const bool ordering = table2_ordering_holds(medians);
  json j = manifest(run);
  j["ordering_holds"] = ordering;
  for (const Table2Median& m : medians) j["medians"][to_string(m.mode)] = {{"final_t_mm", m.final_t_mm}, {"final_r_mrad", m.final_r_mrad}};
  write_json(dir, "summary.json", j);
  for (const Table2Median& m : medians)
    std::cout << std::left << std::setw(20) << to_string(m.mode) << " t " << std::fixed << std::setprecision(2)
              << m.final_t_mm << " mm  r " << std::setprecision(3) << m.final_r_mrad << " mrad\n";
  std::cout << "ordering " << (ordering ? "holds" : "violated") << '\n';
  return ordering ? kExitOk : kExitInvariant;
}

int cmd_table5(const Run& run, OutputDir& dir) {
  struct Job {
    std::string protocol;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const std::string& p : run.cfg.protocols)
    for (std::uint64_t s = run.seed_lo; s <= run.seed_hi; ++s) jobs.push_back({p, s});
  std::vector<std::optional<std::vector<Table5Row>>> rows(jobs.size());
  std::exception_ptr failure;
  try {
    parallel_for(jobs.size(), run.threads, [&](std::size_t i) {
      Table5Config c = run.cfg.table5;
      c.protocol = parse_protocol(jobs[i].protocol);
      c.seed = jobs[i].seed;
      rows[i] = table5_experiment(c);
      log(run, jobs[i].protocol + " seed " + std::to_string(jobs[i].seed) + " done");
    });
  } catch (...) {
    failure = std::current_exception();
  }
  {
    std::ofstream os = dir.open("table5.csv");
    bool header = true;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (!rows[i]) continue;
      write_table5_csv(os, jobs[i].protocol, *rows[i], header);
      header = false;
    }
  }
  if (failure) std::rethrow_exception(failure);

  json j = manifest(run);
  bool ordering = true;
  std::ofstream sum = dir.open("table5_summary.csv");
  sum << "protocol,sessions,successes,median_e_t,mean_e_t,std_e_t,median_e_r,mean_e_r,std_e_r,"
         "icp_median_e_t,icp_mean_e_t,icp_std_e_t,icp_median_e_r,icp_mean_e_r,icp_std_e_r\n"
      << std::setprecision(17);
  for (const std::string& p : run.cfg.protocols) {
    std::vector<Table5Row> all;
    for (std::size_t i = 0; i < jobs.size(); ++i)
      if (jobs[i].protocol == p) all.insert(all.end(), rows[i]->begin(), rows[i]->end());
    const Table5Summary s = summarize_table5(p, all);
    sum << p << ',' << s.sessions << ',' << s.successes << ',' << s.median_e_t << ',' << s.mean_e_t << ',' << s.std_e_t
        << ',' << s.median_e_r << ',' << s.mean_e_r << ',' << s.std_e_r << ',' << s.icp_median_e_t << ','
        << s.icp_mean_e_t << ',' << s.icp_std_e_t << ',' << s.icp_median_e_r << ',' << s.icp_mean_e_r << ','
        << s.icp_std_e_r << '\n';
    const bool holds = p == "identity" || s.median_e_t < s.icp_median_e_t;
    ordering = ordering && holds;
    j["protocols"][p] = {{"median_e_t", s.median_e_t}, {"median_e_r", s.median_e_r},
                         {"icp_median_e_t", s.icp_median_e_t}, {"icp_median_e_r", s.icp_median_e_r},
                         {"successes", s.successes}, {"sessions", s.sessions}, {"ablation_ordering", holds}};
    std::cout << std::left << std::setw(9) << p << std::fixed << std::setprecision(4) << " e_t " << s.mean_e_t << " ("
              << s.std_e_t << ") m  e_r " << s.mean_e_r << " (" << s.std_e_r << ") rad  | icp e_t " << s.icp_mean_e_t
              << " (" << s.icp_std_e_t << ") m  e_r " << s.icp_mean_e_r << " (" << s.icp_std_e_r << ") rad  median e_t "
              << s.median_e_t << " vs " << s.icp_median_e_t << '\n';
  }
  sum.close();
  j["ablation_ordering"] = ordering;
  write_json(dir, "summary.json", j);
  return ordering ? kExitOk : kExitInvariant;
}

int cmd_run_slam(const Run& run, OutputDir& dir) {
  const std::size_t n = run.seed_hi - run.seed_lo + 1;
  std::vector<int> codes(n, kExitOk);
  json j = manifest(run);
  std::mutex m;
  parallel_for(n, run.threads, [&](std::size_t i) {
    SlamConfig c = run.cfg.slam;
    c.seed = run.seed_lo + i;
    const std::string sub = n == 1 ? "" : "seed_" + std::to_string(c.seed) + "/";
    const SlamResult r = run_slam(c);
    fs::create_directories(dir.path(sub + "map.ply").parent_path());
    write_surfel_ply(dir.path(sub + "map.ply"), r.map.dense);
    auto csv = [&](const std::string& name, const std::function<void(std::ostream&)>& w) {
      std::ofstream os = dir.open(sub + name);
      w(os);
      if (!os) throw Error(ErrorCode::kIo, "write failed: " + name);
    };
    csv("trajectory.csv", [&](std::ostream& os) { write_poses_csv(os, r.trajectory); });
    csv("truth.csv", [&](std::ostream& os) { write_poses_csv(os, r.truth); });
    csv("windows.csv", [&](std::ostream& os) { write_windows_csv(os, r.windows); });
    csv("fusion.csv", [&](std::ostream& os) { write_fusion_metrics(os, r.fusion); });
    csv("closures.csv", [&](std::ostream& os) { write_closures_csv(os, r.closures); });
    csv("planes.csv", [&](std::ostream& os) { write_planes_csv(os, r.planes); });
    if (r.last_graph) csv("graph.csv", [&](std::ostream& os) { write_graph_csv(os, *r.last_graph); });

    bool ok = r.closures.size() + 1 >= c.n_passes || c.n_passes == 1;
    for (const ClosureRecord& cr : r.closures) ok = ok && cr.reduction >= 0.9;
    if (c.n_passes == 1) ok = ok && r.closures.empty();
    std::lock_guard<std::mutex> lock(m);
    codes[i] = ok ? kExitOk : kExitInvariant;
    j["runs"][std::to_string(c.seed)] = {{"closures", r.closures.size()},
                                          {"surfels", r.map.dense.size()},
                                          {"raw_distance", r.planes.raw_distance},
                                          {"fused_distance", r.planes.fused_distance},
                                          {"invariants_hold", ok}};
    std::cout << "seed " << c.seed << ": " << r.map.dense.size() << " surfels, " << r.closures.size()
              << " deformation(s)";
    for (const ClosureRecord& cr : r.closures)
      std::cout << ", step " << cr.step << " residual reduced " << std::fixed << std::setprecision(1)
                << 100.0 * cr.reduction << "%";
    std::cout << '\n';
  });
  write_json(dir, "summary.json", j);
  for (int c : codes)
    if (c != kExitOk) return c;
  return kExitOk;
}

int cmd_convert(const fs::path& in, const fs::path& out, bool force) {
  if (fs::exists(out) && !force) throw Error(ErrorCode::kIo, out.string() + " exists; use --force to overwrite");
  const SurfelMap map = in.extension() == ".ply"   ? read_surfel_ply(in)
                        : in.extension() == ".csv" ? read_surfel_csv(in)
                                                   : throw Error(ErrorCode::kIo, "input must be .ply or .csv");
  if (out.extension() == ".ply")
    write_surfel_ply(out, map);
  else if (out.extension() == ".csv")
    write_surfel_csv(out, map);
  else
    throw Error(ErrorCode::kIo, "output must be .ply or .csv");
  std::cout << map.size() << " surfels written to " << out.string() << '\n';
  return kExitOk;
}

std::pair<std::uint64_t, std::uint64_t> parse_seeds(const std::string& s) {
  const std::size_t dots = s.find("..");
  try {
    if (dots == std::string::npos) {
      const std::uint64_t v = std::stoull(s);
      return {v, v};
    }
    const std::uint64_t a = std::stoull(s.substr(0, dots)), b = std::stoull(s.substr(dots + 2));
    if (a > b) throw ConfigError("seed range " + s + " is empty");
    return {a, b};
  } catch (const std::logic_error&) {
    throw ConfigError("bad seed range " + s + ", expected a..b");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Map-centric continuous-time LiDAR SLAM experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, seeds;
  bool force = false, verbose = false;
  unsigned threads = 1;
  auto add_common = [&](CLI::App* c, const std::string& default_seeds) {
    c->add_option("--config", config_path, "JSON config with schema_version")->check(CLI::ExistingFile);
    c->add_option("--out", out_dir, "output directory")->required();
    c->add_option("--seeds", seeds, "seed or range a..b")->default_val(default_seeds);
    c->add_flag("--force", force, "replace an existing output directory");
    c->add_option("--threads", threads, "worker threads across seeds")->default_val(1)->check(CLI::PositiveNumber);
    c->add_flag("-v,--verbose", verbose, "progress on stderr");
  };
  CLI::App* t2 = app.add_subcommand("table2", "trajectory optimization modes on the window simulator");
  add_common(t2, "1..20");
  CLI::App* t5 = app.add_subcommand("table5", "localization robustness under misalignment protocols");
  add_common(t5, "1");
  CLI::App* rs = app.add_subcommand("run-slam", "multi-pass synthetic SLAM run");
  add_common(rs, "1");
  CLI::App* cv = app.add_subcommand("convert", "surfel map conversion between .ply and .csv");
  std::string conv_in, conv_out;
  cv->add_option("input", conv_in, "input map")->required()->check(CLI::ExistingFile);
  cv->add_option("output", conv_out, "output map")->required();
  cv->add_flag("--force", force, "replace an existing output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (cv->parsed()) return cmd_convert(conv_in, conv_out, force);

    Run run;
    run.command = app.get_subcommands().front()->get_name();
    run.cfg = load_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path));
    run.config_hash = hex64(Rng::fnv1a(effective_json(run.cfg).dump()));
    std::tie(run.seed_lo, run.seed_hi) = parse_seeds(seeds);
    run.threads = threads;
    run.verbose = verbose;

    OutputDir dir(out_dir, force);
    write_json(dir, "config.json", manifest(run));
    const auto start = std::chrono::steady_clock::now();
    int code = kExitOk;
    try {
      if (t2->parsed()) code = cmd_table2(run, dir);
      if (t5->parsed()) code = cmd_table5(run, dir);
      if (rs->parsed()) code = cmd_run_slam(run, dir);
    } catch (...) {
      dir.commit();  // keep partial output
      throw;
    }
    dir.commit();
    log(run, "finished in " + std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()) + " s");
    std::cerr << "config hash " << run.config_hash << ", output in " << out_dir << '\n';
    return code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumerical;
  }
}
