// Runs the eight acceptance criteria and prints one PASS/FAIL line each.
// Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mcslam/deformation.hpp"
#include "mcslam/experiments.hpp"
#include "mcslam/fusion.hpp"
#include "mcslam/io.hpp"
#include "mcslam/lie.hpp"
#include "mcslam/local_mapping.hpp"
#include "mcslam/metric_localization.hpp"
#include "mcslam/pipeline.hpp"
#include "mcslam/rng.hpp"
#include "mcslam/simulation.hpp"
#include "mcslam/trajectory.hpp"

using namespace mcslam;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

Twist random_twist(Rng& rng, double max_angle, double trans_scale) {
  return make_twist(rng.unit_vector() * rng.uniform(0.0, max_angle), rng.normal3(trans_scale));
}

Mat3 random_spd3(Rng& rng, double scale) {
  Mat3 A;
  for (int i = 0; i < 9; ++i) A(i / 3, i % 3) = rng.normal();
  return scale * (A * A.transpose() + 0.1 * Mat3::Identity());
}

Mat6 random_spd6(Rng& rng, double scale) {
  Mat6 A;
  for (int i = 0; i < 36; ++i) A(i / 6, i % 6) = rng.normal();
  return scale * (A * A.transpose() / 6.0 + 0.2 * Mat6::Identity());
}

// ---------------------------------------------------------------- 1

void table2(Outcome& o) {
  std::vector<Table2Row> rows;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto r = table2_seed(seed);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const auto medians = table2_medians(rows);
  auto of = [&](Table2Mode m) { return *std::find_if(medians.begin(), medians.end(), [&](auto& x) { return x.mode == m; }); };
  const Table2Median se3 = of(Table2Mode::kSe3Composition), lin = of(Table2Mode::kLinearComposition),
                     d11 = of(Table2Mode::kDirect11);
  o.check(table2_ordering_holds(medians), "ordering");
  o.check(se3.final_t_mm <= 20.0, "se3 t <= 20 mm");
  o.check(se3.final_r_mrad <= 3.0, "se3 r <= 3e-3 rad");
  o.detail << "median t/r: se3 " << se3.final_t_mm << " mm/" << se3.final_r_mrad << " mrad, linear " << lin.final_t_mm
           << "/" << lin.final_r_mrad << ", direct11 " << d11.final_t_mm << "/" << d11.final_r_mrad;
}

// ---------------------------------------------------------------- 2

void wishart(Outcome& o) {
  const PlaneFusionResult r = plane_fusion_experiment();
  o.check(r.n_fused_surfels > 0, "fused surfels exist");
  o.check(r.fused_distance <= 0.5 * r.raw_distance, "fused <= 0.5 raw");
  o.check(r.n_updates > 0 && r.trace_violations == 0, "trace strictly decreasing");
  o.detail << "raw " << 1e3 * r.raw_distance << " mm, fused(>=4) " << 1e3 * r.fused_distance << " mm (ratio "
           << r.fused_distance / r.raw_distance << ", " << r.n_fused_surfels << " surfels), trace violations "
           << r.trace_violations << "/" << r.n_updates;
}

// ---------------------------------------------------------------- 3

DenseSurfel random_surfel(Rng& rng) {
  DenseSurfel s;
  s.position = rng.normal3(0.05);
  s.normal = rng.uniform() < 0.5 ? Vec3::UnitZ() : rng.unit_vector();
  s.cov_position = random_spd3(rng, rng.uniform(1e-6, 4e-5));
  s.scatter = random_spd3(rng, 1e-3);
  s.dof = 10.0;
  return s;
}

void matching(Outcome& o) {
  std::size_t queries = 0, matches = 0, mismatches = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed);
    SurfelMap map;
    MatchParams p;
    p.theta_r = rng.uniform(0.01, 0.05);
    p.theta_d = rng.uniform(1.0, 4.0);
    for (int i = 0; i < 500; ++i) map.insert(random_surfel(rng));
    for (int q = 0; q < 200; ++q) {
      const DenseSurfel src = random_surfel(rng);
      std::vector<SurfelId> oracle;
      for (const auto& [id, dst] : map.surfels()) {
        const Vec3 delta = src.position - dst.position;
        const double d = std::abs(dst.normal.dot(delta));
        const double r = std::sqrt(std::max(0.0, delta.squaredNorm() - d * d));
        const double var = src.normal.dot(src.cov_position * src.normal) + dst.normal.dot(dst.cov_position * dst.normal);
        if (r < p.theta_r && d / std::sqrt(var) < p.theta_d) oracle.push_back(id);
      }
      std::vector<SurfelId> got = match_surfel(src, map, p);
      std::sort(got.begin(), got.end());
      std::sort(oracle.begin(), oracle.end());
      mismatches += got != oracle;
      matches += got.size();
      ++queries;
    }
  }
  o.check(mismatches == 0, "set equality");
  o.check(matches > 0, "instances produce matches");
  o.detail << queries << " queries over 50 seeds, " << matches << " matches, " << mismatches << " mismatched sets";
}

// ---------------------------------------------------------------- 4

void deformation(Outcome& o) {
  const BentMapResult r = bent_map_experiment();
  o.check(r.converged && r.reduction >= 0.9, "loop residual reduced >= 90%");
  BentMapConfig pinned;
  pinned.deform.w_pin = 100.0 * pinned.deform.w_loop;
  const BentMapResult p = bent_map_experiment(pinned);
  o.check(p.converged && p.reduction >= 0.9, "reduction under pin-dominant weights");
  o.check(p.pin_ratio < 0.01, "pins < 1% of misalignment");

  Rng rng(7);
  std::vector<SparseSurfel> sparse(200);
  for (SparseSurfel& s : sparse) {
    s.centroid = Vec3(rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 1));
    s.timestamp = rng.uniform(0.0, 100.0);
  }
  DeformGraph g = build_graph(sparse, 20000, 0.05);
  double worst_p = 0, worst_n = 0, worst_e = 0;
  for (int k = 0; k < 10; ++k) {
    const Pose T = exp_se3(make_twist(rng.normal3(1.0), rng.normal3(2.0)));
    set_rigid(g, T);
    for (int i = 0; i < 200; ++i) {
      const Vec3 x(rng.uniform(-2, 7), rng.uniform(-2, 7), rng.uniform(-1, 2));
      worst_p = std::max(worst_p, (deform_point(x, g) - T * x).norm());
      const Vec3 n = rng.unit_vector();
      worst_n = std::max(worst_n, (deform_normal(n, x, g).normal - T.rotation() * n).norm());
      const Mat3 S = random_spd3(rng, 1.0);
      const Vec3 a = Eigen::SelfAdjointEigenSolver<Mat3>(deform_covariance(S, x, g)).eigenvalues();
      const Vec3 b = Eigen::SelfAdjointEigenSolver<Mat3>(S).eigenvalues();
      worst_e = std::max(worst_e, (a - b).cwiseAbs().maxCoeff());
    }
  }
  o.check(worst_p < 1e-9 && worst_n < 1e-9 && worst_e < 1e-9, "rigid consistency 1e-9");
  o.detail << "reduction " << 100 * r.reduction << "% (defaults), pin " << 100 * p.pin_ratio
           << "% of misalignment (w_pin = 100 w_loop, reduction " << 100 * p.reduction << "%), rigid max err "
           << std::max({worst_p, worst_n, worst_e});
}

// ---------------------------------------------------------------- 5

void table5(Outcome& o) {
  Table5Config cfg;
  cfg.protocol = MisalignProtocol::hard();
  const Table5Summary s = summarize_table5("hard", table5_experiment(cfg));
  o.check(s.sessions == 50, "50 sessions");
  o.check(s.median_e_t <= 0.1, "combined median e_t <= 0.1 m");
  o.check(s.median_e_r <= 0.01, "combined median e_r <= 0.01 rad");
  o.check(s.icp_median_e_t >= 10.0 * s.median_e_t, "icp median >= 10x combined");
  o.detail << "hard: combined median e_t " << s.median_e_t << " m, e_r " << s.median_e_r << " rad; icp median e_t "
           << s.icp_median_e_t << " m (" << s.icp_median_e_t / s.median_e_t << "x)";
}

// ---------------------------------------------------------------- 6

AlignmentEstimate estimate_near(const Pose& truth, Rng& rng) {
  AlignmentEstimate e;
  e.covariance = random_spd6(rng, 1e-4);
  const Eigen::LLT<Mat6> L(e.covariance);
  Vec6 z;
  for (int i = 0; i < 6; ++i) z[i] = rng.normal();
  e.T = exp_se3(L.matrixL() * z) * truth;
  return e;
}

// Gauss-Newton on the stacked whitened log residuals with numeric Jacobians.
Pose batch_oracle(const std::vector<AlignmentEstimate>& es) {
  Pose T = es.front().T;
  auto residual = [&](const Pose& X) {
    Eigen::VectorXd r(static_cast<Eigen::Index>(6 * es.size()));
    for (std::size_t n = 0; n < es.size(); ++n) {
      const Eigen::LLT<Mat6> L(es[n].covariance.inverse());
      r.segment<6>(static_cast<Eigen::Index>(6 * n)) = Mat6(L.matrixU()) * log_se3(X * es[n].T.inverse());
    }
    return r;
  };
  for (int iter = 0; iter < 50; ++iter) {
    const Eigen::VectorXd r0 = residual(T);
    Eigen::MatrixXd J(r0.size(), 6);
    for (int i = 0; i < 6; ++i) {
      Vec6 d = Vec6::Zero();
      d[i] = 1e-6;
      J.col(i) = (residual(exp_se3(d) * T) - residual(exp_se3(-d) * T)) / 2e-6;
    }
    const Vec6 xi = -(J.transpose() * J).ldlt().solve(J.transpose() * r0);
    T = exp_se3(xi) * T;
    if (xi.norm() < 1e-13) break;
  }
  return T;
}

void sequential(Outcome& o) {
  double worst = 0.0;
  std::size_t trace_up = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(1000 + seed);
    const Pose truth = exp_se3(make_twist(rng.normal3(1.0), rng.normal3(5.0)));
    std::vector<AlignmentEstimate> es;
    for (int i = 0; i < 10; ++i) es.push_back(estimate_near(truth, rng));
    AlignmentEstimate f = es[0];
    for (std::size_t i = 1; i < es.size(); ++i) {
      const double before = f.covariance.trace();
      f = sequential_fuse(f, es[i]);
      trace_up += f.covariance.trace() > before;
    }
    worst = std::max(worst, log_se3(f.T * batch_oracle(es).inverse()).norm());
  }
  Rng rng(3);
  AlignmentEstimate a;
  a.T = exp_se3(make_twist(Vec3(0.2, 0.1, -0.3), Vec3(1, 2, 3)));
  a.covariance = random_spd6(rng, 1e-3);
  const AlignmentEstimate h = sequential_fuse(a, a);
  const double halve = (h.covariance - 0.5 * a.covariance).norm() / a.covariance.norm();
  o.check(worst < 1e-6, "batch twist difference < 1e-6");
  o.check(trace_up == 0, "trace non-increasing");
  o.check(halve < 1e-12, "identical estimates halve covariance");
  o.detail << "max twist diff vs batch " << worst << " over 20 x 10 estimates, trace increases " << trace_up
           << ", halving rel err " << halve;
}

// ---------------------------------------------------------------- 7

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

void numerics(Outcome& o) {
  Rng rng(11);
  double round_trip = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Twist xi = random_twist(rng, 3.0, 2.0);
    round_trip = std::max(round_trip, (log_se3(exp_se3(xi)) - xi).norm());
  }
  double unity = 0.0;
  for (int i = 0; i <= 1000; ++i) {
    const auto w = cubic_bspline_weights(i / 1000.0);
    unity = std::max(unity, std::abs(w[0] + w[1] + w[2] + w[3] - 1.0));
  }
  double left_jac = 0.0;
  for (int i = 0; i < 50; ++i) {
    const Twist xi = random_twist(rng, 2.5, 1.0);
    const Mat6 J = numeric_left_jacobian(xi);
    left_jac = std::max(left_jac, (left_jacobian_se3(xi) - J).norm() / J.norm());
  }
  // Window Jacobians, analytic against central differences, all four model variants.
  struct Variant {
    OptimizationModel model;
    UpdateMode update;
    CorrectionBasis basis;
    InterpolationMode interp;
  };
  const Variant variants[] = {
      {OptimizationModel::kComposition, UpdateMode::kSe3, CorrectionBasis::kCubicBSpline, InterpolationMode::kSe3},
      {OptimizationModel::kComposition, UpdateMode::kSo3R3, CorrectionBasis::kLinear, InterpolationMode::kLinear},
      {OptimizationModel::kComposition, UpdateMode::kSo3R3, CorrectionBasis::kCubicBSpline, InterpolationMode::kSe3},
      {OptimizationModel::kSplineDirect, UpdateMode::kSe3, CorrectionBasis::kCubicBSpline, InterpolationMode::kSe3},
  };
  double window_jac = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Variant& v = variants[trial % 4];
    SimConfig sc;
    sc.seed = static_cast<std::uint64_t>(100 + trial);
    sc.window = 1.0;
    sc.n_features = 40;
    const SimulatedWindow w = gen_trajectory_and_imu(sc);
    LocalConstraints cons = gen_surfel_scene(sc, w.truth).constraints;
    cons.imu = w.imu;
    LocalMappingConfig cfg;
    cfg.model = v.model;
    cfg.update = v.update;
    cfg.basis = v.basis;
    cfg.interpolation = v.interp;
    cfg.knot_spacing = 0.25;
    cfg.window = 1.0;
    OptState st = initial_state(w.init, cfg);
    for (std::size_t i = 0; i < st.grid.knot_count(); ++i) st.grid.knot(i) += random_twist(rng, 0.02, 0.02);
    st.bias_accel = rng.normal3(0.05);
    st.bias_gyro = rng.normal3(0.005);
    st.time_lag = rng.uniform(-0.004, 0.004);
    const LinearizedWindow a = linearize_window(cons, w.init, st, cfg, JacobianMode::kAnalytic);
    const LinearizedWindow n = linearize_window(cons, w.init, st, cfg, JacobianMode::kCentralDifference);
    window_jac = std::max(window_jac, (a.jacobian - n.jacobian).norm() / n.jacobian.norm());
  }
  o.check(round_trip < 1e-9, "exp/log round trip 1e-9");
  o.check(unity < 1e-15, "partition of unity");
  o.check(left_jac < 1e-5, "left Jacobian vs differences 1e-5");
  o.check(window_jac < 1e-5, "window Jacobian vs differences 1e-5");
  o.detail << "round trip " << round_trip << ", unity " << unity << ", left Jacobian rel " << left_jac
           << ", window Jacobian rel " << window_jac << " (100 states)";
}

// ---------------------------------------------------------------- 8

void determinism(Outcome& o) {
  auto outputs = [] {
    const SlamResult r = run_slam();
    std::ostringstream os;
    write_surfel_ply(os, r.map.dense);
    write_poses_csv(os, r.trajectory);
    write_windows_csv(os, r.windows);
    write_fusion_metrics(os, r.fusion);
    write_closures_csv(os, r.closures);
    write_planes_csv(os, r.planes);
    if (r.last_graph) write_graph_csv(os, *r.last_graph);
    return os.str();
  };
  const std::string a = outputs(), b = outputs();
  o.check(a == b, "bit-identical outputs");
  o.detail << a.size() << " bytes of PLY/CSV output, runs " << (a == b ? "identical" : "differ");
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // <= 0: no runtime bound
  std::function<void(Outcome&)> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "trajectory optimization modes", 120.0, table2},
      {2, "Wishart fusion convergence", 30.0, wishart},
      {3, "matching oracle equivalence", 10.0, matching},
      {4, "deformation correctness", 30.0, deformation},
      {5, "localization robustness", 300.0, table5},
      {6, "sequential fusion", 5.0, sequential},
      {7, "Lie and spline numerics", 10.0, numerics},
      {8, "end-to-end determinism", 0.0, determinism},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    Outcome o;
    o.detail.precision(4);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail << " [failed: runtime over " << c.budget_s << " s]";
    }
    failed += !o.pass;
    std::printf("%s %d %-30s %7.2f s  %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, secs, o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failed;
}
