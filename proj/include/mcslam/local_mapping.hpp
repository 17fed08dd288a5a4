#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcslam/error.hpp"
#include "mcslam/lie.hpp"
#include "mcslam/trajectory.hpp"

namespace mcslam {

inline const Vec3 kGravity(0.0, 0.0, -9.80665);

/// Two observations of the same plane at different times (sensor frame).
struct SurfelPairConstraint {
  Vec3 u_a = Vec3::Zero();
  Vec3 u_b = Vec3::Zero();
  double tau_a = 0.0;
  double tau_b = 0.0;
  Vec3 n_ab = Vec3::UnitZ();  // world frame
};

/// Sensor-frame observation aligned to a fixed world-frame map point.
struct MapPriorConstraint {
  Vec3 u_m = Vec3::Zero();  // world
  Vec3 u_c = Vec3::Zero();  // sensor
  double tau_c = 0.0;
  Vec3 n_mc = Vec3::UnitZ();
};

struct ImuSample {
  double tau = 0.0;
  Vec3 accel = Vec3::Zero();  // m/s^2, body frame
  Vec3 gyro = Vec3::Zero();   // rad/s, body frame
};

struct LocalConstraints {
  std::vector<SurfelPairConstraint> pairs;
  std::vector<MapPriorConstraint> priors;
  std::vector<ImuSample> imu;
};

/// Optimizer state. In the composition model the grid holds the (zeroed)
/// correction knots; in the spline-direct model it holds the absolute knot
/// poses (rotation vector, translation).
struct OptState {
  ControlGrid grid;
  Vec3 bias_accel = Vec3::Zero();
  Vec3 bias_gyro = Vec3::Zero();
  double time_lag = 0.0;
};

enum class OptimizationModel {
  kComposition,   // dense samples corrected by a low-rate grid
  kSplineDirect,  // the trajectory is the spline itself
};

enum class JacobianMode {
  kAnalytic,
  kCentralDifference,
};

struct LocalMappingConfig {
  OptimizationModel model = OptimizationModel::kComposition;
  UpdateMode update = UpdateMode::kSe3;
  CorrectionBasis basis = CorrectionBasis::kCubicBSpline;
  InterpolationMode interpolation = InterpolationMode::kSe3;
  JacobianMode jacobians = JacobianMode::kAnalytic;

  double knot_spacing = 0.1;  // s
  double window = 5.0;        // s

  double sigma_surfel = 0.02;  // m
  double sigma_prior = 0.02;   // m
  double sigma_accel = 0.05;   // m/s^2
  double sigma_gyro = 0.005;   // rad/s
  double cauchy_scale = 3.0;   // in units of sigma

  bool estimate_biases = true;
  bool estimate_time_lag = true;
  double bias_bound = 1.0;
  /// |d| is clamped to this fraction of the sample interval so IMU stencils
  /// stay inside the window.
  double time_lag_bound = 1.0;

  int max_iterations = 50;
  double step_tolerance = 1e-8;
  double cost_tolerance = 1e-10;
  int max_damping_retries = 5;
};

struct IterationRecord {
  int iter = 0;
  double cost = 0.0;
  double rms_surfel = 0.0;
  double rms_prior = 0.0;
  double rms_accel = 0.0;
  double rms_gyro = 0.0;
  double step_norm = 0.0;
};

struct OptimizationReport {
  std::vector<IterationRecord> iterations;  // entry 0 is the initial state
  bool converged = false;
  std::string termination;
};

struct WindowResult {
  OptState state;
  Trajectory trajectory;
  OptimizationReport report;
};

/// Thrown when no damping level decreases the cost; carries the best state.
class NoProgressError : public Error {
 public:
  NoProgressError(const std::string& what, WindowResult best)
      : Error(ErrorCode::kNoProgress, what), best_(std::move(best)) {}
  const WindowResult& best() const { return best_; }

 private:
  WindowResult best_;
};

/// Pose at tau of the trajectory corrected by the grid (composition model).
Pose corrected_pose(const Trajectory& traj, const ControlGrid& grid, double tau,
                    UpdateMode update = UpdateMode::kSe3,
                    CorrectionBasis basis = CorrectionBasis::kCubicBSpline,
                    InterpolationMode interp = InterpolationMode::kSe3);

/// n_ab^T [(R_a u_a + t_a) - (R_b u_b + t_b)] on the corrected trajectory.
double residual_surfel_pair(const SurfelPairConstraint& c, const Trajectory& traj,
                            const ControlGrid& grid);
/// n_mc^T [u_m - (R_c u_c + t_c)] on the corrected trajectory.
double residual_map_prior(const MapPriorConstraint& c, const Trajectory& traj,
                          const ControlGrid& grid);
/// (accel, gyro) residual at s.tau + state.time_lag on the corrected trajectory.
Vec6 residual_imu(const ImuSample& s, const Trajectory& traj, const ControlGrid& grid,
                  const OptState& state);

/// Pose at tau of a spline-direct grid: (exp(sum w r_j), sum w t_j).
Pose spline_direct_pose(const ControlGrid& grid, double tau);
/// Least-squares fit of absolute knot values to a sampled trajectory.
ControlGrid fit_spline_direct(const Trajectory& traj, double knot_spacing);

/// Initial optimizer state for the configured model.
OptState initial_state(const Trajectory& traj, const LocalMappingConfig& cfg);

/// Whitened residual vector and its Jacobian with respect to the parameter
/// vector [knots (6 per knot) | b_accel | b_gyro | d], the last two blocks
/// present only when enabled in cfg. Robust weights are not applied.
struct LinearizedWindow {
  Eigen::VectorXd residuals;
  Eigen::MatrixXd jacobian;
};
LinearizedWindow linearize_window(const LocalConstraints& cons, const Trajectory& traj,
                                  const OptState& state, const LocalMappingConfig& cfg,
                                  JacobianMode mode);

/// Damped Gauss-Newton over knots, IMU biases and time lag.
/// Throws kDegenerateGeometry (naming the null-space dimension) and
/// NoProgressError.
WindowResult optimize_window(const LocalConstraints& cons, const Trajectory& traj,
                             const OptState& init, const LocalMappingConfig& cfg);

void write_report_csv(std::ostream& os, const OptimizationReport& report);

/// RMS absolute translation (m) and rotation (rad) error over common samples.
struct TrajectoryError {
  double translation_rms = 0.0;
  double rotation_rms = 0.0;
};
TrajectoryError trajectory_error(const Trajectory& estimate, const Trajectory& truth);

}  // namespace mcslam
