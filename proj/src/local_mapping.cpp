#include "mcslam/local_mapping.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

namespace mcslam {
namespace {

using Row6 = Eigen::Matrix<double, 1, 6>;
using Mat36 = Eigen::Matrix<double, 3, 6>;

struct KnotBlock {
  std::size_t knot;
  Mat6 J;  // left perturbation of the queried pose per unit knot step
};

/// Left-perturbation Jacobians of an interpolated pose with respect to its
/// two bracketing samples.
void interpolation_jacobians(const Pose& a, const Pose& b, double alpha, InterpolationMode mode,
                             Mat6& Ja, Mat6& Jb) {
  if (mode == InterpolationMode::kSe3) {
    const Twist X = log_se3(a.inverse() * b);
    const Mat6 M = adjoint(a) * (alpha * left_jacobian_se3(alpha * X) * left_jacobian_inv_se3(X)) *
                   adjoint(a.inverse());
    Ja = Mat6::Identity() - M;
    Jb = M;
    return;
  }
  const Mat3& Ra = a.rotation();
  const Vec3 phi = log_so3(Ra.transpose() * b.rotation());
  const Mat3 Mr = Ra * (alpha * left_jacobian_so3(alpha * phi) * left_jacobian_inv_so3(phi)) *
                  Ra.transpose();
  const Vec3 tp = (1.0 - alpha) * a.translation() + alpha * b.translation();
  const Mat3 I = Mat3::Identity();
  Ja.setZero();
  Jb.setZero();
  Ja.topLeftCorner<3, 3>() = I - Mr;
  Jb.topLeftCorner<3, 3>() = Mr;
  Ja.bottomLeftCorner<3, 3>() = -(1.0 - alpha) * hat(a.translation()) + hat(tp) * (I - Mr);
  Jb.bottomLeftCorner<3, 3>() = -alpha * hat(b.translation()) + hat(tp) * Mr;
  Ja.bottomRightCorner<3, 3>() = (1.0 - alpha) * I;
  Jb.bottomRightCorner<3, 3>() = alpha * I;
}

/// Trajectory representation under optimization: either dense samples with a
/// zeroed correction grid, or the absolute spline.
class WindowModel {
 public:
  WindowModel(const Trajectory& traj, const ControlGrid& grid, const LocalMappingConfig& cfg)
      : cfg_(&cfg), traj_(traj), grid_(grid) {}

  bool direct() const { return cfg_->model == OptimizationModel::kSplineDirect; }
  std::size_t knot_count() const { return grid_.knot_count(); }
  const ControlGrid& grid() const { return grid_; }

  bool supports(double tau) const {
    return direct() ? grid_.supports(tau) : traj_.contains(tau);
  }

  Pose pose(double tau) const {
    if (direct()) return spline_direct_pose(grid_, tau);
    return traj_.sample(tau, cfg_->interpolation);
  }

  void pose_jacobian(double tau, std::vector<KnotBlock>& out) const {
    if (direct()) {
      direct_jacobian(tau, out);
      return;
    }
    const std::size_t k = traj_.bracket(tau);
    if (traj_.size() == 1 || tau == traj_[k].time) {
      add_sample(k, Mat6::Identity(), out);
      return;
    }
    const double alpha = std::clamp((tau - traj_[k].time) / (traj_[k + 1].time - traj_[k].time), 0.0, 1.0);
    Mat6 Ja, Jb;
    interpolation_jacobians(traj_[k].pose, traj_[k + 1].pose, alpha, cfg_->interpolation, Ja, Jb);
    add_sample(k, Ja, out);
    add_sample(k + 1, Jb, out);
  }

  WindowModel retract(const Eigen::VectorXd& delta) const {
    WindowModel next = *this;
    if (direct()) {
      for (std::size_t j = 0; j < grid_.knot_count(); ++j) {
        const Vec6& c = grid_.knot(j);
        const Pose Q = exp_se3(delta.segment<6>(6 * j)) * Pose(exp_so3(c.head<3>()), c.tail<3>());
        next.grid_.knot(j) << log_so3(Q.rotation()), Q.translation();
      }
      return next;
    }
    for (std::size_t j = 0; j < grid_.knot_count(); ++j) next.grid_.knot(j) = delta.segment<6>(6 * j);
    next.traj_ = apply_correction(traj_, next.grid_, cfg_->update, cfg_->basis);
    next.grid_.set_zero();
    return next;
  }

  Trajectory trajectory() const {
    if (!direct()) return traj_;
    std::vector<TimedPose> s;
    s.reserve(traj_.size());
    for (const TimedPose& tp : traj_.samples()) s.push_back({tp.time, spline_direct_pose(grid_, tp.time)});
    return Trajectory(std::move(s), traj_.nominal_rate());
  }

 private:
  void add_sample(std::size_t s, const Mat6& Jp, std::vector<KnotBlock>& out) const {
    const TimedPose& tp = traj_[s];
    Mat6 Jt = Jp;
    if (cfg_->update == UpdateMode::kSo3R3) {
      // rho = dt + [p]x omega for a left perturbation.
      Jt.leftCols<3>() += Jp.rightCols<3>() * hat(tp.pose.translation());
    }
    const KnotWeights kw = grid_.weights(tp.time, cfg_->basis);
    for (std::size_t j = 0; j < kw.count; ++j) {
      if (kw.weight[j] == 0.0) continue;
      out.push_back({kw.index[j], kw.weight[j] * Jt});
    }
  }

  void direct_jacobian(double tau, std::vector<KnotBlock>& out) const {
    const KnotWeights kw = grid_.weights(tau, CorrectionBasis::kCubicBSpline);
    Vec3 sr = Vec3::Zero(), st = Vec3::Zero();
    for (std::size_t j = 0; j < kw.count; ++j) {
      sr += kw.weight[j] * grid_.knot(kw.index[j]).head<3>();
      st += kw.weight[j] * grid_.knot(kw.index[j]).tail<3>();
    }
    const Mat3 Jl = left_jacobian_so3(sr);
    const Mat3 Ht = hat(st);
    for (std::size_t j = 0; j < kw.count; ++j) {
      const double w = kw.weight[j];
      if (w == 0.0) continue;
      const Vec6& c = grid_.knot(kw.index[j]);
      Mat6 B = Mat6::Zero();
      B.topLeftCorner<3, 3>() = w * Jl * left_jacobian_inv_so3(c.head<3>());
      B.bottomLeftCorner<3, 3>() = -w * hat(c.tail<3>()) + Ht * B.topLeftCorner<3, 3>();
      B.bottomRightCorner<3, 3>() = w * Mat3::Identity();
      out.push_back({kw.index[j], B});
    }
  }

  const LocalMappingConfig* cfg_;
  Trajectory traj_;
  ControlGrid grid_;
};

enum Family { kSurfel = 0, kPrior = 1, kImu = 2 };

/// One whitened residual (1 or 6 rows) with its sparse Jacobian.
struct ResidualBlock {
  int rows = 1;
  Family family = kSurfel;
  Vec6 r = Vec6::Zero();
  std::vector<KnotBlock> knot_blocks;                  // reused scratch
  std::vector<std::pair<std::size_t, Mat6>> knot_rows;  // (knot, rows x 6 used)
  Eigen::Matrix<double, 6, 7> extra = Eigen::Matrix<double, 6, 7>::Zero();  // b_a, b_g, d
};

struct ParamLayout {
  std::size_t knots = 0;
  bool biases = false;
  bool lag = false;
  std::size_t size() const { return 6 * knots + (biases ? 6 : 0) + (lag ? 1 : 0); }
  std::size_t bias_offset() const { return 6 * knots; }
  std::size_t lag_offset() const { return 6 * knots + (biases ? 6 : 0); }
};

class Evaluator {
 public:
  Evaluator(const LocalConstraints& cons, const LocalMappingConfig& cfg, double h)
      : cons_(cons), cfg_(cfg), h_(h) {}

  double h() const { return h_; }

  /// Chain pose-level residual Jacobian (rows x 6) through the model.
  template <int Rows>
  void chain(const WindowModel& model, double tau, const Eigen::Matrix<double, Rows, 6>& dr,
             ResidualBlock& out) const {
    out.knot_blocks.clear();
    model.pose_jacobian(tau, out.knot_blocks);
    for (const KnotBlock& kb : out.knot_blocks) {
      Mat6 m = Mat6::Zero();
      m.topRows<Rows>() = dr * kb.J;
      out.knot_rows.emplace_back(kb.knot, m);
    }
  }

  void surfel(const WindowModel& model, const SurfelPairConstraint& c, bool jac, ResidualBlock& out) const {
    out.rows = 1;
    out.family = kSurfel;
    out.knot_rows.clear();
    out.extra.setZero();
    const Vec3 xa = model.pose(c.tau_a) * c.u_a;
    const Vec3 xb = model.pose(c.tau_b) * c.u_b;
    const double s = 1.0 / cfg_.sigma_surfel;
    out.r(0) = s * c.n_ab.dot(xa - xb);
    if (!jac) return;
    Row6 da, db;
    da << s * xa.cross(c.n_ab).transpose(), s * c.n_ab.transpose();
    db << -s * xb.cross(c.n_ab).transpose(), -s * c.n_ab.transpose();
    chain<1>(model, c.tau_a, da, out);
    chain<1>(model, c.tau_b, db, out);
  }

  void prior(const WindowModel& model, const MapPriorConstraint& c, bool jac, ResidualBlock& out) const {
    out.rows = 1;
    out.family = kPrior;
    out.knot_rows.clear();
    out.extra.setZero();
    const Vec3 x = model.pose(c.tau_c) * c.u_c;
    const double s = 1.0 / cfg_.sigma_prior;
    out.r(0) = s * c.n_mc.dot(c.u_m - x);
    if (!jac) return;
    Row6 d;
    d << -s * x.cross(c.n_mc).transpose(), -s * c.n_mc.transpose();
    chain<1>(model, c.tau_c, d, out);
  }

  Vec6 imu_raw(const WindowModel& model, const ImuSample& m, const Vec3& ba, const Vec3& bg,
               double lag) const {
    const double tau = m.tau + lag;
    if (!model.supports(tau - h_) || !model.supports(tau + h_)) {
      std::ostringstream msg;
      msg << "IMU stencil at " << tau << " leaves the window";
      throw Error(ErrorCode::kMissingSupport, msg.str());
    }
    const Pose Pm = model.pose(tau - h_), P0 = model.pose(tau), Pp = model.pose(tau + h_);
    const Vec3 a = (Pp.translation() - 2.0 * P0.translation() + Pm.translation()) / (h_ * h_);
    const Mat3& R0 = P0.rotation();
    Vec6 e;
    e.head<3>() = m.accel - R0.transpose() * (a - kGravity) + ba;
    e.tail<3>() = m.gyro - log_so3(R0.transpose() * Pp.rotation()) / h_ + bg;
    return e;
  }

  void imu(const WindowModel& model, const ImuSample& m, const Vec3& ba, const Vec3& bg, double lag,
           bool jac, ResidualBlock& out) const {
    out.rows = 6;
    out.family = kImu;
    out.knot_rows.clear();
    out.extra.setZero();
    Vec6 w;
    w << Vec3::Constant(1.0 / cfg_.sigma_accel), Vec3::Constant(1.0 / cfg_.sigma_gyro);
    out.r = w.asDiagonal() * imu_raw(model, m, ba, bg, lag);
    if (!jac) return;

    const double tau = m.tau + lag, h2 = h_ * h_;
    const Pose Pm = model.pose(tau - h_), P0 = model.pose(tau), Pp = model.pose(tau + h_);
    const Vec3 v = (Pp.translation() - 2.0 * P0.translation() + Pm.translation()) / h2 - kGravity;
    const Mat3 Rt = P0.rotation().transpose();
    const Vec3 phi = log_so3(Rt * Pp.rotation());
    const Mat3 G = left_jacobian_inv_so3(phi) * Rt / h_;
    const auto accel_block = [&](const Pose& P, double coeff) {
      Mat6 d = Mat6::Zero();
      d.block<3, 3>(0, 0) = (coeff / h2) * Rt * hat(P.translation());
      d.block<3, 3>(0, 3) = -(coeff / h2) * Rt;
      return d;
    };
    Mat6 dm = accel_block(Pm, 1.0);
    Mat6 d0 = accel_block(P0, -2.0);
    Mat6 dp = accel_block(Pp, 1.0);
    d0.block<3, 3>(0, 0) -= Rt * hat(v);
    d0.block<3, 3>(3, 0) = G;
    dp.block<3, 3>(3, 0) = -G;
    chain<6>(model, tau - h_, w.asDiagonal() * dm, out);
    chain<6>(model, tau, w.asDiagonal() * d0, out);
    chain<6>(model, tau + h_, w.asDiagonal() * dp, out);

    out.extra.block<3, 3>(0, 0) = w.head<3>().asDiagonal();
    out.extra.block<3, 3>(3, 3) = w.tail<3>().asDiagonal();
    if (!cfg_.estimate_time_lag) return;
    const double eps = 1e-7;
    out.extra.col(6) = w.asDiagonal() * (imu_raw(model, m, ba, bg, lag + eps) - imu_raw(model, m, ba, bg, lag - eps)) / (2 * eps);
  }

  template <typename F>
  void for_each(const WindowModel& model, const OptState& st, bool jac, ResidualBlock& scratch, F&& f) const {
    for (const SurfelPairConstraint& c : cons_.pairs) {
      surfel(model, c, jac, scratch);
      f(scratch);
    }
    for (const MapPriorConstraint& c : cons_.priors) {
      prior(model, c, jac, scratch);
      f(scratch);
    }
    for (const ImuSample& m : imu_) {
      imu(model, m, st.bias_accel, st.bias_gyro, st.time_lag, jac, scratch);
      f(scratch);
    }
  }

  void select_imu(const WindowModel& model, double max_lag) {
    imu_.clear();
    for (const ImuSample& m : cons_.imu) {
      if (model.supports(m.tau - h_ - max_lag) && model.supports(m.tau + h_ + max_lag)) imu_.push_back(m);
    }
  }
  const std::vector<ImuSample>& imu_samples() const { return imu_; }
  std::size_t scalar_residuals() const { return cons_.pairs.size() + cons_.priors.size() + 6 * imu_.size(); }

 private:
  const LocalConstraints& cons_;
  const LocalMappingConfig& cfg_;
  double h_;
  std::vector<ImuSample> imu_;
};

double robust_cost(double r, double c) { return 0.5 * c * c * std::log1p((r / c) * (r / c)); }
double robust_weight(double r, double c) { return 1.0 / (1.0 + (r / c) * (r / c)); }

struct CostSummary {
  double cost = 0.0;
  double sq[3] = {0.0, 0.0, 0.0};
  std::size_t n[3] = {0, 0, 0};
  double sq_gyro = 0.0;
};

CostSummary evaluate_cost(const Evaluator& ev, const WindowModel& model, const OptState& st,
                          const LocalMappingConfig& cfg) {
  CostSummary out;
  ResidualBlock scratch;
  ev.for_each(model, st, false, scratch, [&](const ResidualBlock& rb) {
    if (rb.family == kImu) {
      out.cost += 0.5 * rb.r.squaredNorm();
      out.sq[kImu] += rb.r.head<3>().squaredNorm() * cfg.sigma_accel * cfg.sigma_accel;
      out.sq_gyro += rb.r.tail<3>().squaredNorm() * cfg.sigma_gyro * cfg.sigma_gyro;
      out.n[kImu] += 3;
    } else {
      out.cost += robust_cost(rb.r(0), cfg.cauchy_scale);
      const double sigma = rb.family == kSurfel ? cfg.sigma_surfel : cfg.sigma_prior;
      out.sq[rb.family] += rb.r(0) * rb.r(0) * sigma * sigma;
      out.n[rb.family] += 1;
    }
  });
  return out;
}

IterationRecord make_record(int iter, const CostSummary& c, double step) {
  auto rms = [](double sq, std::size_t n) { return n ? std::sqrt(sq / static_cast<double>(n)) : 0.0; };
  IterationRecord r;
  r.iter = iter;
  r.cost = c.cost;
  r.rms_surfel = rms(c.sq[kSurfel], c.n[kSurfel]);
  r.rms_prior = rms(c.sq[kPrior], c.n[kPrior]);
  r.rms_accel = rms(c.sq[kImu], c.n[kImu]);
  r.rms_gyro = rms(c.sq_gyro, c.n[kImu]);
  r.step_norm = step;
  return r;
}

/// Scatter one residual block into local dense form: columns and values.
void local_jacobian(const ResidualBlock& rb, const ParamLayout& layout, std::vector<std::size_t>& cols,
                    Eigen::MatrixXd& J) {
  // Merge blocks that hit the same knot.
  std::vector<std::pair<std::size_t, Mat6>> merged;
  for (const auto& [knot, m] : rb.knot_rows) {
    auto it = std::find_if(merged.begin(), merged.end(), [&](const auto& p) { return p.first == knot; });
    if (it == merged.end()) {
      merged.emplace_back(knot, m);
    } else {
      it->second += m;
    }
  }
  const bool imu = rb.family == kImu;
  const std::size_t n_extra = imu ? (layout.biases ? 6 : 0) + (layout.lag ? 1 : 0) : 0;
  cols.clear();
  J.setZero(rb.rows, static_cast<Eigen::Index>(6 * merged.size() + n_extra));
  Eigen::Index c = 0;
  for (const auto& [knot, m] : merged) {
    for (int i = 0; i < 6; ++i) cols.push_back(6 * knot + static_cast<std::size_t>(i));
    J.block(0, c, rb.rows, 6) = m.topRows(rb.rows);
    c += 6;
  }
  if (imu && layout.biases) {
    for (int i = 0; i < 6; ++i) cols.push_back(layout.bias_offset() + static_cast<std::size_t>(i));
    J.block(0, c, 6, 6) = rb.extra.leftCols<6>();
    c += 6;
  }
  if (imu && layout.lag) {
    cols.push_back(layout.lag_offset());
    J.col(c) = rb.extra.col(6);
  }
}

/// Add w * J^T J and w * J^T r of one block to the normal equations.
void accumulate(const ResidualBlock& rb, const ParamLayout& layout, double w,
                std::vector<std::pair<std::size_t, Mat6>>& merged, Eigen::MatrixXd& H, Eigen::VectorXd& g) {
  merged.clear();
  for (const auto& [knot, m] : rb.knot_rows) {
    auto it = std::find_if(merged.begin(), merged.end(), [&](const auto& p) { return p.first == knot; });
    if (it == merged.end()) {
      merged.emplace_back(knot, m);
    } else {
      it->second += m;
    }
  }
  Vec6 r = Vec6::Zero();
  r.head(rb.rows) = rb.r.head(rb.rows);
  for (const auto& [ki, mi] : merged) {
    const auto oi = static_cast<Eigen::Index>(6 * ki);
    const Mat6 wt = w * mi.transpose();
    g.segment<6>(oi) += wt * r;
    for (const auto& [kj, mj] : merged) H.block<6, 6>(oi, static_cast<Eigen::Index>(6 * kj)).noalias() += wt * mj;
  }
  if (rb.family != kImu || (!layout.biases && !layout.lag)) return;
  // Extra columns: biases then lag, as laid out.
  Eigen::Matrix<double, 6, 7> E;
  Eigen::Index ne = 0, off = static_cast<Eigen::Index>(layout.bias_offset());
  if (layout.biases) {
    E.leftCols<6>() = rb.extra.leftCols<6>();
    ne = 6;
  }
  if (layout.lag) E.col(ne++) = rb.extra.col(6);
  const auto Ex = E.leftCols(ne);
  g.segment(off, ne) += w * Ex.transpose() * r;
  H.block(off, off, ne, ne) += w * Ex.transpose() * Ex;
  for (const auto& [k, m] : merged) {
    const auto ok = static_cast<Eigen::Index>(6 * k);
    const Eigen::MatrixXd c = w * m.transpose() * Ex;
    H.block(ok, off, 6, ne) += c;
    H.block(off, ok, ne, 6) += c.transpose();
  }
}

OptState apply_step(const OptState& st, const Eigen::VectorXd& delta, const ParamLayout& layout,
                    const LocalMappingConfig& cfg, double h) {
  OptState next = st;
  if (layout.biases) {
    next.bias_accel += delta.segment<3>(layout.bias_offset());
    next.bias_gyro += delta.segment<3>(layout.bias_offset() + 3);
    for (Vec3* b : {&next.bias_accel, &next.bias_gyro}) {
      if (b->norm() > cfg.bias_bound) *b *= cfg.bias_bound / b->norm();
    }
  }
  if (layout.lag) {
    const double bound = cfg.time_lag_bound * h;
    next.time_lag = std::clamp(st.time_lag + delta(layout.lag_offset()), -bound, bound);
  }
  return next;
}

void check_rank(const Eigen::MatrixXd& H) {
  const Eigen::Index n = H.rows();
  Eigen::VectorXd s(n);
  for (Eigen::Index i = 0; i < n; ++i) s(i) = H(i, i) > 0.0 ? 1.0 / std::sqrt(H(i, i)) : 0.0;
  const Eigen::MatrixXd Hs = s.asDiagonal() * H * s.asDiagonal();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(Hs);
  bool ok = ldlt.info() == Eigen::Success && (s.array() > 0.0).all();
  if (ok) {
    const Eigen::VectorXd d = ldlt.vectorD();
    ok = d.minCoeff() > 1e-12 * d.maxCoeff();
  }
  if (ok) return;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Hs, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd ev = eig.eigenvalues();
  const double tol = 1e-12 * std::max(ev.maxCoeff(), 1e-300);
  const auto nullity = (ev.array() <= tol).count();
  std::ostringstream msg;
  msg << "normal equations rank-deficient; null-space dimension " << std::max<Eigen::Index>(nullity, 1)
      << " of " << n;
  throw Error(ErrorCode::kDegenerateGeometry, msg.str());
}

struct Problem {
  WindowModel model;
  OptState state;
};

ParamLayout make_layout(const OptState& st, const LocalMappingConfig& cfg) {
  ParamLayout l;
  l.knots = st.grid.knot_count();
  l.biases = cfg.estimate_biases;
  l.lag = cfg.estimate_time_lag;
  return l;
}

/// Dense whitened Jacobian via central differences of the whole residual vector.
Eigen::MatrixXd numeric_jacobian(const Evaluator& ev, const Problem& p, const ParamLayout& layout,
                                 const LocalMappingConfig& cfg, const Eigen::VectorXd& r0) {
  const std::size_t n = layout.size();
  Eigen::MatrixXd J(r0.size(), static_cast<Eigen::Index>(n));
  auto residuals = [&](const Eigen::VectorXd& delta) {
    const WindowModel m = p.model.retract(delta.head(6 * layout.knots));
    OptState st = p.state;
    if (layout.biases) {
      st.bias_accel += delta.segment<3>(layout.bias_offset());
      st.bias_gyro += delta.segment<3>(layout.bias_offset() + 3);
    }
    if (layout.lag) st.time_lag += delta(layout.lag_offset());
    Eigen::VectorXd r(r0.size());
    Eigen::Index row = 0;
    ResidualBlock scratch;
    ev.for_each(m, st, false, scratch, [&](const ResidualBlock& rb) {
      r.segment(row, rb.rows) = rb.r.head(rb.rows);
      row += rb.rows;
    });
    return r;
  };
  (void)cfg;
  for (std::size_t i = 0; i < n; ++i) {
    const double eps = (layout.lag && i == layout.lag_offset()) ? 1e-7 : 1e-6;
    Eigen::VectorXd d = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    d(static_cast<Eigen::Index>(i)) = eps;
    const Eigen::VectorXd rp = residuals(d);
    d(static_cast<Eigen::Index>(i)) = -eps;
    J.col(static_cast<Eigen::Index>(i)) = (rp - residuals(d)) / (2 * eps);
  }
  return J;
}

Evaluator make_evaluator(const LocalConstraints& cons, const WindowModel& model, const Trajectory& traj,
                         const LocalMappingConfig& cfg) {
  Evaluator ev(cons, cfg, traj.sample_interval());
  // Margin covers the finite-difference step on the lag.
  const double max_lag = cfg.estimate_time_lag ? cfg.time_lag_bound * traj.sample_interval() + 1e-6 : 0.0;
  ev.select_imu(model, max_lag);
  return ev;
}

}  // namespace

Pose corrected_pose(const Trajectory& traj, const ControlGrid& grid, double tau, UpdateMode update,
                    CorrectionBasis basis, InterpolationMode interp) {
  const std::size_t k = traj.bracket(tau);
  auto corrected = [&](std::size_t i) {
    return apply_update(traj[i].pose, grid.evaluate(traj[i].time, basis), update);
  };
  if (traj.size() == 1 || tau == traj[k].time) return corrected(k);
  if (tau == traj[k + 1].time) return corrected(k + 1);
  const double alpha = std::clamp((tau - traj[k].time) / (traj[k + 1].time - traj[k].time), 0.0, 1.0);
  return interpolate(corrected(k), corrected(k + 1), alpha, interp);
}

double residual_surfel_pair(const SurfelPairConstraint& c, const Trajectory& traj, const ControlGrid& grid) {
  const Vec3 xa = corrected_pose(traj, grid, c.tau_a) * c.u_a;
  const Vec3 xb = corrected_pose(traj, grid, c.tau_b) * c.u_b;
  return c.n_ab.dot(xa - xb);
}

double residual_map_prior(const MapPriorConstraint& c, const Trajectory& traj, const ControlGrid& grid) {
  return c.n_mc.dot(c.u_m - corrected_pose(traj, grid, c.tau_c) * c.u_c);
}

Vec6 residual_imu(const ImuSample& s, const Trajectory& traj, const ControlGrid& grid, const OptState& state) {
  const double h = traj.sample_interval();
  const double tau = s.tau + state.time_lag;
  if (!traj.contains(tau - h) || !traj.contains(tau + h)) {
    std::ostringstream msg;
    msg << "IMU stencil at " << tau << " leaves the trajectory";
    throw Error(ErrorCode::kMissingSupport, msg.str());
  }
  const Pose Pm = corrected_pose(traj, grid, tau - h);
  const Pose P0 = corrected_pose(traj, grid, tau);
  const Pose Pp = corrected_pose(traj, grid, tau + h);
  const Vec3 a = (Pp.translation() - 2.0 * P0.translation() + Pm.translation()) / (h * h);
  Vec6 e;
  e.head<3>() = s.accel - P0.rotation().transpose() * (a - kGravity) + state.bias_accel;
  e.tail<3>() = s.gyro - log_so3(P0.rotation().transpose() * Pp.rotation()) / h + state.bias_gyro;
  return e;
}

Pose spline_direct_pose(const ControlGrid& grid, double tau) {
  const Vec6 c = grid.evaluate(tau, CorrectionBasis::kCubicBSpline);
  return Pose(exp_so3(c.head<3>()), c.tail<3>());
}

ControlGrid fit_spline_direct(const Trajectory& traj, double knot_spacing) {
  ControlGrid grid = ControlGrid::covering(traj.start_time(), traj.end_time(), knot_spacing);
  const auto n = static_cast<Eigen::Index>(grid.knot_count());
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, 6);
  for (const TimedPose& tp : traj.samples()) {
    const KnotWeights kw = grid.weights(tp.time);
    Vec6 y;
    y << log_so3(tp.pose.rotation()), tp.pose.translation();
    for (std::size_t i = 0; i < kw.count; ++i) {
      const auto ii = static_cast<Eigen::Index>(kw.index[i]);
      b.row(ii) += kw.weight[i] * y.transpose();
      for (std::size_t j = 0; j < kw.count; ++j) {
        A(ii, static_cast<Eigen::Index>(kw.index[j])) += kw.weight[i] * kw.weight[j];
      }
    }
  }
  const Eigen::MatrixXd x = A.ldlt().solve(b);
  for (Eigen::Index i = 0; i < n; ++i) grid.knot(static_cast<std::size_t>(i)) = x.row(i).transpose();
  return grid;
}

OptState initial_state(const Trajectory& traj, const LocalMappingConfig& cfg) {
  OptState st;
  if (cfg.model == OptimizationModel::kSplineDirect) {
    st.grid = fit_spline_direct(traj, cfg.knot_spacing);
  } else {
    st.grid = ControlGrid::covering(traj.start_time(), traj.end_time(), cfg.knot_spacing);
  }
  return st;
}

LinearizedWindow linearize_window(const LocalConstraints& cons, const Trajectory& traj, const OptState& state,
                                  const LocalMappingConfig& cfg, JacobianMode mode) {
  const Problem p{WindowModel(traj, state.grid, cfg), state};
  const Evaluator ev = make_evaluator(cons, p.model, traj, cfg);
  const ParamLayout layout = make_layout(state, cfg);
  const std::size_t rows = ev.scalar_residuals();
  LinearizedWindow out;
  out.residuals.resize(static_cast<Eigen::Index>(rows));
  out.jacobian = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(layout.size()));
  Eigen::Index row = 0;
  ResidualBlock scratch;
  std::vector<std::size_t> cols;
  Eigen::MatrixXd Jl;
  const bool analytic = mode == JacobianMode::kAnalytic;
  ev.for_each(p.model, p.state, analytic, scratch, [&](const ResidualBlock& rb) {
    out.residuals.segment(row, rb.rows) = rb.r.head(rb.rows);
    if (analytic) {
      local_jacobian(rb, layout, cols, Jl);
      for (std::size_t c = 0; c < cols.size(); ++c) {
        out.jacobian.block(row, static_cast<Eigen::Index>(cols[c]), rb.rows, 1) += Jl.col(static_cast<Eigen::Index>(c));
      }
    }
    row += rb.rows;
  });
  if (!analytic) out.jacobian = numeric_jacobian(ev, p, layout, cfg, out.residuals);
  return out;
}

WindowResult optimize_window(const LocalConstraints& cons, const Trajectory& traj, const OptState& init,
                             const LocalMappingConfig& cfg) {
  if (traj.empty()) throw Error(ErrorCode::kInvalidArgument, "empty trajectory");
  if (traj.end_time() - traj.start_time() > cfg.window + 1e-9) {
    throw Error(ErrorCode::kInvalidArgument, "trajectory longer than the configured window");
  }
  Problem cur{WindowModel(traj, init.grid, cfg), init};
  if (cfg.model == OptimizationModel::kComposition) {
    // Knots start from zero every iteration.
    OptState zeroed = init;
    zeroed.grid.set_zero();
    cur = Problem{WindowModel(traj, zeroed.grid, cfg), zeroed};
  }
  const Evaluator ev = make_evaluator(cons, cur.model, traj, cfg);
  const ParamLayout layout = make_layout(init, cfg);
  const std::size_t n = layout.size();
  const std::size_t m = ev.scalar_residuals();
  if (m < 6 * layout.knots) {
    std::ostringstream msg;
    msg << m << " scalar residuals for " << layout.knots << " knots (need at least " << 6 * layout.knots << ")";
    throw Error(ErrorCode::kDegenerateGeometry, msg.str());
  }

  auto finish = [&](const Problem& p, OptimizationReport report) {
    WindowResult r;
    r.state = p.state;
    r.state.grid = p.model.grid();
    r.trajectory = p.model.trajectory();
    r.report = std::move(report);
    return r;
  };

  OptimizationReport report;
  CostSummary cost = evaluate_cost(ev, cur.model, cur.state, cfg);
  report.iterations.push_back(make_record(0, cost, 0.0));

  ResidualBlock scratch;
  std::vector<std::pair<std::size_t, Mat6>> merged;
  for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
    if (cost.cost == 0.0) {
      report.converged = true;
      report.termination = "zero cost";
      return finish(cur, report);
    }
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    if (cfg.jacobians == JacobianMode::kAnalytic) {
      ev.for_each(cur.model, cur.state, true, scratch, [&](const ResidualBlock& rb) {
        const double w = rb.family == kImu ? 1.0 : robust_weight(rb.r(0), cfg.cauchy_scale);
        accumulate(rb, layout, w, merged, H, g);
      });
    } else {
      Eigen::VectorXd r0(static_cast<Eigen::Index>(m));
      std::vector<double> w(m, 1.0);
      Eigen::Index row = 0;
      ev.for_each(cur.model, cur.state, false, scratch, [&](const ResidualBlock& rb) {
        r0.segment(row, rb.rows) = rb.r.head(rb.rows);
        if (rb.family != kImu) w[static_cast<std::size_t>(row)] = robust_weight(rb.r(0), cfg.cauchy_scale);
        row += rb.rows;
      });
      const Eigen::MatrixXd J = numeric_jacobian(ev, cur, layout, cfg, r0);
      const Eigen::VectorXd wv = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(m));
      H = J.transpose() * wv.asDiagonal() * J;
      g = J.transpose() * (wv.asDiagonal() * r0);
    }
    if (iter == 1) check_rank(H);

    double lambda = 0.0;
    bool accepted = false;
    Problem trial = cur;
    CostSummary trial_cost;
    Eigen::VectorXd delta;
    double predicted = 0.0;
    for (int attempt = 0; attempt <= cfg.max_damping_retries; ++attempt) {
      Eigen::MatrixXd A = H;
      if (lambda > 0.0) A.diagonal() += lambda * H.diagonal();
      delta = -A.ldlt().solve(g);
      if (!delta.allFinite()) {
        lambda = lambda == 0.0 ? 1e-4 : lambda * 10.0;
        continue;
      }
      predicted = -(g.dot(delta) + 0.5 * delta.dot(H * delta));
      trial.model = cur.model.retract(delta.head(static_cast<Eigen::Index>(6 * layout.knots)));
      trial.state = apply_step(cur.state, delta, layout, cfg, ev.h());
      trial_cost = evaluate_cost(ev, trial.model, trial.state, cfg);
      if (trial_cost.cost <= cost.cost) {
        accepted = true;
        break;
      }
      lambda = lambda == 0.0 ? 1e-4 : lambda * 10.0;
    }
    if (!accepted) {
      // The lag enters through piecewise interpolation, so the quadratic model
      // stops predicting near its kinks; a negligible predicted gain is the floor.
      if (predicted <= 1e-6 * cost.cost || delta.norm() < cfg.step_tolerance) {
        report.converged = true;
        report.termination = "no further decrease";
        return finish(cur, report);
      }
      report.termination = "no progress";
      std::ostringstream msg;
      msg << "cost did not decrease after " << cfg.max_damping_retries << " damping retries at iteration "
          << iter << " (cost " << cost.cost << ", predicted decrease " << predicted << ", lag " << cur.state.time_lag << ")";
      throw NoProgressError(msg.str(), finish(cur, report));
    }
    const double step = delta.norm();
    const double decrease = cost.cost - trial_cost.cost;
    const double prev = cost.cost;
    cur = trial;
    cost = trial_cost;
    report.iterations.push_back(make_record(iter, cost, step));
    if (step < cfg.step_tolerance) {
      report.converged = true;
      report.termination = "step norm";
      return finish(cur, report);
    }
    if (decrease <= cfg.cost_tolerance * prev) {
      report.converged = true;
      report.termination = "relative cost decrease";
      return finish(cur, report);
    }
  }
  report.termination = "iteration limit";
  return finish(cur, report);
}

void write_report_csv(std::ostream& os, const OptimizationReport& report) {
  os << "iter,cost,rms_surfel,rms_prior,rms_accel,rms_gyro,step_norm\n";
  os << std::setprecision(17);
  for (const IterationRecord& r : report.iterations) {
    os << r.iter << ',' << r.cost << ',' << r.rms_surfel << ',' << r.rms_prior << ',' << r.rms_accel << ','
       << r.rms_gyro << ',' << r.step_norm << '\n';
  }
}

TrajectoryError trajectory_error(const Trajectory& estimate, const Trajectory& truth) {
  double st = 0.0, sr = 0.0;
  std::size_t n = 0;
  for (const TimedPose& tp : estimate.samples()) {
    if (!truth.contains(tp.time)) continue;
    const Pose T = truth.sample(tp.time);
    st += (tp.pose.translation() - T.translation()).squaredNorm();
    const double ang = rotation_angle(tp.pose.rotation().transpose() * T.rotation());
    sr += ang * ang;
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "trajectories do not overlap");
  return {std::sqrt(st / static_cast<double>(n)), std::sqrt(sr / static_cast<double>(n))};
}

}  // namespace mcslam
