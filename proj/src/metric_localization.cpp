#include "mcslam/metric_localization.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "mcslam/error.hpp"
#include "mcslam/octree.hpp"

namespace mcslam {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

double cauchy_weight(double r, double c) { return 1.0 / (1.0 + (r * r) / (c * c)); }

// Squared normal difference with the sign ambiguity removed.
double normal_term(const Vec3& a, const Vec3& b) { return 2.0 - 2.0 * std::abs(a.dot(b)); }

Mat6 information(const Mat6& S) {
  const Mat6 Ssym = 0.5 * (S + S.transpose());
  const Eigen::SelfAdjointEigenSolver<Mat6> es(Ssym);
  if (es.info() != Eigen::Success || !(es.eigenvalues().minCoeff() > 0.0))
    throw Error(ErrorCode::kDegenerateFusion, "estimate covariance is not positive definite");
  return es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

Mat6 inverse_spd(const Mat6& A, const char* what) {
  const Mat6 Asym = 0.5 * (A + A.transpose());
  const Eigen::SelfAdjointEigenSolver<Mat6> es(Asym);
  const double hi = es.eigenvalues().maxCoeff();
  const double lo = es.eigenvalues().minCoeff();
  if (es.info() != Eigen::Success || !(lo > 1e-14 * hi) || !(hi > 0.0)) throw Error(ErrorCode::kDegenerateFusion, what);
  return es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

struct Pair {
  std::size_t src = 0;
  std::size_t ref = 0;
};

struct Linearization {
  Mat6 H = Mat6::Zero();
  Vec6 g = Vec6::Zero();
  double weighted_sq = 0.0;
  std::size_t n_residuals = 0;
  std::size_t surfel_inliers = 0;
};

}  // namespace

std::vector<OrientedPoint> oriented_points(const std::vector<SparseSurfel>& sparse, int level) {
  std::vector<OrientedPoint> out;
  for (const SparseSurfel& s : sparse)
    if (!s.degenerate && (level < 0 || s.level == level)) out.push_back({s.centroid, s.normal});
  return out;
}

namespace {

AlignmentEstimate register_centred(const std::vector<FeaturePair>& features, const std::vector<OrientedPoint>& src,
                                   const std::vector<OrientedPoint>& ref, const Pose& T0,
                                   const RegistrationConfig& cfg) {
  SurfelIndex index;
  for (std::size_t i = 0; i < ref.size(); ++i) index.insert(i, ref[i].p);
  const std::size_t n_features = cfg.use_features ? features.size() : 0;
  const double beta2 = cfg.beta * cfg.beta;

  auto match = [&](const Pose& T) {
    std::vector<Pair> pairs;
    if (index.empty()) return pairs;
    for (std::size_t i = 0; i < src.size(); ++i) {
      const Vec3 q = T * src[i].p;
      const Vec3 m = T.rotation() * src[i].n;
      SurfelId id0 = 0;
      double d0 = 0.0;
      index.nearest(q, id0, d0);
      double best = d0 * d0 + beta2 * normal_term(ref[id0].n, m);
      std::size_t best_id = id0;
      for (SurfelId id : index.query_radius(q, std::sqrt(best))) {
        const double d = (ref[id].p - q).squaredNorm() + beta2 * normal_term(ref[id].n, m);
        if (d < best || (d == best && id < best_id)) {
          best = d;
          best_id = id;
        }
      }
      if (best <= cfg.max_correspondence * cfg.max_correspondence) pairs.push_back({i, best_id});
    }
    return pairs;
  };

  auto linearize = [&](const Pose& T, const std::vector<Pair>& pairs) {
    Linearization L;
    std::vector<double> ep(pairs.size());
    for (std::size_t k = 0; k < pairs.size(); ++k)
      ep[k] = ref[pairs[k].ref].n.dot(ref[pairs[k].ref].p - T * src[pairs[k].src].p);
    std::vector<double> ef(n_features);
    for (std::size_t k = 0; k < n_features; ++k) ef[k] = (features[k].p_ref - T * features[k].p_src).norm();
    std::vector<double> abs_ep(ep.size());
    std::transform(ep.begin(), ep.end(), abs_ep.begin(), [](double v) { return std::abs(v); });
    const double cp = cfg.cauchy_surfel;
    const double cf = std::max(cfg.cauchy_feature, median(ef));

    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const Vec3& n = ref[pairs[k].ref].n;
      const Vec3 q = T * src[pairs[k].src].p;
      Eigen::Matrix<double, 1, 6> J;
      J.leftCols<3>() = n.transpose() * hat(q);
      J.rightCols<3>() = -n.transpose();
      const double w = cfg.w_surfel * cauchy_weight(ep[k], cp);
      L.H += w * J.transpose() * J;
      L.g += w * J.transpose() * ep[k];
      L.weighted_sq += w * ep[k] * ep[k];
      ++L.n_residuals;
      if (std::abs(ep[k]) < cfg.inlier_distance) ++L.surfel_inliers;
    }
    for (std::size_t k = 0; k < n_features; ++k) {
      const Vec3 q = T * features[k].p_src;
      const Vec3 r = features[k].p_ref - q;
      Eigen::Matrix<double, 3, 6> J;
      J.leftCols<3>() = hat(q);
      J.rightCols<3>() = -Mat3::Identity();
      const double w = cfg.w_feature * cauchy_weight(ef[k], cf);
      L.H += w * J.transpose() * J;
      L.g += w * J.transpose() * r;
      L.weighted_sq += w * r.squaredNorm();
      L.n_residuals += 3;
    }
    return L;
  };

  Pose T = T0;
  AlignmentEstimate out;
  out.reliable = false;
  bool converged = false;
  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    const std::vector<Pair> pairs = match(T);
    if (pairs.size() + n_features < 10)
      throw Error(ErrorCode::kInsufficientOverlap,
                  "registration has " + std::to_string(pairs.size() + n_features) + " pairs, need 10");
    const Linearization L = linearize(T, pairs);
    Mat6 A = L.H;
    A.diagonal().array() += 1e-9 * (1.0 + A.diagonal().cwiseAbs().maxCoeff());
    const Vec6 xi = -A.ldlt().solve(L.g);
    if (!xi.allFinite()) break;
    T = exp_se3(xi) * T;
    if (xi.norm() < cfg.step_tolerance) {
      converged = true;
      break;
    }
  }

  const std::vector<Pair> pairs = match(T);
  if (pairs.size() + n_features < 10)
    throw Error(ErrorCode::kInsufficientOverlap, "registration lost overlap at the final estimate");
  const Linearization L = linearize(T, pairs);
  out.T = T;
  out.inlier_fraction = src.empty() ? 0.0 : static_cast<double>(L.surfel_inliers) / static_cast<double>(src.size());
  const double dof = std::max(1.0, static_cast<double>(L.n_residuals) - 6.0);
  try {
    out.covariance = inverse_spd(L.H, "registration normal matrix is singular") * (L.weighted_sq / dof);
    out.reliable = converged && out.inlier_fraction >= cfg.min_inlier;
  } catch (const Error&) {
    out.covariance = Mat6::Identity() * std::numeric_limits<double>::infinity();
    out.reliable = false;
  }
  return out;
}

}  // namespace

AlignmentEstimate combined_registration(const std::vector<FeaturePair>& features, const std::vector<OrientedPoint>& src,
                                        const std::vector<OrientedPoint>& ref, const Pose& T0,
                                        const RegistrationConfig& cfg) {
  if (cfg.max_iterations < 1) throw Error(ErrorCode::kInvalidArgument, "registration needs at least one iteration");
  if (!(cfg.beta >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "beta must be non-negative");
  // Rotations are linearized about the reference centroid, not the world origin.
  Vec3 c = Vec3::Zero();
  if (!ref.empty()) {
    for (const OrientedPoint& o : ref) c += o.p;
    c /= static_cast<double>(ref.size());
  } else if (!features.empty()) {
    for (const FeaturePair& f : features) c += f.p_ref;
    c /= static_cast<double>(features.size());
  }
  const Pose Tc(Mat3::Identity(), c);
  const Pose Tc_inv(Mat3::Identity(), -c);
  std::vector<OrientedPoint> src_c = src, ref_c = ref;
  for (OrientedPoint& o : src_c) o.p -= c;
  for (OrientedPoint& o : ref_c) o.p -= c;
  std::vector<FeaturePair> feat_c = features;
  for (FeaturePair& f : feat_c) {
    f.p_ref -= c;
    f.p_src -= c;
  }
  AlignmentEstimate e = register_centred(feat_c, src_c, ref_c, Tc_inv * T0 * Tc, cfg);
  e.T = Tc * e.T * Tc_inv;
  if (e.covariance.allFinite()) {
    const Mat6 Ad = adjoint(Tc);
    e.covariance = Ad * e.covariance * Ad.transpose();
  }
  return e;
}

AlignmentEstimate batch_fuse(const std::vector<AlignmentEstimate>& estimates) {
  if (estimates.empty()) throw Error(ErrorCode::kInvalidArgument, "nothing to fuse");
  std::vector<Mat6> info;
  info.reserve(estimates.size());
  for (const AlignmentEstimate& e : estimates) info.push_back(information(e.covariance));

  Pose T = estimates.front().T;
  Mat6 A = Mat6::Zero();
  auto build = [&](Vec6& b) {
    A.setZero();
    b.setZero();
    for (std::size_t n = 0; n < estimates.size(); ++n) {
      const Twist xi_n = log_se3(T * estimates[n].T.inverse());
      const Mat6 Ji = left_jacobian_inv_se3(xi_n);
      A += Ji.transpose() * info[n] * Ji;
      b += Ji.transpose() * info[n] * xi_n;
    }
  };
  for (int iter = 0; iter < 10; ++iter) {
    Vec6 b;
    build(b);
    const Vec6 xi = -inverse_spd(A, "fusion information matrix is singular") * b;
    T = exp_se3(xi) * T;
    if (xi.norm() < 1e-10) break;
  }
  Vec6 b;
  build(b);
  AlignmentEstimate out = estimates.back();
  out.T = T;
  out.covariance = inverse_spd(A, "fusion information matrix is singular");
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
  out.reliable = true;
  return out;
}

AlignmentEstimate sequential_fuse(const AlignmentEstimate& current, const AlignmentEstimate& next) {
  if (!current.reliable || !next.reliable) throw Error(ErrorCode::kInvalidArgument, "only reliable estimates are fused");
  AlignmentEstimate out = batch_fuse({current, next});
  out.place = next.place;
  return out;
}

double gate_distance(const AlignmentEstimate& current, const AlignmentEstimate& next) {
  const Twist xi = log_se3(current.T * next.T.inverse());
  const Mat6 S = current.covariance + next.covariance;
  return xi.dot(information(S) * xi);
}

const char* to_string(PlaceDecision d) {
  switch (d) {
    case PlaceDecision::kFirst: return "first";
    case PlaceDecision::kAccepted: return "accepted";
    case PlaceDecision::kRejected: return "rejected";
    case PlaceDecision::kUnreliable: return "unreliable";
    case PlaceDecision::kNoOverlap: return "no_overlap";
  }
  return "unknown";
}

SessionResult localization_session(const PlaceProvider& provider, const Pose& T0, const SessionConfig& cfg) {
  SessionResult out;
  for (std::size_t k = 0; k < cfg.max_places; ++k) {
    PlaceRecord rec;
    rec.place = k;
    const PlaceData data = provider(k);
    try {
      AlignmentEstimate e = combined_registration(data.features, data.src, data.ref, T0, cfg.registration);
      e.place = k;
      rec.estimate = e;
      if (!e.reliable) {
        rec.decision = PlaceDecision::kUnreliable;
      } else if (!out.fused) {
        out.fused = e;
        rec.decision = PlaceDecision::kFirst;
      } else {
        double d = std::numeric_limits<double>::infinity();
        try {
          d = gate_distance(*out.fused, e);
        } catch (const Error&) {
        }
        if (d < cfg.gate) {
          out.fused = sequential_fuse(*out.fused, e);
          rec.decision = PlaceDecision::kAccepted;
        } else {
          rec.decision = PlaceDecision::kRejected;
        }
      }
    } catch (const Error& err) {
      if (err.code() != ErrorCode::kInsufficientOverlap) throw;
      rec.decision = PlaceDecision::kNoOverlap;
    }
    if (out.fused) rec.trace_cov = out.fused->covariance.trace();
    out.places.push_back(rec);
    if (out.fused && out.fused->covariance.trace() < cfg.sigma_stop) {
      out.success = true;
      break;
    }
  }
  return out;
}

void write_session_csv(std::ostream& os, const SessionResult& r, const Pose& truth) {
  os << "place,e_t,e_r,inlier,accepted,trace_cov,decision\n";
  os << std::setprecision(17);
  for (const PlaceRecord& p : r.places) {
    os << p.place << ',';
    if (p.estimate) {
      os << (p.estimate->T.translation() - truth.translation()).norm() << ','
         << rotation_angle(p.estimate->T.rotation().transpose() * truth.rotation()) << ','
         << p.estimate->inlier_fraction << ',';
    } else {
      os << "nan,nan,0,";
    }
    const bool accepted = p.decision == PlaceDecision::kFirst || p.decision == PlaceDecision::kAccepted;
    os << (accepted ? 1 : 0) << ',' << p.trace_cov << ',' << to_string(p.decision) << '\n';
  }
}

std::vector<FeaturePair> simulate_features(const std::vector<Vec3>& keypoints, const Pose& M, Rng& rng,
                                           const FeatureNoise& noise) {
  if (noise.outlier_fraction < 0.0 || noise.outlier_fraction > 1.0 || noise.jitter_3sigma < 0.0)
    throw Error(ErrorCode::kInvalidArgument, "outlier fraction must lie in [0, 1] and jitter must be non-negative");
  const std::size_t n = keypoints.size();
  const double sigma = noise.jitter_3sigma / 3.0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto n_out = static_cast<std::size_t>(std::llround(noise.outlier_fraction * static_cast<double>(n)));
  for (std::size_t i = 0; i < n_out && i < n; ++i) std::swap(order[i], order[i + rng.index(n - i)]);
  std::vector<bool> is_out(n, false);
  for (std::size_t i = 0; i < n_out && i < n; ++i) is_out[order[i]] = true;

  std::vector<FeaturePair> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    FeaturePair& f = out[i];
    std::size_t j = i;
    if (is_out[i] && n > 1) {
      j = rng.index(n - 1);
      if (j >= i) ++j;
    }
    f.outlier = is_out[i] && n > 1;
    f.p_ref = keypoints[j] + rng.normal3(sigma);
    f.p_src = M * (keypoints[i] + rng.normal3(sigma));
  }
  return out;
}

}  // namespace mcslam
