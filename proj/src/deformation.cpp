#include "mcslam/deformation.hpp"

#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <numeric>
#include <ostream>

#include "mcslam/error.hpp"

namespace mcslam {

namespace {

bool admissible(const DeformNode& n, double time, double gate) {
  if (std::isnan(time) || !std::isfinite(gate)) return true;
  return std::abs(n.timestamp - time) < gate;
}

// R (p - g) + g + t - p
Vec3 node_displacement(const DeformNode& n, const Vec3& p) { return (n.R - Mat3::Identity()) * (p - n.g) + n.t; }

Mat3 blended_rotation(const DeformGraph& graph, const BlendWeights& w) {
  Mat3 R = Mat3::Zero();
  for (const auto& [j, wj] : w.weights) R += wj * graph.nodes[j].R;
  return R;
}

// R_j (g_k - g_j) + g_j + t_j - g_k - t_k, exactly zero for identical corrections.
Vec3 reg_residual(const DeformNode& j, const DeformNode& k) {
  return (j.R - Mat3::Identity()) * (k.g - j.g) + j.t - k.t;
}

Mat3 symmetrized(const Mat3& M) { return 0.5 * (M + M.transpose()); }

// Point whose blend weights are fixed at the undeformed node positions.
struct Anchor {
  Vec3 p = Vec3::Zero();
  BlendWeights w;
};

Vec3 anchor_apply(const DeformGraph& graph, const Anchor& a) {
  if (!a.w.supported) return a.p;
  return deform_point(a.p, graph, a.w);
}

struct Problem {
  std::vector<Anchor> src;
  std::vector<Anchor> pin;
  std::vector<Vec3> dest;
  std::vector<double> weight;
};

GraphCost evaluate(const DeformGraph& graph, const Problem& pb, const DeformConfig& cfg) {
  GraphCost c;
  for (std::size_t j = 0; j < graph.nodes.size(); ++j) {
    const DeformNode& nj = graph.nodes[j];
    for (std::size_t k : nj.neighbors) {
      const DeformNode& nk = graph.nodes[k];
      c.reg += reg_residual(nj, nk).squaredNorm();
    }
  }
  for (std::size_t i = 0; i < pb.dest.size(); ++i) {
    c.loop += pb.weight[i] * (anchor_apply(graph, pb.src[i]) - pb.dest[i]).squaredNorm();
    c.pin += pb.weight[i] * (anchor_apply(graph, pb.pin[i]) - pb.dest[i]).squaredNorm();
  }
  c.total = cfg.w_reg * c.reg + cfg.w_pin * c.pin + cfg.w_loop * c.loop;
  return c;
}

// Accumulates J^T W J and J^T W r for residuals touching a few nodes.
class NormalEquations {
 public:
  explicit NormalEquations(std::size_t n_nodes) : n_(6 * n_nodes), g_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_))) {}

  // blocks: (node, 3x6 Jacobian)
  void add(const std::vector<std::pair<std::size_t, Eigen::Matrix<double, 3, 6>>>& blocks, const Vec3& r, double w) {
    for (const auto& [a, Ja] : blocks) {
      g_.segment<6>(static_cast<Eigen::Index>(6 * a)) += w * Ja.transpose() * r;
      for (const auto& [b, Jb] : blocks) {
        const Mat6 H = w * Ja.transpose() * Jb;
        for (int i = 0; i < 6; ++i)
          for (int k = 0; k < 6; ++k)
            if (H(i, k) != 0.0)
              trip_.emplace_back(static_cast<int>(6 * a) + i, static_cast<int>(6 * b) + k, H(i, k));
      }
    }
  }

  Eigen::SparseMatrix<double> hessian() const {
    Eigen::SparseMatrix<double> H(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(n_));
    H.setFromTriplets(trip_.begin(), trip_.end());
    return H;
  }
  const Eigen::VectorXd& gradient() const { return g_; }

 private:
  std::size_t n_;
  Eigen::VectorXd g_;
  std::vector<Eigen::Triplet<double>> trip_;
};

// Derivative of R (p - g) + g + t under the left twist (w, v) on (R, t).
Eigen::Matrix<double, 3, 6> node_jacobian(const DeformNode& n, const Vec3& p) {
  Eigen::Matrix<double, 3, 6> J;
  J.leftCols<3>() = -hat(n.R * (p - n.g) + n.t);
  J.rightCols<3>() = Mat3::Identity();
  return J;
}

void add_anchor(NormalEquations& ne, const DeformGraph& graph, const Anchor& a, const Vec3& target, double w) {
  if (!a.w.supported) return;
  std::vector<std::pair<std::size_t, Eigen::Matrix<double, 3, 6>>> blocks;
  for (const auto& [j, wj] : a.w.weights) blocks.emplace_back(j, wj * node_jacobian(graph.nodes[j], a.p));
  ne.add(blocks, deform_point(a.p, graph, a.w) - target, w);
}

NormalEquations linearize(const DeformGraph& graph, const Problem& pb, const DeformConfig& cfg) {
  NormalEquations ne(graph.nodes.size());
  for (std::size_t j = 0; j < graph.nodes.size(); ++j) {
    const DeformNode& nj = graph.nodes[j];
    for (std::size_t k : nj.neighbors) {
      const DeformNode& nk = graph.nodes[k];
      const Vec3 r = reg_residual(nj, nk);
      Eigen::Matrix<double, 3, 6> Jj = node_jacobian(nj, nk.g);
      Eigen::Matrix<double, 3, 6> Jk;
      Jk.leftCols<3>() = hat(nk.t);
      Jk.rightCols<3>() = -Mat3::Identity();
      ne.add({{j, Jj}, {k, Jk}}, r, cfg.w_reg);
    }
  }
  for (std::size_t i = 0; i < pb.dest.size(); ++i) {
    add_anchor(ne, graph, pb.src[i], pb.dest[i], cfg.w_loop * pb.weight[i]);
    add_anchor(ne, graph, pb.pin[i], pb.dest[i], cfg.w_pin * pb.weight[i]);
  }
  return ne;
}

DeformGraph retract(const DeformGraph& graph, const Eigen::VectorXd& delta) {
  DeformGraph out = graph;
  for (std::size_t j = 0; j < out.nodes.size(); ++j) {
    const Twist xi = delta.segment<6>(static_cast<Eigen::Index>(6 * j));
    const Pose T = exp_se3(xi) * Pose(out.nodes[j].R, out.nodes[j].t);
    out.nodes[j].R = orthonormalize(T.rotation());
    out.nodes[j].t = T.translation();
  }
  return out;
}

}  // namespace

std::size_t graph_node_count(std::size_t dense_count, double radius, double density, std::size_t k_node) {
  if (!(radius > 0.0) || !(density > 0.0)) throw Error(ErrorCode::kInvalidArgument, "node density and surfel radius must be positive");
  const double area = static_cast<double>(dense_count) * std::numbers::pi * radius * radius;
  const auto n = static_cast<std::size_t>(std::ceil(density * area - 1e-9));
  return std::max(n, k_node + 1);
}

DeformGraph build_graph(const std::vector<SparseSurfel>& sparse, std::size_t dense_count, double radius,
                        const DeformConfig& cfg) {
  if (cfg.k_node == 0 || cfg.k_blend == 0) throw Error(ErrorCode::kInvalidArgument, "k_node and k_blend must be positive");
  if (sparse.size() < cfg.k_node + 1)
    throw Error(ErrorCode::kTooFewSurfels, "deformation graph needs at least k_node + 1 sparse surfels, got " +
                                                std::to_string(sparse.size()));
  const std::size_t n = std::min(graph_node_count(dense_count, radius, cfg.node_density, cfg.k_node), sparse.size());

  std::vector<std::size_t> order(sparse.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::stream(cfg.seed, "deform-nodes");
  for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + rng.index(order.size() - i)]);
  order.resize(n);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sparse[a].timestamp < sparse[b].timestamp; });

  DeformGraph graph;
  graph.k_blend = cfg.k_blend;
  graph.max_influence = cfg.max_influence;
  graph.temporal_gate = cfg.temporal_gate;
  graph.nodes.resize(n);
  const std::size_t half = cfg.k_node / 2;
  for (std::size_t i = 0; i < n; ++i) {
    DeformNode& node = graph.nodes[i];
    node.g = sparse[order[i]].centroid;
    node.timestamp = sparse[order[i]].timestamp;
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n - 1, i + (cfg.k_node - half));
    for (std::size_t k = lo; k <= hi; ++k)
      if (k != i) node.neighbors.push_back(k);
  }
  return graph;
}

BlendWeights blend_weights(const Vec3& p, const DeformGraph& graph, double time) {
  if (graph.nodes.empty()) throw Error(ErrorCode::kInvalidArgument, "empty deformation graph");
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(graph.nodes.size());
  for (std::size_t j = 0; j < graph.nodes.size(); ++j)
    if (admissible(graph.nodes[j], time, graph.temporal_gate)) cand.emplace_back((p - graph.nodes[j].g).norm(), j);
  BlendWeights out;
  if (cand.empty()) return out;
  const std::size_t k = std::min(graph.k_blend, cand.size());
  const std::size_t m = std::min(k + 1, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(m), cand.end());
  if (cand.front().first > graph.max_influence) return out;
  const double d_max = cand[m - 1].first;
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double w = d_max > 0.0 ? std::max(0.0, 1.0 - cand[i].first / d_max) : 0.0;
    out.weights.emplace_back(cand[i].second, w);
    sum += w;
  }
  if (sum < 1e-12) {
    for (auto& [j, w] : out.weights) w = 1.0 / static_cast<double>(k);
  } else {
    for (auto& [j, w] : out.weights) w /= sum;
  }
  out.supported = true;
  return out;
}

Vec3 deform_point(const Vec3& p, const DeformGraph& graph, const BlendWeights& w) {
  if (!w.supported) return p;
  Vec3 d = Vec3::Zero();
  for (const auto& [j, wj] : w.weights) d += wj * node_displacement(graph.nodes[j], p);
  return p + d;
}

Vec3 deform_point(const Vec3& p, const DeformGraph& graph, double time, bool* supported) {
  const BlendWeights w = blend_weights(p, graph, time);
  if (supported) *supported = w.supported;
  return deform_point(p, graph, w);
}

DeformedNormal deform_normal(const Vec3& n, const Vec3& p, const DeformGraph& graph, double time) {
  const BlendWeights w = blend_weights(p, graph, time);
  DeformedNormal out;
  out.normal = n;
  if (!w.supported) return out;
  const Vec3 b = blended_rotation(graph, w) * n;
  if (b.norm() < 1e-9) {
    out.degenerate = true;
    return out;
  }
  out.normal = b.normalized();
  return out;
}

Mat3 deform_covariance(const Mat3& S, const Vec3& p, const DeformGraph& graph, double time) {
  const BlendWeights w = blend_weights(p, graph, time);
  if (!w.supported) return S;
  const Mat3 R = blended_rotation(graph, w);
  return symmetrized(R * S * R.transpose());
}

void set_rigid(DeformGraph& graph, const Pose& T) {
  for (DeformNode& n : graph.nodes) {
    n.R = T.rotation();
    n.t = (T.rotation() - Mat3::Identity()) * n.g + T.translation();
  }
}

std::vector<LoopConstraint> make_loop_constraints(const std::vector<SparseSurfel>& local_sparse,
                                                  const std::vector<SparseSurfel>& inactive_sparse, const Pose& Rt,
                                                  const DeformConfig& cfg) {
  const std::size_t n = std::min(cfg.n_loop, local_sparse.size());
  if (n < cfg.n_loop)
    std::clog << "warning: " << local_sparse.size() << " local sparse surfels for " << cfg.n_loop
              << " loop constraints; using all\n";
  std::vector<std::size_t> order(local_sparse.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::stream(cfg.seed, "loop-constraints");
  for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + rng.index(order.size() - i)]);

  std::vector<LoopConstraint> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const SparseSurfel& s = local_sparse[order[i]];
    LoopConstraint c;
    c.p_src = s.centroid;
    c.p_dest = Rt * s.centroid;
    c.t_src = s.timestamp;
    double best = std::numeric_limits<double>::infinity();
    for (const SparseSurfel& q : inactive_sparse) {
      const double d = (q.centroid - c.p_dest).squaredNorm();
      if (d < best) {
        best = d;
        c.t_dest = q.timestamp;
      }
    }
    out.push_back(c);
  }
  return out;
}

namespace {

Problem make_problem(const DeformGraph& graph, const std::vector<LoopConstraint>& loop) {
  Problem pb;
  for (const LoopConstraint& c : loop) {
    if (!c.p_src.allFinite() || !c.p_dest.allFinite() || !std::isfinite(c.weight) || c.weight < 0.0)
      throw Error(ErrorCode::kInvalidArgument, "loop constraint must be finite with non-negative weight");
    pb.src.push_back({c.p_src, blend_weights(c.p_src, graph, c.t_src)});
    pb.pin.push_back({c.p_dest, blend_weights(c.p_dest, graph, c.t_dest)});
    pb.dest.push_back(c.p_dest);
    pb.weight.push_back(c.weight);
  }
  return pb;
}

}  // namespace

GraphCost graph_cost(const DeformGraph& graph, const std::vector<LoopConstraint>& loop, const DeformConfig& cfg) {
  return evaluate(graph, make_problem(graph, loop), cfg);
}

GraphOptimization optimize_graph(const DeformGraph& graph, const std::vector<LoopConstraint>& loop,
                                 const DeformConfig& cfg) {
  if (loop.empty()) throw Error(ErrorCode::kInvalidArgument, "graph optimization needs at least one loop constraint");
  if (graph.nodes.empty()) throw Error(ErrorCode::kInvalidArgument, "empty deformation graph");
  const Problem pb = make_problem(graph, loop);

  GraphOptimization out;
  out.graph = graph;
  out.initial = evaluate(graph, pb, cfg);
  out.final_cost = out.initial;
  if (!std::isfinite(out.initial.total)) return out;
  if (out.initial.total == 0.0) {
    out.converged = true;
    return out;
  }

  const auto dim = static_cast<Eigen::Index>(6 * graph.nodes.size());
  for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
    out.iterations = iter;
    const NormalEquations ne = linearize(out.graph, pb, cfg);
    const Eigen::SparseMatrix<double> H = ne.hessian();
    const Eigen::VectorXd& g = ne.gradient();
    Eigen::VectorXd diag = H.diagonal();

    double lambda = 0.0;
    bool accepted = false;
    DeformGraph trial;
    GraphCost trial_cost;
    Eigen::VectorXd delta;
    double predicted = 0.0;
    for (int attempt = 0; attempt <= cfg.max_damping_retries; ++attempt) {
      Eigen::SparseMatrix<double> A = H;
      for (Eigen::Index i = 0; i < dim; ++i) A.coeffRef(i, i) += lambda * diag[i] + 1e-9;
      Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(A);
      if (solver.info() == Eigen::Success) delta = -solver.solve(g);
      if (solver.info() != Eigen::Success || !delta.allFinite()) {
        lambda = lambda == 0.0 ? 1e-4 : lambda * 10.0;
        continue;
      }
      predicted = -(g.dot(delta) + 0.5 * delta.dot(H * delta));
      trial = retract(out.graph, delta);
      trial_cost = evaluate(trial, pb, cfg);
      if (std::isfinite(trial_cost.total) && trial_cost.total <= out.final_cost.total) {
        accepted = true;
        break;
      }
      lambda = lambda == 0.0 ? 1e-4 : lambda * 10.0;
    }
    if (!accepted) {
      out.converged = delta.size() == dim && (predicted <= 1e-6 * out.final_cost.total || delta.norm() < cfg.step_tolerance);
      return out;
    }
    const double step = delta.norm();
    const double decrease = out.final_cost.total - trial_cost.total;
    const double prev = out.final_cost.total;
    out.graph = std::move(trial);
    out.final_cost = trial_cost;
    if (step < cfg.step_tolerance || decrease <= cfg.cost_tolerance * prev) {
      out.converged = true;
      return out;
    }
  }
  return out;
}

void deform_surfels(const DeformGraph& graph, SurfelMap& dense, std::vector<SparseSurfel>& sparse) {
  std::vector<std::pair<SurfelId, DenseSurfel>> moved;
  moved.reserve(dense.size());
  for (const auto& [id, s] : dense.surfels()) {
    const BlendWeights w = blend_weights(s.position, graph, s.timestamp);
    if (!w.supported) continue;
    const Mat3 R = blended_rotation(graph, w);
    DenseSurfel d = s;
    d.position = deform_point(s.position, graph, w);
    const Vec3 n = R * s.normal;
    if (n.norm() >= 1e-9) d.normal = n.normalized();
    d.cov_position = symmetrized(R * s.cov_position * R.transpose());
    d.scatter = symmetrized(R * s.scatter * R.transpose());
    d.noise = symmetrized(R * s.noise * R.transpose());
    moved.emplace_back(id, d);
  }
  for (auto& [id, d] : moved) dense.update(id, std::move(d));

  for (SparseSurfel& s : sparse) {
    const BlendWeights w = blend_weights(s.centroid, graph, s.timestamp);
    if (!w.supported) continue;
    const Mat3 R = blended_rotation(graph, w);
    s.centroid = deform_point(s.centroid, graph, w);
    const Vec3 n = R * s.normal;
    if (n.norm() >= 1e-9) s.normal = n.normalized();
    s.covariance = symmetrized(R * s.covariance * R.transpose());
  }
}

Pose deform_pose(const Pose& T, const DeformGraph& graph, double time) {
  const BlendWeights w = blend_weights(T.translation(), graph, time);
  if (!w.supported) return T;
  const Mat3 R = orthonormalize(blended_rotation(graph, w));
  return Pose(orthonormalize(R * T.rotation()), deform_point(T.translation(), graph, w));
}

void write_graph_csv(std::ostream& os, const DeformGraph& graph) {
  os << "node,gx,gy,gz,tx,ty,tz,rx,ry,rz,timestamp\n";
  os << std::setprecision(17);
  for (std::size_t j = 0; j < graph.nodes.size(); ++j) {
    const DeformNode& n = graph.nodes[j];
    const Eigen::AngleAxisd aa(n.R);
    const Vec3 r = aa.angle() * aa.axis();
    os << j << ',' << n.g.x() << ',' << n.g.y() << ',' << n.g.z() << ',' << n.t.x() << ',' << n.t.y() << ','
       << n.t.z() << ',' << r.x() << ',' << r.y() << ',' << r.z() << ',' << n.timestamp << '\n';
  }
}

}  // namespace mcslam
