#include "mcslam/temporal_fusion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <set>

#include "mcslam/error.hpp"
#include "mcslam/octree.hpp"

namespace mcslam {

namespace {

struct LevelIndex {
  std::map<int, SurfelIndex> by_level;

  explicit LevelIndex(const std::vector<SparseSurfel>& ref) {
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (ref[i].degenerate) continue;
      by_level[ref[i].level].insert(i, ref[i].centroid);
    }
  }

  // Nearest compatible reference surfel, or npos.
  std::size_t find(const std::vector<SparseSurfel>& ref, const Vec3& p, const Vec3& n, int level,
                   const IcpConfig& cfg) const {
    const auto it = by_level.find(level);
    if (it == by_level.end()) return npos;
    std::size_t best = npos;
    double best_d = std::numeric_limits<double>::infinity();
    for (SurfelId id : it->second.query_radius(p, cfg.max_correspondence)) {
      const SparseSurfel& q = ref[id];
      if (std::abs(q.normal.dot(n)) < cfg.min_normal_dot) continue;
      const double d = (q.centroid - p).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = id;
      }
    }
    return best;
  }

  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
};

struct Pair {
  std::size_t local, ref;
  double residual;
};

std::vector<Pair> correspond(const std::vector<SparseSurfel>& local, const std::vector<SparseSurfel>& ref,
                             const LevelIndex& index, const Pose& T, const IcpConfig& cfg) {
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < local.size(); ++i) {
    const Vec3 p = T * local[i].centroid;
    const std::size_t j = index.find(ref, p, T.rotation() * local[i].normal, local[i].level, cfg);
    if (j == LevelIndex::npos) continue;
    pairs.push_back({i, j, ref[j].normal.dot(p - ref[j].centroid)});
  }
  return pairs;
}

using SparseKey = std::array<long long, 4>;

SparseKey sparse_key(const SparseSurfel& s, const std::vector<double>& res) {
  const double r = s.level >= 0 && static_cast<std::size_t>(s.level) < res.size() ? res[s.level] : 1.0;
  return {s.level, static_cast<long long>(std::floor(s.centroid.x() / r)),
          static_cast<long long>(std::floor(s.centroid.y() / r)), static_cast<long long>(std::floor(s.centroid.z() / r))};
}

SurfelMeasurement as_measurement(const DenseSurfel& s) {
  SurfelMeasurement m;
  m.mean = s.position;
  m.scatter = s.scatter;
  m.count = std::max(1.0, s.dof);
  m.noise = s.noise;
  return m;
}

// Fuses src into dst (geometry and colour) and stores the result.
void fuse_into(SurfelMap& map, SurfelId dst_id, const DenseSurfel& src, double now) {
  const DenseSurfel& dst = map.at(dst_id);
  DenseSurfel out = fuse_surfel(dst, as_measurement(src), std::max(now, src.timestamp)).surfel;
  if (std::isfinite(src.colour_sigma) && src.colour_sigma > 0.0 && dst.colour_sigma > 0.0) {
    const ColourEstimate c = fuse_colour({dst.colour, dst.colour_sigma}, {src.colour, src.colour_sigma});
    out.colour = c.colour;
    out.colour_sigma = c.sigma;
  }
  map.update(dst_id, out);
}

// Keeps stable active surfels at least theta_r apart in their tangent plane by
// folding the less observed of an overlapping pair into the other.
SurfelId resolve_overlaps(SurfelMap& map, SurfelId id, double now, const TemporalConfig& cfg, std::size_t& merged) {
  const double theta_r = cfg.match.theta_r;
  while (map.contains(id) && map.at(id).stable) {
    const DenseSurfel& s = map.at(id);
    SurfelId other = 0;
    bool found = false;
    for (SurfelId n : map.query_radius(s.position, std::sqrt(2.0) * theta_r)) {
      if (n == id) continue;
      const DenseSurfel& c = map.at(n);
      if (!c.stable || !is_active(c.timestamp, now, cfg)) continue;
      if (surfels_overlap(s, c, theta_r)) {
        other = n;
        found = true;
        break;
      }
    }
    if (!found) break;
    const DenseSurfel& o = map.at(other);
    const bool keep_self = s.obs_count > o.obs_count || (s.obs_count == o.obs_count && id < other);
    const SurfelId keep = keep_self ? id : other;
    const SurfelId drop = keep_self ? other : id;
    const DenseSurfel dropped = map.at(drop);
    fuse_into(map, keep, dropped, now);
    map.remove(drop);
    id = keep;
    ++merged;
  }
  return id;
}

}  // namespace

IcpResult sparse_icp(const std::vector<SparseSurfel>& local, const std::vector<SparseSurfel>& reference,
                     const Pose& T0, const IcpConfig& cfg) {
  if (cfg.max_iterations < 1) throw Error(ErrorCode::kInvalidArgument, "ICP needs at least one iteration");
  IcpResult out;
  out.T = T0;
  if (local.empty() || reference.empty()) return out;
  const LevelIndex index(reference);
  for (int it = 0; it < cfg.max_iterations; ++it) {
    const std::vector<Pair> pairs = correspond(local, reference, index, out.T, cfg);
    out.iterations = it + 1;
    if (pairs.size() < 6) break;
    Mat6 H = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    for (const Pair& pr : pairs) {
      const SparseSurfel& q = reference[pr.ref];
      const Vec3 p = out.T * local[pr.local].centroid;
      Vec6 J;
      J << p.cross(q.normal), q.normal;
      const double w = q.planarity;
      H += w * J * J.transpose();
      g += w * J * pr.residual;
    }
    H.diagonal().array() += 1e-9 * std::max(1.0, H.diagonal().maxCoeff());
    const Vec6 xi = H.ldlt().solve(-g);
    if (!xi.allFinite()) break;
    out.T = exp_se3(xi) * out.T;
    if (xi.norm() < cfg.converged_step) {
      out.converged = true;
      break;
    }
  }
  const std::vector<Pair> final_pairs = correspond(local, reference, index, out.T, cfg);
  double sq = 0.0;
  for (const Pair& pr : final_pairs) {
    if (std::abs(pr.residual) >= cfg.inlier_distance) continue;
    out.inliers.emplace_back(pr.local, pr.ref);
    const Vec3& p = local[pr.local].centroid;
    sq += (out.T * p - p).squaredNorm();
  }
  out.inlier_fraction = static_cast<double>(out.inliers.size()) / static_cast<double>(local.size());
  if (!out.inliers.empty()) out.dist = std::sqrt(sq / static_cast<double>(out.inliers.size()));
  return out;
}

bool is_active(double timestamp, double now, const TemporalConfig& cfg) {
  return now - timestamp <= cfg.active_window;
}

TemporalStepResult temporal_fusion_step(const LocalMap& local, GlobalMap& global, const TemporalConfig& cfg,
                                        std::size_t step) {
  if (!(cfg.active_window > 0.0) || !(cfg.cull_age > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "active window and cull age must be positive");
  }
  const double now = local.time;
  TemporalStepResult res;
  FusionStats& st = res.stats;
  st.step = step;
  SurfelMap& map = global.dense;
  // Surfels created during this step are not match targets.
  const SurfelId first_new = map.next_id();
  const auto active = [&](SurfelId id, const DenseSurfel& s) { return id < first_new && is_active(s.timestamp, now, cfg); };
  const auto inactive = [&](SurfelId, const DenseSurfel& s) { return !is_active(s.timestamp, now, cfg); };

  // Dense fusion into the active map.
  std::set<SurfelId> touched;
  for (const DenseSurfel& src : local.dense) {
    SurfelId best = 0;
    bool matched = false;
    double best_score = std::numeric_limits<double>::infinity();
    for (SurfelId id : match_surfel(src, map, cfg.match, active)) {
      const PlaneOffset o = plane_offset(src, map.at(id));
      const double score = o.sigma > 0.0 ? o.d / o.sigma : 0.0;
      if (score < best_score) {
        best_score = score;
        best = id;
        matched = true;
      }
    }
    SurfelId id = 0;
    if (matched) {
      fuse_into(map, best, src, now);
      id = best;
      ++st.n_fused;
    } else {
      DenseSurfel s = src;
      s.obs_count = 1;
      s.stable = false;
      s.created = s.timestamp;
      id = map.insert(s);
      ++st.n_new;
    }
    touched.insert(resolve_overlaps(map, id, now, cfg, st.n_resolved));
  }

  // Sparse map: local voxels fold into active voxels with the same key.
  const std::vector<double>& res_by_level = cfg.sparse_resolutions;
  std::vector<SparseSurfel> inactive_sparse;
  std::map<SparseKey, std::size_t> active_keys;
  for (std::size_t i = 0; i < global.sparse.size(); ++i) {
    const SparseSurfel& s = global.sparse[i];
    if (is_active(s.timestamp, now, cfg)) {
      active_keys.emplace(sparse_key(s, res_by_level), i);
    } else {
      inactive_sparse.push_back(s);
    }
  }

  // Rigid check of the new window against the inactive map.
  const IcpResult icp = sparse_icp(local.sparse, inactive_sparse, Pose(), cfg.icp);
  st.icp_inlier = icp.inlier_fraction;
  st.icp_dist = icp.dist;
  st.icp_converged = icp.converged;
  if (icp.converged && icp.inlier_fraction > cfg.theta_in && icp.dist > cfg.theta_dist) {
    DeformTrigger trig;
    trig.misalignment = icp.T.inverse();
    trig.inlier_fraction = icp.inlier_fraction;
    trig.dist = icp.dist;
    for (const auto& [li, ri] : icp.inliers) {
      const Vec3& p = local.sparse[li].centroid;
      trig.pairs.emplace_back(p, icp.T * p);
    }
    res.trigger = std::move(trig);
    st.triggered = true;
  } else {
    // Matched inactive surfels near this window are folded into the active map
    // when the two agree.
    std::vector<std::pair<SurfelId, SurfelId>> pairs;  // (active, inactive)
    double gap = 0.0;
    std::set<SurfelId> claimed;
    for (SurfelId a : touched) {
      if (!map.contains(a)) continue;
      const DenseSurfel& s = map.at(a);
      SurfelId best = 0;
      bool found = false;
      double best_d = std::numeric_limits<double>::infinity();
      for (SurfelId b : match_surfel(s, map, cfg.match, inactive)) {
        if (claimed.count(b)) continue;
        const double d = plane_offset(map.at(b), s).d;
        if (d < best_d) {
          best_d = d;
          best = b;
          found = true;
        }
      }
      if (!found) continue;
      claimed.insert(best);
      pairs.emplace_back(a, best);
      gap += best_d;
    }
    if (!pairs.empty() && gap / static_cast<double>(pairs.size()) < cfg.theta_n) {
      for (const auto& [a, b] : pairs) {
        if (!map.contains(a) || !map.contains(b)) continue;
        const DenseSurfel old = map.at(b);
        fuse_into(map, a, old, now);
        map.remove(b);
        ++st.n_merged;
      }
    }
  }

  for (const SparseSurfel& s : local.sparse) {
    const SparseKey key = sparse_key(s, res_by_level);
    const auto it = active_keys.find(key);
    if (it != active_keys.end() && s.count >= 2 && global.sparse[it->second].count >= 2) {
      global.sparse[it->second] = merge_sparse(global.sparse[it->second], s, cfg.min_planarity);
    } else {
      active_keys[key] = global.sparse.size();
      global.sparse.push_back(s);
    }
  }

  // Unstable surfels that were not re-observed in time are dropped.
  std::vector<SurfelId> cull;
  for (const auto& [id, s] : map.surfels()) {
    if (!s.stable && now - s.timestamp > cfg.cull_age) cull.push_back(id);
  }
  for (SurfelId id : cull) map.remove(id);
  st.n_culled = cull.size();

  for (const auto& [id, s] : map.surfels()) {
    if (is_active(s.timestamp, now, cfg)) {
      ++st.n_active;
    } else {
      ++st.n_inactive;
    }
  }
  return res;
}

void write_fusion_metrics(std::ostream& os, const std::vector<FusionStats>& rows) {
  os << "step,n_active,n_inactive,n_new,n_fused,n_culled,icp_inlier,icp_dist,triggered\n";
  for (const FusionStats& r : rows) {
    os << r.step << ',' << r.n_active << ',' << r.n_inactive << ',' << r.n_new << ',' << r.n_fused << ','
       << r.n_culled << ',' << r.icp_inlier << ',' << r.icp_dist << ',' << (r.triggered ? 1 : 0) << '\n';
  }
}

}  // namespace mcslam
