#include "mcslam/octree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mcslam/error.hpp"

namespace mcslam {

namespace {
constexpr int kMaxDepth = 24;
}

struct SurfelIndex::Node {
  Vec3 center = Vec3::Zero();
  double half = 1.0;
  std::vector<std::pair<SurfelId, Vec3>> items;  // leaves only
  std::array<std::unique_ptr<Node>, 8> child;
  bool leaf = true;

  int octant(const Vec3& p) const {
    return (p.x() >= center.x() ? 1 : 0) | (p.y() >= center.y() ? 2 : 0) | (p.z() >= center.z() ? 4 : 0);
  }
  bool covers(const Vec3& p) const { return ((p - center).cwiseAbs().array() <= half).all(); }

  std::unique_ptr<Node> clone() const {
    auto n = std::make_unique<Node>();
    n->center = center;
    n->half = half;
    n->items = items;
    n->leaf = leaf;
    for (int i = 0; i < 8; ++i) {
      if (child[i]) n->child[i] = child[i]->clone();
    }
    return n;
  }

  // Squared distance from p to this cube.
  double distance2(const Vec3& p) const {
    const Vec3 d = ((p - center).cwiseAbs().array() - half).cwiseMax(0.0).matrix();
    return d.squaredNorm();
  }
};

SurfelIndex::SurfelIndex(std::size_t leaf_capacity, double initial_half_size)
    : leaf_capacity_(std::max<std::size_t>(1, leaf_capacity)), initial_half_size_(initial_half_size) {
  if (!(initial_half_size > 0.0)) throw Error(ErrorCode::kInvalidArgument, "octree half size must be positive");
}

SurfelIndex::SurfelIndex(const SurfelIndex& other)
    : leaf_capacity_(other.leaf_capacity_),
      initial_half_size_(other.initial_half_size_),
      root_(other.root_ ? other.root_->clone() : nullptr),
      positions_(other.positions_) {}

SurfelIndex& SurfelIndex::operator=(const SurfelIndex& other) {
  if (this != &other) {
    leaf_capacity_ = other.leaf_capacity_;
    initial_half_size_ = other.initial_half_size_;
    root_ = other.root_ ? other.root_->clone() : nullptr;
    positions_ = other.positions_;
  }
  return *this;
}

SurfelIndex::~SurfelIndex() = default;
SurfelIndex::SurfelIndex(SurfelIndex&&) noexcept = default;
SurfelIndex& SurfelIndex::operator=(SurfelIndex&&) noexcept = default;

void SurfelIndex::grow_to(const Vec3& p) {
  if (!root_) {
    root_ = std::make_unique<Node>();
    root_->half = initial_half_size_;
    root_->center = (p / initial_half_size_).array().floor().matrix() * initial_half_size_ +
                    Vec3::Constant(0.5 * initial_half_size_);
  }
  while (!root_->covers(p)) {
    // Double the root toward p; the old root becomes one octant.
    auto bigger = std::make_unique<Node>();
    bigger->half = 2.0 * root_->half;
    Vec3 dir;
    for (int i = 0; i < 3; ++i) dir(i) = p(i) >= root_->center(i) ? 1.0 : -1.0;
    bigger->center = root_->center + dir * root_->half;
    bigger->leaf = false;
    const int o = bigger->octant(root_->center);
    bigger->child[o] = std::move(root_);
    root_ = std::move(bigger);
  }
}

void SurfelIndex::insert_into(Node& node, SurfelId id, const Vec3& p, int depth) {
  if (node.leaf) {
    node.items.emplace_back(id, p);
    if (node.items.size() <= leaf_capacity_ || depth >= kMaxDepth) return;
    node.leaf = false;
    auto items = std::move(node.items);
    node.items.clear();
    for (const auto& [i, q] : items) insert_into(node, i, q, depth);
    return;
  }
  const int o = node.octant(p);
  if (!node.child[o]) {
    auto c = std::make_unique<Node>();
    c->half = 0.5 * node.half;
    for (int i = 0; i < 3; ++i) c->center(i) = node.center(i) + ((o >> i) & 1 ? c->half : -c->half);
    node.child[o] = std::move(c);
  }
  insert_into(*node.child[o], id, p, depth + 1);
}

void SurfelIndex::insert(SurfelId id, const Vec3& p) {
  if (!p.allFinite()) throw Error(ErrorCode::kInvalidArgument, "non-finite surfel position");
  if (!positions_.emplace(id, p).second) throw Error(ErrorCode::kInvalidArgument, "duplicate surfel id");
  grow_to(p);
  insert_into(*root_, id, p, 0);
}

bool SurfelIndex::remove(SurfelId id) {
  auto it = positions_.find(id);
  if (it == positions_.end()) return false;
  const Vec3 p = it->second;
  positions_.erase(it);
  Node* n = root_.get();
  while (n && !n->leaf) n = n->child[n->octant(p)].get();
  if (n) {
    auto& v = n->items;
    v.erase(std::remove_if(v.begin(), v.end(), [&](const auto& e) { return e.first == id; }), v.end());
  }
  if (positions_.empty()) root_.reset();
  return true;
}

void SurfelIndex::move(SurfelId id, const Vec3& p) {
  if (!remove(id)) throw Error(ErrorCode::kInvalidArgument, "unknown surfel id");
  insert(id, p);
}

void SurfelIndex::clear() {
  root_.reset();
  positions_.clear();
}

std::vector<SurfelId> SurfelIndex::query_radius(const Vec3& p, double r) const {
  std::vector<SurfelId> out;
  if (!root_ || r < 0.0) return out;
  const double r2 = r * r;
  std::vector<const Node*> stack{root_.get()};
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (n->distance2(p) > r2) continue;
    if (n->leaf) {
      for (const auto& [id, q] : n->items) {
        if ((q - p).squaredNorm() <= r2) out.push_back(id);
      }
      continue;
    }
    for (const auto& c : n->child) {
      if (c) stack.push_back(c.get());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool SurfelIndex::nearest(const Vec3& p, SurfelId& id, double& distance) const {
  if (!root_) return false;
  double best = std::numeric_limits<double>::infinity();
  SurfelId best_id = 0;
  std::vector<const Node*> stack{root_.get()};
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (n->distance2(p) > best) continue;
    if (n->leaf) {
      for (const auto& [i, q] : n->items) {
        const double d = (q - p).squaredNorm();
        if (d < best || (d == best && i < best_id)) {
          best = d;
          best_id = i;
        }
      }
      continue;
    }
    // Visit the octant containing p last so it is popped first.
    const int first = n->octant(p);
    for (int o = 0; o < 8; ++o) {
      if (o != first && n->child[o]) stack.push_back(n->child[o].get());
    }
    if (n->child[first]) stack.push_back(n->child[first].get());
  }
  if (!std::isfinite(best)) return false;
  id = best_id;
  distance = std::sqrt(best);
  return true;
}

}  // namespace mcslam
