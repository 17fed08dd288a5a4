#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <unordered_map>
#include <vector>

#include "mcslam/lie.hpp"

namespace mcslam {

using SurfelId = std::uint64_t;

/// Point octree keyed by id. The root cube grows to cover any inserted point.
class SurfelIndex {
 public:
  explicit SurfelIndex(std::size_t leaf_capacity = 16, double initial_half_size = 8.0);
  SurfelIndex(const SurfelIndex& other);
  SurfelIndex& operator=(const SurfelIndex& other);
  SurfelIndex(SurfelIndex&&) noexcept;
  SurfelIndex& operator=(SurfelIndex&&) noexcept;
  ~SurfelIndex();

  /// Throws kInvalidArgument if the id is already present.
  void insert(SurfelId id, const Vec3& p);
  /// Returns false if the id is unknown.
  bool remove(SurfelId id);
  void move(SurfelId id, const Vec3& p);
  void clear();

  bool contains(SurfelId id) const { return positions_.count(id) != 0; }
  std::size_t size() const { return positions_.size(); }
  bool empty() const { return positions_.empty(); }

  /// Ids with |position - p| <= r, ascending.
  std::vector<SurfelId> query_radius(const Vec3& p, double r) const;
  /// Nearest id; returns false on an empty index.
  bool nearest(const Vec3& p, SurfelId& id, double& distance) const;

 private:
  struct Node;
  void grow_to(const Vec3& p);
  void insert_into(Node& node, SurfelId id, const Vec3& p, int depth);

  std::size_t leaf_capacity_;
  double initial_half_size_;
  std::unique_ptr<Node> root_;
  std::unordered_map<SurfelId, Vec3> positions_;
};

}  // namespace mcslam
