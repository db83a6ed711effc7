// Static 3-D k-d tree for k-nearest-neighbour queries.
#pragma once

#include <cstdint>
#include <vector>

#include "dlc/geometry.hpp"

namespace dlc {

class KdTree {
 public:
  struct Neighbor {
    std::uint32_t index;
    double dist2;
  };

  KdTree() = default;
  explicit KdTree(std::vector<Vec3> points);

  std::size_t size() const { return points_.size(); }
  const Vec3& point(std::size_t i) const { return points_[i]; }

  /// Up to k nearest points within max_dist, sorted by distance (ties by index).
  void knn(const Vec3& query, std::size_t k, double max_dist, std::vector<Neighbor>& out) const;

 private:
  struct Node {
    std::uint32_t begin, end;  // range in order_
    std::int32_t left = -1, right = -1;
    std::uint8_t axis = 0;
    double split = 0.0;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end);
  void search(std::int32_t node, const Vec3& q, std::size_t k, double& worst,
              std::vector<Neighbor>& heap) const;

  static constexpr std::uint32_t kLeafSize = 12;
  std::vector<Vec3> points_;
  std::vector<Vec3> sorted_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace dlc
