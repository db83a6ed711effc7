// Adaptive octree voxelization of the reference map and planar feature
// extraction.
#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "dlc/geometry.hpp"

namespace dlc {

struct PlaneFit {
  Vec3 normal = Vec3::UnitZ();
  Vec3 centroid = Vec3::Zero();
  Vec3 eigenvalues = Vec3::Zero();  // ascending, clamped at 0

  /// lambda1 / (lambda2 + lambda3)
  double planarity() const;
};

/// Covariance eigen-decomposition of a point set. The normal is the
/// smallest-eigenvalue eigenvector, signed so that its largest-magnitude
/// component is positive. Throws Degenerate for < 3 or collinear points.
PlaneFit fit_plane(std::span<const Vec3> points);

/// Max |n^T (p - c)| over the set.
double max_plane_distance(const PlaneFit& fit, std::span<const Vec3> points);

enum class SigmaLambda {
  kEigenvalueSpread,  // population std of {l1, l2, l3}
  kLambda1AcrossLeaves,  // std of l1 over the leaves forming a (merged) plane
};

double confidence_weight(double point_count, double sigma_lambda, double eta, double gamma);

struct VoxelParams {
  double l_parent = 1.0;
  double tau_eta = 0.1;
  int max_depth = 3;
  std::size_t min_points = 10;
  double gamma = 1.0;
  double tau_theta = 0.0872664625997164788;  // 5 degrees
  double tau_d = 0.5;
  double reject_dist = 0.3;
  SigmaLambda sigma_mode = SigmaLambda::kEigenvalueSpread;
  /// Reject a planar candidate whose farthest point is beyond
  /// (sqrt(2 ln M) + 2) * sqrt(lambda1) + thickness_floor. Catches voxels
  /// where a second surface contributes a thin sliver of points.
  bool residual_gate = true;
  double thickness_floor = 1e-6;
  /// Candidates with sqrt(lambda1) above this are not planar.
  double max_thickness = std::numeric_limits<double>::infinity();

  void validate() const;
};

enum class VoxelClass : std::uint8_t { Planar, Subdivided, Discarded };

struct VoxelKey {
  int depth = 0;
  std::int64_t x = 0, y = 0, z = 0;
  bool operator==(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const;
};

struct PlaneFeature {
  Vec3 normal = Vec3::UnitZ();
  Vec3 centroid = Vec3::Zero();
  Vec3 eigenvalues = Vec3::Zero();
  std::size_t point_count = 0;
  double weight = 0.0;
  double eta = 0.0;
  double sigma_lambda = 0.0;
  std::size_t voxel_id = 0;  // node index of the (first) source leaf
};

struct VoxelNode {
  VoxelKey key;
  Vec3 center = Vec3::Zero();
  double edge_length = 0.0;
  std::vector<std::uint32_t> points;        // indices into the map
  std::vector<std::int32_t> children;       // empty or 8 entries, -1 for empty octants
  VoxelClass classification = VoxelClass::Discarded;
  std::int32_t leaf = -1;                   // index into leaf_planes when Planar
  double eta = 0.0;                         // planarity of the last fit, if any
  int depth() const { return key.depth; }
};

class VoxelMapIndex {
 public:
  /// Merged (or, before merging, per-leaf) planes used for association.
  std::vector<PlaneFeature> planes;
  /// One feature per Planar leaf, independent of merging.
  std::vector<PlaneFeature> leaf_planes;
  std::vector<std::size_t> leaf_to_plane;
  std::vector<VoxelNode> nodes;
  std::vector<std::int32_t> roots;
  std::unordered_map<VoxelKey, std::int32_t, VoxelKeyHash> lookup;
  std::vector<Vec3> points;
  VoxelParams params;

  /// Deepest voxel cell containing p, or -1.
  std::int32_t locate(const Vec3& p) const;
  VoxelKey key_at(const Vec3& p, int depth) const;
  std::vector<std::uint32_t> plane_points(std::size_t plane) const;
};

VoxelMapIndex build_adaptive(std::span<const Vec3> map_points, const VoxelParams& params);

/// Builds twice: the second pass caps sqrt(lambda1) at ratio times the first
/// pass's median leaf (plus thickness_floor), so leaves straddling a corner
/// subdivide further. ratio <= 0 is a plain build_adaptive.
VoxelMapIndex build_thickness_gated(std::span<const Vec3> map_points, const VoxelParams& params,
                                    double ratio);

/// Unions face-adjacent Planar leaves (same depth, or a leaf and a coarser
/// leaf across a face) whose normals differ by less than tau_theta and whose
/// centroids are closer than tau_d. Groups are formed from the per-leaf
/// features, so applying this twice is the same as applying it once.
VoxelMapIndex merge_neighbors(const VoxelMapIndex& index, double tau_theta, double tau_d);

/// Plane containing p at the deepest level, rejected when |n^T (p - c)| > reject_dist.
std::optional<std::size_t> associate(const Vec3& p, const VoxelMapIndex& index,
                                     double reject_dist);

/// `nx ny nz cx cy cz lambda1 lambda2 lambda3 count weight` per line.
void export_planes(const VoxelMapIndex& index, const std::filesystem::path& path);

}  // namespace dlc
