// Sliding-window bundle adjustment of LiDAR A's trajectory.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dlc/geometry.hpp"
#include "dlc/lm.hpp"
#include "dlc/pointcloud.hpp"
#include "dlc/voxelmap.hpp"

namespace dlc {

struct WindowPlan {
  std::size_t n = 0;
  std::size_t w = 0;
  std::size_t d = 0;
  std::size_t o = 0;
  /// 0-based inclusive frame ranges.
  std::vector<std::pair<std::size_t, std::size_t>> windows;

  std::size_t count() const { return windows.size(); }
};

/// Windows of length w (clipped at n) starting every d - d/2 frames.
/// Throws InvalidParams for n == 0, w < 2, odd or zero d, or d > w.
WindowPlan plan_windows(std::size_t n, std::size_t w, std::size_t d);

struct LbaParams {
  std::size_t window = 20;
  std::size_t step = 10;
  /// Octree used to group window points into shared planes. The residual
  /// gate removes voxels where a second surface intrudes.
  VoxelParams voxel = default_voxel();
  /// Planarity threshold of the first round; it halves every round down to
  /// voxel.tau_eta. Misaligned frames thicken planes early on.
  double coarse_tau_eta = 0.05;
  double thick_ratio = 3.0;
  std::size_t min_plane_frames = 2;  // planes seen by fewer frames carry no constraint
  int max_rounds = 6;                // re-voxelizations
  double round_tolerance = 1e-4;     // stop when no pose moves more than this in a round
  double overlap_weight = 1e3;
  double downsample_leaf = 0.2;  // 0 disables
  LmParams lm;
  std::size_t jobs = 0;

  void validate() const;
  static VoxelParams default_voxel();
};

/// Groups of window points that share one plane, in flat storage. Group g
/// holds members [offset[g], offset[g+1]), each a frame index and a point in
/// that frame's sensor coordinates.
struct PlaneGroups {
  std::vector<std::uint32_t> offset{0};
  std::vector<std::uint32_t> frame;
  std::vector<Vec3> point;

  std::size_t size() const { return offset.size() - 1; }
  std::size_t members() const { return frame.size(); }
  void add(std::span<const std::pair<std::uint32_t, Vec3>> group);
};

struct CostTerms {
  double cost = 0.0;
  /// Derivatives with respect to right perturbations of poses 1..w-1
  /// (rotation block first). The Hessian is Gauss-Newton with the plane
  /// centroid moving with the points and the normal held fixed.
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};

/// Sum over groups of squared distances of the members (in world
/// coordinates) to the group's best-fit plane. The plane is refit at the
/// given poses, so the cost is the sum of count * smallest eigenvalue.
CostTerms point_to_plane_cost(std::span<const Pose> poses, const PlaneGroups& groups,
                              bool derivatives = true, std::size_t jobs = 1);

/// Voxelizes the window (in the first pose's frame) and returns one group per
/// planar leaf seen by at least min_plane_frames frames. With thick_ratio > 0,
/// leaves whose plane deviation exceeds thick_ratio times the window's median
/// leaf are dropped (they straddle two surfaces).
PlaneGroups associate_window(std::span<const std::vector<Vec3>> frames,
                             std::span<const Pose> poses, const VoxelParams& voxel,
                             std::size_t min_plane_frames, double thick_ratio = 0.0);

struct WindowResult {
  std::vector<Pose> relative_poses;  // refined[j] = refined[j-1] * relative[j-1]
  std::vector<Pose> refined_poses;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::size_t planes = 0;
  std::vector<LmTrace> traces;  // one per association round
};

/// Frames are in sensor coordinates. `prior` holds poses for the leading
/// frames from an earlier window: they seed those frames, pin frame 0, and
/// tie the rest by a quadratic prior. Without a prior, init_poses[0] is pinned.
WindowResult optimize_window(std::span<const Frame> frames, std::span<const Pose> init_poses,
                             std::span<const Pose> prior, const LbaParams& params);

struct ReferenceMap {
  std::vector<Vec3> points;
  std::vector<std::uint32_t> source_frame_ids;
};

struct WindowReport {
  std::size_t first = 0, last = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::size_t planes = 0;
  double overlap_trans = 0.0;  // max discrepancy over frames shared with the previous window
  double overlap_rot = 0.0;
  std::vector<LmTrace> traces;
};

struct LbaResult {
  Trajectory trajectory;
  ReferenceMap map;
  std::vector<WindowReport> windows;
};

/// Frames are expected to be motion compensated already; they are
/// downsampled with params.downsample_leaf before use.
LbaResult run_sliding_lba(std::span<const Frame> frames, const Trajectory& trajectory,
                          const LbaParams& params);

}  // namespace dlc
