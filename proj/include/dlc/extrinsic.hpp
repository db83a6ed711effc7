// Extrinsic calibration of LiDAR B against LiDAR A's voxelized reference map.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dlc/geometry.hpp"
#include "dlc/lm.hpp"
#include "dlc/pointcloud.hpp"
#include "dlc/voxelmap.hpp"

namespace dlc {

struct CalibConfig {
  int max_outer_iters = 30;
  /// Outer update magnitude |t| + 0.5 * angle below which the loop stops.
  double delta = 1e-5;
  LmParams lm;
  std::size_t frame_stride = 1;
  std::size_t point_stride = 1;
  /// Association distance shrinks geometrically from reject_initial to
  /// reject_final over the first reject_shrink_iters outer iterations.
  double reject_initial = 2.0;
  double reject_final = 0.1;
  int reject_shrink_iters = 5;
  /// Per-frame corrections with twist norm above this multiple of the median
  /// are left out of the average.
  double outlier_factor = 3.0;
  /// Weight each frame's correction by its J^T W J instead of uniformly.
  bool information_weighted = true;
  /// Matches with |r| above
  /// max(trim_factor * 1.4826 * MAD(r), trim_floor) are dropped; 0 disables.
  double trim_factor = 3.0;
  double trim_floor = 1e-4;
  std::size_t min_correspondences = 20;  // per frame
  std::size_t max_points_per_plane = 0;  // per frame and plane; 0 = all
  std::size_t jobs = 0;

  void validate() const;
  double reject_dist(int outer_iteration) const;
};

/// One B point matched to a map plane. The anchor carries the point into
/// A's world frame: q = anchor * T * point.
struct Correspondence {
  Vec3 point = Vec3::Zero();
  Pose anchor;
  Vec3 normal = Vec3::UnitZ();
  Vec3 centroid = Vec3::Zero();
  double weight = 1.0;
  std::uint32_t plane = 0;
};

double residual(const Correspondence& c, const Pose& extrinsic);

/// d residual / d xi for extrinsic * exp(xi), rotation block first.
Vec6 jacobian_row(const Correspondence& c, const Pose& extrinsic);

/// sum of weight * residual^2.
double global_objective(std::span<const Correspondence> corr, const Pose& extrinsic,
                        std::size_t jobs = 1);

struct LmSolution {
  Pose pose;
  LmTrace trace;
  Mat6 information = Mat6::Zero();  // J^T W J at the returned pose
};

/// Weighted Levenberg-Marquardt on (J^T W J + mu I) dxi = -J^T W r. Throws
/// Unobservable when J^T W J has condition number above 1e12.
LmSolution lm_solve(std::span<const Correspondence> corr, const Pose& init, const LmParams& params,
                    std::size_t jobs = 1);

/// B frame with what is needed to anchor its points: A's pose at scan start
/// and A's motion over the scan (identity when unknown).
struct AnchoredFrame {
  const Frame* frame = nullptr;
  Pose start;
  Pose motion;
};

/// Matches the frame's points (every point_stride-th) against the map's
/// planes at the given extrinsic.
std::vector<Correspondence> associate_frame(const VoxelMapIndex& map, const AnchoredFrame& frame,
                                            const Pose& extrinsic, double reject_dist,
                                            const CalibConfig& cfg);

struct OuterStep {
  int iteration = 0;
  double objective_before = 0.0;  // at the previous estimate, this iteration's matches
  double objective = 0.0;         // at the new estimate, same matches
  double update_norm = 0.0;
  std::size_t frames_used = 0;
  std::size_t correspondences = 0;
  bool joint_fallback = false;  // the average did not lower the objective
};

struct CalibrationResult {
  Pose extrinsic;
  std::vector<OuterStep> trace;
  /// Per-frame refinements of the last outer iteration (nullopt when skipped).
  std::vector<std::optional<Pose>> local;
  std::vector<LmTrace> lm_traces;
  bool converged = false;
  int iterations = 0;
  std::vector<std::size_t> skipped_frames;  // unobservable in the last iteration
};

CalibrationResult calibrate(const VoxelMapIndex& map, std::span<const AnchoredFrame> frames,
                            const Pose& guess, const CalibConfig& cfg);

struct CalibErrors {
  double trans = 0.0;
  double rot = 0.0;
};

CalibErrors evaluate(const Pose& estimate, const Pose& truth);

/// Writes `calibration.txt` (pose line), `trace.csv` and, with ground truth,
/// `errors.txt` into dir.
void write_report(const CalibrationResult& result, const std::optional<Pose>& truth,
                  const std::filesystem::path& dir);

}  // namespace dlc
