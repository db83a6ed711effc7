// End-to-end calibration: motion compensation, LBA, reference map, extrinsic.
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dlc/extrinsic.hpp"
#include "dlc/lba.hpp"
#include "dlc/simulator.hpp"
#include "dlc/voxelmap.hpp"

namespace dlc {

struct PipelineConfig {
  LbaParams lba;
  bool run_lba = true;
  VoxelParams voxel;
  /// Second-pass cap on leaf thickness relative to the median leaf; 0 disables.
  double map_thickness_ratio = 3.0;
  bool merge = true;
  CalibConfig calib;
};

/// Per-frame scan motion: the dataset's log when present, otherwise
/// consecutive trajectory poses.
Trajectory scan_motion(const Dataset& data);

std::vector<Frame> deskew_frames(std::span<const Frame> frames, const Trajectory& motion);

/// Anchors B frames at A's trajectory; frames must outlive the result.
std::vector<AnchoredFrame> anchor_frames(std::span<const Frame> frames_b, const Trajectory& trajectory,
                                         const Trajectory& motion);

VoxelMapIndex build_reference_index(std::span<const Vec3> map_points, const VoxelParams& voxel,
                                    double thickness_ratio, bool merge);

struct PipelineResult {
  std::optional<LbaResult> lba;
  Trajectory trajectory;  // used to anchor B
  VoxelMapIndex map;
  CalibrationResult calib;
};

/// `odometry` is A's trajectory estimate (the dataset's when empty).
PipelineResult run_pipeline(const Dataset& data, const Trajectory& odometry, const Pose& guess,
                            const PipelineConfig& cfg);

}  // namespace dlc
