#include "dlc/pipeline.hpp"

#include "dlc/errors.hpp"
#include "dlc/parallel.hpp"

namespace dlc {

Trajectory scan_motion(const Dataset& data) {
  return data.motion_a ? *data.motion_a : motion_from_trajectory(data.trajectory);
}

std::vector<Frame> deskew_frames(std::span<const Frame> frames, const Trajectory& motion) {
  if (motion.size() != frames.size()) throw InvalidParams("deskew_frames: one motion per frame");
  std::vector<Frame> out(frames.size());
  for (std::size_t j = 0; j < frames.size(); ++j) {
    out[j] = frames[j].scan_duration > 0.0 ? deskew(frames[j], Pose::identity(), motion.pose(j))
                                           : frames[j];
  }
  return out;
}

std::vector<AnchoredFrame> anchor_frames(std::span<const Frame> frames_b, const Trajectory& trajectory,
                                         const Trajectory& motion) {
  if (trajectory.size() != frames_b.size() || motion.size() != frames_b.size()) {
    throw InvalidParams("anchor_frames: B frames, trajectory and motion must align");
  }
  std::vector<AnchoredFrame> out;
  for (std::size_t j = 0; j < frames_b.size(); ++j)
    out.push_back({&frames_b[j], trajectory.pose(j), motion.pose(j)});
  return out;
}

VoxelMapIndex build_reference_index(std::span<const Vec3> map_points, const VoxelParams& voxel,
                                    double thickness_ratio, bool merge) {
  VoxelMapIndex index = build_thickness_gated(map_points, voxel, thickness_ratio);
  if (merge) index = merge_neighbors(index, voxel.tau_theta, voxel.tau_d);
  return index;
}

PipelineResult run_pipeline(const Dataset& data, const Trajectory& odometry, const Pose& guess,
                            const PipelineConfig& cfg) {
  const Trajectory& input = odometry.empty() ? data.trajectory : odometry;
  if (input.size() != data.frames_a.size()) throw InvalidParams("trajectory does not match the A frames");
  const Trajectory motion = scan_motion(data);
  const std::vector<Frame> deskewed = deskew_frames(data.frames_a, motion);

  PipelineResult out;
  std::vector<Vec3> map_points;
  if (cfg.run_lba) {
    out.lba = run_sliding_lba(deskewed, input, cfg.lba);
    out.trajectory = out.lba->trajectory;
    map_points = out.lba->map.points;
  } else {
    out.trajectory = input;
    for (std::size_t j = 0; j < deskewed.size(); ++j) {
      const Frame f = cfg.lba.downsample_leaf > 0.0 ? voxel_downsample(deskewed[j], cfg.lba.downsample_leaf)
                                                    : deskewed[j];
      for (const auto& p : f.points) map_points.push_back(input.pose(j) * p.position);
    }
  }
  out.map = build_reference_index(map_points, cfg.voxel, cfg.map_thickness_ratio, cfg.merge);
  const std::vector<AnchoredFrame> anchored = anchor_frames(data.frames_b, out.trajectory, motion);
  out.calib = calibrate(out.map, anchored, guess, cfg.calib);
  return out;
}

}  // namespace dlc
