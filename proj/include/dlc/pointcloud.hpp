// Scan containers, motion compensation and the on-disk scan/trajectory formats.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dlc/geometry.hpp"

namespace dlc {

enum class SensorId : std::uint8_t { A, B };

struct Point {
  Vec3 position = Vec3::Zero();
  double time_offset = 0.0;  // seconds since scan start
  std::optional<float> intensity;
};

struct Frame {
  std::vector<Point> points;
  double stamp = 0.0;
  SensorId sensor_id = SensorId::A;
  double scan_duration = 0.0;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct TrajectorySample {
  double stamp = 0.0;
  Pose pose;
};

struct Trajectory {
  std::vector<TrajectorySample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  const Pose& pose(std::size_t i) const { return samples[i].pose; }
  std::vector<Pose> poses() const;

  /// Index of the sample whose stamp is within `tol` of `stamp`; throws
  /// std::out_of_range otherwise.
  std::size_t index_of(double stamp, double tol = 1e-6) const;
  /// Throws NonMonotonicStamps unless stamps strictly increase.
  void check_monotonic() const;
};

Frame transform_frame(const Pose& pose, const Frame& f);

/// Re-expresses every point in the scan-start sensor frame, assuming
/// constant-twist motion from pose_start to pose_end over the scan.
Frame deskew(const Frame& f, const Pose& pose_start, const Pose& pose_end);

/// Leaf-grid centroid filter. Cells are visited in lexicographic cell order.
Frame voxel_downsample(const Frame& f, double leaf);

/// ASCII PCD subset: FIELDS x y z [t] [intensity], TYPE F, COUNT 1, DATA ascii.
Frame load_cloud(const std::filesystem::path& path);
void save_cloud(const Frame& f, const std::filesystem::path& path);

/// One `stamp tx ty tz qx qy qz qw` line per sample; '#' starts a comment line.
Trajectory load_trajectory(const std::filesystem::path& path);
void save_trajectory(const Trajectory& traj, const std::filesystem::path& path);
std::string format_pose_line(double stamp, const Pose& pose);
/// Parses a single pose line; throws ParseError(line_no) on malformed input.
TrajectorySample parse_pose_line(const std::string& line, const std::string& source = "<line>",
                                 std::size_t line_no = 1);

}  // namespace dlc
