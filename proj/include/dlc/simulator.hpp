// Rectangle-world LiDAR simulator and dataset directories.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dlc/geometry.hpp"
#include "dlc/pointcloud.hpp"

namespace dlc {

/// Parallelogram corner + a*edge_u + b*edge_v, a, b in [0, 1].
struct Rectangle {
  Vec3 corner = Vec3::Zero();
  Vec3 edge_u = Vec3::UnitX();
  Vec3 edge_v = Vec3::UnitY();

  Vec3 normal() const { return edge_u.cross(edge_v).normalized(); }
  bool valid() const { return edge_u.cross(edge_v).norm() > 1e-12; }
  /// Ray parameter of the hit, if the ray meets the rectangle at t > 0.
  std::optional<double> intersect(const Vec3& origin, const Vec3& dir) const;
  /// Within tol of the plane and inside the edges (with tol slack).
  bool contains(const Vec3& p, double tol) const;
};

struct Scene {
  std::string name;
  std::vector<Rectangle> planes;

  /// Nearest hit distance along a unit direction, up to max_range.
  std::optional<double> cast(const Vec3& origin, const Vec3& dir, double max_range) const;
};

enum class SceneKind { Room, Corridor, Yard };

Scene builtin_scene(SceneKind kind);
/// "room", "corridor" or "yard"; throws InvalidParams otherwise.
SceneKind parse_scene_kind(const std::string& name);

struct LidarModel {
  int beams = 16;
  double vertical_fov_deg = 30.0;  // beams spread evenly over +-fov/2
  double horizontal_res_deg = 0.4;
  double max_range = 50.0;
  double range_sigma = 0.01;
  double scan_period = 0.1;

  void validate() const;
  std::vector<double> elevations() const;  // radians
  int azimuth_steps() const;
};

/// Rays are cast from the sensor pose interpolated at each azimuth's time
/// fraction; points are stored in that instantaneous sensor frame.
Frame simulate_scan(const Scene& scene, const Pose& start, const Pose& end, const LidarModel& model,
                    std::uint64_t seed, std::uint64_t stream = 0);

enum class TrajectoryKind { Line, Arc, Lissajous };

TrajectoryKind parse_trajectory_kind(const std::string& name);

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::Lissajous;
  double length = 3.0;  // line: path length; arc: arc length; lissajous: x extent
  std::size_t frames = 40;
  double arc_angle = 1.5707963267948966;
  double period = 0.1;  // seconds between frames
  Pose origin = Pose::from_translation({0.0, 0.0, 1.85});
};

Trajectory make_trajectory(const TrajectorySpec& spec);

struct RigConfig {
  double x = 0, y = 0, z = 0;           // meters
  double roll = 0, pitch = 0, yaw = 0;  // degrees, ZYX

  Pose pose() const;
};

/// Presets 1-5 of the dual-LiDAR layouts; throws InvalidParams otherwise.
RigConfig rig_preset(int index);

struct Dataset {
  std::vector<Frame> frames_a;
  std::vector<Frame> frames_b;
  Trajectory trajectory;          // ground truth or odometry for sensor A
  std::optional<Pose> extrinsic;  // ground-truth pose of B in A's frame
  /// Per-frame motion of A over its scan (start^-1 * end), stamped like the frames.
  std::optional<Trajectory> motion_a;
  std::vector<std::pair<std::string, std::string>> meta;
};

/// Throws EmptyFrame when a simulated frame has no returns.
Dataset generate_dataset(const Scene& scene, const Trajectory& trajectory, const Pose& extrinsic,
                         const LidarModel& model, std::uint64_t seed, std::size_t jobs = 0);

/// Translation offset uniform in the cube, rotation by a uniform angle in
/// [0, max_rot_deg] about a uniform axis (applied on the right).
Pose perturb(const Pose& pose, double max_trans, double max_rot_deg, std::uint64_t seed);

/// Right-multiplies each pose by exp of an i.i.d. Gaussian twist. With
/// keep_first the first pose is left untouched.
Trajectory add_trajectory_noise(const Trajectory& traj, double sigma_trans, double sigma_rot,
                                std::uint64_t seed, bool keep_first = false);

/// Scan-period motion per frame; the last frame extrapolates the previous step.
Trajectory motion_from_trajectory(const Trajectory& traj);

void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace dlc
