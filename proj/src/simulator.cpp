#include "dlc/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dlc/errors.hpp"
#include "dlc/parallel.hpp"
#include "dlc/random.hpp"

namespace dlc {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

Rectangle rect(const Vec3& corner, const Vec3& u, const Vec3& v) { return {corner, u, v}; }

// Face-local coordinates (a, b) of q relative to the corner.
std::pair<double, double> local_coords(const Rectangle& r, const Vec3& q) {
  const double uu = r.edge_u.squaredNorm(), vv = r.edge_v.squaredNorm();
  const double uv = r.edge_u.dot(r.edge_v);
  const double qu = r.edge_u.dot(q), qv = r.edge_v.dot(q);
  const double det = uu * vv - uv * uv;
  return {(qu * vv - qv * uv) / det, (qv * uu - qu * uv) / det};
}

std::string frame_name(std::size_t j) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.pcd", j);
  return buf;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Frame> load_frames(const fs::path& dir, SensorId id, const Trajectory& traj) {
  std::vector<Frame> frames;
  for (std::size_t j = 0; j < traj.size(); ++j) {
    Frame f = load_cloud(dir / frame_name(j));
    f.sensor_id = id;
    f.stamp = traj.samples[j].stamp;
    frames.push_back(std::move(f));
  }
  if (fs::exists(dir / frame_name(traj.size()))) {
    throw IoError(dir.string() + " holds more frames than trajectory samples");
  }
  return frames;
}

}  // namespace

std::optional<double> Rectangle::intersect(const Vec3& origin, const Vec3& dir) const {
  const Vec3 n = edge_u.cross(edge_v);
  const double denom = n.dot(dir);
  if (std::abs(denom) < 1e-12 * n.norm()) return std::nullopt;
  const double t = n.dot(corner - origin) / denom;
  if (!(t > 1e-9)) return std::nullopt;
  const auto [a, b] = local_coords(*this, origin + t * dir - corner);
  if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0) return std::nullopt;
  return t;
}

bool Rectangle::contains(const Vec3& p, double tol) const {
  if (std::abs(normal().dot(p - corner)) > tol) return false;
  const auto [a, b] = local_coords(*this, p - corner);
  const double ta = tol / edge_u.norm(), tb = tol / edge_v.norm();
  return a >= -ta && a <= 1.0 + ta && b >= -tb && b <= 1.0 + tb;
}

std::optional<double> Scene::cast(const Vec3& origin, const Vec3& dir, double max_range) const {
  std::optional<double> best;
  for (const auto& r : planes) {
    const auto t = r.intersect(origin, dir);
    if (t && *t <= max_range && (!best || *t < *best)) best = t;
  }
  return best;
}

Scene builtin_scene(SceneKind kind) {
  Scene s;
  switch (kind) {
    case SceneKind::Room: {
      s.name = "room";
      const double x0 = -5, x1 = 5, y0 = -4, y1 = 4, h = 3;
      s.planes = {
          rect({x0, y0, 0}, {10, 0, 0}, {0, 8, 0}),   // floor
          rect({x0, y0, h}, {10, 0, 0}, {0, 8, 0}),   // ceiling
          rect({x0, y0, 0}, {10, 0, 0}, {0, 0, h}),   // south wall
          rect({x0, y1, 0}, {10, 0, 0}, {0, 0, h}),   // north wall
          rect({x0, y0, 0}, {0, 8, 0}, {0, 0, h}),    // west wall
          rect({x1, y0, 0}, {0, 8, 0}, {0, 0, h}),    // east wall
          rect({3.5, y0, 0}, {0, 2.5, 0}, {0, 0, h}),  // partition off the south wall
          rect({x0, 2.5, 0}, {2.5, 0, 0}, {0, 0, h}),  // partition off the west wall
      };
      break;
    }
    case SceneKind::Corridor: {
      // 30 m run; one wall and the ceiling are slightly inclined so the
      // normal set has full rank.
      s.name = "corridor";
      s.planes = {
          rect({-15, -2, 0}, {30, 0, 0}, {0, 4, 0}),                // floor
          rect({-15, -1.5, 0}, {30, 0, 0}, {0, 0, 3.2}),            // right wall
          rect({-15, 1.2, 0}, {30, 0.9, 0}, {0, 0, 3.2}),           // tapered left wall
          rect({-15, -2, 2.7}, {30, 0, 0.6}, {0, 4, 0}),            // sloped ceiling
      };
      break;
    }
    case SceneKind::Yard: {
      s.name = "yard";
      s.planes.push_back(rect({-20, -20, 0}, {40, 0, 0}, {0, 40, 0}));
      const double yaws[] = {0.0, 70.0, 135.0, 200.0};
      const double dists[] = {8.0, 7.0, 9.0, 6.5};
      for (int i = 0; i < 4; ++i) {
        const double a = yaws[i] * kPi / 180.0;
        const Vec3 radial(std::cos(a), std::sin(a), 0.0);
        const Vec3 along(-std::sin(a), std::cos(a), 0.0);
        const double width = 10.0;
        s.planes.push_back(rect(radial * dists[i] - along * (width / 2), along * width, {0, 0, 7}));
      }
      break;
    }
  }
  return s;
}

SceneKind parse_scene_kind(const std::string& name) {
  if (name == "room") return SceneKind::Room;
  if (name == "corridor") return SceneKind::Corridor;
  if (name == "yard") return SceneKind::Yard;
  throw InvalidParams("unknown scene '" + name + "'");
}

void LidarModel::validate() const {
  if (beams < 1) throw InvalidParams("model.beams must be >= 1");
  if (!(vertical_fov_deg >= 0.0 && vertical_fov_deg <= 180.0))
    throw InvalidParams("model.vertical_fov must be in [0, 180]");
  if (!(horizontal_res_deg > 0.0 && horizontal_res_deg <= 360.0))
    throw InvalidParams("model.horizontal_res must be in (0, 360]");
  if (!(max_range > 0.0)) throw InvalidParams("model.max_range must be > 0");
  if (!(range_sigma >= 0.0)) throw InvalidParams("model.range_sigma must be >= 0");
  if (!(scan_period > 0.0)) throw InvalidParams("model.scan_period must be > 0");
}

std::vector<double> LidarModel::elevations() const {
  std::vector<double> out;
  const double half = vertical_fov_deg / 2.0;
  for (int i = 0; i < beams; ++i) {
    const double deg = beams == 1 ? 0.0 : -half + vertical_fov_deg * i / (beams - 1);
    out.push_back(deg * kPi / 180.0);
  }
  return out;
}

int LidarModel::azimuth_steps() const {
  return std::max(1, static_cast<int>(std::lround(360.0 / horizontal_res_deg)));
}

Frame simulate_scan(const Scene& scene, const Pose& start, const Pose& end, const LidarModel& model,
                    std::uint64_t seed, std::uint64_t stream) {
  model.validate();
  RandomStream rng(seed, stream);
  const std::vector<double> elev = model.elevations();
  const int steps = model.azimuth_steps();
  const Twist motion = log_se3(start.inverse() * end);
  Frame f;
  f.scan_duration = model.scan_period;
  for (int k = 0; k < steps; ++k) {
    const double s = static_cast<double>(k) / steps;
    const Pose pose = start * exp_se3(motion * s);
    const double az = 2.0 * kPi * k / steps;
    for (const double e : elev) {
      const Vec3 dir(std::cos(e) * std::cos(az), std::cos(e) * std::sin(az), std::sin(e));
      const Vec3 world_dir = pose.rotation * dir;
      const auto hit = scene.cast(pose.translation, world_dir, model.max_range);
      if (!hit) continue;
      double range = *hit;
      if (model.range_sigma > 0.0) range += rng.normal(0.0, model.range_sigma);
      Point p;
      p.position = dir * range;
      p.time_offset = s * model.scan_period;
      f.points.push_back(p);
    }
  }
  return f;
}

TrajectoryKind parse_trajectory_kind(const std::string& name) {
  if (name == "line") return TrajectoryKind::Line;
  if (name == "arc") return TrajectoryKind::Arc;
  if (name == "lissajous") return TrajectoryKind::Lissajous;
  throw InvalidParams("unknown trajectory '" + name + "'");
}

Trajectory make_trajectory(const TrajectorySpec& spec) {
  if (spec.frames < 2) throw InvalidParams("trajectory needs at least 2 frames");
  if (!(spec.length > 0.0)) throw InvalidParams("trajectory length must be > 0");
  if (!(spec.period > 0.0)) throw InvalidParams("trajectory period must be > 0");
  Trajectory traj;
  const double last = static_cast<double>(spec.frames - 1);
  for (std::size_t j = 0; j < spec.frames; ++j) {
    const double s = static_cast<double>(j) / last;
    Pose local;
    switch (spec.kind) {
      case TrajectoryKind::Line:
        local = Pose::from_translation({s * spec.length, 0.0, 0.0});
        break;
      case TrajectoryKind::Arc: {
        if (!(spec.arc_angle > 0.0)) throw InvalidParams("arc angle must be > 0");
        const double radius = spec.length / spec.arc_angle;
        const double phi = s * spec.arc_angle;
        local = {rot_z(phi), Vec3(radius * std::sin(phi), radius * (1.0 - std::cos(phi)), 0.0)};
        break;
      }
      case TrajectoryKind::Lissajous: {
        const double a = spec.length / 2.0;
        const double w = 2.0 * kPi * s;
        const Vec3 t(a * std::sin(w), 0.5 * a * std::sin(2.0 * w), 0.1 * std::sin(3.0 * w));
        const EulerZYX e{0.15 * std::sin(2.0 * w), 0.15 * std::sin(w + 0.5), 0.5 * std::sin(w)};
        local = euler_zyx_to_pose(e, t);
        break;
      }
    }
    traj.samples.push_back({static_cast<double>(j) * spec.period, spec.origin * local});
  }
  return traj;
}

Pose RigConfig::pose() const {
  return euler_zyx_to_pose({deg2rad(roll), deg2rad(pitch), deg2rad(yaw)}, Vec3(x, y, z));
}

RigConfig rig_preset(int index) {
  switch (index) {
    case 1: return {0.0, -0.35, -0.9, -90.0, 0.0, 180.0};
    case 2: return {0.0, 0.5, 0.5, 90.0, 0.0, 90.0};
    case 3: return {-1.0, 0.0, 0.0, 180.0, 0.0, 202.0};
    case 4: return {0.6, 0.4, 0.4, 0.0, 90.0, 180.0};
    case 5: return {0.4, -0.2, -1.0, 180.0, -90.0, 0.0};
    default: throw InvalidParams("rig preset must be 1-5, got " + std::to_string(index));
  }
}

Trajectory motion_from_trajectory(const Trajectory& traj) {
  Trajectory motion;
  const std::size_t n = traj.size();
  for (std::size_t j = 0; j < n; ++j) {
    Pose rel;
    if (j + 1 < n) {
      rel = traj.pose(j).inverse() * traj.pose(j + 1);
    } else if (n >= 2) {
      rel = traj.pose(n - 2).inverse() * traj.pose(n - 1);
    }
    motion.samples.push_back({traj.samples[j].stamp, rel});
  }
  return motion;
}

Dataset generate_dataset(const Scene& scene, const Trajectory& trajectory, const Pose& extrinsic,
                         const LidarModel& model, std::uint64_t seed, std::size_t jobs) {
  model.validate();
  const std::size_t n = trajectory.size();
  Dataset data;
  data.trajectory = trajectory;
  data.extrinsic = extrinsic;
  data.motion_a = motion_from_trajectory(trajectory);
  data.frames_a.resize(n);
  data.frames_b.resize(n);
  parallel_for(2 * n, jobs, [&](std::size_t task) {
    const std::size_t j = task / 2;
    const Pose start = trajectory.pose(j);
    const Pose end = start * data.motion_a->pose(j);
    Frame f = task % 2 == 0
                  ? simulate_scan(scene, start, end, model, seed, task)
                  : simulate_scan(scene, start * extrinsic, end * extrinsic, model, seed, task);
    f.stamp = trajectory.samples[j].stamp;
    f.sensor_id = task % 2 == 0 ? SensorId::A : SensorId::B;
    (task % 2 == 0 ? data.frames_a : data.frames_b)[j] = std::move(f);
  });
  for (std::size_t j = 0; j < n; ++j) {
    if (data.frames_a[j].empty()) throw EmptyFrame("frame " + std::to_string(j) + " of A has no returns");
    if (data.frames_b[j].empty()) throw EmptyFrame("frame " + std::to_string(j) + " of B has no returns");
  }
  data.meta = {
      {"scene", scene.name},
      {"seed", std::to_string(seed)},
      {"frames", std::to_string(n)},
      {"model.beams", std::to_string(model.beams)},
      {"model.vertical_fov", fmt_double(model.vertical_fov_deg)},
      {"model.horizontal_res", fmt_double(model.horizontal_res_deg)},
      {"model.max_range", fmt_double(model.max_range)},
      {"model.range_sigma", fmt_double(model.range_sigma)},
      {"model.scan_period", fmt_double(model.scan_period)},
  };
  return data;
}

Pose perturb(const Pose& pose, double max_trans, double max_rot_deg, std::uint64_t seed) {
  if (!(max_trans >= 0.0) || !(max_rot_deg >= 0.0)) throw InvalidParams("perturb bounds must be >= 0");
  RandomStream rng(seed, 0x7065727475726221ULL);
  const Vec3 dt(rng.uniform(-max_trans, max_trans), rng.uniform(-max_trans, max_trans),
                rng.uniform(-max_trans, max_trans));
  const Vec3 axis = rng.unit_vector();
  const double angle = rng.uniform(0.0, deg2rad(max_rot_deg));
  return {pose.rotation * exp_so3(axis * angle), pose.translation + dt};
}

Trajectory add_trajectory_noise(const Trajectory& traj, double sigma_trans, double sigma_rot,
                                std::uint64_t seed, bool keep_first) {
  if (!(sigma_trans >= 0.0) || !(sigma_rot >= 0.0)) throw InvalidParams("noise sigma must be >= 0");
  Trajectory out = traj;
  RandomStream rng(seed, 0x6e6f697365ULL);
  for (std::size_t j = 0; j < out.size(); ++j) {
    Twist xi;
    for (int k = 0; k < 3; ++k) xi.rot[k] = rng.normal(0.0, sigma_rot);
    for (int k = 0; k < 3; ++k) xi.trans[k] = rng.normal(0.0, sigma_trans);
    if (keep_first && j == 0) continue;
    out.samples[j].pose = out.samples[j].pose * exp_se3(xi);
  }
  return out;
}

void write_dataset(const Dataset& data, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "A", ec);
  if (!data.frames_b.empty()) fs::create_directories(dir / "B", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t j = 0; j < data.frames_a.size(); ++j) save_cloud(data.frames_a[j], dir / "A" / frame_name(j));
  for (std::size_t j = 0; j < data.frames_b.size(); ++j) save_cloud(data.frames_b[j], dir / "B" / frame_name(j));
  save_trajectory(data.trajectory, dir / "trajectory_gt.txt");
  if (data.extrinsic) write_text(dir / "extrinsic_gt.txt", format_pose_line(0.0, *data.extrinsic) + "\n");
  if (data.motion_a) save_trajectory(*data.motion_a, dir / "motion_A.txt");
  std::ostringstream meta;
  for (const auto& [k, v] : data.meta) meta << k << '=' << v << '\n';
  write_text(dir / "meta.txt", meta.str());
}

Dataset load_dataset(const fs::path& dir) {
  Dataset data;
  const fs::path traj = dir / "trajectory_gt.txt";
  if (!fs::exists(traj)) throw IoError("missing trajectory file " + traj.string());
  data.trajectory = load_trajectory(traj);
  data.frames_a = load_frames(dir / "A", SensorId::A, data.trajectory);
  if (fs::exists(dir / "B")) data.frames_b = load_frames(dir / "B", SensorId::B, data.trajectory);
  const fs::path ext = dir / "extrinsic_gt.txt";
  if (fs::exists(ext)) {
    const Trajectory t = load_trajectory(ext);
    if (t.size() != 1) throw ParseError(ext.string(), 1, "expected a single pose line");
    data.extrinsic = t.pose(0);
  }
  const fs::path motion = dir / "motion_A.txt";
  if (fs::exists(motion)) {
    data.motion_a = load_trajectory(motion);
    if (data.motion_a->size() != data.trajectory.size()) {
      throw ParseError(motion.string(), 1, "motion log length differs from the trajectory");
    }
  }
  std::ifstream meta(dir / "meta.txt");
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) data.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  for (const auto& [key, value] : data.meta) {
    if (key != "model.scan_period") continue;
    double period = 0.0;
    try {
      period = std::stod(value);
    } catch (const std::exception&) {
      throw ParseError((dir / "meta.txt").string(), 1, "bad model.scan_period '" + value + "'");
    }
    for (auto& f : data.frames_a) f.scan_duration = period;
    for (auto& f : data.frames_b) f.scan_duration = period;
  }
  return data;
}

}  // namespace dlc
