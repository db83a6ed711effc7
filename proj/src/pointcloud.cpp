#include "dlc/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "dlc/errors.hpp"

namespace dlc {

namespace {

std::string fmt_g(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

bool parse_size(const std::string& s, std::size_t& out) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size() || v < 0) return false;
    out = static_cast<std::size_t>(v);
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

std::vector<Pose> Trajectory::poses() const {
  std::vector<Pose> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.pose);
  return out;
}

std::size_t Trajectory::index_of(double stamp, double tol) const {
  const auto it = std::lower_bound(samples.begin(), samples.end(), stamp - tol,
                                   [](const TrajectorySample& s, double t) { return s.stamp < t; });
  if (it != samples.end() && std::abs(it->stamp - stamp) <= tol) {
    return static_cast<std::size_t>(it - samples.begin());
  }
  throw std::out_of_range("no trajectory sample within " + fmt_g(tol, 3) + " s of stamp " +
                          fmt_g(stamp, 17));
}

void Trajectory::check_monotonic() const {
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (!(samples[i].stamp > samples[i - 1].stamp)) {
      throw NonMonotonicStamps("trajectory stamps not strictly increasing at sample " +
                               std::to_string(i));
    }
  }
}

Frame transform_frame(const Pose& pose, const Frame& f) {
  Frame out = f;
  for (auto& p : out.points) p.position = pose * p.position;
  return out;
}

Frame deskew(const Frame& f, const Pose& pose_start, const Pose& pose_end) {
  if (!(f.scan_duration > 0.0)) {
    throw InvalidParams("deskew requires a positive scan duration");
  }
  const Twist motion = log_se3(pose_start.inverse() * pose_end);
  Frame out = f;
  if (motion.vector().isZero(0.0)) return out;
  for (auto& p : out.points) {
    const double s = p.time_offset / f.scan_duration;
    p.position = exp_se3(motion * s) * p.position;
  }
  return out;
}

Frame voxel_downsample(const Frame& f, double leaf) {
  if (!(leaf > 0.0)) throw InvalidParams("voxel_downsample leaf must be positive");
  struct Cell {
    Vec3 sum = Vec3::Zero();
    double time = 0.0;
    double intensity = 0.0;
    std::size_t count = 0;
    bool has_intensity = false;
  };
  using Key = std::tuple<std::int64_t, std::int64_t, std::int64_t>;
  std::map<Key, Cell> cells;
  for (const auto& p : f.points) {
    const Key key{static_cast<std::int64_t>(std::floor(p.position.x() / leaf)),
                  static_cast<std::int64_t>(std::floor(p.position.y() / leaf)),
                  static_cast<std::int64_t>(std::floor(p.position.z() / leaf))};
    Cell& c = cells[key];
    c.sum += p.position;
    c.time += p.time_offset;
    if (p.intensity) {
      c.intensity += *p.intensity;
      c.has_intensity = true;
    }
    ++c.count;
  }
  Frame out;
  out.stamp = f.stamp;
  out.sensor_id = f.sensor_id;
  out.scan_duration = f.scan_duration;
  out.points.reserve(cells.size());
  for (const auto& [key, c] : cells) {
    Point p;
    const double n = static_cast<double>(c.count);
    p.position = c.count == 1 ? c.sum : Vec3(c.sum / n);
    p.time_offset = c.time / n;
    if (c.has_intensity) p.intensity = static_cast<float>(c.intensity / n);
    out.points.push_back(p);
  }
  return out;
}

Frame load_cloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open cloud file " + path.string());
  const std::string src = path.string();

  const std::vector<std::string> order = {"VERSION", "FIELDS", "SIZE", "TYPE", "COUNT",
                                          "WIDTH",   "HEIGHT", "VIEWPOINT", "POINTS", "DATA"};
  std::vector<std::string> fields;
  std::size_t width = 0, height = 0, count = 0;
  std::size_t line_no = 0;
  std::string line;
  std::size_t expected = 0;
  while (expected < order.size()) {
    if (!std::getline(in, line)) throw ParseError(src, line_no, "truncated PCD header");
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] != order[expected]) {
      throw ParseError(src, line_no, "expected " + order[expected] + ", got " + tok[0]);
    }
    const std::string& key = tok[0];
    const std::vector<std::string> values(tok.begin() + 1, tok.end());
    if (key == "FIELDS") {
      fields = values;
      if (fields.empty()) throw ParseError(src, line_no, "FIELDS is empty");
      for (const auto& name : fields) {
        if (name != "x" && name != "y" && name != "z" && name != "t" && name != "intensity") {
          throw UnsupportedField("unsupported PCD field '" + name + "' in " + src);
        }
      }
      for (const char* req : {"x", "y", "z"}) {
        if (std::find(fields.begin(), fields.end(), req) == fields.end()) {
          throw UnsupportedField(std::string("PCD field '") + req + "' missing in " + src);
        }
      }
    } else if (key == "SIZE" || key == "TYPE" || key == "COUNT") {
      if (values.size() != fields.size()) {
        throw ParseError(src, line_no, key + " has " + std::to_string(values.size()) +
                                           " entries for " + std::to_string(fields.size()) +
                                           " fields");
      }
      for (const auto& v : values) {
        if (key == "TYPE" && v != "F") throw UnsupportedField("PCD TYPE " + v + " in " + src);
        if (key == "COUNT" && v != "1") throw UnsupportedField("PCD COUNT " + v + " in " + src);
        if (key == "SIZE" && v != "4" && v != "8") {
          throw UnsupportedField("PCD SIZE " + v + " in " + src);
        }
      }
    } else if (key == "WIDTH" || key == "HEIGHT" || key == "POINTS") {
      std::size_t v = 0;
      if (values.size() != 1 || !parse_size(values[0], v)) {
        throw ParseError(src, line_no, "bad " + key + " value");
      }
      (key == "WIDTH" ? width : key == "HEIGHT" ? height : count) = v;
    } else if (key == "DATA") {
      if (values.size() != 1) throw ParseError(src, line_no, "bad DATA line");
      if (values[0] != "ascii") throw UnsupportedField("PCD DATA " + values[0] + " in " + src);
    }
    ++expected;
  }
  if (width * height != count) {
    throw ParseError(src, line_no, "WIDTH * HEIGHT does not match POINTS");
  }

  const auto col = [&](const char* name) -> std::ptrdiff_t {
    const auto it = std::find(fields.begin(), fields.end(), name);
    return it == fields.end() ? -1 : it - fields.begin();
  };
  const std::ptrdiff_t ix = col("x"), iy = col("y"), iz = col("z"), it = col("t"),
                       ii = col("intensity");

  Frame frame;
  frame.points.reserve(count);
  while (frame.points.size() < count) {
    if (!std::getline(in, line)) {
      throw ParseError(src, line_no, "expected " + std::to_string(count) + " points, found " +
                                         std::to_string(frame.points.size()));
    }
    ++line_no;
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != fields.size()) {
      throw ParseError(src, line_no, "expected " + std::to_string(fields.size()) + " values");
    }
    std::vector<double> v(tok.size());
    for (std::size_t k = 0; k < tok.size(); ++k) {
      if (!parse_double(tok[k], v[k]) || !std::isfinite(v[k])) {
        throw ParseError(src, line_no, "bad number '" + tok[k] + "'");
      }
    }
    Point p;
    p.position = {v[ix], v[iy], v[iz]};
    if (it >= 0) {
      if (v[it] < 0.0) throw ParseError(src, line_no, "negative time offset");
      p.time_offset = v[it];
    }
    if (ii >= 0) p.intensity = static_cast<float>(v[ii]);
    frame.points.push_back(p);
    frame.scan_duration = std::max(frame.scan_duration, p.time_offset);
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (!split_ws(line).empty()) throw ParseError(src, line_no, "more data rows than POINTS");
  }
  return frame;
}

void save_cloud(const Frame& f, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write cloud file " + path.string());
  const bool with_intensity =
      std::any_of(f.points.begin(), f.points.end(), [](const Point& p) { return p.intensity; });
  const std::size_t n = f.points.size();
  out << "VERSION .7\n";
  if (with_intensity) {
    out << "FIELDS x y z t intensity\nSIZE 4 4 4 4 4\nTYPE F F F F F\nCOUNT 1 1 1 1 1\n";
  } else {
    out << "FIELDS x y z t\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\n";
  }
  out << "WIDTH " << n << "\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS " << n << "\nDATA ascii\n";
  std::string row;
  for (const auto& p : f.points) {
    row = fmt_g(p.position.x(), 9) + ' ' + fmt_g(p.position.y(), 9) + ' ' +
          fmt_g(p.position.z(), 9) + ' ' + fmt_g(p.time_offset, 9);
    if (with_intensity) row += ' ' + fmt_g(p.intensity.value_or(0.0f), 9);
    out << row << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::string format_pose_line(double stamp, const Pose& pose) {
  const Eigen::Quaterniond q = to_quaternion(pose.rotation);
  std::string s = fmt_g(stamp, 17);
  for (double v : {pose.translation.x(), pose.translation.y(), pose.translation.z(), q.x(), q.y(),
                   q.z(), q.w()}) {
    s += ' ';
    s += fmt_g(v, 17);
  }
  return s;
}

TrajectorySample parse_pose_line(const std::string& line, const std::string& source,
                                 std::size_t line_no) {
  const auto tok = split_ws(line);
  if (tok.size() != 8) {
    throw ParseError(source, line_no, "expected 8 values (stamp tx ty tz qx qy qz qw)");
  }
  double v[8];
  for (std::size_t k = 0; k < 8; ++k) {
    if (!parse_double(tok[k], v[k]) || !std::isfinite(v[k])) {
      throw ParseError(source, line_no, "bad number '" + tok[k] + "'");
    }
  }
  const double qn = std::sqrt(v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]);
  if (std::abs(qn - 1.0) > 1e-3) throw ParseError(source, line_no, "quaternion is not unit");
  TrajectorySample s;
  s.stamp = v[0];
  s.pose.translation = {v[1], v[2], v[3]};
  s.pose.rotation = from_quaternion(v[4], v[5], v[6], v[7]);
  return s;
}

Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trajectory file " + path.string());
  Trajectory traj;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    traj.samples.push_back(parse_pose_line(line, path.string(), line_no));
  }
  traj.check_monotonic();
  return traj;
}

void save_trajectory(const Trajectory& traj, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write trajectory file " + path.string());
  out << "# stamp tx ty tz qx qy qz qw\n";
  for (const auto& s : traj.samples) out << format_pose_line(s.stamp, s.pose) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace dlc
