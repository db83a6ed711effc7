#include "dlc/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "dlc/errors.hpp"
#include "dlc/parallel.hpp"

namespace fs = std::filesystem;

namespace dlc {

namespace {

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) throw ConfigError(key, "cannot parse '" + text + "'");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ConfigError(key, "value must be finite");
  }
  return value;
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + text + "'");
}

std::string scene_name(SceneKind k) {
  switch (k) {
    case SceneKind::Room: return "room";
    case SceneKind::Corridor: return "corridor";
    case SceneKind::Yard: return "yard";
  }
  return "room";
}

std::string trajectory_name(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::Line: return "line";
    case TrajectoryKind::Arc: return "arc";
    case TrajectoryKind::Lissajous: return "lissajous";
  }
  return "lissajous";
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field number(std::string key, T& (*ref)(RunConfig&)) {
  return {key,
          [key, ref](RunConfig& c, const std::string& v) { ref(c) = parse_number<T>(key, v); },
          [ref](const RunConfig& c) {
            const T v = ref(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) return format_number(v);
            else return std::to_string(v);
          }};
}

Field flag(std::string key, bool& (*ref)(RunConfig&)) {
  return {key, [key, ref](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

Field degrees(std::string key, double& (*ref)(RunConfig&)) {
  return {key, [key, ref](RunConfig& c, const std::string& v) { ref(c) = deg2rad(parse_number<double>(key, v)); },
          [ref](const RunConfig& c) { return format_number(rad2deg(ref(const_cast<RunConfig&>(c)))); }};
}

// Explicit rig components; setting any of them replaces the preset.
Field rig_component(std::string key, double RigConfig::*member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) {
            auto& sim = c.simulator;
            if (!sim.rig) sim.rig = rig_preset(sim.rig_preset);
            (*sim.rig).*member = parse_number<double>(key, v);
          },
          [member](const RunConfig& c) {
            const auto& sim = c.simulator;
            return format_number((sim.rig ? *sim.rig : rig_preset(sim.rig_preset)).*member);
          }};
}

#define DLC_REF(T, expr) +[](RunConfig& c) -> T& { return expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      // lba
      number("lba.window", DLC_REF(std::size_t, c.pipeline.lba.window)),
      number("lba.step", DLC_REF(std::size_t, c.pipeline.lba.step)),
      flag("lba.enabled", DLC_REF(bool, c.pipeline.run_lba)),
      number("lba.tau_eta", DLC_REF(double, c.pipeline.lba.voxel.tau_eta)),
      number("lba.coarse_tau_eta", DLC_REF(double, c.pipeline.lba.coarse_tau_eta)),
      number("lba.l_parent", DLC_REF(double, c.pipeline.lba.voxel.l_parent)),
      number("lba.max_depth", DLC_REF(int, c.pipeline.lba.voxel.max_depth)),
      number("lba.min_points", DLC_REF(std::size_t, c.pipeline.lba.voxel.min_points)),
      number("lba.thick_ratio", DLC_REF(double, c.pipeline.lba.thick_ratio)),
      number("lba.min_plane_frames", DLC_REF(std::size_t, c.pipeline.lba.min_plane_frames)),
      number("lba.max_rounds", DLC_REF(int, c.pipeline.lba.max_rounds)),
      number("lba.round_tolerance", DLC_REF(double, c.pipeline.lba.round_tolerance)),
      number("lba.overlap_weight", DLC_REF(double, c.pipeline.lba.overlap_weight)),
      number("lba.downsample_leaf", DLC_REF(double, c.pipeline.lba.downsample_leaf)),
      number("lba.lm_damping", DLC_REF(double, c.pipeline.lba.lm.initial_damping)),
      number("lba.lm_max_iters", DLC_REF(int, c.pipeline.lba.lm.max_iterations)),
      number("lba.lm_tolerance", DLC_REF(double, c.pipeline.lba.lm.step_tolerance)),
      // voxel (reference map)
      number("voxel.l_parent", DLC_REF(double, c.pipeline.voxel.l_parent)),
      number("voxel.tau_eta", DLC_REF(double, c.pipeline.voxel.tau_eta)),
      number("voxel.max_depth", DLC_REF(int, c.pipeline.voxel.max_depth)),
      number("voxel.min_points", DLC_REF(std::size_t, c.pipeline.voxel.min_points)),
      number("voxel.gamma", DLC_REF(double, c.pipeline.voxel.gamma)),
      degrees("voxel.tau_theta_deg", DLC_REF(double, c.pipeline.voxel.tau_theta)),
      number("voxel.tau_d", DLC_REF(double, c.pipeline.voxel.tau_d)),
      number("voxel.thickness_floor", DLC_REF(double, c.pipeline.voxel.thickness_floor)),
      number("voxel.thickness_ratio", DLC_REF(double, c.pipeline.map_thickness_ratio)),
      flag("voxel.merge", DLC_REF(bool, c.pipeline.merge)),
      // calib
      number("calib.max_outer_iters", DLC_REF(int, c.pipeline.calib.max_outer_iters)),
      number("calib.delta", DLC_REF(double, c.pipeline.calib.delta)),
      number("calib.lm_damping", DLC_REF(double, c.pipeline.calib.lm.initial_damping)),
      number("calib.lm_damping_up", DLC_REF(double, c.pipeline.calib.lm.damping_up)),
      number("calib.lm_damping_down", DLC_REF(double, c.pipeline.calib.lm.damping_down)),
      number("calib.lm_max_iters", DLC_REF(int, c.pipeline.calib.lm.max_iterations)),
      number("calib.lm_tolerance", DLC_REF(double, c.pipeline.calib.lm.step_tolerance)),
      number("calib.frame_stride", DLC_REF(std::size_t, c.pipeline.calib.frame_stride)),
      number("calib.point_stride", DLC_REF(std::size_t, c.pipeline.calib.point_stride)),
      number("calib.reject_initial", DLC_REF(double, c.pipeline.calib.reject_initial)),
      number("calib.reject_final", DLC_REF(double, c.pipeline.calib.reject_final)),
      number("calib.reject_shrink_iters", DLC_REF(int, c.pipeline.calib.reject_shrink_iters)),
      number("calib.outlier_factor", DLC_REF(double, c.pipeline.calib.outlier_factor)),
      flag("calib.information_weighted", DLC_REF(bool, c.pipeline.calib.information_weighted)),
      number("calib.trim_factor", DLC_REF(double, c.pipeline.calib.trim_factor)),
      number("calib.trim_floor", DLC_REF(double, c.pipeline.calib.trim_floor)),
      number("calib.min_correspondences", DLC_REF(std::size_t, c.pipeline.calib.min_correspondences)),
      number("calib.max_points_per_plane", DLC_REF(std::size_t, c.pipeline.calib.max_points_per_plane)),
      // simulator
      {"simulator.scene",
       [](RunConfig& c, const std::string& v) {
         try {
           c.simulator.scene = parse_scene_kind(v);
         } catch (const InvalidParams& e) {
           throw ConfigError("simulator.scene", e.what());
         }
       },
       [](const RunConfig& c) { return scene_name(c.simulator.scene); }},
      {"simulator.trajectory",
       [](RunConfig& c, const std::string& v) {
         try {
           c.simulator.trajectory.kind = parse_trajectory_kind(v);
         } catch (const InvalidParams& e) {
           throw ConfigError("simulator.trajectory", e.what());
         }
       },
       [](const RunConfig& c) { return trajectory_name(c.simulator.trajectory.kind); }},
      number("simulator.frames", DLC_REF(std::size_t, c.simulator.trajectory.frames)),
      number("simulator.length", DLC_REF(double, c.simulator.trajectory.length)),
      degrees("simulator.arc_angle_deg", DLC_REF(double, c.simulator.trajectory.arc_angle)),
      number("simulator.period", DLC_REF(double, c.simulator.trajectory.period)),
      number("simulator.height", DLC_REF(double, c.simulator.trajectory.origin.translation.z())),
      number("simulator.beams", DLC_REF(int, c.simulator.model.beams)),
      number("simulator.vertical_fov_deg", DLC_REF(double, c.simulator.model.vertical_fov_deg)),
      number("simulator.horizontal_res_deg", DLC_REF(double, c.simulator.model.horizontal_res_deg)),
      number("simulator.max_range", DLC_REF(double, c.simulator.model.max_range)),
      number("simulator.range_sigma", DLC_REF(double, c.simulator.model.range_sigma)),
      number("simulator.scan_period", DLC_REF(double, c.simulator.model.scan_period)),
      {"simulator.rig",
       [](RunConfig& c, const std::string& v) {
         const int preset = parse_number<int>("simulator.rig", v);
         if (preset < 1 || preset > 5) throw ConfigError("simulator.rig", "preset must be 1-5");
         c.simulator.rig_preset = preset;
         c.simulator.rig.reset();
       },
       [](const RunConfig& c) { return std::to_string(c.simulator.rig_preset); }},
      rig_component("simulator.rig_x", &RigConfig::x),
      rig_component("simulator.rig_y", &RigConfig::y),
      rig_component("simulator.rig_z", &RigConfig::z),
      rig_component("simulator.rig_roll", &RigConfig::roll),
      rig_component("simulator.rig_pitch", &RigConfig::pitch),
      rig_component("simulator.rig_yaw", &RigConfig::yaw),
      number("simulator.seed", DLC_REF(std::uint64_t, c.simulator.seed)),
      number("simulator.odom_sigma_trans", DLC_REF(double, c.simulator.odom_sigma_trans)),
      number("simulator.odom_sigma_rot_deg", DLC_REF(double, c.simulator.odom_sigma_rot_deg)),
      // sweep
      number("sweep.perturb_trans", DLC_REF(double, c.perturb_trans)),
      number("sweep.perturb_rot_deg", DLC_REF(double, c.perturb_rot_deg)),
  };
  return table;
}

#undef DLC_REF

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError(key, "unknown key");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

Pose load_single_pose(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing pose file " + path.string());
  const Trajectory t = load_trajectory(path);
  if (t.empty()) throw ParseError(path.string(), 1, "no pose line");
  return t.pose(0);
}

double mean_translation_error(const Trajectory& a, const Trajectory& b) {
  double sum = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) sum += translation_error(a.pose(j), b.pose(j));
  return a.empty() ? 0.0 : sum / static_cast<double>(a.size());
}

Trajectory odometry_for(const SimulatorConfig& sim, const Trajectory& gt, std::uint64_t seed) {
  if (sim.odom_sigma_trans <= 0.0 && sim.odom_sigma_rot_deg <= 0.0) return gt;
  return add_trajectory_noise(gt, sim.odom_sigma_trans, deg2rad(sim.odom_sigma_rot_deg), seed ^ 0x6f646f6dULL,
                              true);
}

Dataset simulate_dataset(const RunConfig& cfg, std::uint64_t seed, std::size_t jobs) {
  const SimulatorConfig& sim = cfg.simulator;
  return generate_dataset(builtin_scene(sim.scene), make_trajectory(sim.trajectory), sim.extrinsic(), sim.model,
                          seed, jobs);
}

// Map points in A's world from motion-compensated, downsampled A frames.
std::vector<Vec3> map_from_trajectory(const Dataset& data, const Trajectory& traj, double leaf) {
  const auto frames = deskew_frames(data.frames_a, scan_motion(data));
  std::vector<Vec3> pts;
  for (std::size_t j = 0; j < frames.size(); ++j) {
    const Frame f = leaf > 0.0 ? voxel_downsample(frames[j], leaf) : frames[j];
    for (const auto& p : f.points) pts.push_back(traj.pose(j) * p.position);
  }
  return pts;
}

struct Context {
  RunConfig cfg;
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t jobs = 0;
  bool jobs_set = false;
  std::size_t stride = 0;
  std::vector<double> perturb;

  // Config file, then --set overrides, then dedicated flags.
  void resolve() {
    if (!config_path.empty()) cfg = load_run_config(config_path);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError(o, "expected key=value");
      cfg.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
    }
    if (seed_set) cfg.simulator.seed = seed;
    if (jobs_set) cfg.set_jobs(jobs);
    if (stride > 0) cfg.pipeline.calib.frame_stride = stride;
    if (perturb.size() == 2) {
      cfg.perturb_trans = perturb[0];
      cfg.perturb_rot_deg = perturb[1];
    }
    cfg.validate();
  }
};

int cmd_simulate(Context& ctx, const fs::path& out_dir, std::ostream& out) {
  ctx.resolve();
  const RunConfig& cfg = ctx.cfg;
  const Dataset data = simulate_dataset(cfg, cfg.simulator.seed, cfg.pipeline.calib.jobs);
  write_dataset(data, out_dir);
  if (cfg.simulator.odom_sigma_trans > 0.0 || cfg.simulator.odom_sigma_rot_deg > 0.0)
    save_trajectory(odometry_for(cfg.simulator, data.trajectory, cfg.simulator.seed), out_dir / "trajectory_odom.txt");
  write_text(out_dir / "config.txt", cfg.dump());
  std::size_t na = 0, nb = 0;
  for (const auto& f : data.frames_a) na += f.size();
  for (const auto& f : data.frames_b) nb += f.size();
  out << "frames " << data.frames_a.size() << "  points A " << na << "  points B " << nb << '\n'
      << "wrote " << out_dir.string() << '\n';
  return kOk;
}

int cmd_lba(Context& ctx, const fs::path& dataset_dir, const std::string& traj_path, const fs::path& out_dir,
            std::ostream& out) {
  ctx.resolve();
  const RunConfig& cfg = ctx.cfg;
  const Dataset data = load_dataset(dataset_dir);
  const Trajectory input = traj_path.empty() ? data.trajectory : load_trajectory(traj_path);
  if (input.size() != data.frames_a.size())
    throw ConfigError("trajectory", "has " + std::to_string(input.size()) + " poses for " +
                                        std::to_string(data.frames_a.size()) + " frames");
  const auto frames = deskew_frames(data.frames_a, scan_motion(data));
  const LbaResult result = run_sliding_lba(frames, input, cfg.pipeline.lba);
  ensure_dir(out_dir);
  save_trajectory(result.trajectory, out_dir / "trajectory_refined.txt");
  Frame map;
  for (const auto& p : result.map.points) map.points.push_back({p, 0.0, {}});
  save_cloud(map, out_dir / "map_A.pcd");
  write_text(out_dir / "config.txt", cfg.dump());

  out << std::setprecision(6);
  out << "window  first  last  planes  initial_cost  final_cost  overlap_trans  overlap_rot\n";
  for (std::size_t w = 0; w < result.windows.size(); ++w) {
    const auto& r = result.windows[w];
    out << w << "  " << r.first << "  " << r.last << "  " << r.planes << "  " << r.initial_cost << "  "
        << r.final_cost << "  " << r.overlap_trans << "  " << r.overlap_rot << '\n';
  }
  out << "mean pose error before " << mean_translation_error(input, data.trajectory) << " m, after "
      << mean_translation_error(result.trajectory, data.trajectory) << " m\n";
  return kOk;
}

int cmd_calibrate(Context& ctx, const fs::path& dataset_dir, const std::string& map_path,
                  const std::string& traj_path, const std::string& guess_text, const fs::path& out_dir,
                  std::ostream& out) {
  ctx.resolve();
  const RunConfig& cfg = ctx.cfg;
  const Dataset data = load_dataset(dataset_dir);
  const Trajectory traj = traj_path.empty() ? data.trajectory : load_trajectory(traj_path);
  if (traj.size() != data.frames_b.size())
    throw ConfigError("trajectory", "has " + std::to_string(traj.size()) + " poses for " +
                                        std::to_string(data.frames_b.size()) + " B frames");

  Pose guess;
  if (!guess_text.empty()) {
    guess = fs::exists(guess_text) ? load_single_pose(guess_text) : parse_pose_line(guess_text, "--guess").pose;
  } else if (ctx.perturb.size() == 2) {
    if (!data.extrinsic) throw ConfigError("--perturb", "dataset has no extrinsic_gt.txt to perturb");
    guess = perturb(*data.extrinsic, cfg.perturb_trans, cfg.perturb_rot_deg, cfg.simulator.seed);
  } else {
    throw ConfigError("--guess", "either --guess or --perturb is required");
  }

  std::vector<Vec3> points;
  if (!map_path.empty()) {
    if (!fs::exists(map_path)) throw IoError("missing map file " + map_path);
    for (const auto& p : load_cloud(map_path).points) points.push_back(p.position);
  } else {
    points = map_from_trajectory(data, traj, cfg.pipeline.lba.downsample_leaf);
  }
  const VoxelMapIndex index =
      build_reference_index(points, cfg.pipeline.voxel, cfg.pipeline.map_thickness_ratio, cfg.pipeline.merge);
  const auto anchored = anchor_frames(data.frames_b, traj, scan_motion(data));
  const CalibrationResult result = calibrate(index, anchored, guess, cfg.pipeline.calib);

  write_report(result, data.extrinsic, out_dir);
  write_text(out_dir / "config.txt", cfg.dump());
  out << std::setprecision(9);
  out << "T_B^A " << format_pose_line(0.0, result.extrinsic) << '\n'
      << "outer iterations " << result.iterations << (result.converged ? " (converged)" : " (not converged)")
      << '\n';
  if (!result.skipped_frames.empty()) out << "unobservable frames skipped " << result.skipped_frames.size() << '\n';
  if (data.extrinsic) {
    const CalibErrors e = evaluate(result.extrinsic, *data.extrinsic);
    out << "e_trans " << e.trans << " m\ne_rot " << e.rot << " rad\n";
  }
  return kOk;
}

int cmd_evaluate(const std::vector<std::string>& files, bool csv, const std::string& self_check,
                 std::ostream& out) {
  out << std::setprecision(12);
  if (!self_check.empty()) {
    const Dataset data = load_dataset(self_check);
    double worst = 0.0;
    if (data.extrinsic) {
      const CalibErrors e = evaluate(*data.extrinsic, *data.extrinsic);
      worst = std::max({worst, e.trans, e.rot});
    }
    for (std::size_t j = 0; j < data.trajectory.size(); ++j)
      worst = std::max(worst, translation_error(data.trajectory.pose(j), data.trajectory.pose(j)));
    out << "self-check e_trans 0 e_rot 0 worst " << worst << '\n';
    return worst == 0.0 ? kOk : kConfigError;
  }
  if (files.size() < 2) throw ConfigError("evaluate", "expected estimate file(s) followed by the ground-truth file");
  const Pose truth = load_single_pose(files.back());
  const std::size_t n = files.size() - 1;
  if (!csv && n == 1) {
    const CalibErrors e = evaluate(load_single_pose(files[0]), truth);
    out << "e_trans " << e.trans << " m\ne_rot " << e.rot << " rad\ne_rot " << rad2deg(e.rot) << " deg\n";
    return kOk;
  }
  out << "file,e_trans,e_rot,e_rot_deg\n";
  double st = 0.0, sr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const CalibErrors e = evaluate(load_single_pose(files[i]), truth);
    st += e.trans;
    sr += e.rot;
    out << files[i] << ',' << e.trans << ',' << e.rot << ',' << rad2deg(e.rot) << '\n';
  }
  out << "mean," << st / n << ',' << sr / n << ',' << rad2deg(sr / n) << '\n';
  return kOk;
}

void write_sweep_row(std::ostream& out, const SweepRow& r, bool timing) {
  out << r.trial << ',' << r.seed << ',' << r.init_e_trans << ',' << r.init_e_rot << ',' << r.final_e_trans << ','
      << r.final_e_rot << ',' << r.outer_iters << ',' << (timing ? r.wall_seconds : 0.0) << ',' << r.status << '\n';
}

int cmd_sweep(Context& ctx, std::size_t trials, const fs::path& out_csv, bool timing, std::ostream& out) {
  ctx.resolve();
  if (trials < 1) throw ConfigError("--trials", "must be >= 1");
  RunConfig cfg = ctx.cfg;
  const std::size_t workers = (cfg.pipeline.calib.jobs == 0 ? default_jobs() : cfg.pipeline.calib.jobs);
  const std::size_t trial_workers = std::min(workers, trials);
  // Parallel trials run their inner stages serially.
  if (trial_workers > 1) cfg.set_jobs(1);

  fs::path trial_root = out_csv;
  trial_root += ".trials";
  ensure_dir(trial_root);
  write_text(trial_root / "config.txt", cfg.dump());

  std::vector<SweepRow> rows(trials);
  parallel_for(trials, trial_workers, [&](std::size_t i) {
    const std::uint64_t seed = cfg.simulator.seed + i;
    std::ostringstream name;
    name << "trial_" << std::setw(3) << std::setfill('0') << i;
    rows[i] = run_trial(cfg, i, seed, trial_root / name.str());
  });

  std::ofstream csv(out_csv);
  if (!csv) throw IoError("cannot write " + out_csv.string());
  csv << std::setprecision(10);
  csv << "trial,seed,init_e_trans,init_e_rot,final_e_trans,final_e_rot,outer_iters,wall_seconds,status\n";
  SweepRow mean;
  std::size_t ok = 0;
  double iters = 0.0;
  for (const auto& r : rows) {
    write_sweep_row(csv, r, timing);
    if (r.status != "ok") continue;
    ++ok;
    mean.init_e_trans += r.init_e_trans;
    mean.init_e_rot += r.init_e_rot;
    mean.final_e_trans += r.final_e_trans;
    mean.final_e_rot += r.final_e_rot;
    iters += r.outer_iters;
    mean.wall_seconds += r.wall_seconds;
  }
  const double k = ok > 0 ? static_cast<double>(ok) : std::nan("");
  csv << "mean,," << mean.init_e_trans / k << ',' << mean.init_e_rot / k << ',' << mean.final_e_trans / k << ','
      << mean.final_e_rot / k << ',' << iters / k << ',' << (timing ? mean.wall_seconds / k : 0.0) << ',' << ok
      << '/' << trials << '\n';
  if (!csv) throw IoError("failed writing " + out_csv.string());

  out << std::setprecision(6) << "trials " << trials << "  succeeded " << ok << "  mean e_trans "
      << mean.final_e_trans / k << " m  mean e_rot " << mean.final_e_rot / k << " rad  mean outer iters "
      << iters / k << '\n';
  return 10 * ok >= 9 * trials ? kOk : kSweepFailures;
}

}  // namespace

Pose SimulatorConfig::extrinsic() const { return (rig ? *rig : dlc::rig_preset(rig_preset)).pose(); }

void RunConfig::set(const std::string& key, const std::string& value) { find_field(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return find_field(key).get(*this); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void RunConfig::validate() const {
  const auto check = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const InvalidParams& e) {
      throw ConfigError(section, e.what());
    }
  };
  check("lba", [&] { pipeline.lba.validate(); });
  check("voxel", [&] { pipeline.voxel.validate(); });
  check("calib", [&] { pipeline.calib.validate(); });
  check("simulator", [&] {
    simulator.model.validate();
    if (simulator.trajectory.frames < 2) throw InvalidParams("simulator.frames must be >= 2");
    if (!(simulator.trajectory.length > 0.0)) throw InvalidParams("simulator.length must be > 0");
    if (!(simulator.trajectory.period > 0.0)) throw InvalidParams("simulator.period must be > 0");
  });
  if (!(pipeline.map_thickness_ratio >= 0.0)) throw ConfigError("voxel.thickness_ratio", "must be >= 0");
  if (simulator.odom_sigma_trans < 0.0 || simulator.odom_sigma_rot_deg < 0.0)
    throw ConfigError("simulator.odom_sigma", "must be >= 0");
  if (!(perturb_trans >= 0.0) || !(perturb_rot_deg >= 0.0 && perturb_rot_deg < 180.0))
    throw ConfigError("sweep.perturb", "need trans >= 0 and rotation in [0, 180) deg");
}

void RunConfig::set_jobs(std::size_t jobs) {
  pipeline.lba.jobs = jobs;
  pipeline.calib.jobs = jobs;
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + '\n';
  return out;
}

void parse_run_config(std::istream& in, RunConfig& cfg, const std::string& source) {
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(n), "expected section.key = value");
    cfg.set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  RunConfig cfg;
  parse_run_config(in, cfg, path.string());
  return cfg;
}

SweepRow run_trial(const RunConfig& cfg, std::size_t trial, std::uint64_t seed, const fs::path& trial_dir) {
  SweepRow row;
  row.trial = trial;
  row.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const Dataset data = simulate_dataset(cfg, seed, cfg.pipeline.calib.jobs);
    const Pose truth = *data.extrinsic;
    const Pose guess = perturb(truth, cfg.perturb_trans, cfg.perturb_rot_deg, seed);
    const CalibErrors init = evaluate(guess, truth);
    row.init_e_trans = init.trans;
    row.init_e_rot = init.rot;
    const Trajectory odom = odometry_for(cfg.simulator, data.trajectory, seed);
    const PipelineResult result = run_pipeline(data, odom, guess, cfg.pipeline);
    const CalibErrors fin = evaluate(result.calib.extrinsic, truth);
    row.final_e_trans = fin.trans;
    row.final_e_rot = fin.rot;
    row.outer_iters = result.calib.iterations;
    write_report(result.calib, truth, trial_dir);
    if (!result.calib.converged) row.status = "not_converged";
  } catch (const std::exception& e) {
    std::string what = e.what();
    for (char& c : what)
      if (c == ',' || c == '\n') c = ' ';
    row.status = "failed: " + what;
  }
  row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-LiDAR extrinsic calibration against a bundle-adjusted reference map", "dlc"};
  app.require_subcommand(1);
  Context ctx;
  const auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", ctx.config_path, "section.key = value config file");
    cmd->add_option("--set", ctx.overrides, "override one config key (key=value)");
    cmd->add_option("--jobs", ctx.jobs, "worker threads (0 = hardware)")->each([&](const std::string&) {
      ctx.jobs_set = true;
    });
  };

  std::string out_dir, dataset, traj, map, guess;
  std::size_t trials = 10;
  bool no_timing = false, csv = false;
  std::vector<std::string> files;
  std::string self_check;

  auto* sim = app.add_subcommand("simulate", "generate a synthetic dual-LiDAR dataset");
  common(sim);
  sim->add_option("--out", out_dir, "dataset directory")->required();
  sim->add_option("--seed", ctx.seed)->each([&](const std::string&) { ctx.seed_set = true; });

  auto* lba = app.add_subcommand("lba", "refine LiDAR A's trajectory and write the reference map");
  common(lba);
  lba->add_option("dataset", dataset)->required();
  lba->add_option("--trajectory", traj, "initial trajectory (default: the dataset's)");
  lba->add_option("--out", out_dir)->required();

  auto* cal = app.add_subcommand("calibrate", "estimate the pose of LiDAR B in LiDAR A's frame");
  common(cal);
  cal->add_option("dataset", dataset)->required();
  cal->add_option("--map", map, "reference map PCD (default: built from the trajectory)");
  cal->add_option("--trajectory", traj, "LiDAR A trajectory (default: the dataset's)");
  cal->add_option("--guess", guess, "initial pose: file or 'stamp tx ty tz qx qy qz qw'");
  cal->add_option("--perturb", ctx.perturb, "perturb the ground truth: T_M ROT_DEG")->expected(2);
  cal->add_option("--seed", ctx.seed)->each([&](const std::string&) { ctx.seed_set = true; });
  cal->add_option("--stride", ctx.stride, "use every N-th B frame");
  cal->add_option("--out", out_dir)->required();

  auto* ev = app.add_subcommand("evaluate", "errors of estimate pose file(s) against a ground-truth file");
  ev->add_option("files", files, "EST [EST...] GT");
  ev->add_flag("--csv", csv, "one CSV row per estimate plus a mean row");
  ev->add_option("--self-check", self_check, "dataset directory: ground truth against itself");

  auto* sw = app.add_subcommand("sweep", "repeated simulate -> lba -> calibrate trials");
  common(sw);
  sw->add_option("--trials", trials)->required();
  sw->add_option("--out", out_dir, "CSV path")->required();
  sw->add_option("--seed", ctx.seed)->each([&](const std::string&) { ctx.seed_set = true; });
  sw->add_option("--perturb", ctx.perturb, "initial-guess envelope: T_M ROT_DEG")->expected(2);
  sw->add_option("--stride", ctx.stride, "use every N-th B frame");
  sw->add_flag("--no-timing", no_timing, "write 0 for wall_seconds so reruns are byte-identical");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*sim) return cmd_simulate(ctx, out_dir, out);
    if (*lba) return cmd_lba(ctx, dataset, traj, out_dir, out);
    if (*cal) return cmd_calibrate(ctx, dataset, map, traj, guess, out_dir, out);
    if (*ev) return cmd_evaluate(files, csv, self_check, out);
    if (*sw) return cmd_sweep(ctx, trials, out_dir, !no_timing, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const InvalidParams& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kConfigError;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const DegenerateGeometry& e) {
    err << "degenerate geometry: " << e.what() << '\n';
    return kLbaDegenerate;
  } catch (const NoCorrespondences& e) {
    err << "no correspondences: " << e.what() << '\n';
    return kNoCorrespondences;
  } catch (const Unobservable& e) {
    err << "unobservable: " << e.what() << '\n';
    return kUnobservable;
  }
  return kOk;
}

}  // namespace dlc
