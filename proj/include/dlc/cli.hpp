// Batch command-line surface: simulate, lba, calibrate, evaluate, sweep.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlc/pipeline.hpp"
#include "dlc/simulator.hpp"

namespace dlc {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct SimulatorConfig {
  SceneKind scene = SceneKind::Room;
  TrajectorySpec trajectory;
  LidarModel model;
  int rig_preset = 1;
  std::optional<RigConfig> rig;  // explicit pose, overrides the preset
  std::uint64_t seed = 7;
  /// Odometry handed to LBA: ground truth plus Gaussian twist noise.
  double odom_sigma_trans = 0.0;
  double odom_sigma_rot_deg = 0.0;

  Pose extrinsic() const;
};

struct RunConfig {
  PipelineConfig pipeline;
  SimulatorConfig simulator;
  double perturb_trans = 0.4;  // sweep initial-guess envelope
  double perturb_rot_deg = 30.0;

  /// Throws ConfigError for unknown keys and unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();
  /// Range checks; throws ConfigError naming the section.
  void validate() const;
  void set_jobs(std::size_t jobs);
  /// Every key as `section.key = value`, in a fixed order.
  std::string dump() const;
};

/// `section.key = value` lines; `#` starts a comment.
RunConfig load_run_config(const std::filesystem::path& path);
void parse_run_config(std::istream& in, RunConfig& cfg, const std::string& source);

enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kIoError = 3,
  kLbaDegenerate = 4,
  kNoCorrespondences = 5,
  kUnobservable = 6,
  kSweepFailures = 7,
};

struct SweepRow {
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  double init_e_trans = 0.0, init_e_rot = 0.0;
  double final_e_trans = 0.0, final_e_rot = 0.0;
  int outer_iters = 0;
  double wall_seconds = 0.0;
  std::string status = "ok";
};

/// One simulate -> lba -> calibrate trial with everything derived from seed.
SweepRow run_trial(const RunConfig& cfg, std::size_t trial, std::uint64_t seed,
                   const std::filesystem::path& trial_dir);

/// Runs the command line; argv[0] is the program name.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dlc
