#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "dlc/errors.hpp"
#include "dlc/extrinsic.hpp"
#include "dlc/pipeline.hpp"
#include "dlc/random.hpp"

using namespace dlc;

namespace {

Pose random_pose(RandomStream& rng, double trans, double rot) {
  Vec6 v;
  for (int i = 0; i < 3; ++i) v[i] = rng.uniform(-rot, rot);
  for (int i = 3; i < 6; ++i) v[i] = rng.uniform(-trans, trans);
  return exp_se3(Twist::from_vector(v));
}

Correspondence random_correspondence(RandomStream& rng) {
  Correspondence c;
  c.point = Vec3(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10));
  c.anchor = random_pose(rng, 5.0, 1.0);
  c.normal = rng.unit_vector();
  c.centroid = Vec3(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
  c.weight = rng.uniform(0.5, 5.0);
  return c;
}

// Scalar evaluation of n . (R_a (R p + t) + t_a - c).
double scalar_residual(const Correspondence& c, const Pose& t) {
  double q[3];
  for (int i = 0; i < 3; ++i) {
    double x = t.translation[i];
    for (int k = 0; k < 3; ++k) x += t.rotation(i, k) * c.point[k];
    q[i] = x;
  }
  double r = 0.0;
  for (int i = 0; i < 3; ++i) {
    double w = c.anchor.translation[i];
    for (int k = 0; k < 3; ++k) w += c.anchor.rotation(i, k) * q[k];
    r += c.normal[i] * (w - c.centroid[i]);
  }
  return r;
}

// Points on the three coordinate planes, observed by B at `truth`.
std::vector<Correspondence> orthogonal_planes(const Pose& truth, RandomStream& rng, double noise) {
  std::vector<Correspondence> out;
  const Pose inv = truth.inverse();
  for (int axis = 0; axis < 3; ++axis) {
    const Vec3 n = Vec3::Unit(axis);
    for (int i = 0; i < 200; ++i) {
      Vec3 q(rng.uniform(0.2, 4.0), rng.uniform(0.2, 4.0), rng.uniform(0.2, 4.0));
      q[axis] = noise > 0.0 ? rng.normal(0.0, noise) : 0.0;
      Correspondence c;
      c.point = inv * q;
      c.normal = n;
      c.centroid = Vec3::Constant(1.0);
      c.centroid[axis] = 0.0;
      c.weight = 1.0 + axis;
      out.push_back(c);
    }
  }
  return out;
}

LmParams tight_lm() {
  LmParams p;
  p.max_iterations = 200;
  p.step_tolerance = 1e-13;
  return p;
}

struct Scenario {
  Dataset data;
  Pose truth;
  VoxelMapIndex map;
  Trajectory motion;
  std::vector<AnchoredFrame> frames;
};

// Room, Config 1 rig, gt trajectory; the map is built from the gt poses.
std::unique_ptr<Scenario> make_scenario(double sigma, std::size_t frames, const Pose& world = {}) {
  auto s = std::make_unique<Scenario>();
  TrajectorySpec spec;
  spec.frames = frames;
  Trajectory gt = make_trajectory(spec);
  LidarModel model;
  model.range_sigma = sigma;
  s->truth = rig_preset(1).pose();
  s->data = generate_dataset(builtin_scene(SceneKind::Room), gt, s->truth, model, 7, 1);
  for (auto& sample : s->data.trajectory.samples) sample.pose = world * sample.pose;
  s->motion = scan_motion(s->data);
  const auto deskewed = deskew_frames(s->data.frames_a, s->motion);
  std::vector<Vec3> pts;
  for (std::size_t j = 0; j < deskewed.size(); ++j) {
    for (const auto& p : voxel_downsample(deskewed[j], 0.2).points)
      pts.push_back(s->data.trajectory.pose(j) * p.position);
  }
  const PipelineConfig cfg;
  s->map = build_reference_index(pts, cfg.voxel, cfg.map_thickness_ratio, cfg.merge);
  s->frames = anchor_frames(s->data.frames_b, s->data.trajectory, s->motion);
  return s;
}

const Scenario& noise_free() {
  static const auto s = make_scenario(0.0, 20);
  return *s;
}

const Scenario& noisy() {
  static const auto s = make_scenario(0.01, 20);
  return *s;
}

CalibConfig serial_config() {
  CalibConfig cfg;
  cfg.jobs = 1;
  return cfg;
}

void check_monotone(const CalibrationResult& r) {
  for (const auto& t : r.lm_traces) CHECK(t.monotone());
  for (const auto& s : r.trace) CHECK(s.objective <= s.objective_before);
}

}  // namespace

TEST_CASE("residual: signed height and translation") {
  Correspondence c;
  c.point = {1, 2, 3};
  c.normal = {0, 0, 1};
  CHECK(residual(c, Pose::identity()) == doctest::Approx(3.0));
  CHECK(residual(c, Pose::from_translation({0, 0, 0.5})) == doctest::Approx(3.5));
}

TEST_CASE("residual matches a scalar evaluation") {
  RandomStream rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Correspondence c = random_correspondence(rng);
    const Pose t = random_pose(rng, 1.0, 3.0);
    CHECK(std::abs(residual(c, t) - scalar_residual(c, t)) < 1e-12);
  }
}

TEST_CASE("global_objective: single term, zero, parallel reduction") {
  Correspondence c;
  c.normal = {0, 0, 1};
  c.point = {0.3, -0.2, 0.1};
  c.weight = 2.0;
  CHECK(global_objective(std::span(&c, 1), Pose::identity()) == doctest::Approx(0.02));
  c.point.z() = 0.0;
  CHECK(global_objective(std::span(&c, 1), Pose::identity()) == 0.0);

  RandomStream rng(2);
  std::vector<Correspondence> corr;
  for (int i = 0; i < 1000; ++i) corr.push_back(random_correspondence(rng));
  const Pose t = random_pose(rng, 0.5, 0.5);
  double sequential = 0.0;
  for (const auto& x : corr) sequential += x.weight * std::pow(scalar_residual(x, t), 2);
  CHECK(std::abs(global_objective(corr, t, 4) - sequential) < 1e-10 * std::max(1.0, sequential));
  CHECK(global_objective(corr, t, 4) == global_objective(corr, t, 4));
}

TEST_CASE("jacobian_row matches central differences") {
  RandomStream rng(3);
  const double h = 1e-6;
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Correspondence c = random_correspondence(rng);
    const Pose t = random_pose(rng, 1.0, 3.0);
    const Vec6 analytic = jacobian_row(c, t);
    Vec6 numeric;
    for (int k = 0; k < 6; ++k) {
      Vec6 e = Vec6::Zero();
      e[k] = h;
      numeric[k] = (residual(c, t * exp_se3(Twist::from_vector(e))) -
                    residual(c, t * exp_se3(Twist::from_vector(-e)))) / (2 * h);
    }
    worst = std::max(worst, (analytic - numeric).norm() / std::max(1.0, analytic.norm()));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("jacobian_row structure") {
  Correspondence c;
  c.normal = {0, 0, 1};
  c.point = {1, 2, 0};
  const Vec6 row = jacobian_row(c, Pose::identity());
  CHECK(row.tail<3>().isApprox(Vec3(0, 0, 1)));
  c.point = Vec3::Zero();
  RandomStream rng(4);
  CHECK(jacobian_row(c, random_pose(rng, 1.0, 1.0)).head<3>().norm() == 0.0);
}

TEST_CASE("lm_solve: fixed point and three orthogonal planes") {
  RandomStream rng(5);
  const Pose truth = exp_se3(Twist::from_vector((Vec6() << 0.1, -0.2, 0.3, 0.5, -0.4, 0.2).finished()));
  const auto corr = orthogonal_planes(truth, rng, 0.0);

  const LmSolution at_truth = lm_solve(corr, truth, LmParams{});
  CHECK(translation_error(at_truth.pose, truth) < 1e-12);
  CHECK(at_truth.trace.objective.front() < 1e-24);

  const Pose init = truth * exp_se3(Twist{Vec3(0, 0, deg2rad(5.0)), Vec3(0.1, 0, 0)});
  const LmSolution s = lm_solve(corr, init, tight_lm());
  CHECK(translation_error(s.pose, truth) < 1e-6);
  CHECK(rotation_error(s.pose, truth) < 1e-6);
  CHECK(s.trace.monotone());
  CHECK(s.trace.objective.size() > 1);
}

TEST_CASE("lm_solve: a single wall is unobservable") {
  RandomStream rng(6);
  auto corr = orthogonal_planes(Pose::identity(), rng, 0.0);
  corr.resize(200);
  CHECK_THROWS_AS(lm_solve(corr, Pose::identity(), LmParams{}), Unobservable);
}

TEST_CASE("lm_solve: common weight scale leaves the minimizer unchanged") {
  RandomStream rng(7);
  const Pose truth = random_pose(rng, 0.3, 0.2);
  auto corr = orthogonal_planes(truth, rng, 0.01);
  const Pose init = truth * random_pose(rng, 0.05, 0.05);
  const LmSolution a = lm_solve(corr, init, tight_lm());
  for (auto& c : corr) c.weight *= 7.0;
  const LmSolution b = lm_solve(corr, init, tight_lm());
  CHECK(translation_error(a.pose, b.pose) < 1e-9);
  CHECK(rotation_error(a.pose, b.pose) < 1e-9);
  CHECK(b.trace.objective.back() == doctest::Approx(7.0 * a.trace.objective.back()).epsilon(1e-9));
}

TEST_CASE("lm_solve: rejected steps keep the iterate") {
  RandomStream rng(8);
  const Pose truth = random_pose(rng, 0.3, 0.2);
  const auto corr = orthogonal_planes(truth, rng, 0.02);
  LmParams p = tight_lm();
  p.initial_damping = 0.0;
  const LmSolution s = lm_solve(corr, truth * random_pose(rng, 0.2, 0.3), p);
  CHECK(s.trace.monotone());
  CHECK(s.trace.objective.size() == static_cast<std::size_t>(s.trace.iterations - s.trace.rejected + 1));
  CHECK(global_objective(corr, s.pose) == doctest::Approx(s.trace.objective.back()).epsilon(1e-12));
}

TEST_CASE("config validation and reject schedule") {
  CalibConfig cfg;
  CHECK(cfg.reject_dist(0) == doctest::Approx(2.0));
  CHECK(cfg.reject_dist(4) == doctest::Approx(0.1));
  CHECK(cfg.reject_dist(20) == doctest::Approx(0.1));
  for (int i = 1; i < 5; ++i) {
    CHECK(cfg.reject_dist(i) < cfg.reject_dist(i - 1));
    CHECK(cfg.reject_dist(i) / cfg.reject_dist(i - 1) == doctest::Approx(std::pow(0.05, 0.25)));
  }
  cfg.reject_initial = 0.5;
  CHECK(cfg.reject_dist(2) == doctest::Approx(std::sqrt(0.5 * 0.1)));
  cfg.max_outer_iters = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidParams);
  cfg = {};
  cfg.delta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidParams);
}

TEST_CASE("calibrate: ground truth is a fixed point") {
  const Scenario& s = noise_free();
  const CalibrationResult r = calibrate(s.map, s.frames, s.truth, serial_config());
  CHECK(r.converged);
  CHECK(r.iterations == 1);
  const CalibErrors e = evaluate(r.extrinsic, s.truth);
  CHECK(e.trans < 1e-6);
  CHECK(e.rot < 1e-6);
}

TEST_CASE("calibrate: zero-residual certificate from a perturbed guess") {
  const Scenario& s = noise_free();
  const CalibrationResult r = calibrate(s.map, s.frames, perturb(s.truth, 0.3, 20.0, 1), serial_config());
  CHECK(r.converged);
  const CalibErrors e = evaluate(r.extrinsic, s.truth);
  CHECK(e.trans < 1e-9);
  CHECK(e.rot < 1e-9);
  CHECK(r.trace.back().objective < 1e-18);
  check_monotone(r);
}

TEST_CASE("calibrate: noisy ranges from 0.3 m / 20 deg") {
  const Scenario& s = noisy();
  const CalibrationResult r = calibrate(s.map, s.frames, perturb(s.truth, 0.3, 20.0, 1), serial_config());
  const CalibErrors e = evaluate(r.extrinsic, s.truth);
  CHECK(r.converged);
  CHECK(e.trans <= 0.01);
  CHECK(e.rot <= 0.01);
  check_monotone(r);
}

TEST_CASE("calibrate: perturbation sweep") {
  const Scenario& s = noisy();
  for (std::uint64_t seed = 10; seed < 14; ++seed) {
    CAPTURE(seed);
    const CalibrationResult r = calibrate(s.map, s.frames, perturb(s.truth, 0.4, 30.0, seed), serial_config());
    CHECK(r.converged);
    CHECK(r.trace.back().objective < 0.01 * r.trace.front().objective_before);
    check_monotone(r);
  }
}

TEST_CASE("calibrate: worker count does not change the result") {
  const Scenario& s = noisy();
  CalibConfig cfg = serial_config();
  cfg.max_outer_iters = 3;
  const Pose guess = perturb(s.truth, 0.1, 5.0, 2);
  const CalibrationResult a = calibrate(s.map, s.frames, guess, cfg);
  cfg.jobs = 3;
  const CalibrationResult b = calibrate(s.map, s.frames, guess, cfg);
  CHECK(a.extrinsic.translation == b.extrinsic.translation);
  CHECK(a.extrinsic.rotation == b.extrinsic.rotation);
}

TEST_CASE("calibrate: rigid motion of the world leaves the extrinsic unchanged") {
  const Pose q = exp_se3(Twist::from_vector((Vec6() << 0.2, -0.1, 0.7, 3.0, -2.0, 0.5).finished()));
  const auto moved = make_scenario(0.0, 20, q);
  const Scenario& s = noise_free();
  const Pose guess = perturb(s.truth, 0.2, 10.0, 3);
  const CalibrationResult a = calibrate(s.map, s.frames, guess, serial_config());
  const CalibrationResult b = calibrate(moved->map, moved->frames, guess, serial_config());
  CHECK(translation_error(a.extrinsic, b.extrinsic) < 1e-6);
  CHECK(rotation_error(a.extrinsic, b.extrinsic) < 1e-6);
}

TEST_CASE("calibrate: frame stride and local results") {
  const Scenario& s = noise_free();
  CalibConfig cfg = serial_config();
  cfg.frame_stride = 4;
  const CalibrationResult r = calibrate(s.map, s.frames, s.truth, cfg);
  REQUIRE(r.local.size() == s.frames.size());
  for (std::size_t j = 0; j < r.local.size(); ++j) {
    if (j % 4 != 0) CHECK_FALSE(r.local[j].has_value());
  }
  CHECK(r.trace.front().frames_used <= 5);
}

TEST_CASE("calibrate: failures") {
  const Scenario& s = noise_free();
  std::vector<Vec3> far;
  RandomStream rng(9);
  for (int i = 0; i < 2000; ++i) far.push_back(Vec3(rng.uniform(100, 104), rng.uniform(100, 104), 100.0));
  const VoxelMapIndex far_map = build_adaptive(far, VoxelParams{});
  CHECK_THROWS_AS(calibrate(far_map, s.frames, s.truth, serial_config()), NoCorrespondences);

  std::vector<Vec3> floor;
  for (int i = 0; i < 20000; ++i) floor.push_back(Vec3(rng.uniform(-6, 6), rng.uniform(-6, 6), 0.0));
  const VoxelMapIndex floor_map = build_adaptive(floor, VoxelParams{});
  // Without scan motion every frame sees the floor under one rotation.
  std::vector<AnchoredFrame> still = s.frames;
  for (auto& f : still) f.motion = Pose::identity();
  try {
    calibrate(floor_map, still, s.truth, serial_config());
    FAIL("expected Unobservable");
  } catch (const Unobservable& e) {
    CHECK_FALSE(e.frames().empty());
  }

  CHECK_THROWS_AS(calibrate(s.map, {}, s.truth, serial_config()), NoCorrespondences);
}

TEST_CASE("evaluate") {
  const Pose truth = exp_se3(Twist::from_vector((Vec6() << 0.1, 0.2, 0.3, 1, 2, 3).finished()));
  CalibErrors e = evaluate(truth, truth);
  CHECK(e.trans == 0.0);
  CHECK(e.rot == 0.0);
  Pose est = truth;
  est.translation += Vec3(0.005, 0, 0);
  CHECK(evaluate(est, truth).trans == doctest::Approx(0.005).epsilon(1e-12));
  est = truth;
  est.rotation = truth.rotation * rot_z(deg2rad(0.2));
  CHECK(evaluate(est, truth).rot == doctest::Approx(deg2rad(0.2)).epsilon(1e-9));
}

TEST_CASE("write_report") {
  const auto dir = std::filesystem::temp_directory_path() / "dlc_test_report";
  std::filesystem::remove_all(dir);
  CalibrationResult r;
  r.extrinsic = Pose::from_translation({0.005, 0, 0});
  r.trace.push_back({1, 2.0, 1.5, 0.01, 3, 100, false});
  r.trace.push_back({2, 1.5, 1.0, 0.001, 3, 100, true});
  write_report(r, Pose::identity(), dir);

  std::ifstream trace(dir / "trace.csv");
  std::string line;
  std::getline(trace, line);
  CHECK(line == "iter,objective,update_norm,frames_used");
  std::getline(trace, line);
  CHECK(line == "1,1.5,0.01,3");
  const Trajectory t = load_trajectory(dir / "calibration.txt");
  REQUIRE(t.size() == 1);
  CHECK(t.pose(0).translation.isApprox(Vec3(0.005, 0, 0)));
  std::ifstream errors(dir / "errors.txt");
  std::stringstream ss;
  ss << errors.rdbuf();
  CHECK(ss.str().find("e_trans=0.005") != std::string::npos);

  std::filesystem::remove(dir / "errors.txt");
  write_report(r, std::nullopt, dir);
  CHECK_FALSE(std::filesystem::exists(dir / "errors.txt"));
  std::filesystem::remove_all(dir);
}
