#include "doctest.h"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <set>

#include "dlc/errors.hpp"
#include "dlc/lba.hpp"
#include "dlc/random.hpp"
#include "dlc/simulator.hpp"

using namespace dlc;

namespace {

struct Sequence {
  std::vector<Frame> frames;  // motion compensated
  std::vector<Pose> truth;
};

Sequence simulate(SceneKind scene, std::size_t frames, double sigma, double leaf = 0.0) {
  TrajectorySpec spec;
  spec.frames = frames;
  const Trajectory gt = make_trajectory(spec);
  LidarModel model;
  model.range_sigma = sigma;
  const Dataset data = generate_dataset(builtin_scene(scene), gt, Pose::identity(), model, 11, 1);
  Sequence seq;
  for (std::size_t j = 0; j < frames; ++j) {
    Frame f = deskew(data.frames_a[j], Pose::identity(), data.motion_a->pose(j));
    seq.frames.push_back(leaf > 0.0 ? voxel_downsample(f, leaf) : std::move(f));
    seq.truth.push_back(gt.pose(j));
  }
  return seq;
}

Frame as_frame(const std::vector<Vec3>& pts) {
  Frame f;
  for (const auto& p : pts) f.points.push_back({p, 0.0, {}});
  return f;
}

// Smallest covariance eigenvalue times count: squared distances to the best plane.
double best_plane_cost(const std::vector<Vec3>& pts) {
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
  return Eigen::SelfAdjointEigenSolver<Mat3>(cov).eigenvalues()[0];
}

// A few planes observed by every frame of a small window, in local coordinates.
PlaneGroups random_groups(const std::vector<Pose>& poses, RandomStream& rng, double noise) {
  PlaneGroups groups;
  for (int g = 0; g < 6; ++g) {
    const Vec3 n = rng.unit_vector();
    const Vec3 e1 = n.unitOrthogonal(), e2 = n.cross(e1);
    const Vec3 origin(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    std::vector<std::pair<std::uint32_t, Vec3>> members;
    for (std::uint32_t f = 0; f < poses.size(); ++f) {
      for (int k = 0; k < 8; ++k) {
        const Vec3 x = origin + e1 * rng.uniform(-1, 1) + e2 * rng.uniform(-1, 1) + n * rng.normal(0.0, noise);
        members.emplace_back(f, poses[f].inverse() * x);
      }
    }
    groups.add(members);
  }
  return groups;
}

std::vector<Pose> random_poses(std::size_t w, RandomStream& rng) {
  std::vector<Pose> poses;
  for (std::size_t i = 0; i < w; ++i) {
    Vec6 xi;
    for (int k = 0; k < 6; ++k) xi[k] = rng.uniform(-0.3, 0.3);
    poses.push_back(exp_se3(Twist::from_vector(xi)));
  }
  return poses;
}

double mean_translation_error(const std::vector<Pose>& a, const std::vector<Pose>& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += translation_error(a[i], b[i]);
  return sum / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("plan_windows worked examples") {
  const WindowPlan p = plan_windows(100, 20, 10);
  CHECK(p.o == 5);
  CHECK(p.count() == 19);
  CHECK(p.windows[1].first == 5);  // frame 6 in 1-based numbering

  const WindowPlan single = plan_windows(10, 20, 10);
  REQUIRE(single.count() == 1);
  CHECK(single.windows[0] == std::pair<std::size_t, std::size_t>{0, 9});

  const WindowPlan three = plan_windows(20, 20, 10);
  CHECK(three.count() == 3);
  std::set<std::size_t> covered;
  for (const auto& [s, e] : three.windows)
    for (std::size_t j = s; j <= e; ++j) covered.insert(j);
  CHECK(covered.size() == 20);
}

TEST_CASE("plan_windows rejects bad steps") {
  CHECK_THROWS_AS(plan_windows(50, 20, 7), InvalidParams);
  CHECK_THROWS_AS(plan_windows(50, 20, 22), InvalidParams);
  CHECK_THROWS_AS(plan_windows(50, 20, 0), InvalidParams);
  CHECK_THROWS_AS(plan_windows(0, 20, 10), InvalidParams);
}

TEST_CASE("plan_windows invariants over a parameter grid") {
  for (std::size_t n = 1; n <= 60; ++n) {
    for (std::size_t w = 2; w <= 24; ++w) {
      for (std::size_t d = 2; d <= w; d += 2) {
        const WindowPlan p = plan_windows(n, w, d);
        const std::size_t stride = d - d / 2;
        const std::size_t expect = n > d ? (n - d + stride - 1) / stride + 1 : 1;
        REQUIRE(p.count() == expect);
        std::vector<int> hits(n, 0);
        for (std::size_t m = 0; m < p.count(); ++m) {
          const auto [s, e] = p.windows[m];
          REQUIRE(s == m * stride);
          REQUIRE(e == std::min(s + w, n) - 1);
          for (std::size_t j = s; j <= e; ++j) ++hits[j];
        }
        REQUIRE(std::all_of(hits.begin(), hits.end(), [](int h) { return h > 0; }));
        REQUIRE(p.windows.back().second == n - 1);
      }
    }
  }
}

TEST_CASE("cost vanishes when every group is coplanar") {
  RandomStream rng(5);
  const auto poses = random_poses(4, rng);
  const PlaneGroups groups = random_groups(poses, rng, 0.0);
  const CostTerms t = point_to_plane_cost(poses, groups);
  CHECK(t.cost < 1e-20);
  CHECK(t.gradient.size() == 18);
  CHECK(t.hessian.rows() == 18);
  CHECK(t.gradient.norm() < 1e-9);
}

TEST_CASE("cost of one off-plane point matches the best-plane oracle") {
  std::vector<Vec3> pts;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) pts.emplace_back(i * 0.2, j * 0.2, 0.0);
  pts.emplace_back(0.4, 0.4, 0.2);
  std::vector<std::pair<std::uint32_t, Vec3>> members;
  for (std::size_t i = 0; i < pts.size(); ++i) members.emplace_back(i + 1 < pts.size() ? 0u : 1u, pts[i]);
  PlaneGroups groups;
  groups.add(members);
  const std::vector<Pose> poses{Pose::identity(), Pose::identity()};
  const CostTerms t = point_to_plane_cost(poses, groups);
  CHECK(t.cost == doctest::Approx(best_plane_cost(pts)).epsilon(1e-10));
  // The plane through the centroid stays horizontal: 0.2 m offset, centroid shifted by 0.2/26.
  const double shift = 0.2 / 26.0;
  CHECK(t.cost == doctest::Approx(25 * shift * shift + (0.2 - shift) * (0.2 - shift)).epsilon(1e-10));
}

TEST_CASE("analytic gradient matches central differences") {
  RandomStream rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const auto poses = random_poses(4, rng);
    auto moved = poses;
    for (std::size_t f = 1; f < moved.size(); ++f) {
      Vec6 xi;
      for (int k = 0; k < 6; ++k) xi[k] = rng.normal(0.0, 0.02);
      moved[f] = moved[f] * exp_se3(Twist::from_vector(xi));
    }
    const PlaneGroups groups = random_groups(poses, rng, 0.01);
    const CostTerms t = point_to_plane_cost(moved, groups);
    Eigen::VectorXd fd(t.gradient.size());
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < fd.size(); ++i) {
      const std::size_t f = static_cast<std::size_t>(i / 6) + 1;
      Vec6 e = Vec6::Zero();
      e[i % 6] = h;
      auto plus = moved, minus = moved;
      plus[f] = moved[f] * exp_se3(Twist::from_vector(e));
      minus[f] = moved[f] * exp_se3(Twist::from_vector(-e));
      fd[i] = (point_to_plane_cost(plus, groups, false).cost -
               point_to_plane_cost(minus, groups, false).cost) / (2 * h);
    }
    CHECK((t.gradient - fd).norm() / fd.norm() < 1e-4);
    CHECK((t.hessian - t.hessian.transpose()).norm() < 1e-9 * t.hessian.norm());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t.hessian);
    CHECK(es.eigenvalues().minCoeff() > -1e-9 * es.eigenvalues().maxCoeff());
  }
}

TEST_CASE("cost reduction does not depend on the worker count") {
  RandomStream rng(8);
  const auto poses = random_poses(6, rng);
  PlaneGroups groups;
  for (int rep = 0; rep < 40; ++rep) {
    const PlaneGroups more = random_groups(poses, rng, 0.01);
    for (std::size_t g = 0; g < more.size(); ++g) {
      std::vector<std::pair<std::uint32_t, Vec3>> m;
      for (auto k = more.offset[g]; k < more.offset[g + 1]; ++k) m.emplace_back(more.frame[k], more.point[k]);
      groups.add(m);
    }
  }
  const CostTerms one = point_to_plane_cost(poses, groups, true, 1);
  const CostTerms four = point_to_plane_cost(poses, groups, true, 4);
  CHECK(std::abs(one.cost - four.cost) <= 1e-10 * one.cost);
  CHECK((one.gradient - four.gradient).norm() <= 1e-10 * one.gradient.norm());
  CHECK((one.hessian - four.hessian).norm() <= 1e-10 * one.hessian.norm());
}

TEST_CASE("ground truth is a fixed point on noise-free frames") {
  const Sequence seq = simulate(SceneKind::Room, 6, 0.0);
  LbaParams params;
  const WindowResult r = optimize_window(seq.frames, seq.truth, {}, params);
  for (std::size_t j = 0; j < seq.truth.size(); ++j) {
    CHECK(translation_error(r.refined_poses[j], seq.truth[j]) < 1e-6);
    CHECK(rotation_error(r.refined_poses[j], seq.truth[j]) < 1e-6);
  }
  CHECK(r.final_cost <= r.initial_cost);
}

TEST_CASE("two identical frames keep an identity relative pose") {
  const Sequence seq = simulate(SceneKind::Room, 2, 0.01, 0.2);
  const std::vector<Frame> frames{seq.frames[0], seq.frames[0]};
  const std::vector<Pose> init{seq.truth[0], seq.truth[0]};
  const WindowResult r = optimize_window(frames, init, {}, LbaParams{});
  REQUIRE(r.relative_poses.size() == 1);
  CHECK(translation_error(r.relative_poses[0], Pose::identity()) < 1e-9);
  CHECK(rotation_error(r.relative_poses[0], Pose::identity()) < 1e-9);
}

TEST_CASE("perturbed corridor window recovers ground truth") {
  const Sequence seq = simulate(SceneKind::Corridor, 20, 0.0, 0.2);
  std::vector<Pose> init{seq.truth[0]};
  for (std::size_t j = 1; j < seq.truth.size(); ++j) init.push_back(perturb(seq.truth[j], 0.05, 2.0, 100 + j));
  const WindowResult r = optimize_window(seq.frames, init, {}, LbaParams{});
  for (std::size_t j = 0; j < seq.truth.size(); ++j) {
    CHECK(translation_error(r.refined_poses[j], seq.truth[j]) < 0.005);
    CHECK(rotation_error(r.refined_poses[j], seq.truth[j]) < deg2rad(0.1));
  }
  CHECK(r.final_cost <= r.initial_cost);
  for (const auto& trace : r.traces) CHECK(trace.monotone());
  // First pose untouched, relative poses chain back to the refined ones.
  CHECK(r.refined_poses[0].rotation == init[0].rotation);
  CHECK(r.refined_poses[0].translation == init[0].translation);
  Pose chained = r.refined_poses[0];
  for (std::size_t j = 1; j < r.refined_poses.size(); ++j) {
    chained = chained * r.relative_poses[j - 1];
    CHECK(translation_error(chained, r.refined_poses[j]) < 1e-9);
  }
}

TEST_CASE("window refinement is gauge invariant") {
  const Sequence seq = simulate(SceneKind::Room, 8, 0.01, 0.2);
  std::vector<Pose> init{seq.truth[0]};
  for (std::size_t j = 1; j < seq.truth.size(); ++j) init.push_back(perturb(seq.truth[j], 0.03, 1.0, 40 + j));
  const Pose q = euler_zyx_to_pose({0.3, -0.2, 1.1}, Vec3(4.0, -2.0, 0.5));
  std::vector<Pose> moved;
  for (const auto& p : init) moved.push_back(q * p);
  const WindowResult a = optimize_window(seq.frames, init, {}, LbaParams{});
  const WindowResult b = optimize_window(seq.frames, moved, {}, LbaParams{});
  for (std::size_t j = 0; j < init.size(); ++j) {
    CHECK(translation_error(b.refined_poses[j], q * a.refined_poses[j]) < 1e-6);
    CHECK(rotation_error(b.refined_poses[j], q * a.refined_poses[j]) < 1e-6);
  }
}

TEST_CASE("a single visible plane is degenerate") {
  std::vector<Frame> frames;
  std::vector<Pose> poses;
  for (int j = 0; j < 4; ++j) {
    std::vector<Vec3> pts;
    for (int x = 0; x < 40; ++x)
      for (int y = 0; y < 40; ++y) pts.emplace_back(x * 0.1 - 2.0 - 0.05 * j, y * 0.1 - 2.0, -1.5);
    frames.push_back(as_frame(pts));
    poses.push_back(Pose::from_translation({0.05 * j, 0.0, 0.0}));
  }
  CHECK_THROWS_AS(optimize_window(frames, poses, {}, LbaParams{}), DegenerateGeometry);
}

TEST_CASE("single-window run reproduces the ground-truth map") {
  const Sequence seq = simulate(SceneKind::Room, 5, 0.0);
  Trajectory traj;
  for (std::size_t j = 0; j < seq.truth.size(); ++j) traj.samples.push_back({0.1 * j, seq.truth[j]});
  LbaParams params;
  params.downsample_leaf = 0.0;
  const LbaResult r = run_sliding_lba(seq.frames, traj, params);
  REQUIRE(r.windows.size() == 1);
  std::size_t k = 0;
  double worst = 0.0;
  for (std::size_t j = 0; j < seq.frames.size(); ++j) {
    for (const auto& p : seq.frames[j].points) {
      REQUIRE(r.map.source_frame_ids[k] == j);
      worst = std::max(worst, (r.map.points[k] - seq.truth[j] * p.position).norm());
      ++k;
    }
  }
  CHECK(k == r.map.points.size());
  CHECK(worst < 1e-6);
}

TEST_CASE("sliding windows halve the error of a noisy trajectory") {
  TrajectorySpec spec;
  spec.frames = 30;
  const Trajectory gt = make_trajectory(spec);
  LidarModel model;
  const Dataset data = generate_dataset(builtin_scene(SceneKind::Room), gt, Pose::identity(), model, 3, 1);
  std::vector<Frame> frames;
  for (std::size_t j = 0; j < gt.size(); ++j)
    frames.push_back(deskew(data.frames_a[j], Pose::identity(), data.motion_a->pose(j)));
  const Trajectory noisy = add_trajectory_noise(gt, 0.05, 0.0, 17, true);

  const LbaResult r = run_sliding_lba(frames, noisy, LbaParams{});
  const double before = mean_translation_error(noisy.poses(), gt.poses());
  const double after = mean_translation_error(r.trajectory.poses(), gt.poses());
  MESSAGE("mean error " << before << " -> " << after);
  CHECK(after <= 0.5 * before);

  CHECK(r.trajectory.pose(0).rotation == noisy.pose(0).rotation);
  CHECK(r.trajectory.pose(0).translation == noisy.pose(0).translation);
  std::size_t expected_points = 0;
  for (const auto& f : frames) expected_points += voxel_downsample(f, LbaParams{}.downsample_leaf).size();
  CHECK(r.map.points.size() == expected_points);
  for (const auto& w : r.windows) CHECK(w.final_cost <= w.initial_cost);
}

TEST_CASE("overlapping windows agree on noise-free data") {
  const Sequence seq = simulate(SceneKind::Room, 30, 0.0);
  Trajectory traj;
  for (std::size_t j = 0; j < seq.truth.size(); ++j) traj.samples.push_back({0.1 * j, seq.truth[j]});
  const LbaResult r = run_sliding_lba(seq.frames, traj, LbaParams{});
  REQUIRE(r.windows.size() > 1);
  for (std::size_t m = 1; m < r.windows.size(); ++m) {
    CHECK(r.windows[m].overlap_trans < 0.01);
    CHECK(r.windows[m].overlap_rot < deg2rad(0.5));
  }
}

TEST_CASE("degenerate windows are reported with their index") {
  Sequence seq = simulate(SceneKind::Room, 20, 0.0, 0.2);
  // From frame 10 on only the floor remains.
  for (std::size_t j = 10; j < seq.frames.size(); ++j) {
    auto& pts = seq.frames[j].points;
    std::erase_if(pts, [&](const Point& p) { return (seq.truth[j] * p.position).z() > 0.05; });
  }
  Trajectory traj;
  for (std::size_t j = 0; j < seq.truth.size(); ++j) traj.samples.push_back({0.1 * j, seq.truth[j]});
  LbaParams params;
  params.window = 6;
  params.step = 4;
  try {
    run_sliding_lba(seq.frames, traj, params);
    FAIL("expected DegenerateGeometry");
  } catch (const DegenerateGeometry& e) {
    CHECK(e.window() > 0);
    CHECK(std::string(e.what()).find("window " + std::to_string(e.window())) == 0);
  }
}

TEST_CASE("parameter validation") {
  LbaParams p;
  p.step = 3;
  CHECK_THROWS_AS(p.validate(), InvalidParams);
  p = LbaParams{};
  p.coarse_tau_eta = 0.001;
  CHECK_THROWS_AS(p.validate(), InvalidParams);
  p = LbaParams{};
  p.min_plane_frames = 1;
  CHECK_THROWS_AS(p.validate(), InvalidParams);
}
