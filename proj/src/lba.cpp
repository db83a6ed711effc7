#include "dlc/lba.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "dlc/errors.hpp"
#include "dlc/parallel.hpp"

namespace dlc {

namespace {

using PoseList = std::vector<Pose>;

constexpr std::size_t kGroupGrain = 64;
constexpr double kThicknessFloor = 1e-6;

// Plane of one group at the given poses plus each member's world position.
struct GroupFit {
  Vec3 normal;
  Vec3 centroid;
};

GroupFit fit_group(std::span<const Pose> poses, const PlaneGroups& g, std::size_t i,
                   std::vector<Vec3>& world) {
  const std::uint32_t b = g.offset[i], e = g.offset[i + 1];
  world.resize(e - b);
  Vec3 mean = Vec3::Zero();
  for (std::uint32_t k = b; k < e; ++k) {
    world[k - b] = poses[g.frame[k]] * g.point[k];
    mean += world[k - b];
  }
  mean /= static_cast<double>(e - b);
  Mat3 cov = Mat3::Zero();
  for (const auto& x : world) cov.noalias() += (x - mean) * (x - mean).transpose();
  const Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  return {es.eigenvectors().col(0).normalized(), mean};
}

struct Accumulator {
  double cost = 0.0;
  Eigen::VectorXd g;
  Eigen::MatrixXd h;
};

Pose perturbed(const Pose& p, const Eigen::Ref<const Vec6>& delta) {
  return p * exp_se3(Twist::from_vector(delta));
}

void add_prior(CostTerms& t, std::span<const Pose> poses, std::span<const Pose> prior,
               double weight, bool derivatives) {
  for (std::size_t k = 1; k < prior.size(); ++k) {
    const Vec6 e = log_se3(prior[k].inverse() * poses[k]).vector();
    t.cost += weight * e.squaredNorm();
    if (derivatives) {
      const auto at = static_cast<Eigen::Index>(6 * (k - 1));
      t.gradient.segment<6>(at) += 2.0 * weight * e;
      t.hessian.block<6, 6>(at, at).diagonal().array() += 2.0 * weight;
    }
  }
}

std::string window_message(const std::string& what, std::size_t index) {
  return "window " + std::to_string(index) + ": " + what;
}

}  // namespace

WindowPlan plan_windows(std::size_t n, std::size_t w, std::size_t d) {
  if (n == 0) throw InvalidParams("plan_windows: n must be >= 1");
  if (w < 2) throw InvalidParams("plan_windows: window size must be >= 2");
  if (d == 0 || d % 2 != 0) throw InvalidParams("plan_windows: step must be even and positive");
  if (d > w) throw InvalidParams("plan_windows: step must not exceed the window size");
  WindowPlan plan;
  plan.n = n;
  plan.w = w;
  plan.d = d;
  plan.o = d / 2;
  const std::size_t stride = d - plan.o;
  const std::size_t k = n > d ? (n - d + stride - 1) / stride + 1 : 1;
  for (std::size_t m = 0; m < k; ++m) {
    const std::size_t start = m * stride;
    plan.windows.emplace_back(start, std::min(start + w, n) - 1);
  }
  return plan;
}

void LbaParams::validate() const {
  if (step == 0 || step % 2 != 0 || step > window || window < 2)
    throw InvalidParams("lba: need window >= 2 and an even step <= window");
  voxel.validate();
  if (!(coarse_tau_eta >= voxel.tau_eta)) throw InvalidParams("lba.coarse_tau_eta must be >= voxel.tau_eta");
  if (min_plane_frames < 2) throw InvalidParams("lba.min_plane_frames must be >= 2");
  if (!(thick_ratio >= 0.0)) throw InvalidParams("lba.thick_ratio must be >= 0");
  if (max_rounds < 1) throw InvalidParams("lba.max_rounds must be >= 1");
  if (!(round_tolerance > 0.0)) throw InvalidParams("lba.round_tolerance must be > 0");
  if (!(overlap_weight >= 0.0)) throw InvalidParams("lba.overlap_weight must be >= 0");
  if (!(downsample_leaf >= 0.0)) throw InvalidParams("lba.downsample_leaf must be >= 0");
  lm.validate();
}

VoxelParams LbaParams::default_voxel() {
  VoxelParams v;
  v.tau_eta = 0.01;
  return v;
}

void PlaneGroups::add(std::span<const std::pair<std::uint32_t, Vec3>> group) {
  for (const auto& [f, p] : group) {
    frame.push_back(f);
    point.push_back(p);
  }
  offset.push_back(static_cast<std::uint32_t>(frame.size()));
}

CostTerms point_to_plane_cost(std::span<const Pose> poses, const PlaneGroups& groups,
                              bool derivatives, std::size_t jobs) {
  const std::size_t w = poses.size();
  const auto dim = static_cast<Eigen::Index>(w > 0 ? 6 * (w - 1) : 0);
  Accumulator zero;
  if (derivatives) {
    zero.g = Eigen::VectorXd::Zero(dim);
    zero.h = Eigen::MatrixXd::Zero(dim, dim);
  }
  struct Scratch {
    std::vector<Vec3> world;
    std::vector<std::uint32_t> frames;
    std::vector<Vec6> sum;       // per frame in the group: sum of member rows
    std::vector<Mat6> outer;     // per frame: sum of row * row^T
    std::vector<int> slot;       // window frame -> position in `frames`, or -1
  };
  Accumulator total = chunked_reduce(
      groups.size(), jobs, zero,
      [&](Accumulator& acc, std::size_t i) {
        thread_local Scratch s;
        const GroupFit fit = fit_group(poses, groups, i, s.world);
        const std::uint32_t b = groups.offset[i], e = groups.offset[i + 1];
        double cost = 0.0;
        for (const auto& x : s.world) {
          const double r = fit.normal.dot(x - fit.centroid);
          cost += r * r;
        }
        acc.cost += cost;
        if (!derivatives) return;

        // Row of member k: d(n^T x_k) / d(right perturbation of its frame).
        // The centroid couples every member, giving H = sum a a^T - N abar abar^T.
        s.slot.assign(w, -1);
        s.frames.clear();
        s.sum.clear();
        s.outer.clear();
        for (std::uint32_t k = b; k < e; ++k) {
          const std::uint32_t f = groups.frame[k];
          if (f == 0) continue;
          if (s.slot[f] < 0) {
            s.slot[f] = static_cast<int>(s.frames.size());
            s.frames.push_back(f);
            s.sum.push_back(Vec6::Zero());
            s.outer.push_back(Mat6::Zero());
          }
          const Vec3 m = poses[f].rotation.transpose() * fit.normal;
          Vec6 a;
          a << groups.point[k].cross(m), m;
          const double r = fit.normal.dot(s.world[k - b] - fit.centroid);
          const auto at = static_cast<Eigen::Index>(6 * (f - 1));
          acc.g.segment<6>(at) += 2.0 * r * a;
          const auto sl = static_cast<std::size_t>(s.slot[f]);
          s.sum[sl] += a;
          s.outer[sl].noalias() += a * a.transpose();
        }
        const double inv_n = 1.0 / static_cast<double>(e - b);
        for (std::size_t p = 0; p < s.frames.size(); ++p) {
          const auto ip = static_cast<Eigen::Index>(6 * (s.frames[p] - 1));
          acc.h.block<6, 6>(ip, ip) += 2.0 * s.outer[p];
          for (std::size_t q = 0; q < s.frames.size(); ++q) {
            const auto iq = static_cast<Eigen::Index>(6 * (s.frames[q] - 1));
            acc.h.block<6, 6>(ip, iq).noalias() -= (2.0 * inv_n) * s.sum[p] * s.sum[q].transpose();
          }
        }
      },
      [derivatives](Accumulator& into, const Accumulator& part) {
        into.cost += part.cost;
        if (derivatives) {
          into.g += part.g;
          into.h += part.h;
        }
      },
      kGroupGrain);
  CostTerms out;
  out.cost = total.cost;
  out.gradient = std::move(total.g);
  out.hessian = std::move(total.h);
  return out;
}

PlaneGroups associate_window(std::span<const std::vector<Vec3>> frames,
                             std::span<const Pose> poses, const VoxelParams& voxel,
                             std::size_t min_plane_frames, double thick_ratio) {
  // Voxelize relative to the first pose so the grouping ignores the gauge.
  std::vector<Vec3> world;
  std::vector<std::pair<std::uint32_t, Vec3>> member;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const Pose rel = poses[0].inverse() * poses[f];
    for (const auto& p : frames[f]) {
      world.push_back(rel * p);
      member.emplace_back(static_cast<std::uint32_t>(f), p);
    }
  }
  const VoxelMapIndex index = build_adaptive(world, voxel);

  PlaneGroups out;
  std::vector<Vec3> pts;
  std::vector<std::pair<std::uint32_t, Vec3>> group;
  std::vector<bool> seen(frames.size());
  struct Candidate {
    std::vector<std::uint32_t> members;
    double std = 0.0;
  };
  std::vector<Candidate> candidates;
  for (const auto& leaf : index.leaf_planes) {
    const auto& members = index.nodes[leaf.voxel_id].points;
    pts.clear();
    for (const auto i : members) pts.push_back(world[i]);
    candidates.push_back({members, std::sqrt(fit_plane(pts).eigenvalues[0])});
  }

  // Leaves much thicker than is typical for this window straddle two surfaces.
  std::vector<double> stds;
  for (const auto& c : candidates) stds.push_back(c.std);
  double limit = std::numeric_limits<double>::infinity();
  if (thick_ratio > 0.0 && !stds.empty()) {
    std::nth_element(stds.begin(), stds.begin() + stds.size() / 2, stds.end());
    limit = thick_ratio * stds[stds.size() / 2] + kThicknessFloor;
  }
  for (const auto& c : candidates) {
    if (c.std > limit) continue;
    group.clear();
    std::fill(seen.begin(), seen.end(), false);
    std::size_t distinct = 0;
    for (const auto i : c.members) {
      group.push_back(member[i]);
      if (!seen[member[i].first]) {
        seen[member[i].first] = true;
        ++distinct;
      }
    }
    if (distinct >= min_plane_frames) out.add(group);
  }
  return out;
}

WindowResult optimize_window(std::span<const Frame> frames, std::span<const Pose> init_poses,
                             std::span<const Pose> prior, const LbaParams& params) {
  params.validate();
  const std::size_t w = frames.size();
  if (init_poses.size() != w) throw InvalidParams("optimize_window: one initial pose per frame");
  if (prior.size() > w) throw InvalidParams("optimize_window: prior longer than the window");

  PoseList poses(init_poses.begin(), init_poses.end());
  std::copy(prior.begin(), prior.end(), poses.begin());
  const PoseList start = poses;

  WindowResult result;
  if (w < 2) {
    result.refined_poses = poses;
    return result;
  }

  std::vector<std::vector<Vec3>> pts(w);
  for (std::size_t f = 0; f < w; ++f) {
    pts[f].reserve(frames[f].size());
    for (const auto& p : frames[f].points) pts[f].push_back(p.position);
  }

  const double lambda = params.overlap_weight;
  const auto evaluate = [&](const PoseList& ps, const PlaneGroups& g, bool derivs) {
    CostTerms t = point_to_plane_cost(ps, g, derivs, params.jobs);
    add_prior(t, ps, prior, lambda, derivs);
    return t;
  };

  PlaneGroups groups;
  for (int round = 0; round < params.max_rounds; ++round) {
    VoxelParams voxel = params.voxel;
    voxel.tau_eta = std::max(voxel.tau_eta, std::ldexp(params.coarse_tau_eta, -round));
    // The thickness gate waits for the final planarity threshold.
    const bool fine = voxel.tau_eta <= params.voxel.tau_eta;
    groups = associate_window(pts, poses, voxel, params.min_plane_frames,
                              fine ? params.thick_ratio : 0.0);
    if (groups.size() < 6) {
      throw DegenerateGeometry("fewer than 6 shared planes (" + std::to_string(groups.size()) + ")");
    }
    CostTerms t = evaluate(poses, groups, true);
    if (round == 0) {
      const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t.hessian, Eigen::EigenvaluesOnly);
      const double hi = es.eigenvalues().maxCoeff(), lo = es.eigenvalues().minCoeff();
      if (!(hi > 0.0) || lo <= 1e-12 * hi) {
        throw DegenerateGeometry("window poses are not constrained by the available planes");
      }
    }

    const PoseList round_start = poses;
    LmTrace trace;
    trace.objective.push_back(t.cost);
    double mu = params.lm.initial_damping;
    for (int it = 0; it < params.lm.max_iterations; ++it) {
      ++trace.iterations;
      Eigen::MatrixXd a = 0.5 * t.hessian;
      a.diagonal().array() += mu * (1.0 + a.diagonal().array());
      const Eigen::VectorXd step = a.ldlt().solve(-0.5 * t.gradient);
      const double step_norm = step.cwiseAbs().maxCoeff();
      PoseList cand = poses;
      for (std::size_t f = 1; f < w; ++f) {
        cand[f] = perturbed(poses[f], step.segment<6>(static_cast<Eigen::Index>(6 * (f - 1))));
      }
      const double cand_cost = evaluate(cand, groups, false).cost;
      if (cand_cost < t.cost) {
        poses = std::move(cand);
        mu *= params.lm.damping_down;
        t = evaluate(poses, groups, true);
        trace.objective.push_back(t.cost);
      } else {
        mu *= params.lm.damping_up;
        ++trace.rejected;
      }
      if (step_norm < params.lm.step_tolerance) break;
    }
    result.traces.push_back(std::move(trace));

    double moved = 0.0;
    for (std::size_t f = 1; f < w; ++f) {
      moved = std::max(moved, log_se3(round_start[f].inverse() * poses[f]).vector().cwiseAbs().maxCoeff());
    }
    if (moved < params.round_tolerance) break;
  }

  result.planes = groups.size();
  result.initial_cost = evaluate(start, groups, false).cost;
  result.final_cost = evaluate(poses, groups, false).cost;
  // Early rounds optimize over different groups; never end worse than we began.
  if (result.final_cost > result.initial_cost) {
    poses = start;
    result.final_cost = result.initial_cost;
  }
  result.refined_poses = poses;
  for (std::size_t f = 1; f < w; ++f) result.relative_poses.push_back(poses[f - 1].inverse() * poses[f]);
  return result;
}

LbaResult run_sliding_lba(std::span<const Frame> frames, const Trajectory& trajectory,
                          const LbaParams& params) {
  params.validate();
  const std::size_t n = frames.size();
  if (trajectory.size() != n) throw InvalidParams("run_sliding_lba: one trajectory sample per frame");
  if (n == 0) return {};
  const WindowPlan plan = plan_windows(n, params.window, params.step);

  std::vector<Frame> ds(n);
  parallel_for(n, params.jobs, [&](std::size_t j) {
    ds[j] = params.downsample_leaf > 0.0 ? voxel_downsample(frames[j], params.downsample_leaf)
                                         : frames[j];
  });

  PoseList est = trajectory.poses();
  const PoseList input = est;
  std::vector<bool> done(n, false);
  LbaResult out;

  for (std::size_t m = 0; m < plan.count(); ++m) {
    const auto [s, e] = plan.windows[m];
    PoseList init;
    PoseList prior;
    // New frames inherit the correction of the latest estimated frame.
    Pose correction;
    for (std::size_t j = s; j <= e; ++j) {
      if (done[j]) {
        init.push_back(est[j]);
        if (j - s == prior.size()) prior.push_back(est[j]);
        correction = est[j] * input[j].inverse();
      } else {
        init.push_back(correction * input[j]);
      }
    }
    WindowResult r;
    try {
      r = optimize_window(std::span<const Frame>(ds).subspan(s, e - s + 1), init, prior, params);
    } catch (const DegenerateGeometry& err) {
      throw DegenerateGeometry(window_message(err.what(), m), static_cast<std::ptrdiff_t>(m));
    }

    WindowReport rep;
    rep.first = s;
    rep.last = e;
    rep.initial_cost = r.initial_cost;
    rep.final_cost = r.final_cost;
    rep.planes = r.planes;
    for (std::size_t k = 1; k < prior.size(); ++k) {
      rep.overlap_trans = std::max(rep.overlap_trans, translation_error(r.refined_poses[k], prior[k]));
      rep.overlap_rot = std::max(rep.overlap_rot, rotation_error(r.refined_poses[k], prior[k]));
    }
    rep.traces = std::move(r.traces);
    out.windows.push_back(std::move(rep));

    for (std::size_t j = s; j <= e; ++j) {
      est[j] = r.refined_poses[j - s];
      done[j] = true;
    }
  }

  out.trajectory = trajectory;
  for (std::size_t j = 0; j < n; ++j) {
    out.trajectory.samples[j].pose = est[j];
    for (const auto& p : ds[j].points) {
      out.map.points.push_back(est[j] * p.position);
      out.map.source_frame_ids.push_back(static_cast<std::uint32_t>(j));
    }
  }
  return out;
}

}  // namespace dlc
