#include "dlc/extrinsic.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>
#include <unordered_map>

#include "dlc/errors.hpp"
#include "dlc/parallel.hpp"

namespace dlc {

namespace {

constexpr double kMaxCondition = 1e12;

struct Normal {
  double cost = 0.0;
  Mat6 h = Mat6::Zero();
  Vec6 g = Vec6::Zero();
};

Normal accumulate(std::span<const Correspondence> corr, const Pose& t, std::size_t jobs) {
  return chunked_reduce(
      corr.size(), jobs, Normal{},
      [&](Normal& acc, std::size_t i) {
        const Correspondence& c = corr[i];
        const double r = residual(c, t);
        const Vec6 j = jacobian_row(c, t);
        acc.cost += c.weight * r * r;
        acc.g.noalias() += c.weight * r * j;
        acc.h.noalias() += c.weight * j * j.transpose();
      },
      [](Normal& into, const Normal& part) {
        into.cost += part.cost;
        into.g += part.g;
        into.h += part.h;
      });
}

double update_norm(const Pose& from, const Pose& to) {
  const Pose d = from.inverse() * to;
  return d.translation.norm() + 0.5 * rotation_angle(d.rotation);
}

double median(std::vector<double> v) {
  const auto mid = v.begin() + v.size() / 2;
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

// Residual cap from the median absolute deviation over all frames' matches.
double trim_cap(const std::vector<std::vector<Correspondence>>& corr, const Pose& t,
                const CalibConfig& cfg) {
  std::vector<double> r;
  for (const auto& frame : corr)
    for (const auto& c : frame) r.push_back(residual(c, t));
  if (r.empty()) return cfg.trim_floor;
  const double med = median(r);
  for (double& x : r) x = std::abs(x - med);
  return std::max(cfg.trim_factor * 1.4826 * median(r), cfg.trim_floor);
}

void append(std::vector<Correspondence>& into, const std::vector<Correspondence>& more) {
  into.insert(into.end(), more.begin(), more.end());
}

}  // namespace

void CalibConfig::validate() const {
  if (max_outer_iters < 1) throw InvalidParams("calib.max_outer_iters must be >= 1");
  if (!(delta > 0.0)) throw InvalidParams("calib.delta must be > 0");
  if (frame_stride < 1 || point_stride < 1) throw InvalidParams("calib strides must be >= 1");
  if (!(reject_initial > 0.0 && reject_final > 0.0))
    throw InvalidParams("calib reject distances must be > 0");
  if (reject_shrink_iters < 0) throw InvalidParams("calib.reject_shrink_iters must be >= 0");
  if (!(outlier_factor > 0.0)) throw InvalidParams("calib.outlier_factor must be > 0");
  if (!(trim_factor >= 0.0) || !(trim_floor > 0.0))
    throw InvalidParams("calib.trim_factor must be >= 0 and calib.trim_floor > 0");
  if (min_correspondences < 6) throw InvalidParams("calib.min_correspondences must be >= 6");
  lm.validate();
}

double CalibConfig::reject_dist(int outer_iteration) const {
  if (reject_shrink_iters <= 1 || outer_iteration >= reject_shrink_iters - 1) return reject_final;
  const double s = static_cast<double>(outer_iteration) / (reject_shrink_iters - 1);
  return reject_initial * std::pow(reject_final / reject_initial, s);
}

double residual(const Correspondence& c, const Pose& extrinsic) {
  return c.normal.dot(c.anchor * (extrinsic * c.point) - c.centroid);
}

Vec6 jacobian_row(const Correspondence& c, const Pose& extrinsic) {
  const Vec3 m = (c.anchor.rotation * extrinsic.rotation).transpose() * c.normal;
  Vec6 row;
  row << c.point.cross(m), m;
  return row;
}

double global_objective(std::span<const Correspondence> corr, const Pose& extrinsic,
                        std::size_t jobs) {
  return chunked_reduce(
      corr.size(), jobs, 0.0,
      [&](double& acc, std::size_t i) {
        const double r = residual(corr[i], extrinsic);
        acc += corr[i].weight * r * r;
      },
      [](double& into, double part) { into += part; });
}

LmSolution lm_solve(std::span<const Correspondence> corr, const Pose& init, const LmParams& params,
                    std::size_t jobs) {
  params.validate();
  LmSolution out{init, {}};
  Normal n = accumulate(corr, init, jobs);
  {
    const Eigen::SelfAdjointEigenSolver<Mat6> es(n.h, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues()[0], hi = es.eigenvalues()[5];
    if (!(hi > 0.0) || !(lo > 0.0) || hi / lo > kMaxCondition) {
      throw Unobservable("extrinsic is not constrained by the matched planes (condition " +
                         std::to_string(lo > 0.0 ? hi / lo : INFINITY) + ")");
    }
  }
  out.trace.objective.push_back(n.cost);
  double mu = params.initial_damping;
  for (int it = 0; it < params.max_iterations; ++it) {
    ++out.trace.iterations;
    Mat6 a = n.h;
    a.diagonal().array() += mu;
    const Vec6 step = a.ldlt().solve(-n.g);
    const Pose cand = out.pose * exp_se3(Twist::from_vector(step));
    const double cand_cost = global_objective(corr, cand, jobs);
    if (cand_cost < n.cost) {
      out.pose = cand;
      n = accumulate(corr, out.pose, jobs);
      out.trace.objective.push_back(n.cost);
      mu *= params.damping_down;
    } else {
      ++out.trace.rejected;
      mu *= params.damping_up;
    }
    if (step.cwiseAbs().maxCoeff() < params.step_tolerance) break;
  }
  out.information = n.h;
  return out;
}

std::vector<Correspondence> associate_frame(const VoxelMapIndex& map, const AnchoredFrame& frame,
                                            const Pose& extrinsic, double reject_dist,
                                            const CalibConfig& cfg) {
  std::vector<Correspondence> out;
  if (frame.frame == nullptr) return out;
  const Frame& f = *frame.frame;
  const bool moving = f.scan_duration > 0.0 && !log_se3(frame.motion).vector().isZero(0.0);
  const Twist motion = moving ? log_se3(frame.motion) : Twist{};
  std::unordered_map<std::size_t, std::size_t> per_plane;
  for (std::size_t i = 0; i < f.size(); i += cfg.point_stride) {
    const Point& p = f.points[i];
    const Pose anchor =
        moving ? frame.start * exp_se3(motion * (p.time_offset / f.scan_duration)) : frame.start;
    const Vec3 q = anchor * (extrinsic * p.position);
    const auto plane = associate(q, map, reject_dist);
    if (!plane) continue;
    if (cfg.max_points_per_plane > 0 && ++per_plane[*plane] > cfg.max_points_per_plane) continue;
    const PlaneFeature& feat = map.planes[*plane];
    out.push_back({p.position, anchor, feat.normal, feat.centroid, feat.weight,
                   static_cast<std::uint32_t>(*plane)});
  }
  return out;
}

CalibrationResult calibrate(const VoxelMapIndex& map, std::span<const AnchoredFrame> frames,
                            const Pose& guess, const CalibConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> used_frames;
  for (std::size_t j = 0; j < frames.size(); j += cfg.frame_stride) used_frames.push_back(j);

  CalibrationResult result;
  result.extrinsic = guess;
  Pose current = guess;

  for (int iter = 0; iter < cfg.max_outer_iters; ++iter) {
    const double reject = cfg.reject_dist(iter);
    const std::size_t m = used_frames.size();
    std::vector<std::vector<Correspondence>> corr(m);
    std::vector<std::optional<Pose>> local(m);
    std::vector<LmTrace> traces(m);
    std::vector<Mat6> info(m, Mat6::Zero());
    std::vector<char> unobservable(m, 0);

    // Frames are independent given the current estimate; the map is read-only.
    parallel_for(m, cfg.jobs, [&](std::size_t k) {
      corr[k] = associate_frame(map, frames[used_frames[k]], current, reject, cfg);
    });
    if (cfg.trim_factor > 0.0) {
      const double cap = trim_cap(corr, current, cfg);
      for (auto& frame : corr) {
        std::erase_if(frame, [&](const Correspondence& c) { return std::abs(residual(c, current)) > cap; });
      }
    }
    parallel_for(m, cfg.jobs, [&](std::size_t k) {
      if (corr[k].size() < cfg.min_correspondences) return;
      try {
        LmSolution s = lm_solve(corr[k], current, cfg.lm, 1);
        local[k] = s.pose;
        traces[k] = std::move(s.trace);
        info[k] = s.information;
      } catch (const Unobservable&) {
        unobservable[k] = 1;
      }
    });

    std::vector<Vec6> deltas;
    std::vector<Mat6> infos;
    std::vector<Correspondence> all;
    result.skipped_frames.clear();
    for (std::size_t k = 0; k < m; ++k) {
      append(all, corr[k]);
      if (unobservable[k]) result.skipped_frames.push_back(used_frames[k]);
      if (!local[k]) continue;
      deltas.push_back(log_se3(current.inverse() * *local[k]).vector());
      infos.push_back(info[k]);
      result.lm_traces.push_back(std::move(traces[k]));
    }
    if (deltas.empty()) {
      if (!result.skipped_frames.empty()) {
        throw Unobservable("no frame constrains the extrinsic", result.skipped_frames);
      }
      throw NoCorrespondences("no B frame has enough points near map planes (outer iteration " +
                              std::to_string(iter) + ")");
    }

    // Log-Euclidean mean about the current estimate, without outlying frames.
    std::vector<double> norms;
    for (const auto& d : deltas) norms.push_back(d.norm());
    const double cap = cfg.outlier_factor * median(norms);
    Vec6 sum = Vec6::Zero();
    Mat6 weight = Mat6::Zero();
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      if (norms[i] > cap && cap > 0.0) continue;
      const Mat6 w = cfg.information_weighted ? infos[i] : Mat6::Identity();
      sum += w * deltas[i];
      weight += w;
    }
    const Vec6 mean = weight.ldlt().solve(sum);
    Pose next = current * exp_se3(Twist::from_vector(mean));

    OuterStep step;
    step.iteration = iter + 1;
    step.frames_used = deltas.size();
    step.correspondences = all.size();
    step.objective_before = global_objective(all, current, cfg.jobs);
    step.objective = global_objective(all, next, cfg.jobs);
    if (step.objective > step.objective_before) {
      // Averaging overshot; solve all frames jointly instead.
      step.joint_fallback = true;
      try {
        LmSolution joint = lm_solve(all, current, cfg.lm, cfg.jobs);
        next = joint.pose;
        step.objective = joint.trace.objective.back();
        result.lm_traces.push_back(std::move(joint.trace));
      } catch (const Unobservable&) {
        next = current;
        step.objective = step.objective_before;
      }
    }
    step.update_norm = update_norm(current, next);
    result.trace.push_back(step);
    result.iterations = iter + 1;
    result.local.assign(frames.size(), std::nullopt);
    for (std::size_t k = 0; k < m; ++k) result.local[used_frames[k]] = local[k];
    current = next;
    if (step.update_norm < cfg.delta) {
      result.converged = true;
      break;
    }
  }
  result.extrinsic = current;
  return result;
}

CalibErrors evaluate(const Pose& estimate, const Pose& truth) {
  return {translation_error(estimate, truth), rotation_error(estimate, truth)};
}

void write_report(const CalibrationResult& result, const std::optional<Pose>& truth,
                  const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto open = [&](const std::string& name) {
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << std::setprecision(12);
    return out;
  };
  {
    auto out = open("calibration.txt");
    out << format_pose_line(0.0, result.extrinsic) << '\n';
  }
  {
    auto out = open("trace.csv");
    out << "iter,objective,update_norm,frames_used\n";
    for (const auto& s : result.trace)
      out << s.iteration << ',' << s.objective << ',' << s.update_norm << ',' << s.frames_used << '\n';
  }
  if (truth) {
    const CalibErrors e = evaluate(result.extrinsic, *truth);
    auto out = open("errors.txt");
    out << "e_trans=" << e.trans << "\ne_rot=" << e.rot << '\n';
  }
}

}  // namespace dlc
