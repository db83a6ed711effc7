#include "dlc/voxelmap.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <tuple>

#include "dlc/errors.hpp"
#include "dlc/parallel.hpp"

namespace dlc {

namespace {

PlaneFeature make_feature(const PlaneFit& fit, std::size_t count, const VoxelParams& params,
                          double sigma_lambda, std::size_t voxel_id) {
  PlaneFeature f;
  f.normal = fit.normal;
  f.centroid = fit.centroid;
  f.eigenvalues = fit.eigenvalues;
  f.point_count = count;
  f.eta = fit.planarity();
  f.sigma_lambda = sigma_lambda;
  f.weight = confidence_weight(static_cast<double>(count), sigma_lambda, f.eta, params.gamma);
  f.voxel_id = voxel_id;
  return f;
}

double eigenvalue_spread(const Vec3& ev) {
  const double mean = ev.mean();
  return std::sqrt((ev.array() - mean).square().mean());
}

bool passes_residual_gate(const PlaneFit& fit, std::span<const Vec3> pts,
                          const VoxelParams& params) {
  if (std::sqrt(fit.eigenvalues[0]) > params.max_thickness) return false;
  if (!params.residual_gate) return true;
  const double m = static_cast<double>(pts.size());
  const double bound = (std::sqrt(2.0 * std::log(m)) + 2.0) * std::sqrt(fit.eigenvalues[0]) +
                       params.thickness_floor;
  return max_plane_distance(fit, pts) <= bound;
}

std::vector<Vec3> gather(std::span<const Vec3> all, const std::vector<std::uint32_t>& idx) {
  std::vector<Vec3> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

std::int64_t floor_div2(std::int64_t v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

// One root voxel's subtree with node and leaf indices local to the subtree.
struct Subtree {
  std::vector<VoxelNode> nodes;
  std::vector<PlaneFit> leaf_fits;
  std::vector<std::int32_t> leaf_nodes;
};

void classify(Subtree& tree, std::int32_t id, std::span<const Vec3> all, const VoxelParams& params) {
  VoxelNode& node = tree.nodes[id];
  if (node.points.size() < params.min_points) {
    node.classification = VoxelClass::Discarded;
    return;
  }
  const std::vector<Vec3> pts = gather(all, node.points);
  bool planar = false;
  try {
    const PlaneFit fit = fit_plane(pts);
    node.eta = fit.planarity();
    planar = node.eta < params.tau_eta && passes_residual_gate(fit, pts, params);
    if (planar) {
      node.classification = VoxelClass::Planar;
      node.leaf = static_cast<std::int32_t>(tree.leaf_fits.size());
      tree.leaf_fits.push_back(fit);
      tree.leaf_nodes.push_back(id);
      return;
    }
  } catch (const Degenerate&) {
    node.eta = std::numeric_limits<double>::infinity();
  }
  if (node.key.depth >= params.max_depth) {
    node.classification = VoxelClass::Discarded;
    return;
  }

  node.classification = VoxelClass::Subdivided;
  const int child_depth = node.key.depth + 1;
  const double child_edge = node.edge_length / 2.0;
  const double scale = std::ldexp(1.0, child_depth);
  std::array<std::vector<std::uint32_t>, 8> buckets;
  for (auto i : node.points) {
    const Vec3 q = all[i] / params.l_parent * scale;
    const int ox = static_cast<int>(static_cast<std::int64_t>(std::floor(q.x())) - 2 * node.key.x);
    const int oy = static_cast<int>(static_cast<std::int64_t>(std::floor(q.y())) - 2 * node.key.y);
    const int oz = static_cast<int>(static_cast<std::int64_t>(std::floor(q.z())) - 2 * node.key.z);
    buckets[static_cast<std::size_t>(ox | (oy << 1) | (oz << 2))].push_back(i);
  }
  const VoxelKey parent_key = node.key;
  std::vector<std::int32_t> children(8, -1);
  for (int o = 0; o < 8; ++o) {
    if (buckets[o].empty()) continue;
    VoxelNode child;
    child.key = {child_depth, 2 * parent_key.x + (o & 1), 2 * parent_key.y + ((o >> 1) & 1),
                 2 * parent_key.z + ((o >> 2) & 1)};
    child.edge_length = child_edge;
    child.center = (Vec3(static_cast<double>(child.key.x), static_cast<double>(child.key.y),
                         static_cast<double>(child.key.z)) +
                    Vec3::Constant(0.5)) *
                   child_edge;
    child.points = std::move(buckets[o]);
    children[o] = static_cast<std::int32_t>(tree.nodes.size());
    tree.nodes.push_back(std::move(child));
  }
  tree.nodes[id].children = children;
  for (auto c : children) {
    if (c >= 0) classify(tree, c, all, params);
  }
}

}  // namespace

double PlaneFit::planarity() const {
  const double denom = eigenvalues[1] + eigenvalues[2];
  return denom > 0.0 ? eigenvalues[0] / denom : std::numeric_limits<double>::infinity();
}

PlaneFit fit_plane(std::span<const Vec3> points) {
  if (points.size() < 3) throw Degenerate("plane fit needs at least 3 points");
  Vec3 mean = Vec3::Zero();
  for (const auto& p : points) mean += p;
  mean /= static_cast<double>(points.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : points) {
    const Vec3 d = p - mean;
    cov.noalias() += d * d.transpose();
  }
  cov /= static_cast<double>(points.size());

  const Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
  PlaneFit fit;
  fit.centroid = mean;
  fit.eigenvalues = solver.eigenvalues().cwiseMax(0.0);
  if (fit.eigenvalues[1] < 1e-12) throw Degenerate("points are collinear or coincident");
  Vec3 n = solver.eigenvectors().col(0).normalized();
  Eigen::Index k = 0;
  n.cwiseAbs().maxCoeff(&k);
  if (n[k] < 0.0) n = -n;
  fit.normal = n;
  return fit;
}

double max_plane_distance(const PlaneFit& fit, std::span<const Vec3> points) {
  double m = 0.0;
  for (const auto& p : points) m = std::max(m, std::abs(fit.normal.dot(p - fit.centroid)));
  return m;
}

double confidence_weight(double point_count, double sigma_lambda, double eta, double gamma) {
  return point_count / (1.0 + sigma_lambda) * std::exp(-gamma * eta);
}

void VoxelParams::validate() const {
  if (!(l_parent > 0.0)) throw InvalidParams("voxel.l_parent must be positive");
  if (max_depth < 0) throw InvalidParams("voxel.max_depth must be >= 0");
  if (min_points < 3) throw InvalidParams("voxel.min_points must be >= 3");
  if (!(tau_eta > 0.0)) throw InvalidParams("voxel.tau_eta must be positive");
  if (gamma < 0.0) throw InvalidParams("voxel.gamma must be >= 0");
  if (tau_theta < 0.0 || tau_d < 0.0) throw InvalidParams("voxel merge thresholds must be >= 0");
  if (!(reject_dist > 0.0)) throw InvalidParams("voxel.reject_dist must be positive");
  if (!(max_thickness > 0.0)) throw InvalidParams("voxel.max_thickness must be positive");
}

std::size_t VoxelKeyHash::operator()(const VoxelKey& k) const {
  std::size_t h = static_cast<std::size_t>(k.depth) * 0x9e3779b97f4a7c15ULL;
  h ^= static_cast<std::size_t>(k.x) * 73856093ULL;
  h ^= static_cast<std::size_t>(k.y) * 19349663ULL;
  h ^= static_cast<std::size_t>(k.z) * 83492791ULL;
  return h;
}

VoxelKey VoxelMapIndex::key_at(const Vec3& p, int depth) const {
  const Vec3 q = p / params.l_parent * std::ldexp(1.0, depth);
  return {depth, static_cast<std::int64_t>(std::floor(q.x())),
          static_cast<std::int64_t>(std::floor(q.y())),
          static_cast<std::int64_t>(std::floor(q.z()))};
}

std::int32_t VoxelMapIndex::locate(const Vec3& p) const {
  auto it = lookup.find(key_at(p, 0));
  if (it == lookup.end()) return -1;
  std::int32_t id = it->second;
  while (nodes[id].classification == VoxelClass::Subdivided) {
    const VoxelKey child = key_at(p, nodes[id].key.depth + 1);
    const VoxelKey& k = nodes[id].key;
    const auto o = static_cast<std::size_t>((child.x - 2 * k.x) | ((child.y - 2 * k.y) << 1) |
                                            ((child.z - 2 * k.z) << 2));
    if (o >= 8 || nodes[id].children[o] < 0) return id;
    id = nodes[id].children[o];
  }
  return id;
}

std::vector<std::uint32_t> VoxelMapIndex::plane_points(std::size_t plane) const {
  std::vector<std::uint32_t> out;
  for (std::size_t leaf = 0; leaf < leaf_planes.size(); ++leaf) {
    if (leaf_to_plane[leaf] != plane) continue;
    const auto& pts = nodes[leaf_planes[leaf].voxel_id].points;
    out.insert(out.end(), pts.begin(), pts.end());
  }
  return out;
}

VoxelMapIndex build_adaptive(std::span<const Vec3> map_points, const VoxelParams& params) {
  params.validate();
  VoxelMapIndex index;
  index.params = params;
  index.points.assign(map_points.begin(), map_points.end());

  using Key = std::tuple<std::int64_t, std::int64_t, std::int64_t>;
  std::map<Key, std::vector<std::uint32_t>> roots;
  for (std::uint32_t i = 0; i < index.points.size(); ++i) {
    const VoxelKey k = index.key_at(index.points[i], 0);
    roots[{k.x, k.y, k.z}].push_back(i);
  }

  std::vector<Subtree> trees(roots.size());
  {
    std::size_t r = 0;
    for (auto& [key, pts] : roots) {
      VoxelNode root;
      root.key = {0, std::get<0>(key), std::get<1>(key), std::get<2>(key)};
      root.edge_length = params.l_parent;
      root.center = (Vec3(static_cast<double>(root.key.x), static_cast<double>(root.key.y),
                          static_cast<double>(root.key.z)) +
                     Vec3::Constant(0.5)) *
                    params.l_parent;
      root.points = std::move(pts);
      trees[r++].nodes.push_back(std::move(root));
    }
  }
  const std::span<const Vec3> all(index.points);
  parallel_for(trees.size(), 0, [&](std::size_t r) { classify(trees[r], 0, all, params); });

  for (const auto& tree : trees) {
    const auto node_offset = static_cast<std::int32_t>(index.nodes.size());
    const auto leaf_offset = static_cast<std::int32_t>(index.leaf_planes.size());
    index.roots.push_back(node_offset);
    for (VoxelNode node : tree.nodes) {
      for (auto& c : node.children) {
        if (c >= 0) c += node_offset;
      }
      if (node.leaf >= 0) node.leaf += leaf_offset;
      const auto id = static_cast<std::int32_t>(index.nodes.size());
      index.lookup.emplace(node.key, id);
      index.nodes.push_back(std::move(node));
    }
    for (std::size_t l = 0; l < tree.leaf_fits.size(); ++l) {
      const auto node_id = static_cast<std::size_t>(tree.leaf_nodes[l] + node_offset);
      const PlaneFit& fit = tree.leaf_fits[l];
      const double sigma = params.sigma_mode == SigmaLambda::kEigenvalueSpread
                               ? eigenvalue_spread(fit.eigenvalues)
                               : 0.0;
      index.leaf_planes.push_back(
          make_feature(fit, index.nodes[node_id].points.size(), params, sigma, node_id));
    }
  }
  index.planes = index.leaf_planes;
  index.leaf_to_plane.resize(index.leaf_planes.size());
  std::iota(index.leaf_to_plane.begin(), index.leaf_to_plane.end(), std::size_t{0});
  return index;
}

VoxelMapIndex merge_neighbors(const VoxelMapIndex& index, double tau_theta, double tau_d) {
  const std::size_t n = index.leaf_planes.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  const auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  const auto unite = [&](std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  };
  const auto similar = [&](const PlaneFeature& a, const PlaneFeature& b) {
    const double c = std::min(1.0, std::abs(a.normal.dot(b.normal)));
    return std::acos(c) < tau_theta && (a.centroid - b.centroid).norm() < tau_d;
  };

  static constexpr int kFaces[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                       {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
  for (std::size_t leaf = 0; leaf < n; ++leaf) {
    const VoxelNode& node = index.nodes[index.leaf_planes[leaf].voxel_id];
    for (const auto& f : kFaces) {
      VoxelKey k{node.key.depth, node.key.x + f[0], node.key.y + f[1], node.key.z + f[2]};
      // Same depth first, then coarser cells across the same face.
      while (k.depth >= 0) {
        const auto it = index.lookup.find(k);
        if (it != index.lookup.end()) {
          const VoxelNode& other = index.nodes[it->second];
          if (other.classification == VoxelClass::Planar &&
              similar(index.leaf_planes[leaf], index.leaf_planes[other.leaf])) {
            unite(leaf, static_cast<std::size_t>(other.leaf));
          }
          break;
        }
        k = {k.depth - 1, floor_div2(k.x), floor_div2(k.y), floor_div2(k.z)};
      }
    }
  }

  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t leaf = 0; leaf < n; ++leaf) groups[find(leaf)].push_back(leaf);

  VoxelMapIndex out = index;
  out.planes.clear();
  out.leaf_to_plane.assign(n, 0);
  // Groups are keyed by their smallest leaf, so planes come out in leaf order.
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> ordered(groups.begin(),
                                                                        groups.end());
  for (const auto& [root, members] : ordered) {
    if (members.size() > 1) {
      std::vector<Vec3> pts;
      for (auto leaf : members) {
        for (auto i : index.nodes[index.leaf_planes[leaf].voxel_id].points) {
          pts.push_back(index.points[i]);
        }
      }
      try {
        const PlaneFit fit = fit_plane(pts);
        if (fit.planarity() < index.params.tau_eta &&
            passes_residual_gate(fit, pts, index.params)) {
          double sigma = eigenvalue_spread(fit.eigenvalues);
          if (index.params.sigma_mode == SigmaLambda::kLambda1AcrossLeaves) {
            double mean = 0.0, sq = 0.0;
            for (auto leaf : members) mean += index.leaf_planes[leaf].eigenvalues[0];
            mean /= static_cast<double>(members.size());
            for (auto leaf : members) {
              sq += std::pow(index.leaf_planes[leaf].eigenvalues[0] - mean, 2);
            }
            sigma = std::sqrt(sq / static_cast<double>(members.size()));
          }
          const std::size_t id = out.planes.size();
          out.planes.push_back(make_feature(fit, pts.size(), index.params, sigma,
                                            index.leaf_planes[members.front()].voxel_id));
          for (auto leaf : members) out.leaf_to_plane[leaf] = id;
          continue;
        }
      } catch (const Degenerate&) {
      }
    }
    for (auto leaf : members) {
      out.leaf_to_plane[leaf] = out.planes.size();
      out.planes.push_back(index.leaf_planes[leaf]);
    }
  }
  return out;
}

std::optional<std::size_t> associate(const Vec3& p, const VoxelMapIndex& index,
                                     double reject_dist) {
  const std::int32_t id = index.locate(p);
  if (id < 0) return std::nullopt;
  const VoxelNode& node = index.nodes[id];
  if (node.classification != VoxelClass::Planar) return std::nullopt;
  const std::size_t plane = index.leaf_to_plane[node.leaf];
  const PlaneFeature& f = index.planes[plane];
  if (std::abs(f.normal.dot(p - f.centroid)) > reject_dist) return std::nullopt;
  return plane;
}

VoxelMapIndex build_thickness_gated(std::span<const Vec3> map_points, const VoxelParams& params,
                                    double ratio) {
  if (!(ratio > 0.0)) return build_adaptive(map_points, params);
  const VoxelMapIndex first = build_adaptive(map_points, params);
  if (first.leaf_planes.empty()) return first;
  std::vector<double> stds;
  for (const auto& leaf : first.leaf_planes) stds.push_back(std::sqrt(leaf.eigenvalues[0]));
  std::nth_element(stds.begin(), stds.begin() + stds.size() / 2, stds.end());
  VoxelParams gated = params;
  gated.max_thickness = std::min(params.max_thickness, ratio * stds[stds.size() / 2] + params.thickness_floor);
  return build_adaptive(map_points, gated);
}

void export_planes(const VoxelMapIndex& index, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write plane file " + path.string());
  out.precision(9);
  for (const auto& f : index.planes) {
    out << f.normal.x() << ' ' << f.normal.y() << ' ' << f.normal.z() << ' ' << f.centroid.x()
        << ' ' << f.centroid.y() << ' ' << f.centroid.z() << ' ' << f.eigenvalues[0] << ' '
        << f.eigenvalues[1] << ' ' << f.eigenvalues[2] << ' ' << f.point_count << ' ' << f.weight
        << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace dlc
