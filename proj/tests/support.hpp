// Helpers shared by the unit and acceptance suites.
#pragma once

#include <vector>

#include "dlc/geometry.hpp"
#include "dlc/random.hpp"

namespace dlc::test {

/// Points on the rectangle corner + u*e1 + v*e2 on a regular grid, with
/// optional Gaussian offsets along the rectangle normal.
inline std::vector<Vec3> sample_rectangle(const Vec3& corner, const Vec3& e1, const Vec3& e2,
                                          int n1, int n2, double sigma = 0.0,
                                          RandomStream* rng = nullptr) {
  std::vector<Vec3> out;
  const Vec3 normal = e1.cross(e2).normalized();
  for (int i = 0; i < n1; ++i) {
    for (int j = 0; j < n2; ++j) {
      Vec3 p = corner + e1 * ((i + 0.5) / n1) + e2 * ((j + 0.5) / n2);
      if (rng != nullptr && sigma > 0.0) p += normal * rng->normal(0.0, sigma);
      out.push_back(p);
    }
  }
  return out;
}

/// A handful of randomly oriented noisy planar patches in a 6 m cube.
inline std::vector<Vec3> random_plane_layout(RandomStream& rng) {
  std::vector<Vec3> pts;
  const int patches = 2 + static_cast<int>(rng.uniform() * 4);
  for (int k = 0; k < patches; ++k) {
    const Vec3 n = rng.unit_vector();
    Vec3 e1 = n.unitOrthogonal();
    Vec3 e2 = n.cross(e1);
    const double a = rng.uniform(1.0, 4.0), b = rng.uniform(1.0, 4.0);
    const Vec3 corner(rng.uniform(-3, 1), rng.uniform(-3, 1), rng.uniform(-3, 1));
    auto patch = sample_rectangle(corner, e1 * a, e2 * b, static_cast<int>(a * 25),
                                  static_cast<int>(b * 25), 0.002, &rng);
    pts.insert(pts.end(), patch.begin(), patch.end());
  }
  return pts;
}

}  // namespace dlc::test
