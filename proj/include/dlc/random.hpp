// Portable, seedable random streams. std::mt19937_64 has a fully specified
// output sequence; the distributions below are implemented here because the
// standard library ones differ between vendors.
#pragma once

#include <cstdint>
#include <random>

#include "dlc/geometry.hpp"

namespace dlc {

std::uint64_t splitmix64(std::uint64_t x);

class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed, std::uint64_t stream = 0);

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double sigma) { return mean + sigma * normal(); }
  /// Uniform direction on the unit sphere.
  Vec3 unit_vector();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dlc
