// Levenberg-Marquardt settings and trace shared by the window and extrinsic solvers.
#pragma once

#include <cstddef>
#include <vector>

namespace dlc {

struct LmParams {
  double initial_damping = 1e-4;
  double damping_up = 10.0;    // on a rejected step
  double damping_down = 0.5;   // on an accepted step
  int max_iterations = 30;
  double step_tolerance = 1e-7;  // on the infinity norm of the step

  void validate() const;
};

struct LmTrace {
  /// objective[0] is the starting value, then one entry per accepted step.
  std::vector<double> objective;
  int iterations = 0;
  int rejected = 0;

  bool monotone() const;
};

}  // namespace dlc
