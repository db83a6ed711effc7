#include "dlc/lm.hpp"

#include "dlc/errors.hpp"

namespace dlc {

void LmParams::validate() const {
  if (!(initial_damping >= 0.0)) throw InvalidParams("lm.initial_damping must be >= 0");
  if (!(damping_up > 1.0)) throw InvalidParams("lm.damping_up must be > 1");
  if (!(damping_down > 0.0 && damping_down <= 1.0))
    throw InvalidParams("lm.damping_down must be in (0, 1]");
  if (max_iterations < 1) throw InvalidParams("lm.max_iterations must be >= 1");
  if (!(step_tolerance > 0.0)) throw InvalidParams("lm.step_tolerance must be > 0");
}

bool LmTrace::monotone() const {
  for (std::size_t i = 1; i < objective.size(); ++i) {
    if (objective[i] > objective[i - 1]) return false;
  }
  return true;
}

}  // namespace dlc
