#pragma once

#include <string>
#include <vector>

#include "splattrack/losses.hpp"

namespace splattrack {

struct GradCheckReport {
  int n_params = 0;
  int n_failed = 0;
  double max_rel_err = 0.0;
  std::string worst_param;
  double seconds = 0.0;
  bool pass() const { return n_failed == 0; }
};

struct GradCheckConfig {
  int n_scenes = 10;
  int n_surfels = 5;
  int image_size = 16;
  double fd_step = 1e-4;
  double rel_tol = 1e-3;
  double abs_floor = 1e-8;
  std::uint64_t seed = 17;
  LossWeights weights;
};

/// Central finite differences vs the analytic backward pass for the
/// weighted total loss, over every surfel parameter and every pose-tangent
/// coordinate of randomly generated scenes.
GradCheckReport gradcheck_suite(const GradCheckConfig& cfg = {});

}  // namespace splattrack
