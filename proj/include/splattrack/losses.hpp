#pragma once

#include <span>

#include "splattrack/frame.hpp"
#include "splattrack/renderer.hpp"

namespace splattrack {

struct LossWeights {
  double lambda_c = 0.5;
  double lambda_d = 0.5;
  double lambda_dd = 0.05;
  double lambda_n = 0.05;
  double huber_delta = 0.01;  // meters
};

/// L1 color loss over masked pixels, averaged over pixels and channels.
/// Adds weight-scaled gradients into grads.dcolor. Throws EmptyMask.
double loss_color(const RenderOutput& out, const Frame& frame, LossGrads* grads,
                  double weight = 1.0);

/// Huber depth loss over masked pixels with valid observed depth.
double loss_depth(const RenderOutput& out, const Frame& frame, double delta,
                  LossGrads* grads, double weight = 1.0);

/// Depth distortion: per-pixel pairwise sum over intersected splats
/// (unordered pairs counted once), averaged over masked pixels. Requires a
/// retained tape; gradients go into grads.domega / grads.dz.
double loss_depth_distortion(const RenderOutput& out, const Frame& frame,
                             LossGrads* grads, double weight = 1.0);

/// Normal consistency between central-difference normals of the rendered
/// and observed depth images; gradients chain into grads.ddepth.
double loss_normal(const RenderOutput& out, const Frame& frame, LossGrads* grads,
                   double weight = 1.0);

/// O(N) prefix-sum evaluation of sum_{i<j} w_i w_j (z_j - z_i) for z
/// ascending; gradient outputs are optional.
double depth_distortion_pair_sum(std::span<const double> w, std::span<const double> z,
                                 std::span<double> dw = {}, std::span<double> dz = {});

/// Recomputes the per-pixel blending weights from a retained tape.
void pixel_weights(const RenderOutput& out, size_t pixel, std::vector<double>& w);

}  // namespace splattrack
