#pragma once

#include <vector>

#include "splattrack/anchors.hpp"
#include "splattrack/gaussian_field.hpp"
#include "splattrack/losses.hpp"

namespace splattrack {

struct OptimizerConfig {
  int steps = 1000;
  int frozen_steps = 500;
  // learning rates; surfel values follow splatting practice in canonical units
  double lr_mu = 1.6e-4;
  double lr_rot = 1e-3;
  double lr_scale = 5e-3;
  double lr_opacity = 0.05;
  double lr_sh = 2.5e-3;
  double lr_pose_trans = 1e-3;
  double lr_pose_rot = 1e-3;
  double lr_decay = 0.5;  // one-time multiplier at the run midpoint
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int sh_increment_every = 200;
  // Joint mode steers poses by depth alone for this many steps while the
  // surfels train. Against an untrained field the color term rewards
  // shrinking the projection (denser splat overlap covers more pixels),
  // which walks every free pose away from its camera before the field can
  // catch up.
  int pose_warmup_steps = 200;
  double mad_k = 3.0;
  int mad_every = 100;
  int mad_start = 500;
  double loss_ema_beta = 0.8;
  bool fix_first_pose = true;
  double divergence_factor = 10.0;
  std::uint64_t seed = 0;
};

struct SelectionReport {
  std::vector<int> selected_ids;
  std::vector<std::pair<int, int>> anchor_winners;  // (anchor index, keyframe id)
  std::vector<int> outlier_ids;
  std::vector<double> outlier_deviations;
  std::vector<double> mad_per_round;
};

struct LossTraceRow {
  int step = 0;
  double total = 0, color = 0, depth = 0, depth_distortion = 0, normal = 0;
  int n_surfels = 0;
  int n_active_keyframes = 0;
};

struct JointResult {
  GaussianField field;
  std::vector<Pose> poses;  // aligned with the input keyframe list
  SelectionReport report;
  std::vector<LossTraceRow> trace;
};

/// One keyframe per occupied anchor, the one with the largest mask
/// (ties: earliest timestamp).
SelectionReport select_keyframes(const std::vector<Keyframe>& pool,
                                 const AnchorSet& anchors, const Vec3& object_center);

/// Flags values whose absolute deviation from the median exceeds k * MAD.
/// MAD = 0 flags nothing. Throws TooFewSamples below 4 values.
std::vector<bool> mad_filter(const std::vector<double>& losses, double k);

/// Joint surfel + keyframe-pose optimization over the selected keyframes
/// with periodic density control and MAD-based outlier rejection.
JointResult joint_optimize(const GaussianField& field,
                           const std::vector<Keyframe>& selected,
                           const LossWeights& weights, const OptimizerConfig& opt,
                           const DensityControlConfig& density);

/// Pose-only refinement over all keyframes with the surfels frozen.
std::vector<Pose> refine_frozen(const GaussianField& field,
                                const std::vector<Keyframe>& keyframes,
                                const LossWeights& weights, const OptimizerConfig& opt);

void write_loss_trace_csv(const std::vector<LossTraceRow>& trace,
                          const std::string& path);

}  // namespace splattrack
