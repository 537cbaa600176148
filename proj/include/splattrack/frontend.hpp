#pragma once

#include <vector>

#include "splattrack/frame.hpp"

namespace splattrack {

struct FrontendConfig {
  int erode_kernel = 5;
  double ransac_inlier_thresh_m = 0.005;
  int ransac_max_iters = 500;
  std::uint64_t ransac_seed = 1;
  int min_matches = 10;
  double min_rotation_deg = 5.0;
  double depth_near = 0.1;
  double depth_far = 3.0;
};

struct PairwisePose {
  Pose pose;  // maps points from a's camera frame to b's camera frame
  int inlier_count = 0;
  int match_count = 0;
};

/// Coarse relative pose between two frames from provider matches +
/// RANSAC alignment. Throws MatchingFailed when the provider returns
/// fewer than 3 correspondences.
PairwisePose estimate_pairwise_pose(const Frame& a, const Frame& b,
                                    const CorrespondenceProvider& provider,
                                    const FrontendConfig& cfg);

/// Pool admission: enough matches against the nearest pool keyframe and
/// rotation-diverse against every pool keyframe. An empty pool admits.
bool admit_keyframe(const Frame& candidate, const Pose& pose,
                    const std::vector<Keyframe>& pool,
                    const CorrespondenceProvider& provider,
                    const FrontendConfig& cfg);

/// Ground-truth-backed matcher used with the synthetic scene generator.
/// gt_pose_ab maps a's camera frame into b's. Deterministic given the
/// noise seed.
class SyntheticOracleProvider : public CorrespondenceProvider {
 public:
  SyntheticOracleProvider(MatchNoise noise, int max_matches = 300)
      : noise_(noise), max_matches_(max_matches) {}

  /// Registers the ground-truth object-to-camera pose for a frame timestamp.
  void set_gt_pose(int timestamp, const Pose& object_to_camera);

  std::vector<Correspondence> match(const Frame& a, const Frame& b) const override;

 private:
  MatchNoise noise_;
  int max_matches_;
  std::vector<std::pair<int, Pose>> gt_poses_;
  const Pose* find_pose(int timestamp) const;
};

/// Classical stand-in for real imagery: Harris corners inside the mask,
/// ZNCC patch matching with mutual-best filtering. Best effort only.
class PatchMatcherProvider : public CorrespondenceProvider {
 public:
  explicit PatchMatcherProvider(int patch_radius = 5, int max_corners = 300,
                                double min_zncc = 0.7)
      : patch_radius_(patch_radius), max_corners_(max_corners), min_zncc_(min_zncc) {}

  std::vector<Correspondence> match(const Frame& a, const Frame& b) const override;

 private:
  int patch_radius_;
  int max_corners_;
  double min_zncc_;
};

}  // namespace splattrack
