#pragma once

#include <cstdint>
#include <vector>

#include "splattrack/pose.hpp"

namespace splattrack {

/// A 3D-3D match between two camera frames, with the source pixels kept
/// for diagnostics and visibility checks.
struct Correspondence {
  Vec3 point_a = Vec3::Zero();
  Vec3 point_b = Vec3::Zero();
  Vec2 pixel_a = Vec2::Zero();
  Vec2 pixel_b = Vec2::Zero();
};

/// Rigid least-squares alignment: returns T minimizing sum |T*src_i - dst_i|^2.
/// No scale. Throws DegenerateConfiguration for collinear/coincident sets.
Pose umeyama_align(const std::vector<Vec3>& src, const std::vector<Vec3>& dst);

struct RansacResult {
  Pose pose;
  std::vector<bool> inliers;
  int inlier_count = 0;
  double inlier_rms = 0.0;
};

/// 3-point RANSAC over correspondences with a final least-squares refit on
/// the inlier set. Deterministic given seed. Throws InsufficientInliers when
/// fewer than 3 inliers support the best model.
RansacResult ransac_align(const std::vector<Correspondence>& corrs,
                          double inlier_thresh_m, int max_iters,
                          std::uint64_t seed);

}  // namespace splattrack
