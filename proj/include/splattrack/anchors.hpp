#pragma once

#include <vector>

#include "splattrack/pose.hpp"

namespace splattrack {

/// Unit viewing directions used to cluster keyframe viewpoints around the
/// object. Level L is the L-times edge-subdivided icosphere (10*4^L + 2
/// vertices), so level 1 gives 42 directions.
struct AnchorSet {
  std::vector<Vec3> directions;
  int level = 0;
};

/// Builds the anchor set for level in {0, 1, 2}. Throws UnsupportedLevel
/// otherwise.
AnchorSet icosphere_anchors(int level);

/// Index of the anchor whose direction best matches the camera viewpoint
/// (argmax dot with normalize(camera_center - object_center)); ties resolve
/// to the lowest index.
int assign_to_anchor(const Pose& object_to_camera, const Vec3& object_center,
                     const AnchorSet& anchors);

}  // namespace splattrack
