#pragma once

#include <memory>
#include <vector>

#include "splattrack/align.hpp"
#include "splattrack/camera.hpp"
#include "splattrack/image.hpp"
#include "splattrack/pose.hpp"

namespace splattrack {

/// One RGB-D observation. Color in [0,1], depth in meters (0 = invalid),
/// mask nonzero where the object is visible. Immutable after construction.
struct Frame {
  ImageF3 rgb;
  ImageF depth;
  ImageU8 mask;
  Camera intrinsics;
  int timestamp = 0;

  bool valid_depth(int x, int y) const {
    return depth.inside(x, y) && depth.at(x, y) > 0.0f;
  }
  bool masked(int x, int y) const {
    return mask.inside(x, y) && mask.at(x, y) != 0;
  }
  int mask_area() const {
    int n = 0;
    for (auto m : mask.data) n += m != 0;
    return n;
  }
};

using FramePtr = std::shared_ptr<const Frame>;

struct Keyframe {
  FramePtr frame;
  Pose pose;  // object-to-camera
  int anchor_id = -1;
  bool outlier = false;
  int mask_area = 0;
  int id = 0;
};

/// Keeps a depth pixel only if every masked pixel in the kernel window has
/// valid depth; the mask is eroded identically. Guards the losses against
/// boundary depth noise.
Frame erode_depth(const Frame& frame, int kernel);

struct MatchNoise {
  double pixel_sigma = 0.0;   // pixels
  double point_sigma = 0.0;   // meters, applied to point_b
  double outlier_fraction = 0.0;
  std::uint64_t seed = 0;
};

/// Seam for the external feature matcher: implementations produce 3D-3D
/// correspondences with both pixels inside the respective masks and valid
/// depth.
class CorrespondenceProvider {
 public:
  virtual ~CorrespondenceProvider() = default;
  virtual std::vector<Correspondence> match(const Frame& a, const Frame& b) const = 0;
};

}  // namespace splattrack
