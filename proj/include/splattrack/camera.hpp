#pragma once

#include "splattrack/pose.hpp"

namespace splattrack {

/// Pinhole intrinsics. Pixel (u, v) = (fx*x/z + cx, fy*y/z + cy) with pixel
/// centers at integer coordinates.
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  Vec2 project(const Vec3& p_cam) const {
    return {fx * p_cam.x() / p_cam.z() + cx, fy * p_cam.y() / p_cam.z() + cy};
  }

  Vec3 backproject(double u, double v, double depth) const {
    return {(u - cx) / fx * depth, (v - cy) / fy * depth, depth};
  }

  /// Unit-z ray direction through pixel (u, v).
  Vec3 ray(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }
};

}  // namespace splattrack
