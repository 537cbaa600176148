#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splattrack/evaluation.hpp"
#include "splattrack/frame.hpp"

namespace splattrack {

enum class SceneShape { Cube, Sphere, Cylinder, Blob };
enum class TrajectoryKind { Orbit, Handheld };

SceneShape shape_from_string(const std::string& s);
TrajectoryKind trajectory_from_string(const std::string& s);

struct SceneSpec {
  SceneShape shape = SceneShape::Cube;
  TrajectoryKind trajectory = TrajectoryKind::Orbit;
  int n_frames = 120;
  int width = 64;
  int height = 64;
  double focal = 96.0;          // pixels
  double orbit_radius = 0.35;   // meters, camera to object center
  double elevation_rad = 0.7;  // peak; elevation oscillates over the sweep
  double size = 0.05;           // characteristic half-extent / radius, meters
  double sweep_rad = 2.0 * 3.14159265358979323846;  // total azimuth sweep
  std::uint64_t seed = 0;
  int model_samples = 1200;     // approximate ground-truth point count
};

struct SyntheticScene {
  std::vector<FramePtr> frames;
  std::vector<Pose> gt;  // object-to-camera per frame
  Camera intrinsics;
  ModelPoints model_points;  // on the analytic surface, object frame
};

/// Analytic ray-traced RGB-D + mask sequence with ground-truth poses.
/// Deterministic given the spec.
SyntheticScene generate_scene(const SceneSpec& spec);

/// Smallest positive ray parameter hitting the shape, or a negative value
/// on a miss. Normal is the outward surface normal at the hit.
double intersect_shape(SceneShape shape, double size, const Vec3& origin,
                       const Vec3& dir, Vec3* normal);

}  // namespace splattrack
