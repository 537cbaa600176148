#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "splattrack/frame.hpp"
#include "splattrack/pose.hpp"

namespace splattrack {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

constexpr int kShBasisCount = 9;  // degrees 0..2
constexpr int kShCoeffCount = kShBasisCount * 3;

/// One oriented planar Gaussian disk in canonical object space.
/// rotation() = [t_u, t_v, t_w] with normal t_w = t_u x t_v.
struct Surfel {
  Vec3 mu = Vec3::Zero();
  Vec3 tangent_u = Vec3::UnitX();
  Vec3 tangent_v = Vec3::UnitY();
  double log_scale_u = 0.0;
  double log_scale_v = 0.0;
  double opacity_logit = 0.0;
  std::array<double, kShCoeffCount> sh_coeffs{};  // [basis][channel]

  Vec3 normal() const { return tangent_u.cross(tangent_v); }
  double opacity() const { return sigmoid(opacity_logit); }
  double scale_u() const { return std::exp(log_scale_u); }
  double scale_v() const { return std::exp(log_scale_v); }

  Mat3 rotation() const {
    Mat3 R;
    R.col(0) = tangent_u;
    R.col(1) = tangent_v;
    R.col(2) = normal();
    return R;
  }
  void set_rotation(const Mat3& R) {
    tangent_u = R.col(0);
    tangent_v = R.col(1);
  }
};

struct DensityControlConfig {
  double prune_percentile = 5.0;
  double opacity_target = 0.5;
  int prune_start_step = 500;
  int prune_every = 100;
  double densify_grad_thresh = 2e-4;
  double scale_clip_min = 0.005;
  double scale_clip_max = 0.01;
  int densify_until_step = 800;
  // fuse_and_init parameters
  double voxel_size_m = 0.01;
  double cluster_dist_m = 0.06;
  int min_points = 5000;
  double init_opacity = 0.1;
};

/// The object reconstruction: surfels in canonical [-1,1]^3 coordinates,
/// world point = mu * canonical_scale + canonical_offset (meters, object
/// frame), plus the running positional-gradient statistic that drives
/// densification.
struct GaussianField {
  std::vector<Surfel> surfels;
  double canonical_scale = 1.0;
  Vec3 canonical_offset = Vec3::Zero();
  std::vector<double> positional_grad_accum;  // running mean of |grad mean2d|
  std::vector<int> positional_grad_count;
  int sh_active_degree = 0;

  size_t size() const { return surfels.size(); }
  Vec3 world_point(size_t i) const {
    return surfels[i].mu * canonical_scale + canonical_offset;
  }
};

/// Builds the initial field from masked keyframe depth: fuse, voxel
/// downsample, largest-cluster filtering, upsample past min_points, then
/// canonical normalization. Throws EmptyObservation if no masked depth
/// exists.
GaussianField fuse_and_init(const std::vector<Keyframe>& keyframes,
                            const DensityControlConfig& cfg, std::uint64_t seed);

/// Appends surfels for masked depth that falls in regions the field does
/// not cover yet (new viewpoints observing previously unseen surface).
/// Existing surfels are left untouched. Returns the number added.
int augment_field(GaussianField& field, const std::vector<Keyframe>& keyframes,
                  const DensityControlConfig& cfg, std::uint64_t seed);

/// Iteratively removes the bottom prune_percentile opacities until the
/// (100 - prune_percentile)th percentile exceeds opacity_target.
/// No-op below 20 surfels; always keeps at least one.
int prune_by_opacity_percentile(GaussianField& field, const DensityControlConfig& cfg);

/// Splits (large) or clones (small) surfels whose accumulated positional
/// gradient exceeds the threshold. Returns the number of surfels added.
int densify(GaussianField& field, const DensityControlConfig& cfg, std::uint64_t seed);

/// Clamps exp(log_scale) into [scale_clip_min, scale_clip_max].
void clip_scales(GaussianField& field, const DensityControlConfig& cfg);

/// Surfel centers in meters (object frame).
std::vector<Vec3> to_world_points(const GaussianField& field);

void save_field(const GaussianField& field, const std::string& path);
GaussianField load_field(const std::string& path);

/// Positions + normals + degree-0 color as ASCII PLY for external viewers.
void export_splats_ply(const GaussianField& field, const std::string& path);

/// Seeded uniform rotation, for tangent-frame initialization.
Mat3 random_rotation(std::mt19937_64& rng);

}  // namespace splattrack
