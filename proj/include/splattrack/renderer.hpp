#pragma once

#include <optional>
#include <vector>

#include "splattrack/camera.hpp"
#include "splattrack/gaussian_field.hpp"
#include "splattrack/image.hpp"

namespace splattrack {

struct RenderOptions {
  bool retain_gradients = false;
  double gaussian_cutoff = 1e-8;    // kernel values below this are skipped
  double transmittance_min = 1e-4;  // early termination; disabled when retaining
  double blur_floor_px2 = 0.3;      // added to cov2d diagonal
  bool normalize_depth = true;      // d = sum(z w) / max(sum w, eps)
  double near_plane = 0.01;
  double alpha_max = 0.9999;        // clamp on alpha*G, keeps transmittance > 0
  // Skip surfels whose stored normal faces away from the camera. Surfel
  // frames are initialized outward from observed depth, so this stops the
  // far side of a closed object from bleeding through the near side.
  bool cull_backfaces = false;
  // Cosine slack for the cull test: a splat is dropped when the angle between
  // its normal and the view direction passes this far beyond perpendicular.
  // Zero culls at exactly 90 degrees; optimization wants some slack so
  // near-grazing surfels with still-noisy normals keep contributing.
  double cull_cos_margin = 0.0;
  // Replace the alpha-normalized mean depth with the weighted median of the
  // per-contribution depths. Robust to low-weight deep contributions leaking
  // through thin coverage; forward-only (backward always differentiates the
  // mean form), so this is meant for depth export, not optimization.
  bool median_depth = false;
};

/// One surfel mapped into a keyframe view. Culled splats carry visible=false.
struct ProjectedSplat {
  bool visible = false;
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();
  double z_cam = 0.0;
  // First-order depth variation of the splat plane across the image:
  // depth at pixel p = z_cam + zslope . (p - mean2d). Regularized near
  // edge-on orientations.
  Vec2 zslope = Vec2::Zero();
  Vec3 normal_cam = Vec3::Zero();
  Vec3 color = Vec3::Zero();
  double alpha = 0.0;

  // cached intermediates for the backward pass
  Vec3 x_cam = Vec3::Zero();
  Mat2 cov2d_inv = Mat2::Zero();
  Mat2 B = Mat2::Zero();  // J*A
  Eigen::Matrix<double, 3, 2> A = Eigen::Matrix<double, 3, 2>::Zero();  // R_pose * R_surfel * diag(scales)
  Vec3 view_dir = Vec3::Zero();
  double view_dist = 0.0;
  double normal_flip = 1.0;
  double bbox_radius = 0.0;
};

struct Contribution {
  int splat;  // index into RenderOutput::projected
  double kernel;
};

struct RenderOutput {
  ImageD3 color;
  ImageD depth;
  ImageD3 normal;
  ImageD alpha_acc;

  // retained tape
  bool retained = false;
  std::vector<int> surfel_index;             // projected[i] renders surfel surfel_index[i]
  std::vector<ProjectedSplat> projected;     // z-ascending order
  std::vector<std::vector<Contribution>> pixel_contribs;  // row-major, empty when unmasked
  std::uint64_t tape_token = 0;
  RenderOptions options;
};

/// Per-pixel upstream gradients fed to the backward pass. domega/dz_splat,
/// when nonempty, must be aligned with RenderOutput::pixel_contribs.
struct LossGrads {
  ImageD3 dcolor;
  ImageD ddepth;
  ImageD3 dnormal;
  std::vector<std::vector<double>> domega;
  std::vector<std::vector<double>> dz;

  static LossGrads zeros(int w, int h) {
    LossGrads g;
    g.dcolor = ImageD3(w, h);
    g.ddepth = ImageD(w, h);
    return g;
  }
};

struct SurfelGrads {
  Vec3 dmu = Vec3::Zero();
  Vec3 drot = Vec3::Zero();  // right-multiplied axis-angle tangent
  double dlog_scale_u = 0.0;
  double dlog_scale_v = 0.0;
  double dopacity_logit = 0.0;
  std::array<double, kShCoeffCount> dsh{};
};

struct GradientBundle {
  std::vector<SurfelGrads> surfels;
  PoseTangent dpose;                  // left-multiplicative tangent at the pose
  std::vector<double> dmean2d_norm;   // image-plane positional gradient magnitude
};

/// Projects one surfel through pose (object-to-camera) into the camera.
ProjectedSplat project_surfel(const Surfel& s, const GaussianField& field,
                              const Pose& pose, const Camera& cam,
                              const RenderOptions& opts = {});

/// Forward alpha-blended rendering. When mask is given only masked pixels
/// are computed. Throws EmptyField on an empty field.
RenderOutput render(const GaussianField& field, const Pose& pose, const Camera& cam,
                    const ImageU8* mask = nullptr, const RenderOptions& opts = {});

/// Exact reverse accumulation through compositing, projection, SH and the
/// pose action. Requires a tape from render(retain_gradients=true); throws
/// StaleTape if field or pose changed since.
GradientBundle backward(const GaussianField& field, const Pose& pose,
                        const Camera& cam, const RenderOutput& out,
                        const LossGrads& grads);

/// Token mixed from field+pose state, used for tape staleness checks.
std::uint64_t tape_token(const GaussianField& field, const Pose& pose);

/// Applies an optimizer step expressed as per-surfel tangent updates:
/// rotation updates are applied as R <- R * exp(delta).
void apply_surfel_rotation_step(Surfel& s, const Vec3& delta);

}  // namespace splattrack
