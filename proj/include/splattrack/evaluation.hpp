#pragma once

#include <string>
#include <vector>

#include "splattrack/camera.hpp"
#include "splattrack/image.hpp"
#include "splattrack/pose.hpp"

namespace splattrack {

using ModelPoints = std::vector<Vec3>;

/// Exact nearest-neighbor search over a static point set.
class KdTree {
 public:
  explicit KdTree(ModelPoints points);

  /// Returns (index, squared distance) of the exact nearest neighbor.
  std::pair<int, double> nearest(const Vec3& query) const;

  const ModelPoints& points() const { return points_; }

 private:
  struct Node {
    int axis = -1;       // -1 marks a leaf
    double split = 0.0;
    int left = -1, right = -1;
    int begin = 0, end = 0;  // leaf range into order_
  };
  int build(int begin, int end, int depth);
  void search(int node, const Vec3& q, int& best, double& best_sq) const;

  ModelPoints points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

/// Matched mean model-point distance between two poses (meters).
double add_metric(const Pose& est, const Pose& gt, const ModelPoints& model);

/// Nearest-neighbor mean model-point distance (symmetric-object variant).
double adds_metric(const Pose& est, const Pose& gt, const ModelPoints& model);

/// Area under accuracy-vs-threshold for thresholds in [0, max_thresh],
/// normalized to [0, 100]; exact step-function integration of the
/// empirical CDF. Throws EmptyTrajectory.
double auc(std::vector<double> per_frame_metric, double max_thresh = 0.1);

/// Symmetric squared Chamfer distance in squared meters.
double chamfer_squared(const ModelPoints& p, const ModelPoints& q);

struct TsdfConfig {
  double voxel = 0.002;       // meters
  double truncation = 0.02;   // meters
  Vec3 grid_min = Vec3(-0.2, -0.2, -0.2);
  Vec3 grid_max = Vec3(0.2, 0.2, 0.2);
};

/// One depth observation for fusion: object-to-camera pose + intrinsics.
struct DepthView {
  ImageD depth;  // meters, <= 0 invalid
  Camera intrinsics;
  Pose pose;
};

/// Weighted projective TSDF integration; returns zero-crossing surface
/// points (voxel centers refined by linear interpolation along each axis).
/// Throws EmptyFusion when no voxel is observed.
ModelPoints tsdf_fuse(const std::vector<DepthView>& views, const TsdfConfig& cfg);

struct PoseTrajectory {
  std::vector<int> ids;
  std::vector<Pose> est;  // object-to-camera
  std::vector<Pose> gt;   // object-to-camera, same object frame as est
  std::vector<double> frame_time_s;
};

struct EvalReport {
  double add_auc = 0.0;
  double adds_auc = 0.0;
  double chamfer_sq_cm2 = 0.0;  // squared form, cm^2
  double chamfer_cm = 0.0;      // root-of-mean variant, cm
  double atpf_s = 0.0;          // average time per frame
  int n_frames = 0;
  int n_recon_points = 0;
  std::vector<double> per_frame_add;
  std::vector<double> per_frame_adds;
};

/// Pose + reconstruction scoring: ADD/ADD-S AUC over the trajectory and
/// Chamfer between the fused reconstruction and the ground-truth model.
/// Reconstruction points and gt model must share the object frame.
EvalReport evaluate_run(const PoseTrajectory& traj, const ModelPoints& gt_model,
                        const ModelPoints& reconstruction);

void write_report_json(const EvalReport& report, const std::string& path);
void write_per_frame_csv(const EvalReport& report, const PoseTrajectory& traj,
                         const std::string& path);

/// Plain text point list (one "x y z" per line); PLY vertex lists are
/// also accepted.
ModelPoints load_points(const std::string& path);
void save_points_xyz(const ModelPoints& points, const std::string& path);

}  // namespace splattrack
