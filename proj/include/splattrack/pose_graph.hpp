#pragma once

#include <vector>

#include "splattrack/frontend.hpp"

namespace splattrack {

struct PoseGraphConfig {
  int max_frames = 10;
  double min_visibility_ratio = 0.3;
  double normal_dot_thresh = 0.1;
  int lm_iters = 30;
  double lm_damping_init = 1e-4;
  double lm_damping_up = 10.0;
  double lm_damping_down = 0.5;
  double lm_rel_tol = 1e-8;
  double huber_delta = 0.01;  // meters, for the point-to-plane residual
  bool keyframes_free = false;
  int visibility_stride = 2;  // pixel subsampling of the point-normal map
};

struct VisibilityScore {
  int frame_id = -1;
  double ratio = 0.0;
};

/// One pose-graph edge: correspondences from node a into node b, with the
/// surface normal at each target point (frame b camera coords).
struct PoseGraphEdge {
  int node_a = 0;
  int node_b = 0;
  std::vector<Correspondence> corrs;
  std::vector<Vec3> normals_b;
};

struct PoseGraph {
  std::vector<Pose> poses;       // object-to-camera per node
  std::vector<bool> free_node;   // optimized vs fixed
  std::vector<PoseGraphEdge> edges;
};

/// Fraction of the candidate's masked surface that the incoming view can
/// see: inside the image, front-facing, and in front of the camera.
VisibilityScore visibility_ratio(const Keyframe& candidate, const Frame& incoming,
                                 const Pose& incoming_pose, const PoseGraphConfig& cfg);

/// Pool frames with visibility ratio >= min_ratio, best first, at most
/// max_frames. Throws NoVisibleFrames when empty.
std::vector<Keyframe> select_graph_frames(const std::vector<Keyframe>& pool,
                                          const Frame& incoming,
                                          const Pose& incoming_pose,
                                          const PoseGraphConfig& cfg);

struct GraphSolveResult {
  std::vector<Pose> poses;
  double final_cost = 0.0;
  bool singular = false;
  std::vector<double> accepted_costs;  // robust cost after each accepted step
};

/// Levenberg-Marquardt over the free poses minimizing robust point-to-plane
/// residuals across all edges.
GraphSolveResult optimize_graph(const PoseGraph& graph, const PoseGraphConfig& cfg);

struct TrackDiagnostics {
  int frame = 0;
  double residual = 0.0;
  int n_graph_frames = 0;
  int coarse_inliers = 0;
  bool lost = false;
};

/// Online per-frame pose: coarse pairwise estimate against the latest
/// keyframe, then graph refinement with the incoming pose free.
std::pair<Pose, TrackDiagnostics> track_frame(const Frame& incoming,
                                              const std::vector<Keyframe>& pool,
                                              const Pose& prev_pose,
                                              const CorrespondenceProvider& provider,
                                              const FrontendConfig& fcfg,
                                              const PoseGraphConfig& cfg);

/// Central-difference surface normal of a depth map at integer pixel (x, y),
/// in camera coordinates; zero when undefined.
Vec3 depth_map_normal(const Frame& f, int x, int y);

}  // namespace splattrack
