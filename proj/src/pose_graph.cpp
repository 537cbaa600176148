#include "splattrack/pose_graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "splattrack/errors.hpp"
#include "splattrack/frontend.hpp"

namespace splattrack {

Vec3 depth_map_normal(const Frame& f, int x, int y) {
  auto d = [&](int px, int py) -> double {
    return f.valid_depth(px, py) ? f.depth.at(px, py) : 0.0;
  };
  const double dl = d(x - 1, y), dr = d(x + 1, y);
  const double du = d(x, y - 1), dd = d(x, y + 1);
  if (dl <= 0 || dr <= 0 || du <= 0 || dd <= 0) return Vec3::Zero();
  const Camera& cam = f.intrinsics;
  const Vec3 a = cam.ray(x + 1, y) * dr - cam.ray(x - 1, y) * dl;
  const Vec3 b = cam.ray(x, y + 1) * dd - cam.ray(x, y - 1) * du;
  Vec3 g = a.cross(b);
  const double gn = g.norm();
  if (gn < 1e-12) return Vec3::Zero();
  g /= gn;
  // Orient toward the camera.
  const Vec3 p = cam.ray(x, y) * d(x, y);
  if (g.dot(p) > 0) g = -g;
  return g;
}

VisibilityScore visibility_ratio(const Keyframe& candidate, const Frame& incoming,
                                 const Pose& incoming_pose, const PoseGraphConfig& cfg) {
  const Frame& f = *candidate.frame;
  const Pose cand_to_inc = compose(incoming_pose, candidate.pose.inverse());
  const int stride = std::max(1, cfg.visibility_stride);
  size_t total = 0, visible = 0;
  for (int y = 1; y < f.depth.height - 1; y += stride) {
    for (int x = 1; x < f.depth.width - 1; x += stride) {
      if (!f.masked(x, y) || !f.valid_depth(x, y)) continue;
      const Vec3 n = depth_map_normal(f, x, y);
      if (n.isZero()) continue;
      ++total;
      const Vec3 p_cand = f.intrinsics.ray(x, y) * f.depth.at(x, y);
      const Vec3 p_inc = cand_to_inc.apply(p_cand);
      if (p_inc.z() <= 0) continue;
      const Vec2 uv = incoming.intrinsics.project(p_inc);
      if (uv.x() < 0 || uv.x() > incoming.intrinsics.width - 1 || uv.y() < 0 ||
          uv.y() > incoming.intrinsics.height - 1)
        continue;
      const Vec3 n_inc = cand_to_inc.R * n;
      const Vec3 ray_dir = p_inc.normalized();
      if (n_inc.dot(-ray_dir) > cfg.normal_dot_thresh) ++visible;
    }
  }
  if (total == 0) throw NoValidPoints("visibility_ratio: candidate has no usable points");
  VisibilityScore s;
  s.frame_id = candidate.id;
  s.ratio = static_cast<double>(visible) / static_cast<double>(total);
  return s;
}

std::vector<Keyframe> select_graph_frames(const std::vector<Keyframe>& pool,
                                          const Frame& incoming,
                                          const Pose& incoming_pose,
                                          const PoseGraphConfig& cfg) {
  std::vector<std::pair<double, size_t>> scored;
  for (size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].outlier) continue;
    double ratio = 0.0;
    try {
      ratio = visibility_ratio(pool[i], incoming, incoming_pose, cfg).ratio;
    } catch (const NoValidPoints&) {
      continue;
    }
    if (ratio >= cfg.min_visibility_ratio) scored.emplace_back(ratio, i);
  }
  if (scored.empty()) throw NoVisibleFrames("select_graph_frames: no qualifying frames");
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  if (scored.size() > static_cast<size_t>(cfg.max_frames))
    scored.resize(static_cast<size_t>(cfg.max_frames));
  std::vector<Keyframe> out;
  out.reserve(scored.size());
  for (const auto& [ratio, idx] : scored) out.push_back(pool[idx]);
  return out;
}

namespace {

double huber_cost(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

double graph_cost(const PoseGraph& graph, const std::vector<Pose>& poses,
                  double delta) {
  double cost = 0.0;
  for (const auto& e : graph.edges) {
    const Pose t_ab = compose(poses[e.node_b], poses[e.node_a].inverse());
    for (size_t k = 0; k < e.corrs.size(); ++k) {
      const double r = e.normals_b[k].dot(t_ab.apply(e.corrs[k].point_a) -
                                          e.corrs[k].point_b);
      cost += huber_cost(r, delta);
    }
  }
  return cost;
}

}  // namespace

GraphSolveResult optimize_graph(const PoseGraph& graph, const PoseGraphConfig& cfg) {
  const size_t n = graph.poses.size();
  for (const auto& e : graph.edges) {
    if (e.corrs.size() < 3 || e.corrs.size() != e.normals_b.size())
      throw InvalidGraph("optimize_graph: edge needs >= 3 correspondences with normals");
    if (e.node_a < 0 || e.node_b < 0 || static_cast<size_t>(e.node_a) >= n ||
        static_cast<size_t>(e.node_b) >= n || e.node_a == e.node_b)
      throw InvalidGraph("optimize_graph: edge node out of range");
  }

  GraphSolveResult res;
  res.poses = graph.poses;

  std::vector<int> param_of(n, -1);
  int n_free = 0;
  for (size_t i = 0; i < n; ++i) {
    if (graph.free_node.size() > i && graph.free_node[i]) param_of[i] = n_free++;
  }
  double cost = graph_cost(graph, res.poses, cfg.huber_delta);
  res.final_cost = cost;
  res.accepted_costs.push_back(cost);
  if (n_free == 0) return res;

  const int dim = 6 * n_free;
  double lambda = cfg.lm_damping_init;
  for (int iter = 0; iter < cfg.lm_iters; ++iter) {
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(dim);
    for (const auto& e : graph.edges) {
      const Pose t_ab = compose(res.poses[e.node_b], res.poses[e.node_a].inverse());
      const int pa = param_of[e.node_a], pb = param_of[e.node_b];
      for (size_t k = 0; k < e.corrs.size(); ++k) {
        const Vec3& nb = e.normals_b[k];
        const Vec3& xa = e.corrs[k].point_a;
        const Vec3 y = t_ab.apply(xa);
        const double r = nb.dot(y - e.corrs[k].point_b);
        const double ar = std::abs(r);
        const double w = ar <= cfg.huber_delta ? 1.0 : cfg.huber_delta / ar;
        Eigen::VectorXd row = Eigen::VectorXd::Zero(dim);
        if (pb >= 0) {
          row.segment<3>(6 * pb) = nb;
          row.segment<3>(6 * pb + 3) = y.cross(nb);
        }
        if (pa >= 0) {
          const Vec3 m = t_ab.R.transpose() * nb;
          row.segment<3>(6 * pa) = -m;
          row.segment<3>(6 * pa + 3) = m.cross(xa);
        }
        H.noalias() += w * row * row.transpose();
        g.noalias() += w * r * row;
      }
    }
    if (iter == 0) {
      Eigen::FullPivLU<Eigen::MatrixXd> lu(H);
      if (lu.rank() < dim) {
        res.singular = true;
        res.poses = graph.poses;
        res.final_cost = graph_cost(graph, graph.poses, cfg.huber_delta);
        return res;
      }
    }
    bool accepted = false;
    while (lambda < 1e12) {
      Eigen::MatrixXd Hd = H;
      Hd.diagonal().array() += lambda;
      const Eigen::VectorXd step = Hd.ldlt().solve(-g);
      if (!step.allFinite()) {
        lambda *= cfg.lm_damping_up;
        continue;
      }
      std::vector<Pose> trial = res.poses;
      for (size_t i = 0; i < n; ++i) {
        if (param_of[i] < 0) continue;
        PoseTangent eps;
        eps.trans = step.segment<3>(6 * param_of[i]);
        eps.rot = step.segment<3>(6 * param_of[i] + 3);
        trial[i] = compose(se3_exp(eps), res.poses[i]);
      }
      const double trial_cost = graph_cost(graph, trial, cfg.huber_delta);
      if (std::isfinite(trial_cost) && trial_cost <= cost) {
        const double rel = (cost - trial_cost) / std::max(cost, 1e-30);
        res.poses = std::move(trial);
        cost = trial_cost;
        res.accepted_costs.push_back(cost);
        lambda *= cfg.lm_damping_down;
        accepted = true;
        if (rel < cfg.lm_rel_tol) iter = cfg.lm_iters;  // converged
        break;
      }
      lambda *= cfg.lm_damping_up;
    }
    if (!accepted) break;
  }
  res.final_cost = cost;
  return res;
}

std::pair<Pose, TrackDiagnostics> track_frame(const Frame& incoming,
                                              const std::vector<Keyframe>& pool,
                                              const Pose& prev_pose,
                                              const CorrespondenceProvider& provider,
                                              const FrontendConfig& fcfg,
                                              const PoseGraphConfig& cfg) {
  TrackDiagnostics diag;
  diag.frame = incoming.timestamp;
  if (pool.empty()) throw TrackingLost("track_frame: empty keyframe pool");

  // Coarse estimate against the most recent keyframe.
  const Keyframe* latest = &pool.front();
  for (const auto& kf : pool) {
    if (kf.frame->timestamp > latest->frame->timestamp) latest = &kf;
  }
  Pose coarse = prev_pose;
  bool coarse_ok = false;
  try {
    const PairwisePose pp =
        estimate_pairwise_pose(*latest->frame, incoming, provider, fcfg);
    if (pp.inlier_count >= 3) {
      coarse = compose(pp.pose, latest->pose);
      diag.coarse_inliers = pp.inlier_count;
      coarse_ok = true;
    }
  } catch (const MatchingFailed&) {
  } catch (const DegenerateConfiguration&) {
  }

  // Graph refinement with only the incoming pose free.
  bool graph_ok = false;
  Pose refined = coarse;
  try {
    const std::vector<Keyframe> selected =
        select_graph_frames(pool, incoming, coarse, cfg);
    diag.n_graph_frames = static_cast<int>(selected.size());
    PoseGraph graph;
    graph.poses.reserve(selected.size() + 1);
    for (const auto& kf : selected) graph.poses.push_back(kf.pose);
    graph.poses.push_back(coarse);
    graph.free_node.assign(graph.poses.size(), cfg.keyframes_free);
    graph.free_node.back() = true;
    const int inc_node = static_cast<int>(graph.poses.size()) - 1;
    for (size_t i = 0; i < selected.size(); ++i) {
      PoseGraphEdge edge;
      edge.node_a = static_cast<int>(i);
      edge.node_b = inc_node;
      for (const auto& c : provider.match(*selected[i].frame, incoming)) {
        const Vec3 nb = depth_map_normal(incoming, static_cast<int>(std::lround(c.pixel_b.x())),
                                         static_cast<int>(std::lround(c.pixel_b.y())));
        if (nb.isZero()) continue;
        edge.corrs.push_back(c);
        edge.normals_b.push_back(nb);
      }
      if (edge.corrs.size() >= 3) graph.edges.push_back(std::move(edge));
    }
    if (!graph.edges.empty()) {
      const GraphSolveResult solved = optimize_graph(graph, cfg);
      if (!solved.singular && solved.poses[inc_node].R.allFinite() &&
          solved.poses[inc_node].t.allFinite()) {
        refined = solved.poses[inc_node];
        diag.residual = solved.final_cost;
        graph_ok = true;
      }
    }
  } catch (const NoVisibleFrames&) {
  } catch (const InvalidGraph&) {
  }

  if (!coarse_ok && !graph_ok) {
    diag.lost = true;
    return {prev_pose, diag};
  }
  if (!refined.R.allFinite() || !refined.t.allFinite()) {
    diag.lost = true;
    return {prev_pose, diag};
  }
  return {refined, diag};
}

}  // namespace splattrack
