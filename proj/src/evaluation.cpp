#include "splattrack/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "splattrack/errors.hpp"

namespace splattrack {

KdTree::KdTree(ModelPoints points) : points_(std::move(points)) {
  if (points_.empty()) throw NoValidPoints("KdTree: empty point set");
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * points_.size() / 8 + 4);
  root_ = build(0, static_cast<int>(points_.size()), 0);
}

int KdTree::build(int begin, int end, int depth) {
  const int idx = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  if (end - begin <= 8) {
    nodes_[idx].begin = begin;
    nodes_[idx].end = end;
    return idx;
  }
  const int axis = depth % 3;
  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) { return points_[a][axis] < points_[b][axis]; });
  nodes_[idx].axis = axis;
  nodes_[idx].split = points_[order_[mid]][axis];
  const int l = build(begin, mid, depth + 1);
  const int r = build(mid, end, depth + 1);
  nodes_[idx].left = l;
  nodes_[idx].right = r;
  return idx;
}

void KdTree::search(int node, const Vec3& q, int& best, double& best_sq) const {
  const Node& n = nodes_[node];
  if (n.axis < 0) {
    for (int i = n.begin; i < n.end; ++i) {
      const double d = (points_[order_[i]] - q).squaredNorm();
      if (d < best_sq) {
        best_sq = d;
        best = order_[i];
      }
    }
    return;
  }
  const double delta = q[n.axis] - n.split;
  const int first = delta < 0 ? n.left : n.right;
  const int second = delta < 0 ? n.right : n.left;
  search(first, q, best, best_sq);
  if (delta * delta < best_sq) search(second, q, best, best_sq);
}

std::pair<int, double> KdTree::nearest(const Vec3& query) const {
  int best = -1;
  double best_sq = std::numeric_limits<double>::infinity();
  search(root_, query, best, best_sq);
  return {best, best_sq};
}

double add_metric(const Pose& est, const Pose& gt, const ModelPoints& model) {
  if (model.empty()) throw NoValidPoints("add_metric: empty model");
  double sum = 0.0;
  for (const Vec3& x : model) sum += (est.apply(x) - gt.apply(x)).norm();
  return sum / static_cast<double>(model.size());
}

double adds_metric(const Pose& est, const Pose& gt, const ModelPoints& model) {
  if (model.empty()) throw NoValidPoints("adds_metric: empty model");
  ModelPoints gt_pts(model.size());
  for (size_t i = 0; i < model.size(); ++i) gt_pts[i] = gt.apply(model[i]);
  const KdTree tree(std::move(gt_pts));
  double sum = 0.0;
  for (const Vec3& x : model) sum += std::sqrt(tree.nearest(est.apply(x)).second);
  return sum / static_cast<double>(model.size());
}

double auc(std::vector<double> per_frame_metric, double max_thresh) {
  if (per_frame_metric.empty()) throw EmptyTrajectory("auc: empty metric list");
  // accuracy(tau) = fraction of frames with metric < tau is a right-continuous
  // step function; its exact integral over [0, max] is sum over frames of the
  // threshold mass above each value.
  std::sort(per_frame_metric.begin(), per_frame_metric.end());
  const double n = static_cast<double>(per_frame_metric.size());
  double area = 0.0;
  for (double v : per_frame_metric) {
    if (v < max_thresh) area += (max_thresh - v) / n;
  }
  return 100.0 * area / max_thresh;
}

double chamfer_squared(const ModelPoints& p, const ModelPoints& q) {
  if (p.empty() || q.empty()) throw NoValidPoints("chamfer: empty point set");
  const KdTree tp(p), tq(q);
  double sum_pq = 0.0, sum_qp = 0.0;
  for (const Vec3& x : p) sum_pq += tq.nearest(x).second;
  for (const Vec3& x : q) sum_qp += tp.nearest(x).second;
  return sum_pq / static_cast<double>(p.size()) + sum_qp / static_cast<double>(q.size());
}

ModelPoints tsdf_fuse(const std::vector<DepthView>& views, const TsdfConfig& cfg) {
  if (views.empty()) throw EmptyFusion("tsdf_fuse: no depth maps");
  const Vec3 extent = cfg.grid_max - cfg.grid_min;
  const int nx = std::max(1, static_cast<int>(std::ceil(extent.x() / cfg.voxel)));
  const int ny = std::max(1, static_cast<int>(std::ceil(extent.y() / cfg.voxel)));
  const int nz = std::max(1, static_cast<int>(std::ceil(extent.z() / cfg.voxel)));
  std::vector<float> sdf(static_cast<size_t>(nx) * ny * nz, 0.f);
  std::vector<float> weight(sdf.size(), 0.f);
  auto lin = [&](int i, int j, int k) {
    return (static_cast<size_t>(k) * ny + j) * nx + i;
  };
  auto center = [&](int i, int j, int k) -> Vec3 {
    return cfg.grid_min + cfg.voxel * Vec3(i + 0.5, j + 0.5, k + 0.5);
  };

  for (const DepthView& view : views) {
    const Camera& cam = view.intrinsics;
    for (int k = 0; k < nz; ++k) {
      for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
          const Vec3 p_cam = view.pose.apply(center(i, j, k));
          if (p_cam.z() <= 0) continue;
          const Vec2 uv = cam.project(p_cam);
          const int u = static_cast<int>(std::lround(uv.x()));
          const int v = static_cast<int>(std::lround(uv.y()));
          if (!view.depth.inside(u, v)) continue;
          const double d = view.depth.at(u, v);
          if (d <= 0) continue;
          const double s = d - p_cam.z();  // positive in front of the surface
          if (s < -cfg.truncation) continue;
          const float sv = static_cast<float>(std::min(s, cfg.truncation));
          const size_t id = lin(i, j, k);
          sdf[id] = (sdf[id] * weight[id] + sv) / (weight[id] + 1.f);
          weight[id] += 1.f;
        }
      }
    }
  }

  bool any = false;
  for (float w : weight) any = any || w > 0;
  if (!any) throw EmptyFusion("tsdf_fuse: no observed voxels");

  ModelPoints out;
  auto observed = [&](size_t id) { return weight[id] > 0.f; };
  for (int k = 0; k < nz; ++k) {
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i) {
        const size_t id0 = lin(i, j, k);
        if (!observed(id0)) continue;
        const float s0 = sdf[id0];
        const int di[3] = {1, 0, 0}, dj[3] = {0, 1, 0}, dk[3] = {0, 0, 1};
        for (int axis = 0; axis < 3; ++axis) {
          const int i1 = i + di[axis], j1 = j + dj[axis], k1 = k + dk[axis];
          if (i1 >= nx || j1 >= ny || k1 >= nz) continue;
          const size_t id1 = lin(i1, j1, k1);
          if (!observed(id1)) continue;
          const float s1 = sdf[id1];
          if ((s0 > 0) == (s1 > 0)) continue;
          if (s0 == s1) continue;
          const double t = s0 / static_cast<double>(s0 - s1);
          out.push_back(center(i, j, k) +
                        t * (center(i1, j1, k1) - center(i, j, k)));
        }
      }
    }
  }
  if (out.empty()) throw EmptyFusion("tsdf_fuse: no zero crossings");
  return out;
}

EvalReport evaluate_run(const PoseTrajectory& traj, const ModelPoints& gt_model,
                        const ModelPoints& reconstruction) {
  if (traj.est.size() != traj.gt.size() || traj.est.empty())
    throw EmptyTrajectory("evaluate_run: misaligned or empty trajectory");
  EvalReport rep;
  rep.n_frames = static_cast<int>(traj.est.size());
  rep.per_frame_add.reserve(traj.est.size());
  rep.per_frame_adds.reserve(traj.est.size());
  for (size_t i = 0; i < traj.est.size(); ++i) {
    rep.per_frame_add.push_back(add_metric(traj.est[i], traj.gt[i], gt_model));
    rep.per_frame_adds.push_back(adds_metric(traj.est[i], traj.gt[i], gt_model));
  }
  rep.add_auc = auc(rep.per_frame_add);
  rep.adds_auc = auc(rep.per_frame_adds);
  if (!reconstruction.empty()) {
    const double cd_m2 = chamfer_squared(reconstruction, gt_model);
    rep.chamfer_sq_cm2 = cd_m2 * 1e4;
    rep.chamfer_cm = std::sqrt(cd_m2) * 100.0;
    rep.n_recon_points = static_cast<int>(reconstruction.size());
  }
  if (!traj.frame_time_s.empty()) {
    rep.atpf_s = std::accumulate(traj.frame_time_s.begin(), traj.frame_time_s.end(), 0.0) /
                 static_cast<double>(traj.frame_time_s.size());
  }
  return rep;
}

void write_report_json(const EvalReport& report, const std::string& path) {
  nlohmann::json j;
  j["add_auc"] = report.add_auc;
  j["adds_auc"] = report.adds_auc;
  j["chamfer_sq_cm2"] = report.chamfer_sq_cm2;
  j["chamfer_cm"] = report.chamfer_cm;
  j["atpf_s"] = report.atpf_s;
  j["n_frames"] = report.n_frames;
  j["n_recon_points"] = report.n_recon_points;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << "\n";
}

void write_per_frame_csv(const EvalReport& report, const PoseTrajectory& traj,
                         const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "frame,add_m,adds_m\n";
  f.precision(17);
  for (size_t i = 0; i < report.per_frame_add.size(); ++i) {
    const int id = i < traj.ids.size() ? traj.ids[i] : static_cast<int>(i);
    f << id << "," << report.per_frame_add[i] << "," << report.per_frame_adds[i] << "\n";
  }
}

ModelPoints load_points(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  ModelPoints pts;
  std::string line;
  bool ply = false;
  int ply_count = 0;
  if (std::getline(f, line)) {
    if (line.rfind("ply", 0) == 0) {
      ply = true;
      while (std::getline(f, line)) {
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        if (tok == "element") {
          std::string what;
          ss >> what >> ply_count;
        } else if (tok == "end_header") {
          break;
        }
      }
    } else {
      std::istringstream ss(line);
      double x, y, z;
      if (ss >> x >> y >> z) pts.emplace_back(x, y, z);
    }
  }
  while (std::getline(f, line)) {
    if (ply && ply_count > 0 && static_cast<int>(pts.size()) >= ply_count) break;
    std::istringstream ss(line);
    double x, y, z;
    if (ss >> x >> y >> z) pts.emplace_back(x, y, z);
  }
  if (pts.empty()) throw IoError("no points in " + path);
  return pts;
}

void save_points_xyz(const ModelPoints& points, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f.precision(17);
  for (const Vec3& p : points) f << p.x() << " " << p.y() << " " << p.z() << "\n";
}

}  // namespace splattrack
