#include "splattrack/gaussian_field.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <numeric>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include "splattrack/errors.hpp"
#include "splattrack/pose_graph.hpp"
#include "splattrack/sh.hpp"

namespace splattrack {

Mat3 random_rotation(std::mt19937_64& rng) {
  // Uniform quaternion (Shoemake), then Gram-Schmidt to kill rounding.
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double u1 = uni(rng), u2 = uni(rng), u3 = uni(rng);
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  Eigen::Quaterniond q(a * std::sin(2 * M_PI * u2), a * std::cos(2 * M_PI * u2),
                       b * std::sin(2 * M_PI * u3), b * std::cos(2 * M_PI * u3));
  Mat3 R = q.normalized().toRotationMatrix();
  R.col(0).normalize();
  R.col(1) = (R.col(1) - R.col(0) * R.col(0).dot(R.col(1))).normalized();
  R.col(2) = R.col(0).cross(R.col(1));
  return R;
}

namespace {

struct VoxelKey {
  long long x, y, z;
  bool operator<(const VoxelKey& o) const {
    return std::tie(x, y, z) < std::tie(o.x, o.y, o.z);
  }
};

VoxelKey voxel_of(const Vec3& p, double voxel) {
  return {static_cast<long long>(std::floor(p.x() / voxel)),
          static_cast<long long>(std::floor(p.y() / voxel)),
          static_cast<long long>(std::floor(p.z() / voxel))};
}

struct ColoredPoint {
  Vec3 p;
  Vec3 c;
  Vec3 n = Vec3::Zero();  // outward surface normal estimate, object frame
};

/// Largest single-linkage component with the given connection radius,
/// via a uniform grid of cell size = radius.
std::vector<ColoredPoint> largest_cluster(const std::vector<ColoredPoint>& pts,
                                          double radius) {
  const size_t n = pts.size();
  std::map<VoxelKey, std::vector<int>> grid;
  for (size_t i = 0; i < n; ++i) grid[voxel_of(pts[i].p, radius)].push_back(static_cast<int>(i));

  std::vector<int> label(n, -1);
  int n_components = 0;
  std::vector<int> stack;
  const double r2 = radius * radius;
  for (size_t s = 0; s < n; ++s) {
    if (label[s] >= 0) continue;
    const int comp = n_components++;
    stack.push_back(static_cast<int>(s));
    label[s] = comp;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      const VoxelKey k = voxel_of(pts[i].p, radius);
      for (long long dz = -1; dz <= 1; ++dz)
        for (long long dy = -1; dy <= 1; ++dy)
          for (long long dx = -1; dx <= 1; ++dx) {
            auto it = grid.find({k.x + dx, k.y + dy, k.z + dz});
            if (it == grid.end()) continue;
            for (int j : it->second) {
              if (label[j] >= 0) continue;
              if ((pts[i].p - pts[j].p).squaredNorm() <= r2) {
                label[j] = comp;
                stack.push_back(j);
              }
            }
          }
    }
  }
  std::vector<int> count(n_components, 0);
  for (size_t i = 0; i < n; ++i) ++count[label[i]];
  const int best = static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
  std::vector<ColoredPoint> out;
  for (size_t i = 0; i < n; ++i)
    if (label[i] == best) out.push_back(pts[i]);
  return out;
}

}  // namespace

namespace {

/// Masked keyframe depth fused into an object-frame colored+oriented cloud.
std::vector<ColoredPoint> fused_cloud(const std::vector<Keyframe>& keyframes) {
  std::vector<ColoredPoint> cloud;
  for (const auto& kf : keyframes) {
    const Frame& f = *kf.frame;
    const Pose cam_to_obj = kf.pose.inverse();
    for (int y = 0; y < f.depth.height; ++y) {
      for (int x = 0; x < f.depth.width; ++x) {
        if (!f.masked(x, y) || !f.valid_depth(x, y)) continue;
        const Vec3 p = cam_to_obj.apply(f.intrinsics.backproject(x, y, f.depth.at(x, y)));
        const Vec3 n = cam_to_obj.R * depth_map_normal(f, x, y);
        cloud.push_back({p, Vec3(f.rgb.at(x, y, 0), f.rgb.at(x, y, 1), f.rgb.at(x, y, 2)), n});
      }
    }
  }
  return cloud;
}

/// Voxel-grid downsample: centroid per voxel, normals summed.
std::vector<ColoredPoint> voxel_downsample(const std::vector<ColoredPoint>& cloud,
                                           double voxel) {
  std::map<VoxelKey, std::pair<ColoredPoint, int>> voxels;
  for (const auto& cp : cloud) {
    auto& [acc, cnt] = voxels[voxel_of(cp.p, voxel)];
    if (cnt == 0) acc = {Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
    acc.p += cp.p;
    acc.c += cp.c;
    acc.n += cp.n;
    ++cnt;
  }
  std::vector<ColoredPoint> down;
  down.reserve(voxels.size());
  for (auto& [k, v] : voxels)
    down.push_back({v.first.p / v.second, v.first.c / v.second, v.first.n});
  return down;
}

/// Surfel at an observed point: disk aligned with the observed surface
/// normal (tangent directions spun randomly about it), falling back to a
/// fully random frame when the normal was undefined.
Surfel observed_surfel(const ColoredPoint& cp, const GaussianField& field,
                       double mid_log_scale, std::mt19937_64& rng, double opacity) {
  std::uniform_real_distribution<double> spin(0.0, 1.0);
  Surfel s;
  s.mu = (cp.p - field.canonical_offset) / field.canonical_scale;
  if (cp.n.squaredNorm() > 1e-12) {
    const Vec3 nw = cp.n.normalized();
    Vec3 ref = std::abs(nw.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
    const Vec3 u0 = nw.cross(ref).normalized();
    const Vec3 v0 = nw.cross(u0);
    const double phi = 2.0 * M_PI * spin(rng);
    Mat3 R;
    R.col(0) = std::cos(phi) * u0 + std::sin(phi) * v0;
    R.col(1) = nw.cross(R.col(0));
    R.col(2) = nw;
    s.set_rotation(R);
  } else {
    s.set_rotation(random_rotation(rng));
  }
  s.log_scale_u = mid_log_scale;
  s.log_scale_v = mid_log_scale;
  s.opacity_logit = logit(opacity);
  for (int ch = 0; ch < 3; ++ch) {
    s.sh_coeffs[ch] = (cp.c[ch] - 0.5) / kShC0;
  }
  return s;
}

}  // namespace

GaussianField fuse_and_init(const std::vector<Keyframe>& keyframes,
                            const DensityControlConfig& cfg, std::uint64_t seed) {
  std::vector<ColoredPoint> cloud = fused_cloud(keyframes);
  if (cloud.empty()) throw EmptyObservation("fuse_and_init: no masked depth");

  std::vector<ColoredPoint> down = voxel_downsample(cloud, cfg.voxel_size_m);

  down = largest_cluster(down, cfg.cluster_dist_m);

  // Jittered upsample until the count exceeds the minimum.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.5 * cfg.voxel_size_m,
                                                0.5 * cfg.voxel_size_m);
  std::vector<ColoredPoint> pts = down;
  size_t src = 0;
  while (static_cast<int>(pts.size()) <= cfg.min_points) {
    ColoredPoint cp = down[src % down.size()];
    cp.p += Vec3(jitter(rng), jitter(rng), jitter(rng));
    pts.push_back(cp);
    ++src;
  }

  // Canonical normalization: fit the cloud into [-1,1]^3 with a small margin.
  Vec3 lo = pts[0].p, hi = pts[0].p;
  for (const auto& cp : pts) {
    lo = lo.cwiseMin(cp.p);
    hi = hi.cwiseMax(cp.p);
  }
  GaussianField field;
  field.canonical_offset = 0.5 * (lo + hi);
  field.canonical_scale = std::max(1e-6, 0.5 * (hi - lo).maxCoeff() * 1.05);

  const double mid_log_scale =
      std::log(0.5 * (cfg.scale_clip_min + cfg.scale_clip_max));
  field.surfels.reserve(pts.size());
  for (const auto& cp : pts) {
    field.surfels.push_back(
        observed_surfel(cp, field, mid_log_scale, rng, cfg.init_opacity));
  }
  field.positional_grad_accum.assign(field.surfels.size(), 0.0);
  field.positional_grad_count.assign(field.surfels.size(), 0);
  return field;
}

int augment_field(GaussianField& field, const std::vector<Keyframe>& keyframes,
                  const DensityControlConfig& cfg, std::uint64_t seed) {
  std::vector<ColoredPoint> cloud = fused_cloud(keyframes);
  if (cloud.empty()) return 0;
  const std::vector<ColoredPoint> down = voxel_downsample(cloud, cfg.voxel_size_m);

  // Occupancy of the current field at the fusion voxel size; a candidate
  // is novel when no surfel sits in its voxel or any direct neighbor.
  std::set<VoxelKey> occupied;
  for (size_t i = 0; i < field.surfels.size(); ++i) {
    occupied.insert(voxel_of(field.world_point(i), cfg.voxel_size_m));
  }
  auto covered = [&](const Vec3& p) {
    const VoxelKey k = voxel_of(p, cfg.voxel_size_m);
    for (long long dz = -1; dz <= 1; ++dz)
      for (long long dy = -1; dy <= 1; ++dy)
        for (long long dx = -1; dx <= 1; ++dx)
          if (occupied.count({k.x + dx, k.y + dy, k.z + dz})) return true;
    return false;
  };

  std::vector<ColoredPoint> novel;
  for (const auto& cp : down) {
    if (!covered(cp.p)) novel.push_back(cp);
  }
  if (novel.empty()) return 0;

  // Match the surface density the initial fusion produced: it upsampled the
  // whole downsampled cloud to min_points, so a newly exposed patch should
  // get the same points-per-voxel ratio.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.5 * cfg.voxel_size_m,
                                                0.5 * cfg.voxel_size_m);
  const double per_voxel =
      std::max(1.0, static_cast<double>(cfg.min_points) / down.size());
  const int target = static_cast<int>(std::lround(novel.size() * per_voxel));
  std::vector<ColoredPoint> pts = novel;
  size_t src = 0;
  while (static_cast<int>(pts.size()) < target) {
    ColoredPoint cp = novel[src % novel.size()];
    cp.p += Vec3(jitter(rng), jitter(rng), jitter(rng));
    pts.push_back(cp);
    ++src;
  }

  const double mid_log_scale =
      std::log(0.5 * (cfg.scale_clip_min + cfg.scale_clip_max));
  for (const auto& cp : pts) {
    field.surfels.push_back(
        observed_surfel(cp, field, mid_log_scale, rng, cfg.init_opacity));
    field.positional_grad_accum.push_back(0.0);
    field.positional_grad_count.push_back(0);
  }
  return static_cast<int>(pts.size());
}

namespace {

/// Nearest-rank percentile of an ascending-sorted list.
double percentile_sorted(const std::vector<double>& sorted, double pct) {
  const size_t n = sorted.size();
  size_t rank = static_cast<size_t>(std::ceil(pct / 100.0 * n));
  if (rank == 0) rank = 1;
  if (rank > n) rank = n;
  return sorted[rank - 1];
}

}  // namespace

int prune_by_opacity_percentile(GaussianField& field, const DensityControlConfig& cfg) {
  int pruned = 0;
  while (field.surfels.size() >= 20) {
    std::vector<double> ops(field.surfels.size());
    for (size_t i = 0; i < field.surfels.size(); ++i) ops[i] = field.surfels[i].opacity();
    std::vector<double> sorted = ops;
    std::sort(sorted.begin(), sorted.end());
    if (percentile_sorted(sorted, 100.0 - cfg.prune_percentile) > cfg.opacity_target)
      break;
    const double cutoff = percentile_sorted(sorted, cfg.prune_percentile);
    std::vector<Surfel> kept;
    std::vector<double> kept_acc;
    std::vector<int> kept_cnt;
    for (size_t i = 0; i < field.surfels.size(); ++i) {
      if (ops[i] <= cutoff && kept.size() + (field.surfels.size() - i) > 1) {
        ++pruned;
        continue;
      }
      kept.push_back(field.surfels[i]);
      kept_acc.push_back(field.positional_grad_accum[i]);
      kept_cnt.push_back(field.positional_grad_count[i]);
    }
    if (kept.size() == field.surfels.size()) break;  // nothing removable
    field.surfels = std::move(kept);
    field.positional_grad_accum = std::move(kept_acc);
    field.positional_grad_count = std::move(kept_cnt);
  }
  return pruned;
}

int densify(GaussianField& field, const DensityControlConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double split_size = 0.5 * (cfg.scale_clip_min + cfg.scale_clip_max);
  const size_t n0 = field.surfels.size();
  std::vector<Surfel> added;
  std::vector<size_t> remove;
  for (size_t i = 0; i < n0; ++i) {
    if (field.positional_grad_accum[i] <= cfg.densify_grad_thresh) continue;
    Surfel& s = field.surfels[i];
    const double smax = std::max(s.scale_u(), s.scale_v());
    if (smax > split_size) {
      // Split: two children along the major axis, scales shrunk.
      const Vec3 axis = s.scale_u() >= s.scale_v() ? s.tangent_u : s.tangent_v;
      Surfel a = s, b = s;
      a.mu += 0.5 * smax * axis;
      b.mu -= 0.5 * smax * axis;
      const double shrink = std::log(0.6);
      a.log_scale_u += shrink;
      a.log_scale_v += shrink;
      b.log_scale_u += shrink;
      b.log_scale_v += shrink;
      added.push_back(a);
      added.push_back(b);
      remove.push_back(i);
    } else {
      Surfel c = s;
      c.mu += smax * s.tangent_u;
      added.push_back(c);
    }
    field.positional_grad_accum[i] = 0.0;
    field.positional_grad_count[i] = 0;
  }
  if (!remove.empty()) {
    std::vector<bool> dead(n0, false);
    for (size_t i : remove) dead[i] = true;
    std::vector<Surfel> kept;
    std::vector<double> kept_acc;
    std::vector<int> kept_cnt;
    for (size_t i = 0; i < n0; ++i) {
      if (dead[i]) continue;
      kept.push_back(field.surfels[i]);
      kept_acc.push_back(field.positional_grad_accum[i]);
      kept_cnt.push_back(field.positional_grad_count[i]);
    }
    field.surfels = std::move(kept);
    field.positional_grad_accum = std::move(kept_acc);
    field.positional_grad_count = std::move(kept_cnt);
  }
  for (auto& s : added) field.surfels.push_back(s);
  field.positional_grad_accum.resize(field.surfels.size(), 0.0);
  field.positional_grad_count.resize(field.surfels.size(), 0);
  clip_scales(field, cfg);
  (void)rng;
  return static_cast<int>(field.surfels.size()) - static_cast<int>(n0);
}

void clip_scales(GaussianField& field, const DensityControlConfig& cfg) {
  const double lo = std::log(cfg.scale_clip_min), hi = std::log(cfg.scale_clip_max);
  for (auto& s : field.surfels) {
    s.log_scale_u = std::clamp(s.log_scale_u, lo, hi);
    s.log_scale_v = std::clamp(s.log_scale_v, lo, hi);
  }
}

std::vector<Vec3> to_world_points(const GaussianField& field) {
  std::vector<Vec3> pts;
  pts.reserve(field.surfels.size());
  for (size_t i = 0; i < field.surfels.size(); ++i) pts.push_back(field.world_point(i));
  return pts;
}

void save_field(const GaussianField& field, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_field: cannot open " + path);
  out.precision(17);
  out << "splattrack-field 1\n";
  out << "canonical_scale " << field.canonical_scale << "\n";
  out << "canonical_offset " << field.canonical_offset.x() << " "
      << field.canonical_offset.y() << " " << field.canonical_offset.z() << "\n";
  out << "sh_active_degree " << field.sh_active_degree << "\n";
  out << "surfels " << field.surfels.size() << "\n";
  for (const auto& s : field.surfels) {
    out << s.mu.x() << " " << s.mu.y() << " " << s.mu.z() << " "
        << s.tangent_u.x() << " " << s.tangent_u.y() << " " << s.tangent_u.z() << " "
        << s.tangent_v.x() << " " << s.tangent_v.y() << " " << s.tangent_v.z() << " "
        << s.log_scale_u << " " << s.log_scale_v << " " << s.opacity_logit;
    for (double c : s.sh_coeffs) out << " " << c;
    out << "\n";
  }
}

GaussianField load_field(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_field: cannot open " + path);
  std::string tag;
  int version;
  in >> tag >> version;
  if (tag != "splattrack-field" || version != 1) {
    throw IoError("load_field: bad header in " + path);
  }
  GaussianField field;
  size_t n = 0;
  std::string key;
  while (in >> key) {
    if (key == "canonical_scale") {
      in >> field.canonical_scale;
    } else if (key == "canonical_offset") {
      in >> field.canonical_offset.x() >> field.canonical_offset.y() >>
          field.canonical_offset.z();
    } else if (key == "sh_active_degree") {
      in >> field.sh_active_degree;
    } else if (key == "surfels") {
      in >> n;
      break;
    } else {
      throw IoError("load_field: unknown key " + key);
    }
  }
  field.surfels.resize(n);
  for (auto& s : field.surfels) {
    in >> s.mu.x() >> s.mu.y() >> s.mu.z() >> s.tangent_u.x() >> s.tangent_u.y() >>
        s.tangent_u.z() >> s.tangent_v.x() >> s.tangent_v.y() >> s.tangent_v.z() >>
        s.log_scale_u >> s.log_scale_v >> s.opacity_logit;
    for (double& c : s.sh_coeffs) in >> c;
  }
  if (!in) throw IoError("load_field: truncated file " + path);
  field.positional_grad_accum.assign(n, 0.0);
  field.positional_grad_count.assign(n, 0);
  return field;
}

void export_splats_ply(const GaussianField& field, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("export_splats_ply: cannot open " + path);
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << field.surfels.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "property float nx\nproperty float ny\nproperty float nz\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  for (size_t i = 0; i < field.surfels.size(); ++i) {
    const Surfel& s = field.surfels[i];
    const Vec3 p = field.world_point(i);
    const Vec3 n = s.normal();
    out << static_cast<float>(p.x()) << " " << static_cast<float>(p.y()) << " "
        << static_cast<float>(p.z()) << " " << static_cast<float>(n.x()) << " "
        << static_cast<float>(n.y()) << " " << static_cast<float>(n.z());
    for (int ch = 0; ch < 3; ++ch) {
      const double c = std::clamp(kShC0 * s.sh_coeffs[ch] + 0.5, 0.0, 1.0);
      out << " " << static_cast<int>(std::lround(c * 255.0));
    }
    out << "\n";
  }
}

}  // namespace splattrack
