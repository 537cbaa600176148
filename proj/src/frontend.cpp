#include "splattrack/frontend.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "splattrack/errors.hpp"

namespace splattrack {

Frame erode_depth(const Frame& frame, int kernel) {
  if (kernel <= 1) return frame;
  const int r = kernel / 2;
  Frame out = frame;
  for (int y = 0; y < frame.depth.height; ++y) {
    for (int x = 0; x < frame.depth.width; ++x) {
      if (!frame.masked(x, y)) continue;
      bool keep = true;
      for (int dy = -r; dy <= r && keep; ++dy) {
        for (int dx = -r; dx <= r && keep; ++dx) {
          const int nx = x + dx, ny = y + dy;
          if (!frame.mask.inside(nx, ny)) {
            keep = false;
          } else if (!frame.masked(nx, ny) || frame.depth.at(nx, ny) <= 0.0f) {
            // Silhouette ring and invalid-depth neighbors both mix fore- and
            // background in the sensor; depth there is untrustworthy.
            keep = false;
          }
        }
      }
      if (!keep) {
        out.depth.at(x, y) = 0.0f;
        out.mask.at(x, y) = 0;
      }
    }
  }
  return out;
}

PairwisePose estimate_pairwise_pose(const Frame& a, const Frame& b,
                                    const CorrespondenceProvider& provider,
                                    const FrontendConfig& cfg) {
  auto corrs = provider.match(a, b);
  if (corrs.size() < 3) {
    throw MatchingFailed("estimate_pairwise_pose: provider returned <3 matches");
  }
  auto res = ransac_align(corrs, cfg.ransac_inlier_thresh_m, cfg.ransac_max_iters,
                          cfg.ransac_seed);
  PairwisePose out;
  out.pose = res.pose;
  out.inlier_count = res.inlier_count;
  out.match_count = static_cast<int>(corrs.size());
  return out;
}

bool admit_keyframe(const Frame& candidate, const Pose& pose,
                    const std::vector<Keyframe>& pool,
                    const CorrespondenceProvider& provider,
                    const FrontendConfig& cfg) {
  if (pool.empty()) return true;
  const double min_rot = cfg.min_rotation_deg * M_PI / 180.0;
  const Keyframe* nearest = nullptr;
  double nearest_dist = std::numeric_limits<double>::infinity();
  for (const auto& kf : pool) {
    const double d = rotation_distance(pose, kf.pose);
    if (d <= min_rot) return false;
    if (d < nearest_dist) {
      nearest_dist = d;
      nearest = &kf;
    }
  }
  const auto matches = provider.match(candidate, *nearest->frame);
  return static_cast<int>(matches.size()) > cfg.min_matches;
}

// ---------------------------------------------------------------------------
// SyntheticOracleProvider

void SyntheticOracleProvider::set_gt_pose(int timestamp, const Pose& pose) {
  for (auto& [ts, p] : gt_poses_) {
    if (ts == timestamp) {
      p = pose;
      return;
    }
  }
  gt_poses_.emplace_back(timestamp, pose);
}

const Pose* SyntheticOracleProvider::find_pose(int timestamp) const {
  for (const auto& [ts, p] : gt_poses_) {
    if (ts == timestamp) return &p;
  }
  return nullptr;
}

std::vector<Correspondence> SyntheticOracleProvider::match(const Frame& a,
                                                           const Frame& b) const {
  const Pose* pa = find_pose(a.timestamp);
  const Pose* pb = find_pose(b.timestamp);
  if (!pa || !pb) return {};
  const Pose gt_ab = compose(*pb, pa->inverse());

  // Deterministic per-pair seed.
  std::uint64_t seed = noise_.seed;
  seed = seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(a.timestamp) + 1;
  seed = seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(b.timestamp) + 1;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<std::pair<int, int>> candidates;
  for (int y = 0; y < a.depth.height; ++y) {
    for (int x = 0; x < a.depth.width; ++x) {
      if (a.masked(x, y) && a.valid_depth(x, y)) candidates.emplace_back(x, y);
    }
  }
  if (candidates.empty()) return {};
  const size_t stride = std::max<size_t>(1, candidates.size() / static_cast<size_t>(max_matches_));

  std::vector<Correspondence> corrs;
  for (size_t i = 0; i < candidates.size(); i += stride) {
    const auto [x, y] = candidates[i];
    Correspondence c;
    c.pixel_a = Vec2(x, y);
    c.point_a = a.intrinsics.backproject(x, y, a.depth.at(x, y));
    Vec3 p_b = gt_ab.apply(c.point_a);
    if (p_b.z() <= 0) continue;
    Vec2 px = b.intrinsics.project(p_b);
    if (noise_.pixel_sigma > 0) {
      px.x() += noise_.pixel_sigma * gauss(rng);
      px.y() += noise_.pixel_sigma * gauss(rng);
    }
    const int bx = static_cast<int>(std::lround(px.x()));
    const int by = static_cast<int>(std::lround(px.y()));
    if (!b.masked(bx, by) || !b.valid_depth(bx, by)) continue;
    // Occlusion check against b's own depth.
    if (std::abs(b.depth.at(bx, by) - p_b.z()) > 0.03 + 4 * noise_.pixel_sigma * 0.01)
      continue;
    c.pixel_b = Vec2(bx, by);
    c.point_b = b.intrinsics.backproject(bx, by, b.depth.at(bx, by));
    if (noise_.point_sigma > 0) {
      c.point_b += noise_.point_sigma * Vec3(gauss(rng), gauss(rng), gauss(rng));
    }
    corrs.push_back(c);
    if (static_cast<int>(corrs.size()) >= max_matches_) break;
  }

  // Replace exactly floor(fraction * n) matches with uniform outliers drawn
  // from b's masked surface.
  const size_t n_out = static_cast<size_t>(noise_.outlier_fraction * corrs.size());
  if (n_out > 0) {
    std::vector<std::pair<int, int>> b_pixels;
    for (int y = 0; y < b.depth.height; ++y) {
      for (int x = 0; x < b.depth.width; ++x) {
        if (b.masked(x, y) && b.valid_depth(x, y)) b_pixels.emplace_back(x, y);
      }
    }
    std::vector<size_t> idx(corrs.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    std::uniform_int_distribution<size_t> pick(0, b_pixels.size() - 1);
    for (size_t k = 0; k < n_out; ++k) {
      auto [x, y] = b_pixels[pick(rng)];
      corrs[idx[k]].pixel_b = Vec2(x, y);
      corrs[idx[k]].point_b = b.intrinsics.backproject(x, y, b.depth.at(x, y));
    }
  }
  return corrs;
}

// ---------------------------------------------------------------------------
// PatchMatcherProvider

namespace {

ImageF to_gray(const ImageF3& rgb) {
  ImageF g(rgb.width, rgb.height);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x)
      g.at(x, y) = (rgb.at(x, y, 0) + rgb.at(x, y, 1) + rgb.at(x, y, 2)) / 3.0f;
  return g;
}

struct Corner {
  int x, y;
  double score;
};

std::vector<Corner> harris_corners(const Frame& f, const ImageF& gray, int margin,
                                   int max_corners) {
  const int W = gray.width, H = gray.height;
  ImageD resp(W, H, -1.0);
  for (int y = margin; y < H - margin; ++y) {
    for (int x = margin; x < W - margin; ++x) {
      if (!f.masked(x, y) || !f.valid_depth(x, y)) continue;
      double ixx = 0, iyy = 0, ixy = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int u = x + dx, v = y + dy;
          const double gx = gray.at(u + 1, v) - gray.at(u - 1, v);
          const double gy = gray.at(u, v + 1) - gray.at(u, v - 1);
          ixx += gx * gx;
          iyy += gy * gy;
          ixy += gx * gy;
        }
      }
      resp.at(x, y) = ixx * iyy - ixy * ixy - 0.04 * (ixx + iyy) * (ixx + iyy);
    }
  }
  std::vector<Corner> corners;
  for (int y = margin; y < H - margin; ++y) {
    for (int x = margin; x < W - margin; ++x) {
      const double r = resp.at(x, y);
      if (r <= 1e-8) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1 && is_max; ++dx)
          if ((dx || dy) && resp.at(x + dx, y + dy) > r) is_max = false;
      if (is_max) corners.push_back({x, y, r});
    }
  }
  std::sort(corners.begin(), corners.end(),
            [](const Corner& a, const Corner& b) { return a.score > b.score; });
  if (static_cast<int>(corners.size()) > max_corners) corners.resize(max_corners);
  return corners;
}

double zncc(const ImageF& a, int ax, int ay, const ImageF& b, int bx, int by, int r) {
  double ma = 0, mb = 0;
  const int n = (2 * r + 1) * (2 * r + 1);
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      ma += a.at(ax + dx, ay + dy);
      mb += b.at(bx + dx, by + dy);
    }
  ma /= n;
  mb /= n;
  double num = 0, da = 0, db = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const double va = a.at(ax + dx, ay + dy) - ma;
      const double vb = b.at(bx + dx, by + dy) - mb;
      num += va * vb;
      da += va * va;
      db += vb * vb;
    }
  const double denom = std::sqrt(da * db);
  return denom > 1e-12 ? num / denom : -1.0;
}

}  // namespace

std::vector<Correspondence> PatchMatcherProvider::match(const Frame& a,
                                                        const Frame& b) const {
  const int r = patch_radius_;
  const int margin = r + 2;
  const ImageF ga = to_gray(a.rgb);
  const ImageF gb = to_gray(b.rgb);
  const auto ca = harris_corners(a, ga, margin, max_corners_);
  const auto cb = harris_corners(b, gb, margin, max_corners_);
  if (ca.empty() || cb.empty()) return {};

  const int na = static_cast<int>(ca.size()), nb = static_cast<int>(cb.size());
  std::vector<int> best_ab(na, -1), best_ba(nb, -1);
  std::vector<double> score_ab(na, min_zncc_), score_ba(nb, min_zncc_);
  for (int i = 0; i < na; ++i) {
    for (int j = 0; j < nb; ++j) {
      const double s = zncc(ga, ca[i].x, ca[i].y, gb, cb[j].x, cb[j].y, r);
      if (s > score_ab[i]) {
        score_ab[i] = s;
        best_ab[i] = j;
      }
      if (s > score_ba[j]) {
        score_ba[j] = s;
        best_ba[j] = i;
      }
    }
  }
  std::vector<Correspondence> corrs;
  for (int i = 0; i < na; ++i) {
    const int j = best_ab[i];
    if (j < 0 || best_ba[j] != i) continue;
    Correspondence c;
    c.pixel_a = Vec2(ca[i].x, ca[i].y);
    c.pixel_b = Vec2(cb[j].x, cb[j].y);
    c.point_a = a.intrinsics.backproject(ca[i].x, ca[i].y, a.depth.at(ca[i].x, ca[i].y));
    c.point_b = b.intrinsics.backproject(cb[j].x, cb[j].y, b.depth.at(cb[j].x, cb[j].y));
    corrs.push_back(c);
  }
  return corrs;
}

}  // namespace splattrack
