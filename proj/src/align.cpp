#include "splattrack/align.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "splattrack/errors.hpp"

namespace splattrack {

Pose umeyama_align(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  if (src.size() != dst.size() || src.size() < 3) {
    throw DegenerateConfiguration("umeyama_align: need >=3 paired points");
  }
  const double n = static_cast<double>(src.size());
  Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    mu_s += src[i];
    mu_d += dst[i];
  }
  mu_s /= n;
  mu_d /= n;

  Mat3 H = Mat3::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    H += (dst[i] - mu_d) * (src[i] - mu_s).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  // Rank < 2 means the points do not determine a rotation.
  if (svd.singularValues()(1) < 1e-12 * std::max(1.0, svd.singularValues()(0))) {
    throw DegenerateConfiguration("umeyama_align: collinear or coincident points");
  }
  Mat3 D = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) {
    D(2, 2) = -1.0;
  }
  Pose p;
  p.R = svd.matrixU() * D * svd.matrixV().transpose();
  p.t = mu_d - p.R * mu_s;
  return p;
}

namespace {

double model_error(const Pose& p, const Correspondence& c) {
  return (p.apply(c.point_a) - c.point_b).norm();
}

}  // namespace

RansacResult ransac_align(const std::vector<Correspondence>& corrs,
                          double inlier_thresh_m, int max_iters,
                          std::uint64_t seed) {
  const int n = static_cast<int>(corrs.size());
  if (n < 3) throw InsufficientInliers("ransac_align: need >=3 correspondences");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, n - 1);

  int best_count = 0;
  double best_rms = std::numeric_limits<double>::infinity();
  std::vector<bool> best_flags(n, false);

  std::vector<Vec3> s3(3), d3(3);
  std::vector<bool> flags(n);
  for (int it = 0; it < max_iters; ++it) {
    int i0 = pick(rng), i1 = pick(rng), i2 = pick(rng);
    if (i0 == i1 || i0 == i2 || i1 == i2) continue;
    s3 = {corrs[i0].point_a, corrs[i1].point_a, corrs[i2].point_a};
    d3 = {corrs[i0].point_b, corrs[i1].point_b, corrs[i2].point_b};
    Pose model;
    try {
      model = umeyama_align(s3, d3);
    } catch (const DegenerateConfiguration&) {
      continue;
    }
    int count = 0;
    double sq_sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const double e = model_error(model, corrs[i]);
      flags[i] = e < inlier_thresh_m;
      if (flags[i]) {
        ++count;
        sq_sum += e * e;
      }
    }
    const double rms = count > 0 ? std::sqrt(sq_sum / count) : 0.0;
    if (count > best_count || (count == best_count && rms < best_rms)) {
      best_count = count;
      best_rms = rms;
      best_flags = flags;
    }
  }
  if (best_count < 3) throw InsufficientInliers("ransac_align: best model has <3 inliers");

  // Refit on the consensus set.
  std::vector<Vec3> src, dst;
  src.reserve(best_count);
  dst.reserve(best_count);
  for (int i = 0; i < n; ++i) {
    if (best_flags[i]) {
      src.push_back(corrs[i].point_a);
      dst.push_back(corrs[i].point_b);
    }
  }
  RansacResult res;
  res.pose = umeyama_align(src, dst);
  // Re-evaluate inliers under the refit pose.
  res.inliers.assign(n, false);
  double sq_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = model_error(res.pose, corrs[i]);
    if (e < inlier_thresh_m) {
      res.inliers[i] = true;
      ++res.inlier_count;
      sq_sum += e * e;
    }
  }
  if (res.inlier_count < 3) throw InsufficientInliers("ransac_align: refit lost consensus");
  res.inlier_rms = std::sqrt(sq_sum / res.inlier_count);
  return res;
}

}  // namespace splattrack
