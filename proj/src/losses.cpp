#include "splattrack/losses.hpp"

#include <cmath>

#include "splattrack/errors.hpp"

namespace splattrack {

double loss_color(const RenderOutput& out, const Frame& frame, LossGrads* grads,
                  double weight) {
  const int W = frame.rgb.width, H = frame.rgb.height;
  size_t m = 0;
  double sum = 0.0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (!frame.masked(x, y)) continue;
      ++m;
      for (int ch = 0; ch < 3; ++ch) {
        sum += std::abs(out.color.at(x, y, ch) - frame.rgb.at(x, y, ch));
      }
    }
  }
  if (m == 0) throw EmptyMask("loss_color: empty mask");
  const double inv = 1.0 / (3.0 * static_cast<double>(m));
  if (grads) {
    const double g = weight * inv;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (!frame.masked(x, y)) continue;
        for (int ch = 0; ch < 3; ++ch) {
          const double r = out.color.at(x, y, ch) - frame.rgb.at(x, y, ch);
          if (r > 0)
            grads->dcolor.at(x, y, ch) += g;
          else if (r < 0)
            grads->dcolor.at(x, y, ch) -= g;
        }
      }
    }
  }
  return sum * inv;
}

namespace {

double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

}  // namespace

double loss_depth(const RenderOutput& out, const Frame& frame, double delta,
                  LossGrads* grads, double weight) {
  const int W = frame.depth.width, H = frame.depth.height;
  size_t m = 0;
  double sum = 0.0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (!frame.masked(x, y) || !frame.valid_depth(x, y)) continue;
      ++m;
      sum += huber(out.depth.at(x, y) - frame.depth.at(x, y), delta);
    }
  }
  if (m == 0) throw EmptyMask("loss_depth: no masked valid-depth pixels");
  const double inv = 1.0 / static_cast<double>(m);
  if (grads) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (!frame.masked(x, y) || !frame.valid_depth(x, y)) continue;
        const double r = out.depth.at(x, y) - frame.depth.at(x, y);
        grads->ddepth.at(x, y) += weight * inv * std::clamp(r, -delta, delta);
      }
    }
  }
  return sum * inv;
}

double depth_distortion_pair_sum(std::span<const double> w, std::span<const double> z,
                                 std::span<double> dw, std::span<double> dz) {
  const size_t n = w.size();
  double loss = 0.0;
  double wpre = 0.0, spre = 0.0;
  for (size_t k = 0; k < n; ++k) {
    loss += w[k] * (z[k] * wpre - spre);
    wpre += w[k];
    spre += w[k] * z[k];
  }
  if (!dw.empty() || !dz.empty()) {
    const double wtot = wpre, stot = spre;
    wpre = 0.0;
    spre = 0.0;
    for (size_t k = 0; k < n; ++k) {
      const double wsuf = wtot - wpre - w[k];
      const double ssuf = stot - spre - w[k] * z[k];
      if (!dw.empty()) dw[k] = z[k] * wpre - spre + ssuf - z[k] * wsuf;
      if (!dz.empty()) dz[k] = w[k] * (wpre - wsuf);
      wpre += w[k];
      spre += w[k] * z[k];
    }
  }
  return loss;
}

void pixel_weights(const RenderOutput& out, size_t pixel, std::vector<double>& w) {
  const auto& contribs = out.pixel_contribs[pixel];
  w.resize(contribs.size());
  double T = 1.0;
  for (size_t k = 0; k < contribs.size(); ++k) {
    const double a = std::min(out.projected[contribs[k].splat].alpha * contribs[k].kernel,
                              out.options.alpha_max);
    w[k] = a * T;
    T *= (1.0 - a);
  }
}

double loss_depth_distortion(const RenderOutput& out, const Frame& frame,
                             LossGrads* grads, double weight) {
  if (!out.retained) throw StaleTape("loss_depth_distortion: needs a retained tape");
  const int W = frame.depth.width, H = frame.depth.height;
  size_t m = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) m += frame.masked(x, y);
  if (m == 0) throw EmptyMask("loss_depth_distortion: empty mask");
  const double inv = 1.0 / static_cast<double>(m);

  if (grads) {
    if (grads->domega.empty()) grads->domega.assign(out.pixel_contribs.size(), {});
    if (grads->dz.empty()) grads->dz.assign(out.pixel_contribs.size(), {});
  }

  double total = 0.0;
  std::vector<double> w, z, dw, dz;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (!frame.masked(x, y)) continue;
      const size_t pix = static_cast<size_t>(y) * W + x;
      const auto& contribs = out.pixel_contribs[pix];
      if (contribs.size() < 2) continue;
      pixel_weights(out, pix, w);
      z.resize(contribs.size());
      for (size_t k = 0; k < contribs.size(); ++k)
        z[k] = out.projected[contribs[k].splat].z_cam;
      if (grads) {
        dw.assign(w.size(), 0.0);
        dz.assign(w.size(), 0.0);
        total += depth_distortion_pair_sum(w, z, dw, dz);
        auto& go = grads->domega[pix];
        auto& gz = grads->dz[pix];
        if (go.size() != w.size()) go.assign(w.size(), 0.0);
        if (gz.size() != w.size()) gz.assign(w.size(), 0.0);
        for (size_t k = 0; k < w.size(); ++k) {
          go[k] += weight * inv * dw[k];
          gz[k] += weight * inv * dz[k];
        }
      } else {
        total += depth_distortion_pair_sum(w, z);
      }
    }
  }
  return total * inv;
}

namespace {

struct NormalAtPixel {
  bool valid = false;
  Vec3 n = Vec3::Zero();
  Vec3 g = Vec3::Zero();  // unnormalized cross product
  Vec3 a = Vec3::Zero();  // right - left
  Vec3 b = Vec3::Zero();  // down - up
};

template <typename DepthAt>
NormalAtPixel depth_normal(const Camera& cam, int x, int y, DepthAt&& depth) {
  NormalAtPixel out;
  const double dl = depth(x - 1, y), dr = depth(x + 1, y);
  const double du = depth(x, y - 1), dd = depth(x, y + 1);
  if (dl <= 0 || dr <= 0 || du <= 0 || dd <= 0) return out;
  const Vec3 pl = cam.ray(x - 1, y) * dl, pr = cam.ray(x + 1, y) * dr;
  const Vec3 pu = cam.ray(x, y - 1) * du, pd = cam.ray(x, y + 1) * dd;
  out.a = pr - pl;
  out.b = pd - pu;
  out.g = out.a.cross(out.b);
  const double gn = out.g.norm();
  if (gn < 1e-12) return out;
  out.n = out.g / gn;
  out.valid = true;
  return out;
}

}  // namespace

double loss_normal(const RenderOutput& out, const Frame& frame, LossGrads* grads,
                   double weight) {
  const Camera& cam = frame.intrinsics;
  const int W = frame.depth.width, H = frame.depth.height;
  auto obs_depth = [&](int x, int y) -> double {
    return frame.depth.inside(x, y) ? frame.depth.at(x, y) : 0.0;
  };
  auto ren_depth = [&](int x, int y) -> double {
    return out.depth.inside(x, y) ? out.depth.at(x, y) : 0.0;
  };

  // Validity depends only on the observed depth, so the pixel count is
  // known before gradients are accumulated.
  size_t m = 0;
  for (int y = 1; y < H - 1; ++y) {
    for (int x = 1; x < W - 1; ++x) {
      if (frame.masked(x, y) && depth_normal(cam, x, y, obs_depth).valid) ++m;
    }
  }
  if (m == 0) throw EmptyMask("loss_normal: no valid interior masked pixels");
  const double inv = 1.0 / static_cast<double>(m);

  double sum = 0.0;
  for (int y = 1; y < H - 1; ++y) {
    for (int x = 1; x < W - 1; ++x) {
      if (!frame.masked(x, y)) continue;
      const auto obs = depth_normal(cam, x, y, obs_depth);
      if (!obs.valid) continue;
      const auto ren = depth_normal(cam, x, y, ren_depth);
      if (!ren.valid) {
        sum += 1.0;
        continue;
      }
      sum += 1.0 - ren.n.dot(obs.n);
      if (grads) {
        const double gn = ren.g.norm();
        const Vec3 dg = -weight * inv * ((obs.n - ren.n * ren.n.dot(obs.n)) / gn);
        // d(a x b): dL/da = b x dg, dL/db = dg x a
        const Vec3 da = ren.b.cross(dg);
        const Vec3 db = dg.cross(ren.a);
        grads->ddepth.at(x + 1, y) += cam.ray(x + 1, y).dot(da);
        grads->ddepth.at(x - 1, y) -= cam.ray(x - 1, y).dot(da);
        grads->ddepth.at(x, y + 1) += cam.ray(x, y + 1).dot(db);
        grads->ddepth.at(x, y - 1) -= cam.ray(x, y - 1).dot(db);
      }
    }
  }
  return sum * inv;
}

}  // namespace splattrack
