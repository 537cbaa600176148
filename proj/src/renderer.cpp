#include "splattrack/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "splattrack/errors.hpp"
#include "splattrack/sh.hpp"

namespace splattrack {

namespace {

Eigen::Matrix<double, 2, 3> affine_jacobian(const Camera& cam, const Vec3& x) {
  const double z = x.z();
  Eigen::Matrix<double, 2, 3> J;
  J << cam.fx / z, 0, -cam.fx * x.x() / (z * z),
       0, cam.fy / z, -cam.fy * x.y() / (z * z);
  return J;
}

constexpr double kSlopeReg = 0.01;  // edge-on regularizer for the depth slope

std::uint64_t mix(std::uint64_t h, double v) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  h ^= bits + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

}  // namespace

std::uint64_t tape_token(const GaussianField& field, const Pose& pose) {
  std::uint64_t h = field.surfels.size();
  h = mix(h, field.canonical_scale);
  for (int i = 0; i < 3; ++i) h = mix(h, pose.t[i]);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) h = mix(h, pose.R(i, j));
  for (size_t i = 0; i < field.surfels.size(); ++i) {
    const Surfel& s = field.surfels[i];
    h = mix(h, s.mu.x());
    h = mix(h, s.mu.y());
    h = mix(h, s.mu.z());
    h = mix(h, s.opacity_logit);
    h = mix(h, s.log_scale_u);
    h = mix(h, s.sh_coeffs[0]);
    h = mix(h, s.tangent_u.x());
  }
  return h;
}

ProjectedSplat project_surfel(const Surfel& s, const GaussianField& field,
                              const Pose& pose, const Camera& cam,
                              const RenderOptions& opts) {
  ProjectedSplat ps;
  const Vec3 x_w = s.mu * field.canonical_scale + field.canonical_offset;
  const Vec3 x_c = pose.apply(x_w);
  if (x_c.z() <= opts.near_plane) return ps;  // culled

  ps.x_cam = x_c;
  ps.z_cam = x_c.z();
  ps.mean2d = cam.project(x_c);

  const double su = s.scale_u() * field.canonical_scale;
  const double sv = s.scale_v() * field.canonical_scale;
  Eigen::Matrix<double, 3, 2> A;
  A.col(0) = pose.R * (s.tangent_u * su);
  A.col(1) = pose.R * (s.tangent_v * sv);
  ps.A = A;

  const auto J = affine_jacobian(cam, x_c);
  ps.B = J * A;
  ps.cov2d = ps.B * ps.B.transpose();
  ps.cov2d(0, 0) += opts.blur_floor_px2;
  ps.cov2d(1, 1) += opts.blur_floor_px2;
  const double det = ps.cov2d.determinant();
  if (det <= 0 || !std::isfinite(det)) return ps;
  ps.cov2d_inv = ps.cov2d.inverse();

  // Extent at which the kernel drops to the cutoff.
  const double lambda_max =
      0.5 * (ps.cov2d.trace() +
             std::sqrt(std::max(0.0, ps.cov2d.trace() * ps.cov2d.trace() - 4 * det)));
  ps.bbox_radius = std::sqrt(std::max(0.0, 2.0 * std::log(1.0 / opts.gaussian_cutoff) *
                                               lambda_max));
  if (ps.mean2d.x() + ps.bbox_radius < 0 ||
      ps.mean2d.x() - ps.bbox_radius > cam.width - 1 ||
      ps.mean2d.y() + ps.bbox_radius < 0 ||
      ps.mean2d.y() - ps.bbox_radius > cam.height - 1) {
    return ps;  // bbox misses the image
  }

  ps.alpha = s.opacity();
  Vec3 n = pose.R * s.normal();
  if (n.dot(x_c) > 0) {
    if (opts.cull_backfaces && n.dot(x_c) > opts.cull_cos_margin * x_c.norm())
      return ps;
    ps.normal_flip = -1.0;
    n = -n;
  }
  ps.normal_cam = n;

  // Depth slope of the splat plane, linearized at the center pixel:
  // the ray through pixel (u,v) meets the plane n.(x - c) = 0 at depth
  // z(u,v) = (n.c) / (n.K^-1 (u,v,1)); first order in (u,v) around the
  // projection of c gives the slope below. The D0^2/(D0^2 + beta z^2)
  // factor smoothly damps the (singular) edge-on case.
  {
    const double zc = x_c.z();
    const double D0 = n.dot(x_c);
    const double Q = D0 * D0 + kSlopeReg * zc * zc;
    const double F = zc * zc * D0 / Q;
    ps.zslope = Vec2(-F * n.x() / cam.fx, -F * n.y() / cam.fy);
  }

  const Vec3 cam_center = pose.center();
  const Vec3 w = x_w - cam_center;
  ps.view_dist = w.norm();
  ps.view_dir = w / ps.view_dist;
  ps.color = eval_sh(s.sh_coeffs, field.sh_active_degree, ps.view_dir);

  ps.visible = true;
  return ps;
}

RenderOutput render(const GaussianField& field, const Pose& pose, const Camera& cam,
                    const ImageU8* mask, const RenderOptions& opts) {
  if (field.surfels.empty()) throw EmptyField("render: empty field");
  const int W = cam.width, H = cam.height;

  RenderOutput out;
  out.color = ImageD3(W, H);
  out.depth = ImageD(W, H);
  out.normal = ImageD3(W, H);
  out.alpha_acc = ImageD(W, H);
  out.options = opts;
  out.retained = opts.retain_gradients;

  // Project everything, keep visible splats sorted by camera depth.
  std::vector<std::pair<double, int>> order;
  std::vector<ProjectedSplat> all(field.surfels.size());
  for (size_t i = 0; i < field.surfels.size(); ++i) {
    all[i] = project_surfel(field.surfels[i], field, pose, cam, opts);
    if (all[i].visible) order.emplace_back(all[i].z_cam, static_cast<int>(i));
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  out.projected.reserve(order.size());
  out.surfel_index.reserve(order.size());
  for (const auto& [z, i] : order) {
    out.projected.push_back(all[i]);
    out.surfel_index.push_back(i);
  }

  // Build per-pixel contribution lists in z order.
  out.pixel_contribs.assign(static_cast<size_t>(W) * H, {});
  for (int k = 0; k < static_cast<int>(out.projected.size()); ++k) {
    const ProjectedSplat& ps = out.projected[k];
    const int x0 = std::max(0, static_cast<int>(std::floor(ps.mean2d.x() - ps.bbox_radius)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(ps.mean2d.x() + ps.bbox_radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(ps.mean2d.y() - ps.bbox_radius)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(ps.mean2d.y() + ps.bbox_radius)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (mask && (*mask).at(x, y) == 0) continue;
        const Vec2 d(x - ps.mean2d.x(), y - ps.mean2d.y());
        const double e = d.dot(ps.cov2d_inv * d);
        const double g = std::exp(-0.5 * e);
        if (g < opts.gaussian_cutoff) continue;
        out.pixel_contribs[static_cast<size_t>(y) * W + x].push_back({k, g});
      }
    }
  }

  // Front-to-back compositing.
  const bool early_stop = !opts.retain_gradients;
  const double eps = 1e-6;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      auto& contribs = out.pixel_contribs[static_cast<size_t>(y) * W + x];
      double T = 1.0;
      Vec3 c = Vec3::Zero();
      double dsum = 0.0, wsum = 0.0;
      Vec3 nsum = Vec3::Zero();
      size_t used = contribs.size();
      for (size_t k = 0; k < contribs.size(); ++k) {
        const ProjectedSplat& ps = out.projected[contribs[k].splat];
        const double a = std::min(ps.alpha * contribs[k].kernel, opts.alpha_max);
        const double w = a * T;
        c += ps.color * w;
        const double zk = ps.z_cam + ps.zslope.x() * (x - ps.mean2d.x()) +
                          ps.zslope.y() * (y - ps.mean2d.y());
        dsum += zk * w;
        wsum += w;
        nsum += ps.normal_cam * w;
        T *= (1.0 - a);
        if (early_stop && T < opts.transmittance_min) {
          used = k + 1;
          break;
        }
      }
      if (early_stop) contribs.resize(used);
      out.color.at(x, y, 0) = c.x();
      out.color.at(x, y, 1) = c.y();
      out.color.at(x, y, 2) = c.z();
      out.alpha_acc.at(x, y) = wsum;
      double depth = opts.normalize_depth ? dsum / std::max(wsum, eps) : dsum;
      if (opts.median_depth && wsum > eps) {
        // Weighted median over the composited contributions (z-ascending).
        double acc = 0.0, T2 = 1.0;
        const double half = 0.5 * wsum;
        for (size_t k = 0; k < used; ++k) {
          const ProjectedSplat& ps = out.projected[contribs[k].splat];
          const double a = std::min(ps.alpha * contribs[k].kernel, opts.alpha_max);
          acc += a * T2;
          T2 *= (1.0 - a);
          if (acc >= half) {
            depth = ps.z_cam + ps.zslope.x() * (x - ps.mean2d.x()) +
                    ps.zslope.y() * (y - ps.mean2d.y());
            break;
          }
        }
      }
      out.depth.at(x, y) = depth;
      const double nn = nsum.norm();
      if (nn > 1e-12) nsum /= nn;
      out.normal.at(x, y, 0) = nsum.x();
      out.normal.at(x, y, 1) = nsum.y();
      out.normal.at(x, y, 2) = nsum.z();
    }
  }

  if (opts.retain_gradients) {
    out.tape_token = tape_token(field, pose);
  } else {
    out.pixel_contribs.clear();
    out.pixel_contribs.shrink_to_fit();
  }
  return out;
}

GradientBundle backward(const GaussianField& field, const Pose& pose,
                        const Camera& cam, const RenderOutput& out,
                        const LossGrads& grads) {
  if (!out.retained) throw StaleTape("backward: render output has no tape");
  if (out.tape_token != tape_token(field, pose)) {
    throw StaleTape("backward: field or pose changed since render");
  }
  const int W = cam.width, H = cam.height;
  const int nvis = static_cast<int>(out.projected.size());
  const double eps = 1e-6;

  GradientBundle bundle;
  bundle.surfels.assign(field.surfels.size(), {});
  bundle.dmean2d_norm.assign(field.surfels.size(), 0.0);

  // Per visible splat accumulators (projected-space).
  std::vector<Vec2> dmean(nvis, Vec2::Zero());
  std::vector<Mat2> dcov(nvis, Mat2::Zero());
  std::vector<double> dz(nvis, 0.0);
  std::vector<Vec2> dslope(nvis, Vec2::Zero());
  std::vector<Vec3> dcolor(nvis, Vec3::Zero());
  std::vector<double> dalpha(nvis, 0.0);
  std::vector<Vec3> dnormal(nvis, Vec3::Zero());

  std::vector<double> Tk, wk, ak, zk, domega;
  const bool has_dnormal = !grads.dnormal.empty();
  const bool has_extras = !grads.domega.empty();
  const bool has_dz = !grads.dz.empty();

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const size_t pix = static_cast<size_t>(y) * W + x;
      const auto& contribs = out.pixel_contribs[pix];
      if (contribs.empty()) continue;

      const Vec3 dc(grads.dcolor.at(x, y, 0), grads.dcolor.at(x, y, 1),
                    grads.dcolor.at(x, y, 2));
      const double dd = grads.ddepth.at(x, y);
      Vec3 dn = Vec3::Zero();
      if (has_dnormal) {
        dn = Vec3(grads.dnormal.at(x, y, 0), grads.dnormal.at(x, y, 1),
                  grads.dnormal.at(x, y, 2));
      }
      const bool any_extra = has_extras && !grads.domega[pix].empty();
      const bool any_dz = has_dz && !grads.dz[pix].empty();
      if (dc.isZero() && dd == 0.0 && dn.isZero() && !any_extra && !any_dz) continue;

      // Recompute the forward walk for this pixel.
      const size_t n = contribs.size();
      Tk.resize(n);
      wk.resize(n);
      ak.resize(n);
      zk.resize(n);
      double T = 1.0, wsum = 0.0, depth_sum = 0.0;
      Vec3 nsum = Vec3::Zero();
      for (size_t k = 0; k < n; ++k) {
        const ProjectedSplat& ps = out.projected[contribs[k].splat];
        ak[k] = std::min(ps.alpha * contribs[k].kernel, out.options.alpha_max);
        Tk[k] = T;
        wk[k] = ak[k] * T;
        wsum += wk[k];
        zk[k] = ps.z_cam + ps.zslope.x() * (x - ps.mean2d.x()) +
                ps.zslope.y() * (y - ps.mean2d.y());
        depth_sum += zk[k] * wk[k];
        nsum += ps.normal_cam * wk[k];
        T *= (1.0 - ak[k]);
      }

      // Depth normalization chain.
      double dD = 0.0, dW_depth = 0.0;
      if (out.options.normalize_depth) {
        const double weff = std::max(wsum, eps);
        dD = dd / weff;
        if (wsum > eps) dW_depth = -dd * depth_sum / (weff * weff);
      } else {
        dD = dd;
      }

      // Normal renormalization chain.
      Vec3 dnpre = Vec3::Zero();
      if (has_dnormal && !dn.isZero()) {
        const double nn = nsum.norm();
        if (nn > 1e-12) {
          const Vec3 nhat = nsum / nn;
          dnpre = (dn - nhat * nhat.dot(dn)) / nn;
        }
      }

      // Per-contribution upstream dL/domega, then composite backward.
      domega.resize(n);
      for (size_t k = 0; k < n; ++k) {
        const int sp = contribs[k].splat;
        const ProjectedSplat& ps = out.projected[sp];
        double g = ps.color.dot(dc) + zk[k] * dD + dW_depth + ps.normal_cam.dot(dnpre);
        if (any_extra) g += grads.domega[pix][k];
        domega[k] = g;
        dcolor[sp] += wk[k] * dc;
        const double dzk = wk[k] * dD;  // dL/d(per-pixel plane depth)
        dz[sp] += dzk;
        dslope[sp] += dzk * Vec2(x - ps.mean2d.x(), y - ps.mean2d.y());
        dmean[sp] -= dzk * ps.zslope;
        if (any_dz) dz[sp] += grads.dz[pix][k];
        dnormal[sp] += wk[k] * dnpre;
      }

      double suffix = 0.0;  // sum over j>k of w_j * domega_j
      for (size_t k = n; k-- > 0;) {
        const int sp = contribs[k].splat;
        const ProjectedSplat& ps = out.projected[sp];
        const double da = Tk[k] * domega[k] - suffix / (1.0 - ak[k]);
        suffix += wk[k] * domega[k];
        if (ps.alpha * contribs[k].kernel >= out.options.alpha_max) continue;  // clamped
        const double dG = ps.alpha * da;
        dalpha[sp] += contribs[k].kernel * da;
        const Vec2 delta(x - ps.mean2d.x(), y - ps.mean2d.y());
        const Vec2 q = ps.cov2d_inv * delta;
        const double gdG = contribs[k].kernel * dG;
        dmean[sp] += gdG * q;
        dcov[sp] += 0.5 * gdG * (q * q.transpose());
      }
    }
  }

  // Chain projected-space gradients into surfel parameters and the pose.
  Vec3 dpose_t = Vec3::Zero(), dpose_w = Vec3::Zero();
  const double cs = field.canonical_scale;
  const int sh_terms_active = sh_terms(field.sh_active_degree);
  for (int k = 0; k < nvis; ++k) {
    const ProjectedSplat& ps = out.projected[k];
    const int si = out.surfel_index[k];
    const Surfel& s = field.surfels[si];
    SurfelGrads& sg = bundle.surfels[si];
    bundle.dmean2d_norm[si] += dmean[k].norm();

    Vec3 dx = Vec3::Zero();

    // opacity
    sg.dopacity_logit += ps.alpha * (1.0 - ps.alpha) * dalpha[k];

    // color via SH (clamped channels contribute nothing)
    if (!dcolor[k].isZero()) {
      std::array<double, 9> basis;
      std::array<Vec3, 9> basis_grad;
      sh_basis_and_grad(ps.view_dir, basis, basis_grad);
      Vec3 dc = dcolor[k];
      for (int ch = 0; ch < 3; ++ch) {
        double pre = 0.5;
        for (int b = 0; b < sh_terms_active; ++b) pre += basis[b] * s.sh_coeffs[b * 3 + ch];
        if (pre <= 0.0) dc[ch] = 0.0;
      }
      Vec3 ddir = Vec3::Zero();
      for (int b = 0; b < sh_terms_active; ++b) {
        for (int ch = 0; ch < 3; ++ch) {
          sg.dsh[b * 3 + ch] += basis[b] * dc[ch];
          ddir += basis_grad[b] * (s.sh_coeffs[b * 3 + ch] * dc[ch]);
        }
      }
      if (!ddir.isZero()) {
        const Vec3 dw = (ddir - ps.view_dir * ps.view_dir.dot(ddir)) / ps.view_dist;
        sg.dmu += cs * dw;
        dpose_t += pose.R * dw;
      }
    }

    // mean2d -> camera point
    const double z = ps.x_cam.z();
    dx.x() += dmean[k].x() * cam.fx / z;
    dx.y() += dmean[k].y() * cam.fy / z;
    dx.z() += -dmean[k].x() * cam.fx * ps.x_cam.x() / (z * z) -
              dmean[k].y() * cam.fy * ps.x_cam.y() / (z * z);

    // rendered depth
    dx.z() += dz[k];

    // depth slope -> camera-frame normal and camera point
    if (!dslope[k].isZero()) {
      const Vec3& nc = ps.normal_cam;
      const double zc2 = z * z;
      const double D0 = nc.dot(ps.x_cam);
      const double Q = D0 * D0 + kSlopeReg * zc2;
      const double F = zc2 * D0 / Q;
      const double dsu = dslope[k].x(), dsv = dslope[k].y();
      const double dF = -(nc.x() / cam.fx) * dsu - (nc.y() / cam.fy) * dsv;
      const double dD0 = dF * zc2 * (kSlopeReg * zc2 - D0 * D0) / (Q * Q);
      dnormal[k] += Vec3(-F / cam.fx * dsu, -F / cam.fy * dsv, 0.0) + dD0 * ps.x_cam;
      dx += dD0 * nc;
      dx.z() += dF * 2.0 * z * D0 * D0 * D0 / (Q * Q);
    }

    // cov2d -> B -> J and A
    const Mat2 C = 0.5 * (dcov[k] + dcov[k].transpose());
    if (!C.isZero()) {
      const Mat2 dB = 2.0 * C * ps.B;
      const auto J = affine_jacobian(cam, ps.x_cam);
      const Eigen::Matrix<double, 2, 3> dJ = dB * ps.A.transpose();
      Eigen::Matrix<double, 3, 2> dA = J.transpose() * dB;

      dx.x() += dJ(0, 2) * (-cam.fx / (z * z));
      dx.y() += dJ(1, 2) * (-cam.fy / (z * z));
      dx.z() += dJ(0, 0) * (-cam.fx / (z * z)) +
                dJ(0, 2) * (2.0 * cam.fx * ps.x_cam.x() / (z * z * z)) +
                dJ(1, 1) * (-cam.fy / (z * z)) +
                dJ(1, 2) * (2.0 * cam.fy * ps.x_cam.y() / (z * z * z));

      // pose rotation from A = R * A_obj
      dpose_w += ps.A.col(0).cross(dA.col(0)) + ps.A.col(1).cross(dA.col(1));

      const Eigen::Matrix<double, 3, 2> dA_o = pose.R.transpose() * dA;
      const double su = s.scale_u() * cs;
      const double sv = s.scale_v() * cs;
      const Eigen::Matrix<double, 3, 2> A_o = pose.R.transpose() * ps.A;
      sg.dlog_scale_u += dA_o.col(0).dot(A_o.col(0));
      sg.dlog_scale_v += dA_o.col(1).dot(A_o.col(1));

      const Mat3 Rs = s.rotation();
      const Vec3 p0 = Rs.transpose() * dA_o.col(0);
      const Vec3 p1 = Rs.transpose() * dA_o.col(1);
      sg.drot += su * Vec3::UnitX().cross(p0) + sv * Vec3::UnitY().cross(p1);
    }

    // blended normal
    if (!dnormal[k].isZero()) {
      const Vec3 dnu = ps.normal_flip * dnormal[k];  // gradient w.r.t. R*n_obj
      const Vec3 n_cam_unflipped = ps.normal_flip * ps.normal_cam;
      dpose_w += n_cam_unflipped.cross(dnu);
      const Vec3 dn_o = pose.R.transpose() * dnu;
      sg.drot += Vec3::UnitZ().cross(s.rotation().transpose() * dn_o);
    }

    // camera point -> mu and pose
    sg.dmu += cs * (pose.R.transpose() * dx);
    dpose_t += dx;
    dpose_w += ps.x_cam.cross(dx);
  }

  bundle.dpose.trans = dpose_t;
  bundle.dpose.rot = dpose_w;
  return bundle;
}

void apply_surfel_rotation_step(Surfel& s, const Vec3& delta) {
  Mat3 R = s.rotation() * so3_exp(delta);
  R.col(0).normalize();
  R.col(1) = (R.col(1) - R.col(0) * R.col(0).dot(R.col(1))).normalized();
  s.set_rotation(R);
}

}  // namespace splattrack
