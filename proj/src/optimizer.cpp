#include "splattrack/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>

#include "splattrack/errors.hpp"
#include "splattrack/frame.hpp"

namespace splattrack {

SelectionReport select_keyframes(const std::vector<Keyframe>& pool,
                                 const AnchorSet& anchors, const Vec3& object_center) {
  SelectionReport report;
  if (pool.empty()) return report;
  // winner per anchor: (mask_area, timestamp, keyframe id)
  std::map<int, std::tuple<int, int, int>> winners;
  for (const auto& kf : pool) {
    const int a = assign_to_anchor(kf.pose, object_center, anchors);
    const int ts = kf.frame ? kf.frame->timestamp : kf.id;
    auto it = winners.find(a);
    if (it == winners.end()) {
      winners[a] = {kf.mask_area, ts, kf.id};
    } else {
      auto& [area, best_ts, id] = it->second;
      if (kf.mask_area > area || (kf.mask_area == area && ts < best_ts)) {
        it->second = {kf.mask_area, ts, kf.id};
      }
    }
  }
  for (const auto& [a, w] : winners) {
    report.anchor_winners.emplace_back(a, std::get<2>(w));
    report.selected_ids.push_back(std::get<2>(w));
  }
  return report;
}

namespace {

struct MadStats {
  std::vector<bool> flags;
  std::vector<double> deviations;
  double mad = 0.0;
};

MadStats mad_stats(const std::vector<double>& values, double k) {
  auto median_of = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  MadStats st;
  const double med = median_of(values);
  st.deviations.resize(values.size());
  for (size_t i = 0; i < values.size(); ++i) st.deviations[i] = std::abs(values[i] - med);
  st.mad = median_of(st.deviations);
  st.flags.assign(values.size(), false);
  if (st.mad > 0.0) {
    for (size_t i = 0; i < values.size(); ++i) st.flags[i] = st.deviations[i] > k * st.mad;
  }
  return st;
}

}  // namespace

std::vector<bool> mad_filter(const std::vector<double>& losses, double k) {
  if (losses.size() < 4) throw TooFewSamples("mad_filter: need >=4 values");
  return mad_stats(losses, k).flags;
}

namespace {

struct AdamMoments {
  double m = 0.0, v = 0.0;
};

double adam_delta(AdamMoments& st, double g, double lr, int t, const OptimizerConfig& c) {
  st.m = c.adam_beta1 * st.m + (1.0 - c.adam_beta1) * g;
  st.v = c.adam_beta2 * st.v + (1.0 - c.adam_beta2) * g * g;
  const double mh = st.m / (1.0 - std::pow(c.adam_beta1, t));
  const double vh = st.v / (1.0 - std::pow(c.adam_beta2, t));
  return -lr * mh / (std::sqrt(vh) + c.adam_eps);
}

struct SurfelMoments {
  AdamMoments mu[3], rot[3], scale[2], opacity, sh[kShCoeffCount];
};

struct PoseState {
  Pose pose;
  AdamMoments trans[3], rot[3];
  int t = 0;
  double loss_ema = -1.0;
  bool fixed_flag = false;
  bool fixed() const { return fixed_flag; }
};

/// Shared optimization loop for joint and frozen modes.
struct Optimizer {
  const LossWeights& weights;
  const OptimizerConfig& cfg;
  const DensityControlConfig* density;  // null disables density control
  bool optimize_surfels;
  int total_steps;

  GaussianField field;
  std::vector<SurfelMoments> smom;
  int surfel_t = 0;
  // Depth is compared on a slightly eroded mask: silhouette-ring pixels carry
  // saturated residuals that otherwise push every pose away from the camera
  // until the interior gradient balances them. Color keeps the full mask so
  // the silhouette still constrains in-plane alignment.
  std::unordered_map<const Frame*, Frame> depth_frames;

  const Frame& depth_frame(const Frame& frame) {
    auto it = depth_frames.find(&frame);
    if (it == depth_frames.end())
      it = depth_frames.emplace(&frame, erode_depth(frame, 3)).first;
    return it->second;
  }

  double step_loss(PoseState& ps, const Frame& frame, int step, double lr_mul,
                   LossTraceRow* row) {
    RenderOptions ropts;
    ropts.retain_gradients = true;
    ropts.cull_backfaces = true;
    const RenderOutput out =
        render(field, ps.pose, frame.intrinsics, &frame.mask, ropts);

    // Data terms (color, depth) drive both surfels and poses; the
    // regularizers (depth distortion, normal consistency) shape surfels
    // only -- they are not grounded in per-pixel observations of pose and
    // pull free poses toward degenerate viewing configurations otherwise.
    LossGrads grads = LossGrads::zeros(frame.depth.width, frame.depth.height);
    LossGrads reg_grads;
    LossGrads* rg = nullptr;
    if (optimize_surfels) {
      reg_grads = LossGrads::zeros(frame.depth.width, frame.depth.height);
      rg = &reg_grads;
    }
    // Where splat coverage is thin the rendered color mostly measures the
    // missing coverage, not the pose: its pose-gradient rewards shrinking the
    // projection to densify overlap and walks every free pose away from the
    // camera. Those pixels still train the surfels (opacity growth), so their
    // color gradient goes to the surfel-only pass below.
    Frame covered = frame;
    Frame uncovered = frame;
    int n_cov = 0, n_unc = 0;
    for (int y = 0; y < frame.mask.height; ++y) {
      for (int x = 0; x < frame.mask.width; ++x) {
        if (!frame.masked(x, y)) continue;
        if (out.alpha_acc.at(x, y) < 0.5) {
          covered.mask.at(x, y) = 0;
          ++n_unc;
        } else {
          uncovered.mask.at(x, y) = 0;
          ++n_cov;
        }
      }
    }
    // Subset weights keep the split gradients identical in scale to a single
    // full-mask color loss (loss_color normalizes by its own pixel count).
    // While the surfels are still raw (warmup) the color term misleads the
    // poses outright, so all of it trains surfels and only depth steers pose.
    const bool color_to_pose = !optimize_surfels || step >= cfg.pose_warmup_steps;
    const double n_all = std::max(1, n_cov + n_unc);
    const double lc = loss_color(out, frame, nullptr, weights.lambda_c);
    if (n_cov > 0)
      loss_color(out, covered, color_to_pose ? &grads : rg,
                 weights.lambda_c * n_cov / n_all);
    if (n_unc > 0 && rg)
      loss_color(out, uncovered, rg, weights.lambda_c * n_unc / n_all);
    const double ld = loss_depth(out, depth_frame(frame), weights.huber_delta,
                                 &grads, weights.lambda_d);
    const double ldd = loss_depth_distortion(out, frame, rg, weights.lambda_dd);
    const double ln = loss_normal(out, frame, rg, weights.lambda_n);
    const double total = weights.lambda_c * lc + weights.lambda_d * ld +
                         weights.lambda_dd * ldd + weights.lambda_n * ln;
    if (row) {
      row->step = step;
      row->total = total;
      row->color = lc;
      row->depth = ld;
      row->depth_distortion = ldd;
      row->normal = ln;
      row->n_surfels = static_cast<int>(field.surfels.size());
    }

    const GradientBundle bundle = backward(field, ps.pose, frame.intrinsics, out, grads);
    GradientBundle reg_bundle;
    const bool has_reg =
        rg != nullptr && (weights.lambda_dd > 0.0 || weights.lambda_n > 0.0);
    if (has_reg) {
      reg_bundle = backward(field, ps.pose, frame.intrinsics, out, reg_grads);
    }

    // positional gradient running mean (densification statistic)
    for (size_t i = 0; i < field.surfels.size(); ++i) {
      double g = bundle.dmean2d_norm[i];
      if (has_reg) g += reg_bundle.dmean2d_norm[i];
      if (g <= 0.0) continue;
      int& cnt = field.positional_grad_count[i];
      double& mean = field.positional_grad_accum[i];
      mean += (g - mean) / (cnt + 1);
      ++cnt;
    }

    if (optimize_surfels) {
      ++surfel_t;
      for (size_t i = 0; i < field.surfels.size(); ++i) {
        Surfel& s = field.surfels[i];
        SurfelGrads g = bundle.surfels[i];
        if (has_reg) {
          const SurfelGrads& r = reg_bundle.surfels[i];
          g.dmu += r.dmu;
          g.drot += r.drot;
          g.dlog_scale_u += r.dlog_scale_u;
          g.dlog_scale_v += r.dlog_scale_v;
          g.dopacity_logit += r.dopacity_logit;
          for (int k = 0; k < kShCoeffCount; ++k) g.dsh[k] += r.dsh[k];
        }
        SurfelMoments& m = smom[i];
        for (int k = 0; k < 3; ++k)
          s.mu[k] += adam_delta(m.mu[k], g.dmu[k], cfg.lr_mu * lr_mul, surfel_t, cfg);
        Vec3 drot;
        for (int k = 0; k < 3; ++k)
          drot[k] = adam_delta(m.rot[k], g.drot[k], cfg.lr_rot * lr_mul, surfel_t, cfg);
        apply_surfel_rotation_step(s, drot);
        s.log_scale_u += adam_delta(m.scale[0], g.dlog_scale_u, cfg.lr_scale * lr_mul,
                                    surfel_t, cfg);
        s.log_scale_v += adam_delta(m.scale[1], g.dlog_scale_v, cfg.lr_scale * lr_mul,
                                    surfel_t, cfg);
        s.opacity_logit += adam_delta(m.opacity, g.dopacity_logit,
                                      cfg.lr_opacity * lr_mul, surfel_t, cfg);
        for (int k = 0; k < kShCoeffCount; ++k)
          s.sh_coeffs[k] +=
              adam_delta(m.sh[k], g.dsh[k], cfg.lr_sh * lr_mul, surfel_t, cfg);
      }
      if (density) clip_scales(field, *density);
    }

    if (!ps.fixed()) {
      ++ps.t;
      PoseTangent delta;
      for (int k = 0; k < 3; ++k) {
        delta.trans[k] = adam_delta(ps.trans[k], bundle.dpose.trans[k],
                                    cfg.lr_pose_trans * lr_mul, ps.t, cfg);
        delta.rot[k] = adam_delta(ps.rot[k], bundle.dpose.rot[k],
                                  cfg.lr_pose_rot * lr_mul, ps.t, cfg);
      }
      ps.pose = compose(se3_exp(delta), ps.pose);
    }

    ps.loss_ema = ps.loss_ema < 0.0
                      ? total
                      : cfg.loss_ema_beta * ps.loss_ema +
                            (1.0 - cfg.loss_ema_beta) * total;
    return total;
  }

  void reset_surfel_moments() {
    smom.assign(field.surfels.size(), {});
    surfel_t = 0;
  }
};

}  // namespace

JointResult joint_optimize(const GaussianField& field_in,
                           const std::vector<Keyframe>& selected,
                           const LossWeights& weights, const OptimizerConfig& opt,
                           const DensityControlConfig& density) {
  if (selected.empty()) throw EmptyObservation("joint_optimize: no keyframes");

  Optimizer o{weights, opt, &density, true, opt.steps};
  o.field = field_in;
  if (o.field.positional_grad_accum.size() != o.field.surfels.size()) {
    o.field.positional_grad_accum.assign(o.field.surfels.size(), 0.0);
    o.field.positional_grad_count.assign(o.field.surfels.size(), 0);
  }
  o.reset_surfel_moments();

  std::vector<PoseState> poses(selected.size());
  for (size_t i = 0; i < selected.size(); ++i) {
    poses[i].pose = selected[i].pose;
    poses[i].fixed_flag = opt.fix_first_pose && i == 0;
  }
  std::vector<bool> active(selected.size(), true);

  JointResult result;
  result.trace.reserve(opt.steps);
  double loss_at_50 = -1.0;
  size_t rr = 0;  // round-robin cursor over active keyframes
  for (int step = 0; step < opt.steps; ++step) {
    // SH degree schedule
    o.field.sh_active_degree =
        std::min(2, step / std::max(1, opt.sh_increment_every));

    // next active keyframe
    size_t tries = 0;
    while (!active[rr % selected.size()] && tries++ < selected.size()) ++rr;
    const size_t ki = rr % selected.size();
    ++rr;

    const double lr_mul = step >= opt.steps / 2 ? opt.lr_decay : 1.0;
    LossTraceRow row;
    const double total =
        o.step_loss(poses[ki], *selected[ki].frame, step, lr_mul, &row);
    row.n_active_keyframes =
        static_cast<int>(std::count(active.begin(), active.end(), true));
    result.trace.push_back(row);

    if (step == 50) loss_at_50 = total;
    if (loss_at_50 > 0.0 && total > opt.divergence_factor * loss_at_50) {
      throw DivergenceDetected("joint_optimize: loss exceeded " +
                               std::to_string(opt.divergence_factor) +
                               "x its step-50 value");
    }

    // density control
    const bool control_step = step >= density.prune_start_step &&
                              (step - density.prune_start_step) % density.prune_every == 0 &&
                              step > 0;
    if (control_step) {
      prune_by_opacity_percentile(o.field, density);
      if (step <= density.densify_until_step) {
        densify(o.field, density, opt.seed + static_cast<std::uint64_t>(step));
      }
      clip_scales(o.field, density);
      o.reset_surfel_moments();
    }

    // outlier rejection on smoothed per-keyframe losses
    if (step >= opt.mad_start && step % opt.mad_every == 0 && step > 0) {
      std::vector<double> losses;
      std::vector<size_t> idx;
      for (size_t i = 0; i < selected.size(); ++i) {
        if (active[i] && poses[i].loss_ema >= 0.0) {
          losses.push_back(poses[i].loss_ema);
          idx.push_back(i);
        }
      }
      if (losses.size() >= 4) {
        const MadStats st = mad_stats(losses, opt.mad_k);
        result.report.mad_per_round.push_back(st.mad);
        // keep at least 2 keyframes active
        for (size_t i = 0; i < st.flags.size(); ++i) {
          if (!st.flags[i]) continue;
          // Never drop a gauge-fixed pose: it cannot adapt to residual field
          // error, so its loss runs higher, but removing it frees the whole
          // field + pose system to drift together.
          if (poses[idx[i]].fixed_flag) continue;
          const int still_active =
              static_cast<int>(std::count(active.begin(), active.end(), true));
          if (still_active <= 2) break;
          active[idx[i]] = false;
          result.report.outlier_ids.push_back(selected[idx[i]].id);
          result.report.outlier_deviations.push_back(st.deviations[i]);
        }
      }
    }
  }

  result.field = std::move(o.field);
  result.poses.resize(selected.size());
  for (size_t i = 0; i < selected.size(); ++i) result.poses[i] = poses[i].pose;
  for (size_t i = 0; i < selected.size(); ++i) {
    if (active[i]) result.report.selected_ids.push_back(selected[i].id);
  }
  return result;
}

std::vector<Pose> refine_frozen(const GaussianField& field_in,
                                const std::vector<Keyframe>& keyframes,
                                const LossWeights& weights, const OptimizerConfig& opt) {
  if (keyframes.empty()) throw EmptyObservation("refine_frozen: no keyframes");
  Optimizer o{weights, opt, nullptr, false, opt.frozen_steps};
  o.field = field_in;
  if (o.field.positional_grad_accum.size() != o.field.surfels.size()) {
    o.field.positional_grad_accum.assign(o.field.surfels.size(), 0.0);
    o.field.positional_grad_count.assign(o.field.surfels.size(), 0);
  }
  o.reset_surfel_moments();

  std::vector<PoseState> poses(keyframes.size());
  for (size_t i = 0; i < keyframes.size(); ++i) {
    poses[i].pose = keyframes[i].pose;
    poses[i].fixed_flag = opt.fix_first_pose && i == 0;
  }

  for (int step = 0; step < opt.frozen_steps; ++step) {
    const size_t ki = step % keyframes.size();
    const double lr_mul = step >= opt.frozen_steps / 2 ? opt.lr_decay : 1.0;
    o.step_loss(poses[ki], *keyframes[ki].frame, step, lr_mul, nullptr);
  }

  std::vector<Pose> out(keyframes.size());
  for (size_t i = 0; i < keyframes.size(); ++i) out[i] = poses[i].pose;
  return out;
}

void write_loss_trace_csv(const std::vector<LossTraceRow>& trace,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_loss_trace_csv: cannot open " + path);
  out << "step,loss_total,loss_c,loss_d,loss_dd,loss_n,n_surfels,n_active_keyframes\n";
  out.precision(12);
  for (const auto& r : trace) {
    out << r.step << "," << r.total << "," << r.color << "," << r.depth << ","
        << r.depth_distortion << "," << r.normal << "," << r.n_surfels << ","
        << r.n_active_keyframes << "\n";
  }
}

}  // namespace splattrack
