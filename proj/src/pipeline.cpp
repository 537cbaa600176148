#include "splattrack/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "splattrack/errors.hpp"
#include "splattrack/renderer.hpp"

namespace fs = std::filesystem;

namespace splattrack {

namespace {

struct ConfigBinding {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::vector<ConfigBinding> bindings(PipelineConfig& c) {
  std::vector<ConfigBinding> b;
  auto num = [&b](const std::string& key, auto* field) {
    using T = std::remove_pointer_t<decltype(field)>;
    b.push_back({key,
                 [field](const std::string& v) {
                   if constexpr (std::is_same_v<T, bool>)
                     *field = v == "1" || v == "true" || v == "on";
                   else if constexpr (std::is_integral_v<T>)
                     *field = static_cast<T>(std::stoll(v));
                   else
                     *field = std::stod(v);
                 },
                 [field]() {
                   std::ostringstream ss;
                   ss.precision(17);
                   if constexpr (std::is_same_v<T, bool>)
                     ss << (*field ? "true" : "false");
                   else
                     ss << *field;
                   return ss.str();
                 }});
  };
  auto str = [&b](const std::string& key, std::string* field) {
    b.push_back({key, [field](const std::string& v) { *field = v; },
                 [field]() { return *field; }});
  };

  num("frontend.erode_kernel", &c.frontend.erode_kernel);
  num("frontend.ransac_inlier_thresh_m", &c.frontend.ransac_inlier_thresh_m);
  num("frontend.ransac_max_iters", &c.frontend.ransac_max_iters);
  num("frontend.ransac_seed", &c.frontend.ransac_seed);
  num("frontend.min_matches", &c.frontend.min_matches);
  num("frontend.min_rotation_deg", &c.frontend.min_rotation_deg);
  num("frontend.depth_near", &c.frontend.depth_near);
  num("frontend.depth_far", &c.frontend.depth_far);

  num("graph.max_frames", &c.graph.max_frames);
  num("graph.min_visibility_ratio", &c.graph.min_visibility_ratio);
  num("graph.normal_dot_thresh", &c.graph.normal_dot_thresh);
  num("graph.lm_iters", &c.graph.lm_iters);
  num("graph.lm_damping_init", &c.graph.lm_damping_init);
  num("graph.lm_rel_tol", &c.graph.lm_rel_tol);
  num("graph.huber_delta", &c.graph.huber_delta);
  num("graph.keyframes_free", &c.graph.keyframes_free);
  num("graph.visibility_stride", &c.graph.visibility_stride);

  num("optimizer.steps", &c.optimizer.steps);
  num("optimizer.frozen_steps", &c.optimizer.frozen_steps);
  num("optimizer.lr_mu", &c.optimizer.lr_mu);
  num("optimizer.lr_rot", &c.optimizer.lr_rot);
  num("optimizer.lr_scale", &c.optimizer.lr_scale);
  num("optimizer.lr_opacity", &c.optimizer.lr_opacity);
  num("optimizer.lr_sh", &c.optimizer.lr_sh);
  num("optimizer.lr_pose_trans", &c.optimizer.lr_pose_trans);
  num("optimizer.lr_pose_rot", &c.optimizer.lr_pose_rot);
  num("optimizer.lr_decay", &c.optimizer.lr_decay);
  num("optimizer.sh_increment_every", &c.optimizer.sh_increment_every);
  num("optimizer.mad_k", &c.optimizer.mad_k);
  num("optimizer.mad_every", &c.optimizer.mad_every);
  num("optimizer.mad_start", &c.optimizer.mad_start);
  num("optimizer.loss_ema_beta", &c.optimizer.loss_ema_beta);
  num("optimizer.fix_first_pose", &c.optimizer.fix_first_pose);
  num("optimizer.seed", &c.optimizer.seed);

  num("density.prune_percentile", &c.density.prune_percentile);
  num("density.opacity_target", &c.density.opacity_target);
  num("density.prune_start_step", &c.density.prune_start_step);
  num("density.prune_every", &c.density.prune_every);
  num("density.densify_grad_thresh", &c.density.densify_grad_thresh);
  num("density.scale_clip_min", &c.density.scale_clip_min);
  num("density.scale_clip_max", &c.density.scale_clip_max);
  num("density.densify_until_step", &c.density.densify_until_step);
  num("density.voxel_size_m", &c.density.voxel_size_m);
  num("density.cluster_dist_m", &c.density.cluster_dist_m);
  num("density.min_points", &c.density.min_points);
  num("density.init_opacity", &c.density.init_opacity);

  num("weights.lambda_c", &c.weights.lambda_c);
  num("weights.lambda_d", &c.weights.lambda_d);
  num("weights.lambda_dd", &c.weights.lambda_dd);
  num("weights.lambda_n", &c.weights.lambda_n);
  num("weights.huber_delta", &c.weights.huber_delta);

  num("noise.pixel_sigma", &c.noise.pixel_sigma);
  num("noise.point_sigma", &c.noise.point_sigma);
  num("noise.outlier_fraction", &c.noise.outlier_fraction);
  num("noise.seed", &c.noise.seed);

  num("pipeline.anchor_level", &c.anchor_level);
  num("pipeline.refine_start_kf", &c.refine_start_kf);
  num("pipeline.refine_every_kf", &c.refine_every_kf);
  num("pipeline.refine_steps_first", &c.refine_steps_first);
  num("pipeline.refine_steps_later", &c.refine_steps_later);
  num("pipeline.frozen_steps_later", &c.frozen_steps_later);
  num("pipeline.init_pose_noise_m", &c.init_pose_noise_m);
  num("pipeline.init_pose_noise_deg", &c.init_pose_noise_deg);
  num("pipeline.final_refine", &c.final_refine);
  num("pipeline.seed", &c.seed);
  str("pipeline.mode", &c.mode);
  return b;
}

}  // namespace

void apply_config_entry(PipelineConfig& cfg, const std::string& key,
                        const std::string& value) {
  for (auto& b : bindings(cfg)) {
    if (b.key == key) {
      b.set(value);
      return;
    }
  }
  throw IoError("unknown config key: " + key);
}

void apply_config_file(PipelineConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  std::string line;
  while (std::getline(f, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty()) apply_config_entry(cfg, key, value);
  }
}

std::string dump_config(const PipelineConfig& cfg) {
  PipelineConfig copy = cfg;
  std::ostringstream ss;
  for (auto& b : bindings(copy)) ss << b.key << " = " << b.get() << "\n";
  return ss.str();
}

namespace {

void checksum_mix(std::uint64_t& h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;  // FNV-1a
  }
}

}  // namespace

std::uint64_t snapshot_checksum(const FieldSnapshot& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  checksum_mix(h, &s.version, sizeof(s.version));
  for (int id : s.kf_ids) checksum_mix(h, &id, sizeof(id));
  for (const Pose& p : s.kf_poses) {
    checksum_mix(h, p.R.data(), 9 * sizeof(double));
    checksum_mix(h, p.t.data(), 3 * sizeof(double));
  }
  const size_t n = s.field.surfels.size();
  checksum_mix(h, &n, sizeof(n));
  for (const Surfel& sf : s.field.surfels) {
    checksum_mix(h, sf.mu.data(), 3 * sizeof(double));
    checksum_mix(h, &sf.opacity_logit, sizeof(double));
  }
  return h;
}

void ExchangeCell::publish(FieldSnapshot s) {
  std::lock_guard<std::mutex> lock(mu_);
  s.version = next_version_++;
  s.checksum = snapshot_checksum(s);
  cur_ = std::make_shared<const FieldSnapshot>(std::move(s));
}

std::shared_ptr<const FieldSnapshot> ExchangeCell::read() const {
  std::shared_ptr<const FieldSnapshot> snap;
  {
    std::lock_guard<std::mutex> lock(mu_);
    snap = cur_;
  }
  if (snap && snapshot_checksum(*snap) != snap->checksum)
    throw IoError("ExchangeCell: torn snapshot (checksum mismatch)");
  return snap;
}

int thread_budget() {
  if (const char* env = std::getenv("SPLATTRACK_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

namespace {

Vec3 estimate_object_center(const Frame& f, const Pose& pose) {
  const Pose inv = pose.inverse();
  Vec3 sum = Vec3::Zero();
  size_t n = 0;
  for (int y = 0; y < f.depth.height; ++y) {
    for (int x = 0; x < f.depth.width; ++x) {
      if (!f.masked(x, y) || !f.valid_depth(x, y)) continue;
      sum += inv.apply(f.intrinsics.backproject(x, y, f.depth.at(x, y)));
      ++n;
    }
  }
  if (n == 0) throw EmptyObservation("no masked depth in the first frame");
  return sum / static_cast<double>(n);
}

/// Output of one field-refinement round, applied back to the pool.
struct RefineOutput {
  FieldSnapshot snapshot;
  std::vector<LossTraceRow> trace;
};

RefineOutput run_refinement(std::vector<Keyframe> pool, std::optional<GaussianField>& field,
                            const PipelineConfig& cfg, const AnchorSet& anchors,
                            const Vec3& object_center, bool first) {
  const SelectionReport sel = select_keyframes(pool, anchors, object_center);
  std::vector<Keyframe> selected;
  for (int id : sel.selected_ids) {
    for (const auto& kf : pool) {
      if (kf.id == id) {
        selected.push_back(kf);
        break;
      }
    }
  }
  if (!field) {
    field = fuse_and_init(selected, cfg.density, cfg.seed);
  } else {
    // Later keyframes can expose surface the initial fusion never saw;
    // seed fresh surfels there so optimization has something to shape.
    augment_field(*field, selected, cfg.density,
                  cfg.seed ^ (0x9e3779b97f4a7c15ull * pool.size()));
  }

  OptimizerConfig oc = cfg.optimizer;
  const int steps = first ? cfg.refine_steps_first : cfg.refine_steps_later;
  if (steps > 0) oc.steps = steps;
  if (!first && cfg.frozen_steps_later > 0) oc.frozen_steps = cfg.frozen_steps_later;

  JointResult jr = joint_optimize(*field, selected, cfg.weights, oc, cfg.density);
  field = jr.field;
  for (size_t i = 0; i < selected.size(); ++i) {
    for (auto& kf : pool) {
      if (kf.id == selected[i].id) kf.pose = jr.poses[i];
    }
    for (int oid : jr.report.outlier_ids) {
      if (oid == selected[i].id)
        for (auto& kf : pool)
          if (kf.id == oid) kf.outlier = true;
    }
  }
  const std::vector<Pose> all = refine_frozen(*field, pool, cfg.weights, oc);

  RefineOutput out;
  out.trace = jr.trace;
  for (size_t i = 0; i < pool.size(); ++i) {
    out.snapshot.kf_ids.push_back(pool[i].id);
    out.snapshot.kf_poses.push_back(all[i]);
  }
  out.snapshot.field = *field;
  return out;
}

void overlay_poses(std::vector<Keyframe>& pool, const FieldSnapshot& snap) {
  for (size_t i = 0; i < snap.kf_ids.size(); ++i) {
    for (auto& kf : pool) {
      if (kf.id == snap.kf_ids[i]) kf.pose = snap.kf_poses[i];
    }
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

RunResult run_pipeline(const Dataset& ds, const PipelineConfig& cfg,
                       const std::string& out_dir) {
  if (ds.frames.empty()) throw EmptyObservation("run_pipeline: empty dataset");
  const bool concurrent = cfg.mode == "concurrent";

  // Provider: oracle matches when ground truth ships with the dataset.
  std::unique_ptr<CorrespondenceProvider> provider;
  bool have_gt = true;
  for (const auto& g : ds.gt) have_gt = have_gt && g.has_value();
  have_gt = have_gt && ds.gt.size() == ds.frames.size();
  if (have_gt) {
    auto oracle = std::make_unique<SyntheticOracleProvider>(cfg.noise);
    for (size_t i = 0; i < ds.frames.size(); ++i)
      oracle->set_gt_pose(ds.frames[i]->timestamp, *ds.gt[i]);
    provider = std::move(oracle);
  } else {
    provider = std::make_unique<PatchMatcherProvider>();
  }

  RunResult res;
  res.est.resize(ds.frames.size());
  res.diags.resize(ds.frames.size());
  res.frame_time_s.resize(ds.frames.size(), 0.0);

  const AnchorSet anchors = icosphere_anchors(cfg.anchor_level);

  // Object frame is anchored to the first camera frame.
  res.est[0] = Pose::identity();
  const Vec3 center = estimate_object_center(*ds.frames[0], res.est[0]);
  std::vector<Keyframe> pool;
  pool.push_back(Keyframe{ds.frames[0], res.est[0],
                          assign_to_anchor(res.est[0], center, anchors), false,
                          ds.frames[0]->mask_area(), 0});

  std::optional<GaussianField> field;
  ExchangeCell cell;
  std::uint64_t seen_version = 0;
  int kfs_at_last_refine = 1;
  bool refined_once = false;

  // Refinement worker state (concurrent mode).
  std::thread worker;
  std::mutex job_mu;
  std::condition_variable job_cv;
  std::optional<std::vector<Keyframe>> job;
  bool done = false;
  std::vector<LossTraceRow> worker_trace;
  int worker_refinements = 0;
  if (concurrent) {
    worker = std::thread([&] {
      std::optional<GaussianField> wfield;
      while (true) {
        std::vector<Keyframe> snapshot_pool;
        {
          std::unique_lock<std::mutex> lock(job_mu);
          job_cv.wait(lock, [&] { return job.has_value() || done; });
          if (!job && done) break;
          snapshot_pool = std::move(*job);
          job.reset();
        }
        const bool first = !wfield.has_value();
        RefineOutput out =
            run_refinement(std::move(snapshot_pool), wfield, cfg, anchors, center, first);
        worker_trace = out.trace;
        ++worker_refinements;
        cell.publish(std::move(out.snapshot));
      }
      if (wfield) {
        FieldSnapshot final_snap;
        final_snap.field = *wfield;
        cell.publish(std::move(final_snap));
      }
    });
  }

  auto maybe_refine = [&](bool force) {
    const int n_kf = static_cast<int>(pool.size());
    const bool due =
        (!refined_once && n_kf >= cfg.refine_start_kf) ||
        (refined_once && n_kf - kfs_at_last_refine >= cfg.refine_every_kf);
    if (!(due || (force && n_kf > kfs_at_last_refine && refined_once))) return;
    if (n_kf < cfg.refine_start_kf) return;
    if (concurrent) {
      {
        std::lock_guard<std::mutex> lock(job_mu);
        job = pool;  // latest job wins
      }
      job_cv.notify_one();
    } else {
      const bool first = !refined_once;
      RefineOutput out = run_refinement(pool, field, cfg, anchors, center, first);
      res.trace = out.trace;
      overlay_poses(pool, out.snapshot);
      ++res.refinements;
    }
    refined_once = true;
    kfs_at_last_refine = n_kf;
  };

  for (size_t t = 1; t < ds.frames.size(); ++t) {
    const auto tick = std::chrono::steady_clock::now();
    if (concurrent) {
      if (auto snap = cell.read(); snap && snap->version > seen_version) {
        overlay_poses(pool, *snap);
        seen_version = snap->version;
      }
    }
    Pose prior = res.est[t - 1];
    if (cfg.init_pose_noise_m > 0 || cfg.init_pose_noise_deg > 0) {
      std::mt19937_64 rng(mix_seed(cfg.seed, 7000 + t));
      std::normal_distribution<double> gauss(0.0, 1.0);
      PoseTangent n;
      n.trans = cfg.init_pose_noise_m * Vec3(gauss(rng), gauss(rng), gauss(rng));
      n.rot = cfg.init_pose_noise_deg * M_PI / 180.0 *
              Vec3(gauss(rng), gauss(rng), gauss(rng));
      prior = compose(se3_exp(n), prior);
    }
    auto [pose, diag] = track_frame(*ds.frames[t], pool, prior, *provider,
                                    cfg.frontend, cfg.graph);
    diag.frame = static_cast<int>(t);
    res.est[t] = pose;
    res.diags[t] = diag;
    if (!diag.lost &&
        admit_keyframe(*ds.frames[t], pose, pool, *provider, cfg.frontend)) {
      pool.push_back(Keyframe{ds.frames[t], pose,
                              assign_to_anchor(pose, center, anchors), false,
                              ds.frames[t]->mask_area(),
                              static_cast<int>(pool.size())});
      maybe_refine(false);
    }
    res.frame_time_s[t] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - tick).count();
  }
  if (cfg.final_refine) maybe_refine(true);

  if (concurrent) {
    {
      std::lock_guard<std::mutex> lock(job_mu);
      done = true;
    }
    job_cv.notify_one();
    worker.join();
    if (auto snap = cell.read(); snap) {
      if (!snap->kf_ids.empty()) overlay_poses(pool, *snap);
      field = snap->field;
    }
    res.trace = worker_trace;
    res.refinements = worker_refinements;
  }

  res.pool = pool;
  if (field) res.field = *field;

  if (!out_dir.empty()) {
    fs::create_directories(out_dir + "/poses_out");
    for (size_t t = 0; t < res.est.size(); ++t)
      save_pose_txt(res.est[t], out_dir + "/poses_out/" +
                                    frame_name(static_cast<int>(t), ".txt"));
    {
      std::ofstream f(out_dir + "/diagnostics.jsonl");
      if (!f) throw IoError("cannot write diagnostics.jsonl");
      for (size_t t = 0; t < res.diags.size(); ++t) {
        nlohmann::json j;
        j["frame"] = static_cast<int>(t);
        j["residual"] = res.diags[t].residual;
        j["n_graph_frames"] = res.diags[t].n_graph_frames;
        j["coarse_inliers"] = res.diags[t].coarse_inliers;
        j["lost"] = res.diags[t].lost;
        j["time_s"] = res.frame_time_s[t];
        f << j.dump() << "\n";
      }
    }
    if (!res.trace.empty()) write_loss_trace_csv(res.trace, out_dir + "/loss_trace.csv");
    if (!res.field.surfels.empty()) {
      save_field(res.field, out_dir + "/field.splats");
      export_splats_ply(res.field, out_dir + "/splats.ply");
    }
    {
      std::ofstream f(out_dir + "/keyframes.txt");
      if (!f) throw IoError("cannot write keyframes.txt");
      f.precision(17);
      for (const auto& kf : pool) {
        f << kf.frame->timestamp;
        const Mat4 m = kf.pose.matrix();
        for (int r = 0; r < 4; ++r)
          for (int c = 0; c < 4; ++c) f << " " << m(r, c);
        f << "\n";
      }
    }
  }
  return res;
}

ModelPoints reconstruct_from_run(const RunResult& run, const Camera& cam,
                                 const TsdfConfig& tsdf) {
  if (run.field.surfels.empty()) throw EmptyField("reconstruct_from_run: no field");
  // Fit the grid around the reconstructed object (object frame = camera 0).
  TsdfConfig grid = tsdf;
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const Vec3& p : to_world_points(run.field)) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  grid.grid_min = lo - Vec3::Constant(0.03);
  grid.grid_max = hi + Vec3::Constant(0.03);
  std::vector<DepthView> views;
  RenderOptions opts;
  opts.cull_backfaces = true;
  opts.median_depth = true;
  for (const auto& kf : run.pool) {
    if (kf.outlier) continue;
    // Slightly eroded mask: silhouette pixels blend fore- and background
    // surfels into phantom mid-air depths.
    const Frame eroded = erode_depth(*kf.frame, 3);
    const RenderOutput out = render(run.field, kf.pose, cam, &eroded.mask, opts);
    DepthView v;
    v.depth = out.depth;
    // keep only well-covered pixels
    for (int y = 0; y < v.depth.height; ++y)
      for (int x = 0; x < v.depth.width; ++x)
        if (out.alpha_acc.at(x, y) < 0.5) v.depth.at(x, y) = 0.0;
    v.intrinsics = cam;
    v.pose = kf.pose;
    views.push_back(std::move(v));
  }
  ModelPoints fused = tsdf_fuse(views, grid);

  // The fused zero level is only trustworthy where the splat surface actually
  // is; crossings further out come from depth pixels that saw through thin
  // coverage and carve phantom sheets. Keep points near some surfel center.
  const double rad = 0.006;
  const ModelPoints centers = to_world_points(run.field);
  std::unordered_map<std::uint64_t, std::vector<int>> cells;
  auto key = [&](const Vec3& p) {
    const auto q = [&](double v) {
      return static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(v / rad)) & 0x1fffff);
    };
    return q(p.x()) | (q(p.y()) << 21) | (q(p.z()) << 42);
  };
  for (size_t i = 0; i < centers.size(); ++i)
    cells[key(centers[i])].push_back(static_cast<int>(i));
  ModelPoints out;
  for (const Vec3& p : fused) {
    bool keep = false;
    for (int dz = -1; dz <= 1 && !keep; ++dz)
      for (int dy = -1; dy <= 1 && !keep; ++dy)
        for (int dx = -1; dx <= 1 && !keep; ++dx) {
          const auto it = cells.find(key(p + rad * Vec3(dx, dy, dz)));
          if (it == cells.end()) continue;
          for (int i : it->second) {
            if ((centers[i] - p).squaredNorm() <= rad * rad) {
              keep = true;
              break;
            }
          }
        }
    if (keep) out.push_back(p);
  }
  if (out.empty()) throw EmptyFusion("reconstruct_from_run: no surface-consistent points");
  return out;
}

}  // namespace splattrack
