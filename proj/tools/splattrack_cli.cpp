#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "splattrack/dataset.hpp"
#include "splattrack/errors.hpp"
#include "splattrack/evaluation.hpp"
#include "splattrack/gradcheck.hpp"
#include "splattrack/pipeline.hpp"
#include "splattrack/renderer.hpp"

namespace fs = std::filesystem;
using namespace splattrack;

namespace {

void apply_overrides(PipelineConfig& cfg, const std::string& config_path,
                     const std::vector<std::string>& sets) {
  if (!config_path.empty()) apply_config_file(cfg, config_path);
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw IoError("--set expects key=value, got " + kv);
    apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
}

std::vector<Pose> load_pose_dir(const std::string& dir) {
  std::vector<Pose> poses;
  for (int i = 0;; ++i) {
    const std::string p = dir + "/" + frame_name(i, ".txt");
    if (!fs::exists(p)) break;
    poses.push_back(load_pose_txt(p));
  }
  if (poses.empty()) throw IoError("no poses in " + dir);
  return poses;
}

struct RunKeyframe {
  int frame_index = 0;
  Pose pose;
};

std::vector<RunKeyframe> load_keyframes_txt(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  std::vector<RunKeyframe> kfs;
  RunKeyframe kf;
  Mat4 m;
  while (f >> kf.frame_index) {
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        if (!(f >> m(r, c))) throw IoError("truncated " + path);
    kf.pose = Pose::from_matrix(m);
    kfs.push_back(kf);
  }
  if (kfs.empty()) throw IoError("no keyframes in " + path);
  return kfs;
}

int cmd_synth(const std::string& shape, const std::string& trajectory, int frames,
              int width, int height, double size, double radius, std::uint64_t seed,
              const std::string& out) {
  SceneSpec spec;
  spec.shape = shape_from_string(shape);
  spec.trajectory = trajectory_from_string(trajectory);
  spec.n_frames = frames;
  spec.width = width;
  spec.height = height;
  spec.focal = 1.5 * width;
  spec.size = size;
  spec.orbit_radius = radius;
  spec.seed = seed;
  const SyntheticScene scene = generate_scene(spec);
  save_dataset(scene, out);
  std::cout << "wrote " << scene.frames.size() << " frames to " << out << "\n";
  return 0;
}

int cmd_track(const std::string& data, const std::string& out, PipelineConfig cfg) {
  const Dataset ds = load_dataset(data);
  const RunResult run = run_pipeline(ds, cfg, out);
  int lost = 0;
  for (const auto& d : run.diags) lost += d.lost;
  std::cout << "tracked " << run.est.size() << " frames, " << run.pool.size()
            << " keyframes, " << run.refinements << " refinements, " << lost
            << " lost, " << run.field.surfels.size() << " surfels -> " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& gt_model_path,
             std::string data_dir, const std::string& curve_path) {
  if (data_dir.empty()) data_dir = fs::path(gt_model_path).parent_path().string();
  const Dataset ds = load_dataset(data_dir);
  const ModelPoints model = load_points(gt_model_path);
  const std::vector<Pose> est = load_pose_dir(run_dir + "/poses_out");
  if (est.size() != ds.frames.size())
    throw IoError("pose log / dataset frame count mismatch");
  for (const auto& g : ds.gt)
    if (!g) throw IoError("eval requires ground-truth poses in the dataset");

  // Estimates live in the first-camera frame; re-express the ground truth
  // there so both trajectories and the model share one object frame.
  const Pose gt0 = *ds.gt[0];
  PoseTrajectory traj;
  ModelPoints model_obj(model.size());
  for (size_t i = 0; i < model.size(); ++i) model_obj[i] = gt0.apply(model[i]);
  for (size_t t = 0; t < est.size(); ++t) {
    traj.ids.push_back(static_cast<int>(t));
    traj.est.push_back(est[t]);
    traj.gt.push_back(compose(*ds.gt[t], gt0.inverse()));
  }
  // Per-frame times from diagnostics, when present.
  {
    std::ifstream f(run_dir + "/diagnostics.jsonl");
    std::string line;
    while (f && std::getline(f, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.contains("time_s"))
        traj.frame_time_s.push_back(j["time_s"].get<double>());
    }
  }

  ModelPoints recon;
  if (fs::exists(run_dir + "/field.splats") && fs::exists(run_dir + "/keyframes.txt")) {
    RunResult run;
    run.field = load_field(run_dir + "/field.splats");
    for (const RunKeyframe& kf : load_keyframes_txt(run_dir + "/keyframes.txt")) {
      Keyframe k;
      k.frame = ds.frames.at(kf.frame_index);
      k.pose = kf.pose;
      run.pool.push_back(k);
    }
    recon = reconstruct_from_run(run, ds.intrinsics, TsdfConfig{});
  }

  const EvalReport rep = evaluate_run(traj, model_obj, recon);
  write_report_json(rep, run_dir + "/report.json");
  write_per_frame_csv(rep, traj, run_dir + "/per_frame.csv");
  if (!curve_path.empty()) {
    std::ofstream f(curve_path);
    if (!f) throw IoError("cannot write " + curve_path);
    f << "threshold_m,add_accuracy,adds_accuracy\n";
    for (int i = 0; i <= 100; ++i) {
      const double tau = 0.1 * i / 100.0;
      auto frac = [&](const std::vector<double>& v) {
        size_t n = 0;
        for (double x : v) n += x < tau;
        return static_cast<double>(n) / v.size();
      };
      f << tau << "," << frac(rep.per_frame_add) << "," << frac(rep.per_frame_adds) << "\n";
    }
  }
  std::cout << "ADD-AUC " << rep.add_auc << "  ADD-S-AUC " << rep.adds_auc
            << "  CD " << rep.chamfer_sq_cm2 << " cm^2 (" << rep.chamfer_cm
            << " cm)  ATPF " << rep.atpf_s << " s\n";
  return 0;
}

int cmd_render_view(const std::string& field_path, const std::string& pose_path,
                    const std::string& data_dir, const std::string& out_prefix) {
  const GaussianField field = load_field(field_path);
  const Pose pose = load_pose_txt(pose_path);
  const Dataset ds = load_dataset(data_dir);
  const RenderOutput out = render(field, pose, ds.intrinsics);
  save_png_color(out.color, out_prefix + "_color.png");
  save_png_depth_mm(out.depth, out_prefix + "_depth.png");
  ImageD3 nrm(out.normal.width, out.normal.height);
  for (int y = 0; y < nrm.height; ++y)
    for (int x = 0; x < nrm.width; ++x)
      for (int c = 0; c < 3; ++c)
        nrm.at(x, y, c) = 0.5 * (out.normal.at(x, y, c) + 1.0);
  save_png_color(nrm, out_prefix + "_normal.png");
  std::cout << "wrote " << out_prefix << "_{color,depth,normal}.png\n";
  return 0;
}

int cmd_inspect_selection(const std::string& run_dir, const std::string& data_dir,
                          int anchor_level) {
  const Dataset ds = load_dataset(data_dir);
  const std::vector<RunKeyframe> kfs = load_keyframes_txt(run_dir + "/keyframes.txt");
  const AnchorSet anchors = icosphere_anchors(anchor_level);

  // Object center from the first keyframe's masked depth.
  std::vector<Keyframe> pool;
  for (size_t i = 0; i < kfs.size(); ++i) {
    Keyframe k;
    k.frame = ds.frames.at(kfs[i].frame_index);
    k.pose = kfs[i].pose;
    k.mask_area = k.frame->mask_area();
    k.id = static_cast<int>(i);
    pool.push_back(k);
  }
  Vec3 center = Vec3::Zero();
  {
    const Frame& f = *pool[0].frame;
    const Pose inv = pool[0].pose.inverse();
    size_t n = 0;
    for (int y = 0; y < f.depth.height; ++y)
      for (int x = 0; x < f.depth.width; ++x)
        if (f.masked(x, y) && f.valid_depth(x, y)) {
          center += inv.apply(f.intrinsics.backproject(x, y, f.depth.at(x, y)));
          ++n;
        }
    if (n) center /= static_cast<double>(n);
  }
  for (auto& k : pool) k.anchor_id = assign_to_anchor(k.pose, center, anchors);

  const SelectionReport rep = select_keyframes(pool, anchors, center);
  nlohmann::json j;
  j["n_keyframes"] = pool.size();
  j["anchor_level"] = anchor_level;
  j["n_anchors"] = anchors.directions.size();
  j["selected_ids"] = rep.selected_ids;
  nlohmann::json winners = nlohmann::json::array();
  for (const auto& [anchor, kf] : rep.anchor_winners)
    winners.push_back({{"anchor", anchor}, {"keyframe", kf}});
  j["anchor_winners"] = winners;
  j["outlier_ids"] = rep.outlier_ids;
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"6-DoF RGB-D object tracking with surfel splat reconstruction"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic RGB-D dataset");
  std::string shape = "cube", trajectory = "orbit", out_dir;
  int frames = 120, width = 64, height = 64;
  double size = 0.05, radius = 0.35;
  std::uint64_t seed = 0;
  synth->add_option("--shape", shape, "cube|sphere|cylinder|blob");
  synth->add_option("--trajectory", trajectory, "orbit|handheld");
  synth->add_option("--frames", frames);
  synth->add_option("--width", width);
  synth->add_option("--height", height);
  synth->add_option("--size", size, "object half-extent (m)");
  synth->add_option("--radius", radius, "camera orbit radius (m)");
  synth->add_option("--seed", seed);
  synth->add_option("--out", out_dir)->required();

  // track
  auto* track = app.add_subcommand("track", "run the tracking + reconstruction pipeline");
  std::string data_dir, run_dir, config_path, mode;
  std::vector<std::string> sets;
  bool dump = false;
  track->add_option("--data", data_dir, "dataset directory");
  track->add_option("--out", run_dir, "run output directory");
  track->add_option("--config", config_path, "key = value config file");
  track->add_option("--set", sets, "config override key=value")->take_all();
  track->add_option("--mode", mode, "offline|concurrent");
  track->add_flag("--dump-config", dump, "print the effective config and exit");

  // eval
  auto* eval = app.add_subcommand("eval", "score a run against ground truth");
  std::string eval_run, gt_model, eval_data, curve;
  eval->add_option("--run", eval_run)->required();
  eval->add_option("--gt", gt_model, "ground-truth model points (xyz/ply)")->required();
  eval->add_option("--data", eval_data, "dataset dir (default: alongside --gt)");
  eval->add_option("--curve", curve, "write accuracy-vs-threshold CSV here");

  // render-view
  auto* rv = app.add_subcommand("render-view", "render the field from a pose");
  std::string rv_field, rv_pose, rv_data, rv_prefix;
  rv->add_option("--field", rv_field)->required();
  rv->add_option("--pose", rv_pose, "4x4 pose text file")->required();
  rv->add_option("--data", rv_data, "dataset dir for intrinsics")->required();
  rv->add_option("--out", rv_prefix, "output prefix")->required();

  // export-splats
  auto* ex = app.add_subcommand("export-splats", "export the field as PLY");
  std::string ex_field, ex_out;
  ex->add_option("--field", ex_field)->required();
  ex->add_option("--out", ex_out)->required();

  // inspect-selection
  auto* insp = app.add_subcommand("inspect-selection", "keyframe selection report");
  std::string insp_run, insp_data;
  int insp_level = 1;
  insp->add_option("--run", insp_run)->required();
  insp->add_option("--data", insp_data)->required();
  insp->add_option("--anchor-level", insp_level);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  int gc_scenes = 10;
  gc->add_option("--scenes", gc_scenes);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed())
      return cmd_synth(shape, trajectory, frames, width, height, size, radius, seed,
                       out_dir);
    if (track->parsed()) {
      PipelineConfig cfg;
      apply_overrides(cfg, config_path, sets);
      if (!mode.empty()) cfg.mode = mode;
      if (dump) {
        std::cout << dump_config(cfg);
        return 0;
      }
      if (data_dir.empty() || run_dir.empty())
        throw IoError("track requires --data and --out");
      return cmd_track(data_dir, run_dir, cfg);
    }
    if (eval->parsed()) return cmd_eval(eval_run, gt_model, eval_data, curve);
    if (rv->parsed()) return cmd_render_view(rv_field, rv_pose, rv_data, rv_prefix);
    if (ex->parsed()) {
      export_splats_ply(load_field(ex_field), ex_out);
      std::cout << "wrote " << ex_out << "\n";
      return 0;
    }
    if (insp->parsed()) return cmd_inspect_selection(insp_run, insp_data, insp_level);
    if (gc->parsed()) {
      GradCheckConfig cfg;
      cfg.n_scenes = gc_scenes;
      const GradCheckReport rep = gradcheck_suite(cfg);
      std::cout << "checked " << rep.n_params << " params, max rel err "
                << rep.max_rel_err << " (" << rep.worst_param << "), "
                << rep.n_failed << " failures, " << rep.seconds << " s\n";
      return rep.pass() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
