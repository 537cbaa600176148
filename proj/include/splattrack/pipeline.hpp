#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "splattrack/dataset.hpp"
#include "splattrack/optimizer.hpp"
#include "splattrack/pose_graph.hpp"

namespace splattrack {

/// Aggregate configuration for the whole pipeline. Every field is
/// addressable in flat `key = value` config files via dotted prefixes
/// (e.g. `optimizer.steps = 500`).
struct PipelineConfig {
  FrontendConfig frontend;
  PoseGraphConfig graph;
  OptimizerConfig optimizer;
  DensityControlConfig density;
  LossWeights weights;
  MatchNoise noise;
  int anchor_level = 1;
  int refine_start_kf = 10;  // field refinement first fires at this keyframe
  int refine_every_kf = 5;   // and after every this many new keyframes
  int refine_steps_first = 0;  // 0 = optimizer.steps
  int refine_steps_later = 0;
  int frozen_steps_later = 0;  // 0 = optimizer.frozen_steps
  double init_pose_noise_m = 0.0;    // per-frame noise on the tracking prior
  double init_pose_noise_deg = 0.0;
  bool final_refine = true;
  std::string mode = "offline";  // offline | concurrent
  std::uint64_t seed = 0;
};

void apply_config_entry(PipelineConfig& cfg, const std::string& key,
                        const std::string& value);
void apply_config_file(PipelineConfig& cfg, const std::string& path);
std::string dump_config(const PipelineConfig& cfg);

/// One complete published state: keyframe poses and the frozen field,
/// stamped with a strictly increasing version and a checksum so readers
/// can verify they never observe a torn snapshot.
struct FieldSnapshot {
  std::vector<int> kf_ids;
  std::vector<Pose> kf_poses;
  GaussianField field;
  std::uint64_t version = 0;
  std::uint64_t checksum = 0;
};

std::uint64_t snapshot_checksum(const FieldSnapshot& s);

/// Single-writer/single-reader versioned snapshot swap between the
/// refinement worker and the tracking worker.
class ExchangeCell {
 public:
  void publish(FieldSnapshot s);
  /// Latest complete snapshot, or nullptr before the first publish.
  /// Throws IoError if the checksum does not match the contents.
  std::shared_ptr<const FieldSnapshot> read() const;

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const FieldSnapshot> cur_;
  std::uint64_t next_version_ = 1;
};

/// SPLATTRACK_THREADS cap on internal data-parallelism (default 1).
int thread_budget();

struct RunResult {
  std::vector<Pose> est;  // per input frame, object frame = first camera frame
  std::vector<TrackDiagnostics> diags;
  std::vector<double> frame_time_s;
  GaussianField field;
  std::vector<Keyframe> pool;
  std::vector<LossTraceRow> trace;  // last joint-refinement trace
  int refinements = 0;
};

/// Full tracking + reconstruction run. When out_dir is nonempty, writes
/// poses_out/%06d.txt, diagnostics.jsonl, loss_trace.csv, field.splats,
/// splats.ply and keyframes.txt there. Offline mode is a pure function of
/// (dataset, config); concurrent mode runs refinement on a second thread
/// synchronized only through the ExchangeCell.
RunResult run_pipeline(const Dataset& ds, const PipelineConfig& cfg,
                       const std::string& out_dir = "");

/// Renders depth at each keyframe view of the run and TSDF-fuses them into
/// a reconstruction point set (object frame).
ModelPoints reconstruct_from_run(const RunResult& run, const Camera& cam,
                                 const TsdfConfig& tsdf);

}  // namespace splattrack
