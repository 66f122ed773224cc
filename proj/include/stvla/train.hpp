#pragma once

// Two-stage training, closed-loop evaluation, reports and the ablation driver.

#include <map>
#include <string>
#include <vector>

#include "stvla/config.hpp"
#include "stvla/dataset.hpp"
#include "stvla/model.hpp"

namespace stvla {

// One supervised decision: the history of chunk-start frames (oldest first,
// padded with the episode's first frame) and the chunk it must predict.
struct TrainSample {
  std::size_t episode = 0;  // index into Dataset::episodes
  std::size_t chunk = 0;
  std::vector<std::size_t> frames;  // feature-cache indices, history x views
  Tensor proprio;                   // [1, 7]
  std::vector<std::size_t> lang;
  Tensor action;    // [1, 8]
  Tensor grounding; // [1, 6] normalized target object and goal positions
};

// Per-frame features that stay fixed during a stage. The 4D embeddings are
// only cached while the embedder is frozen.
class FeatureCache {
 public:
  FeatureCache(const VlaModel& model, const Dataset& ds, const std::vector<std::size_t>& episodes);

  const std::vector<TrainSample>& samples() const { return samples_; }
  const FrameFeatures& frame(std::size_t i) const { return frames_[i]; }
  void cache_embeddings(const VlaModel& model);
  bool has_embeddings() const { return !embed_.empty(); }
  const Tensor& embedding(std::size_t i) const { return embed_[i]; }

 private:
  std::vector<FrameFeatures> frames_;
  std::vector<Tensor> embed_;
  std::vector<TrainSample> samples_;
};

// Adam or plain gradient descent over a fixed parameter list, with global
// gradient-norm clipping. Parameters without a gradient are left untouched.
class Optimizer {
 public:
  Optimizer(ParamList params, std::string kind, double lr, double clip);
  // Returns the pre-clip gradient norm.
  double step();
  void zero_grad();

 private:
  ParamList params_;
  std::string kind_;
  double lr_, clip_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double heldout_loss = 0.0;
};

struct TrainLog {
  std::size_t stage = 0;
  double initial_loss = 0.0;  // train-set loss before the first update
  std::vector<EpochLog> epochs;
  bool flagged = false;  // stage 1: loss fell by less than half
  bool aborted = false;
  std::string abort_reason;
  std::vector<std::string> frozen_changed;  // must stay empty

  double final_loss() const { return epochs.empty() ? initial_loss : epochs.back().train_loss; }
};

std::vector<std::size_t> train_episodes(const RunConfig& cfg, const Dataset& ds, const Split& sp);
std::vector<std::size_t> heldout_episodes(const RunConfig& cfg, const Dataset& ds, const Split& sp);

TrainLog train_stage1(VlaModel& model, const RunConfig& cfg, const Dataset& ds, const Split& sp);
TrainLog train_stage2(VlaModel& model, const RunConfig& cfg, const Dataset& ds, const Split& sp);

struct DtMetrics {
  double model_mae = 0.0;
  double baseline_mae = 0.0;  // predict the training-set mean dt
  double mean_gt = 0.0;       // heldout mean ground-truth dt
  std::size_t samples = 0;
};

DtMetrics heldout_dt_metrics(const VlaModel& model, const RunConfig& cfg, const Dataset& ds, const Split& sp);

// ---- evaluation ----

struct EpisodeRow {
  std::size_t index = 0;
  std::string suite;
  std::size_t subtask = 0;
  std::uint64_t scene_seed = 0;
  bool success = false;
  double completion_time = 0.0;
  std::size_t decisions = 0;
  std::string failure_reason;
  std::string trajectory;  // relative path when dumped

  bool operator==(const EpisodeRow&) const = default;
};

struct SuiteSummary {
  std::size_t episodes = 0;
  std::size_t successes = 0;
  double sr = 0.0;
  double sr_std = 0.0;  // bootstrap
  double ct_mean = 0.0;   // over successes only
  double ct_median = 0.0;

  bool operator==(const SuiteSummary&) const = default;
};

struct EvalReport {
  std::map<std::string, SuiteSummary> suites;  // includes "all"
  std::vector<EpisodeRow> rows;
  std::string config_hash;
  std::string run_id;
  std::string config_echo;

  const SuiteSummary& overall() const { return suites.at("all"); }
  bool operator==(const EvalReport&) const = default;
};

// Fresh-seeded evaluation specs: episode i takes the i-th subtask of the
// suite set round-robin.
std::vector<TaskSpec> eval_specs(const std::string& suite, std::size_t n, std::uint64_t seed);

SuiteSummary summarize(const std::vector<EpisodeRow>& rows, std::size_t bootstrap, std::uint64_t seed);

struct EvalOptions {
  std::size_t workers = 1;
  RolloutOptions rollout;
  std::size_t bootstrap = 1000;
  std::uint64_t bootstrap_seed = 5;
  std::string traj_dir;  // when set, every trajectory is written there
};

EvalOptions eval_options(const RunConfig& cfg);
// `example_trace` receives the first successful trajectory (or the first one).
EvalReport evaluate_policy(const RolloutPolicy& policy, const std::vector<TaskSpec>& specs, const EvalOptions& opt,
                           const RunConfig& cfg, std::vector<TraceRow>* example_trace = nullptr);
EvalReport evaluate_suite(const VlaModel& model, const RunConfig& cfg, const std::string& suite,
                          std::size_t n_episodes, std::vector<TraceRow>* example_trace = nullptr);

// report.csv, report.json and report.svg in `dir`.
void write_report(const EvalReport& r, const std::string& dir, const std::vector<TraceRow>& example_trace = {});

// ---- pipeline ----

struct PipelineResult {
  TrainLog stage1, stage2;
  DtMetrics dt;
  EvalReport report;
};

// Dataset from the config, generated in memory or loaded from data_dir.
Dataset build_dataset(const RunConfig& cfg);
Split dataset_split(const RunConfig& cfg, const Dataset& ds);

PipelineResult run_pipeline(const RunConfig& cfg, const Dataset& ds, const std::string& stage1_cache_dir = "");

struct AblationVariant {
  std::string name;
  std::vector<std::string> overrides;  // key=value
};

std::vector<AblationVariant> read_matrix(const std::string& path);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  SuiteSummary summary;
  DtMetrics dt;
  bool stage1_flagged = false;
};

std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<AblationVariant>& matrix,
                                const std::vector<std::uint64_t>& seeds, const std::string& out_dir);
// ablation.csv plus a markdown table with one line per variant.
void write_ablation(const std::vector<AblationRow>& rows, const std::string& out_dir);

}  // namespace stvla
