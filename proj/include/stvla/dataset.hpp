#pragma once

// Expert trajectories -> variable-duration action chunks, and the on-disk
// vision-language-action dataset.

#include <cstddef>
#include <string>
#include <vector>

#include "stvla/sim.hpp"

namespace stvla {

struct ChunkingParams {
  double cos_thresh = 0.95;
  std::size_t max_chunk_steps = 16;

  void validate() const;
};

struct Chunk {
  Vec3 delta_x;
  Vec3 delta_theta;
  double grip = 0.0;
  double delta_t = 0.0;
  std::size_t begin = 0, end = 0;  // source step range [begin, end)

  std::size_t steps() const { return end - begin; }
  SpatioTemporalAction action() const { return {delta_x, delta_theta, grip, delta_t}; }
  bool operator==(const Chunk&) const = default;
};

// Observation at the first step of a chunk plus the alignment targets.
struct ChunkSample {
  FramePair frames;
  ProprioState proprio;
  Vec3 target_position;
  Vec3 goal_position;

  bool operator==(const ChunkSample&) const = default;
};

struct AnnotatedEpisode {
  std::size_t episode_id = 0;
  TaskSpec spec;
  double hz = 20.0;
  std::size_t steps = 0;
  ChunkingParams params;
  std::vector<Chunk> chunks;
  std::vector<ChunkSample> samples;  // one per chunk

  double duration() const { return static_cast<double>(steps) / hz; }
  bool operator==(const AnnotatedEpisode& o) const;
};

// Greedy chunking of raw step actions. `forced` lists step indices that must
// start a new chunk.
std::vector<Chunk> chunk_actions(const std::vector<SpatioTemporalAction>& actions, double hz,
                                 const ChunkingParams& params, const std::vector<std::size_t>& forced = {});
AnnotatedEpisode chunk_trajectory(const Episode& ep, const ChunkingParams& params = {}, std::size_t episode_id = 0);

struct DatasetHeader {
  int format_version = 1;
  double hz = 20.0;
  Workspace workspace;
  std::string vocab_hash;
  ChunkingParams params;
};

struct Dataset {
  DatasetHeader header;
  std::vector<AnnotatedEpisode> episodes;
};

inline constexpr int kDatasetFormatVersion = 1;

// Writes `dir`/dataset.jsonl and `dir`/frames/*.bin.
void serialize(const Dataset& ds, const std::string& dir);
Dataset load(const std::string& dir);

// Frame blob: little-endian header + f32 depth grid.
void write_frame_blob(const std::string& path, const SimFrame& frame);
SimFrame read_frame_blob(const std::string& path);

struct Split {
  std::vector<std::size_t> train;    // episode indices
  std::vector<std::size_t> heldout;
};

Split split(std::size_t n_episodes, double train_frac, std::uint64_t seed);

// Raw demonstrations for the benchmark: episode e uses subtask e % n_subtasks.
std::vector<Episode> generate_dataset_episodes(std::size_t n_subtasks, std::size_t n_episodes, double hz,
                                               std::uint64_t seed, const SimConfig& cfg = {});
Dataset annotate(const std::vector<Episode>& episodes, const ChunkingParams& params);

// Raw episodes on disk (gen-data output): episodes.jsonl with per-step actions.
void save_raw_episodes(const std::vector<Episode>& eps, const std::string& dir);
std::vector<Episode> load_raw_episodes(const std::string& dir);

std::string fnv1a_hex(const std::string& bytes);

}  // namespace stvla
