#pragma once

// The full observation-to-action stack: frozen patch encoder, spatiotemporal
// embedding, fusion and the policy network, with the parameter groups used by
// the two training stages.

#include <string>
#include <vector>

#include "stvla/config.hpp"
#include "stvla/fusion.hpp"
#include "stvla/policy.hpp"
#include "stvla/sim.hpp"
#include "stvla/st_embed.hpp"

namespace stvla {

struct ModelConfig {
  EmbedConfig embed;
  PolicyConfig policy;
  FusionKind fusion = FusionKind::attention;
  std::size_t history = 2;
  std::size_t views = 2;
  PatchGrid patches{4, 4};
  std::size_t image_size = 16;
  bool use_proprio = true;
  bool use_dt_head = true;
  double fixed_dt = 0.8;  // executed duration when the dt head is disabled
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  std::uint64_t seed = 1;

  std::size_t patches_per_view() const { return patches.rows * patches.cols; }
  std::size_t n_visual() const { return history * views * patches_per_view(); }
  bool uses_4d() const { return embed.use_spatial || embed.use_temporal; }
  std::string layer_spec() const;

  static ModelConfig from_run_config(const RunConfig& cfg);
};

// Stand-in for the pretrained vision encoder; never trained.
// Per patch: the normalized depth pixels plus the valid fraction, a random
// linear map, a per-(view, patch) code, then tanh.
class PatchEncoder {
 public:
  PatchEncoder() = default;
  PatchEncoder(std::size_t d_model, PatchGrid grid, std::size_t image_size, std::size_t views, Rng& rng);

  Tensor encode(const SimFrame& frame) const;  // [patches, D]
  ParamList params() const;

 private:
  PatchGrid grid_;
  std::size_t image_size_ = 16;
  Linear proj_;
  Tensor codes_;  // [views * patches, D]
};

// Per-frame quantities that do not depend on trainable parameters.
struct FrameFeatures {
  Tensor f_v;    // [P, D]
  Tensor pos;    // [P, 3] normalized patch positions
  Tensor time;   // [P, 1] normalized timestamp
};

class VlaModel {
 public:
  explicit VlaModel(const ModelConfig& cfg);

  FrameFeatures frame_features(const SimFrame& frame) const;
  // Stacks per-frame features time-major, then view, then patch.
  static FrameFeatures stack(const std::vector<const FrameFeatures*>& frames);

  Tensor embed_4d(const FrameFeatures& stacked) const;  // [N, D] f̂_4D
  Tensor fuse(const Tensor& f_v, const Tensor& f4d_hat) const;
  Tensor proprio_row(const ProprioState& p) const;
  Tensor action(const Tensor& fused, const Tensor& proprio_row, const std::vector<std::size_t>& lang) const;

  // Closed-loop policy over a frame history (oldest first).
  SpatioTemporalAction act(const std::vector<FramePair>& history, const ProprioState& proprio,
                           const std::vector<std::size_t>& lang) const;
  RolloutPolicy rollout_policy() const;

  const ModelConfig& config() const { return cfg_; }
  const InstructionVocab& vocab() const { return vocab_; }
  PatchEncoder& vision() { return vision_; }
  SpatioTemporalEmbedder& embedder() { return embed_; }
  const SpatioTemporalEmbedder& embedder() const { return embed_; }
  FusionModule& fusion() { return fusion_; }
  const FusionModule& fusion() const { return fusion_; }
  PolicyNet& policy() { return policy_; }
  const PolicyNet& policy() const { return policy_; }

  ParamList params() const;
  ParamList stage1_trainable() const;
  ParamList stage2_trainable() const;
  // Trainable scalars added by all adapters.
  std::size_t lora_scalar_count() const { return lora_scalars_; }

  CheckpointHeader checkpoint_header() const;
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  ModelConfig cfg_;
  InstructionVocab vocab_;
  PatchEncoder vision_;
  SpatioTemporalEmbedder embed_;
  FusionModule fusion_;
  PolicyNet policy_;
  std::size_t lora_scalars_ = 0;
};

}  // namespace stvla
