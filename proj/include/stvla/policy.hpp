#pragma once

// Token interface, the small transformer standing in for the language model,
// the spatiotemporal action head and its L1 objective.

#include <array>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "stvla/geometry.hpp"
#include "stvla/nn.hpp"

namespace stvla {

struct SpatioTemporalAction {
  Vec3 delta_x;      // meters
  Vec3 delta_theta;  // axis-angle increment, radians
  double grip = 0.0;     // [0,1], >= 0.5 means closed
  double delta_t = 0.0;  // seconds

  bool operator==(const SpatioTemporalAction&) const = default;
  std::array<double, 8> to_array() const;
  static SpatioTemporalAction from_array(std::span<const double> v);
  bool finite() const;
};

struct ProprioState {
  Vec3 position;
  Vec3 orientation;  // axis-angle
  double grip_state = 0.0;

  bool operator==(const ProprioState&) const = default;
  std::array<double, 7> to_array() const;
};

class numeric_blowup : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InstructionVocab {
 public:
  static constexpr std::size_t pad_id = 0;
  static constexpr std::size_t eos_id = 1;

  InstructionVocab() = default;
  // Words are deduplicated and sorted; ids start after the two specials.
  explicit InstructionVocab(std::vector<std::string> words);

  std::vector<std::size_t> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<std::size_t>& ids) const;
  std::size_t size() const { return words_.size() + 2; }
  std::size_t id(const std::string& word) const;
  const std::vector<std::string>& words() const { return words_; }
  // FNV-1a over the word list, hex.
  std::string hash() const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
};

// Lowercased, single-space-separated form of `text`.
std::string normalize_instruction(const std::string& text);

struct PolicyConfig {
  std::size_t d_model = 32;
  std::size_t blocks = 2;
  std::size_t ffn_mult = 4;
  std::size_t n_visual = 64;
  std::size_t max_lang = 24;  // including eos
  std::size_t vocab_size = 2;
  std::size_t proprio_dim = 7;
  double dt_min = 0.05;
  double dt_max = 1.0;
  double max_dx = 0.4;
  double max_dtheta = 1.0;
};

struct TransformerBlock {
  Linear wq, wk, wv, wo, ff1, ff2;

  std::vector<Linear*> linears() { return {&wq, &wk, &wv, &wo, &ff1, &ff2}; }
  std::vector<const Linear*> linears() const { return {&wq, &wk, &wv, &wo, &ff1, &ff2}; }
};

class PolicyNet {
 public:
  PolicyNet() = default;
  PolicyNet(const PolicyConfig& cfg, Rng& rng);

  // [f_v4d rows (N_visual), proprio row] -> [N_visual + 1, D]
  Tensor project_tokens(const Tensor& f_v4d, const ProprioState& prop) const;
  Tensor project_tokens(const Tensor& f_v4d, const Tensor& prop_row) const;

  // Runs the transformer over [tokens, lang, eos] and returns the final
  // normalized hidden state of the last position, [1, D].
  Tensor encode(const Tensor& tokens, const std::vector<std::size_t>& lang_ids) const;
  // Squashed action row [1, 8]: dx(3), dtheta(3), grip, dt.
  Tensor head(const Tensor& hidden) const;
  Tensor forward(const Tensor& tokens, const std::vector<std::size_t>& lang_ids) const;
  SpatioTemporalAction act(const Tensor& tokens, const std::vector<std::size_t>& lang_ids) const;

  // Alignment-stage heads.
  Tensor token_probe(const Tensor& fused_tokens) const { return probe_.forward(fused_tokens); }
  Tensor grounding(const Tensor& hidden) const { return ground_.forward(hidden); }

  // Wraps every transformer linear map with a rank-r adapter. Returns the
  // adapter scalar count, sum over maps of r (d_in + d_out).
  std::size_t apply_lora(std::size_t rank, double alpha, Rng& rng);

  const PolicyConfig& config() const { return cfg_; }
  std::vector<TransformerBlock>& blocks() { return blocks_; }
  Linear& head_out() { return head_out_; }
  Linear& visual_in() { return visual_in_; }
  Linear& visual_out() { return visual_out_; }
  Linear& proprio_in() { return proprio_in_; }
  Linear& proprio_out() { return proprio_out_; }

  ParamList projector_params() const;
  ParamList token_table_params() const;
  ParamList transformer_base_params() const;
  ParamList transformer_lora_params() const;
  ParamList head_params() const;
  ParamList alignment_head_params() const;
  ParamList params() const;

 private:
  Tensor block_forward(const TransformerBlock& b, const Tensor& x, std::size_t index, bool last_only) const;

  PolicyConfig cfg_;
  Linear visual_in_, visual_out_;
  Linear proprio_in_, proprio_out_;
  Tensor order_embed_;  // [n_visual + 1 + max_lang, D]
  Tensor token_table_;  // [vocab, D], frozen
  std::vector<TransformerBlock> blocks_;
  Linear head_in_, head_out_;
  Linear probe_;   // fused token -> normalized (p, t)
  Linear ground_;  // final hidden -> normalized (target object, goal)
};

struct ActionLossWeights {
  double dx = 1.0, dtheta = 1.0, grip = 1.0, dt = 1.0;
};

// Mean over the batch of the weighted sum of per-group L1 norms. pred/gt: [B, 8].
Tensor action_loss(const Tensor& pred, const Tensor& gt, const ActionLossWeights& w = {});

// ---- checkpoints ----
struct CheckpointHeader {
  std::uint32_t version = 1;
  std::uint32_t d_model = 0;
  std::string layer_spec;
};

void save_checkpoint(const std::string& path, const CheckpointHeader& header, const ParamList& params);
// Loads values into `params`; names, order and shapes must match, and so must d_model/layer_spec.
CheckpointHeader load_checkpoint(const std::string& path, const CheckpointHeader& expected, const ParamList& params);

}  // namespace stvla
