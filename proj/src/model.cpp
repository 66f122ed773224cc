#include "stvla/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace stvla {

std::string ModelConfig::layer_spec() const {
  std::ostringstream s;
  s << "fusion=" << fusion_kind_name(fusion) << ";blocks=" << policy.blocks << ";ffn=" << policy.ffn_mult
    << ";fourier=" << embed.fourier_dim << (embed.fourier ? "" : "(raw)") << ";embed=" << embed.embed_dim
    << ";history=" << history << ";views=" << views << ";patches=" << patches.rows << "x" << patches.cols
    << ";vocab=" << policy.vocab_size << ";max_lang=" << policy.max_lang << ";lora=" << lora_rank;
  return s.str();
}

ModelConfig ModelConfig::from_run_config(const RunConfig& cfg) {
  ModelConfig m;
  m.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  m.history = cfg.count("history");
  if (m.history < 1) throw std::invalid_argument("config: history must be >= 1");
  m.fusion = parse_fusion_kind(cfg.str("fusion"));
  m.use_proprio = cfg.flag("use_proprio");
  m.use_dt_head = cfg.flag("use_dt_head");
  m.fixed_dt = cfg.num("fixed_dt");
  m.lora_rank = cfg.count("lora_rank");
  m.lora_alpha = cfg.num("lora_alpha");
  const std::size_t d = cfg.count("d_model");
  m.embed.fourier_dim = cfg.count("fourier_dim");
  m.embed.embed_dim = cfg.count("embed_dim");
  m.embed.model_dim = d;
  m.embed.pos_sigma = cfg.num("pos_sigma");
  m.embed.time_sigma = cfg.num("time_sigma");
  m.embed.horizon = cfg.num("horizon");
  m.embed.use_spatial = cfg.flag("use_spatial");
  m.embed.use_temporal = cfg.flag("use_temporal");
  m.embed.fourier = cfg.flag("fourier");
  m.policy.d_model = d;
  m.policy.blocks = cfg.count("blocks");
  return m;
}

// ---- patch encoder ----

PatchEncoder::PatchEncoder(std::size_t d_model, PatchGrid grid, std::size_t image_size, std::size_t views, Rng& rng)
    : grid_(grid), image_size_(image_size) {
  const std::size_t ph = image_size / grid.rows, pw = image_size / grid.cols;
  proj_ = Linear(ph * pw + 1, d_model, false, rng);
  codes_ = randn({views * grid.rows * grid.cols, d_model}, 0.5, rng);
}

Tensor PatchEncoder::encode(const SimFrame& frame) const {
  const DepthMap& dm = frame.depth;
  if (dm.width != image_size_ || dm.height != image_size_)
    throw std::invalid_argument("PatchEncoder: frame is " + std::to_string(dm.width) + "x" + std::to_string(dm.height));
  const std::size_t ph = image_size_ / grid_.rows, pw = image_size_ / grid_.cols;
  const std::size_t np = grid_.rows * grid_.cols, nf = ph * pw + 1;
  // Per-view depth normalization: near-field wrist view vs the distant third-person view.
  const double center = frame.view == ViewId::wrist ? 0.25 : 0.95;
  const double spread = frame.view == ViewId::wrist ? 0.1 : 0.25;
  std::vector<double> feats(np * nf, 0.0);
  for (std::size_t pr = 0; pr < grid_.rows; ++pr)
    for (std::size_t pc = 0; pc < grid_.cols; ++pc) {
      double* f = &feats[(pr * grid_.cols + pc) * nf];
      std::size_t valid = 0, i = 0;
      for (std::size_t r = pr * ph; r < (pr + 1) * ph; ++r)
        for (std::size_t c = pc * pw; c < (pc + 1) * pw; ++c, ++i) {
          const double d = dm.at(c, r);
          if (d > 0.0) {
            f[i] = (d - center) / spread;
            ++valid;
          }
        }
      f[nf - 1] = static_cast<double>(valid) / static_cast<double>(ph * pw);
    }
  const Tensor x({np, nf}, std::move(feats));
  const Tensor code = slice(codes_, 0, static_cast<std::size_t>(frame.view) * np, np);
  return tanh(add(proj_.forward(x), code));
}

ParamList PatchEncoder::params() const {
  ParamList p;
  p.append(proj_.params(), "proj.");
  p.add("codes", codes_);
  return p;
}

// ---- full stack ----

VlaModel::VlaModel(const ModelConfig& cfg) : cfg_(cfg), vocab_(benchmark_vocab()) {
  cfg_.policy.n_visual = cfg_.n_visual();
  cfg_.policy.vocab_size = vocab_.size();
  cfg_.embed.model_dim = cfg_.policy.d_model;
  Rng rng(cfg_.seed);
  vision_ = PatchEncoder(cfg_.policy.d_model, cfg_.patches, cfg_.image_size, cfg_.views, rng);
  embed_ = SpatioTemporalEmbedder(cfg_.embed, rng);
  fusion_ = FusionModule(cfg_.fusion, cfg_.policy.d_model, rng);
  policy_ = PolicyNet(cfg_.policy, rng);
  if (cfg_.lora_rank > 0) {
    lora_scalars_ += policy_.apply_lora(cfg_.lora_rank, cfg_.lora_alpha, rng);
    lora_scalars_ += fusion_.attach_lora(cfg_.lora_rank, cfg_.lora_alpha, rng);
  }
}

FrameFeatures VlaModel::frame_features(const SimFrame& frame) const {
  FrameFeatures f;
  f.f_v = vision_.encode(frame);
  const auto pts = unproject_patch_centers(frame, cfg_.patches);
  f.pos = embed_.normalize_positions(pts);
  f.time = embed_.normalize_times(std::vector<double>(pts.size(), frame.timestamp));
  return f;
}

FrameFeatures VlaModel::stack(const std::vector<const FrameFeatures*>& frames) {
  std::vector<Tensor> fv, pos, time;
  for (const auto* f : frames) {
    fv.push_back(f->f_v);
    pos.push_back(f->pos);
    time.push_back(f->time);
  }
  return {concat(fv, 0), concat(pos, 0), concat(time, 0)};
}

Tensor VlaModel::embed_4d(const FrameFeatures& stacked) const {
  return embed_.match_dim(embed_.embed(stacked.pos, stacked.time));
}

Tensor VlaModel::fuse(const Tensor& f_v, const Tensor& f4d_hat) const {
  return cfg_.uses_4d() ? fusion_.fuse(f_v, f4d_hat) : f_v;
}

Tensor VlaModel::proprio_row(const ProprioState& p) const {
  if (!cfg_.use_proprio) return Tensor::zeros({1, 7});
  const Vec3& c = cfg_.embed.workspace_center;
  const Vec3& h = cfg_.embed.workspace_half_extent;
  return Tensor({1, 7}, {(p.position.x - c.x) / h.x, (p.position.y - c.y) / h.y, (p.position.z - c.z) / h.z,
                         p.orientation.x, p.orientation.y, p.orientation.z, p.grip_state});
}

Tensor VlaModel::action(const Tensor& fused, const Tensor& prop, const std::vector<std::size_t>& lang) const {
  return policy_.forward(policy_.project_tokens(fused, prop), lang);
}

SpatioTemporalAction VlaModel::act(const std::vector<FramePair>& history, const ProprioState& proprio,
                                   const std::vector<std::size_t>& lang) const {
  if (history.size() != cfg_.history)
    throw std::invalid_argument("act: history has " + std::to_string(history.size()) + " frames, expected " +
                                std::to_string(cfg_.history));
  std::vector<FrameFeatures> feats;
  for (const auto& pair : history)
    for (const auto& f : pair) feats.push_back(frame_features(f));
  std::vector<const FrameFeatures*> ptrs;
  for (const auto& f : feats) ptrs.push_back(&f);
  const FrameFeatures s = stack(ptrs);
  const Tensor fused = cfg_.uses_4d() ? fuse(s.f_v, embed_4d(s)) : s.f_v;
  SpatioTemporalAction a = SpatioTemporalAction::from_array(action(fused, proprio_row(proprio), lang).data());
  if (!cfg_.use_dt_head) a.delta_t = cfg_.fixed_dt;
  return a;
}

RolloutPolicy VlaModel::rollout_policy() const {
  return [this](const PolicyObservation& obs) {
    return act(obs.history, obs.proprio, vocab_.tokenize(obs.spec.instruction));
  };
}

ParamList VlaModel::params() const {
  ParamList p;
  p.append(vision_.params(), "vision.");
  p.append(embed_.params(), "embed.");
  p.append(fusion_.params(), "fusion.");
  p.append(policy_.params(), "policy.");
  return p;
}

ParamList VlaModel::stage1_trainable() const {
  ParamList p;
  p.append(embed_.params(), "embed.");
  p.append(fusion_.base_params(), "fusion.");
  p.append(policy_.projector_params(), "policy.");
  p.append(policy_.transformer_lora_params(), "policy.");
  p.append(policy_.alignment_head_params(), "policy.");
  return p;
}

ParamList VlaModel::stage2_trainable() const {
  ParamList p;
  p.append(policy_.head_params(), "policy.");
  p.append(policy_.projector_params(), "policy.");
  p.append(fusion_.lora_params(), "fusion.");
  p.append(policy_.transformer_lora_params(), "policy.");
  return p;
}

CheckpointHeader VlaModel::checkpoint_header() const {
  CheckpointHeader h;
  h.version = 1;
  h.d_model = static_cast<std::uint32_t>(cfg_.policy.d_model);
  h.layer_spec = cfg_.layer_spec();
  return h;
}

void VlaModel::save(const std::string& path) const { save_checkpoint(path, checkpoint_header(), params()); }

void VlaModel::load(const std::string& path) { load_checkpoint(path, checkpoint_header(), params()); }

}  // namespace stvla
