#pragma once

// Spatiotemporal embedding: learnable Fourier features of 3-D positions and
// timestamps, a linear fusion into one 4-D embedding, and the MLP that lifts it
// to the visual feature width.

#include <cstddef>

#include "stvla/geometry.hpp"
#include "stvla/nn.hpp"

namespace stvla {

// psi(x) = 1/sqrt(d) [cos(x W_rᵀ) || sin(x W_rᵀ)], W_r is [d/2, input_dim].
class FourierEncoder {
 public:
  FourierEncoder() = default;
  FourierEncoder(std::size_t input_dim, std::size_t d, double sigma, Rng& rng);

  // x: [n, input_dim] -> [n, d]
  Tensor encode(const Tensor& x) const;

  std::size_t input_dim() const { return w_r_.dim(1); }
  std::size_t output_dim() const { return 2 * w_r_.dim(0); }
  Tensor& w_r() { return w_r_; }
  const Tensor& w_r() const { return w_r_; }

 private:
  Tensor w_r_;
};

struct EmbedConfig {
  std::size_t fourier_dim = 32;  // d, even
  std::size_t embed_dim = 64;    // d_embed
  std::size_t model_dim = 128;   // d_model
  double pos_sigma = 1.0;
  double time_sigma = 0.25;
  // Normalization: p_norm = (p - workspace_center) / workspace_half_extent, t_norm = t / horizon.
  Vec3 workspace_center{0.0, 0.0, 0.2};
  Vec3 workspace_half_extent{0.3, 0.3, 0.2};
  double horizon = 10.0;
  bool use_spatial = true;
  bool use_temporal = true;
  // false: raw normalized (p, t) feed w_p directly instead of Fourier features.
  bool fourier = true;
};

class SpatioTemporalEmbedder {
 public:
  SpatioTemporalEmbedder() = default;
  SpatioTemporalEmbedder(const EmbedConfig& cfg, Rng& rng);

  // Normalized inputs -> f_4D. pos: [n,3], time: [n,1] -> [n, embed_dim].
  Tensor embed(const Tensor& pos_norm, const Tensor& time_norm) const;
  // Raw world point (m) and timestamp (s) -> [1, embed_dim].
  Tensor embed_4d(const WorldPoint& p, double t_seconds) const;
  // [n, embed_dim] -> [n, model_dim]
  Tensor match_dim(const Tensor& f4d) const;

  Tensor normalize_positions(const std::vector<WorldPoint>& points) const;
  Tensor normalize_times(const std::vector<double>& seconds) const;

  const EmbedConfig& config() const { return cfg_; }
  FourierEncoder& pos_encoder() { return pos_; }
  FourierEncoder& time_encoder() { return time_; }
  Tensor& w_p() { return w_p_; }
  const Tensor& w_p() const { return w_p_; }
  Linear& mlp_in() { return mlp_in_; }
  Linear& mlp_out() { return mlp_out_; }

  ParamList params() const;

 private:
  EmbedConfig cfg_;
  FourierEncoder pos_;
  FourierEncoder time_;
  Tensor w_p_;  // [2d, embed_dim] (or [4, embed_dim] without Fourier features)
  Linear mlp_in_;
  Linear mlp_out_;
};

}  // namespace stvla
