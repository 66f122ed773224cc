#include "stvla/st_embed.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace stvla {

FourierEncoder::FourierEncoder(std::size_t input_dim, std::size_t d, double sigma, Rng& rng) {
  if (d == 0 || d % 2 != 0) throw std::invalid_argument("FourierEncoder: output dimension must be even and positive");
  w_r_ = randn({d / 2, input_dim}, sigma, rng);
}

Tensor FourierEncoder::encode(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != input_dim())
    throw std::invalid_argument("FourierEncoder::encode: expected [n," + std::to_string(input_dim()) + "], got " +
                                shape_str(x.shape()));
  if (!all_finite(x.data())) throw std::domain_error("FourierEncoder::encode: non-finite input");
  const Tensor proj = matmul_nt(x, w_r_);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(output_dim()));
  return scale(concat({cos(proj), sin(proj)}, 1), inv_sqrt_d);
}

SpatioTemporalEmbedder::SpatioTemporalEmbedder(const EmbedConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.fourier_dim % 2 != 0) throw std::invalid_argument("SpatioTemporalEmbedder: fourier_dim must be even");
  pos_ = FourierEncoder(3, cfg.fourier_dim, cfg.pos_sigma, rng);
  time_ = FourierEncoder(1, cfg.fourier_dim, cfg.time_sigma, rng);
  const std::size_t in = cfg.fourier ? 2 * cfg.fourier_dim : 4;
  w_p_ = randn({in, cfg.embed_dim}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  mlp_in_ = Linear(cfg.embed_dim, cfg.model_dim, true, rng);
  mlp_out_ = Linear(cfg.model_dim, cfg.model_dim, true, rng);
}

Tensor SpatioTemporalEmbedder::embed(const Tensor& pos_norm, const Tensor& time_norm) const {
  const std::size_t n = pos_norm.dim(0);
  Tensor pos_feat, time_feat;
  if (cfg_.fourier) {
    pos_feat = cfg_.use_spatial ? pos_.encode(pos_norm) : Tensor::zeros({n, cfg_.fourier_dim});
    time_feat = cfg_.use_temporal ? time_.encode(time_norm) : Tensor::zeros({n, cfg_.fourier_dim});
  } else {
    pos_feat = cfg_.use_spatial ? pos_norm : Tensor::zeros({n, 3});
    time_feat = cfg_.use_temporal ? time_norm : Tensor::zeros({n, 1});
  }
  return matmul(concat({pos_feat, time_feat}, 1), w_p_);
}

Tensor SpatioTemporalEmbedder::embed_4d(const WorldPoint& p, double t_seconds) const {
  return embed(normalize_positions({p}), normalize_times({t_seconds}));
}

Tensor SpatioTemporalEmbedder::match_dim(const Tensor& f4d) const {
  if (f4d.rank() != 2 || f4d.dim(1) != cfg_.embed_dim)
    throw std::invalid_argument("match_dim: expected width " + std::to_string(cfg_.embed_dim) + ", got " +
                                shape_str(f4d.shape()));
  return mlp_out_.forward(gelu(mlp_in_.forward(f4d)));
}

Tensor SpatioTemporalEmbedder::normalize_positions(const std::vector<WorldPoint>& points) const {
  std::vector<double> v;
  v.reserve(points.size() * 3);
  const Vec3& c = cfg_.workspace_center;
  const Vec3& h = cfg_.workspace_half_extent;
  for (const auto& p : points) {
    v.push_back((p.x - c.x) / h.x);
    v.push_back((p.y - c.y) / h.y);
    v.push_back((p.z - c.z) / h.z);
  }
  return Tensor({points.size(), 3}, std::move(v));
}

Tensor SpatioTemporalEmbedder::normalize_times(const std::vector<double>& seconds) const {
  std::vector<double> v;
  v.reserve(seconds.size());
  for (double t : seconds) {
    if (t < 0.0) throw std::invalid_argument("normalize_times: negative timestamp");
    v.push_back(t / cfg_.horizon);
  }
  return Tensor({seconds.size(), 1}, std::move(v));
}

ParamList SpatioTemporalEmbedder::params() const {
  ParamList p;
  p.add("pos_fourier.w_r", pos_.w_r());
  p.add("time_fourier.w_r", time_.w_r());
  p.add("w_p", w_p_);
  p.append(mlp_in_.params(), "mlp_in.");
  p.append(mlp_out_.params(), "mlp_out.");
  return p;
}

}  // namespace stvla
