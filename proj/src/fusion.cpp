#include "stvla/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace stvla {

FusionKind parse_fusion_kind(const std::string& name) {
  if (name == "attention") return FusionKind::attention;
  if (name == "concatenation" || name == "concat") return FusionKind::concatenation;
  if (name == "weighting") return FusionKind::weighting;
  if (name == "addition" || name == "none") return FusionKind::addition;
  throw std::invalid_argument("unknown fusion kind '" + name + "'");
}

std::string fusion_kind_name(FusionKind kind) {
  switch (kind) {
    case FusionKind::attention: return "attention";
    case FusionKind::concatenation: return "concatenation";
    case FusionKind::weighting: return "weighting";
    case FusionKind::addition: return "addition";
  }
  return "?";
}

FusionModule::FusionModule(FusionKind kind, std::size_t d_model, Rng& rng) : kind_(kind), d_model_(d_model) {
  switch (kind) {
    case FusionKind::attention:
      w_q_ = Linear(d_model, d_model, false, rng);
      w_k_ = Linear(d_model, d_model, false, rng);
      w_v_ = Linear(d_model, d_model, false, rng);
      break;
    case FusionKind::concatenation: {
      // Start near f_v: identity on the visual half plus a small random 4-D half.
      w_cat_ = Linear(2 * d_model, d_model, true, rng, 0.1);
      auto w = w_cat_.weight().mutable_data();
      for (std::size_t i = 0; i < d_model; ++i) w[i * d_model + i] += 1.0;
      break;
    }
    case FusionKind::weighting:
      gate_ = Tensor::scalar(0.1);
      break;
    case FusionKind::addition:
      break;
  }
}

void FusionModule::check_inputs(const Tensor& f_v, const Tensor& f4d_hat) const {
  if (f_v.rank() != 2 || f_v.shape() != f4d_hat.shape() || f_v.dim(1) != d_model_)
    throw std::invalid_argument("fuse: shape mismatch " + shape_str(f_v.shape()) + " vs " +
                                shape_str(f4d_hat.shape()) + " (d_model " + std::to_string(d_model_) + ")");
}

Tensor FusionModule::attention_weights(const Tensor& f_v, const Tensor& f4d_hat) const {
  check_inputs(f_v, f4d_hat);
  if (kind_ != FusionKind::attention) throw std::logic_error("attention_weights: fusion kind is not attention");
  const Tensor q = w_q_.forward(f_v);
  const Tensor k = w_k_.forward(f4d_hat);
  return softmax(scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d_model_))), 1);
}

Tensor FusionModule::fuse(const Tensor& f_v, const Tensor& f4d_hat) const {
  check_inputs(f_v, f4d_hat);
  switch (kind_) {
    case FusionKind::attention: {
      const Tensor attn = attention_weights(f_v, f4d_hat);
      return add(f_v, matmul(attn, w_v_.forward(f4d_hat)));
    }
    case FusionKind::concatenation:
      return w_cat_.forward(concat({f_v, f4d_hat}, 1));
    case FusionKind::weighting:
      return add(f_v, mul_scalar_tensor(f4d_hat, gate_));
    case FusionKind::addition:
      return add(f_v, f4d_hat);
  }
  throw std::logic_error("fuse: bad kind");
}

std::size_t FusionModule::attach_lora(std::size_t rank, double alpha, Rng& rng) {
  std::size_t n = 0;
  if (kind_ == FusionKind::attention) {
    n += w_q_.attach_lora(rank, alpha, rng);
    n += w_k_.attach_lora(rank, alpha, rng);
    n += w_v_.attach_lora(rank, alpha, rng);
  } else if (kind_ == FusionKind::concatenation) {
    n += w_cat_.attach_lora(rank, alpha, rng);
  }
  return n;
}

ParamList FusionModule::base_params() const {
  ParamList p;
  switch (kind_) {
    case FusionKind::attention:
      p.append(w_q_.base_params(), "w_q.");
      p.append(w_k_.base_params(), "w_k.");
      p.append(w_v_.base_params(), "w_v.");
      break;
    case FusionKind::concatenation:
      p.append(w_cat_.base_params(), "w_cat.");
      break;
    case FusionKind::weighting:
      p.add("gate", gate_);
      break;
    case FusionKind::addition:
      break;
  }
  return p;
}

ParamList FusionModule::lora_params() const {
  ParamList p;
  if (kind_ == FusionKind::attention) {
    p.append(w_q_.lora_params(), "w_q.");
    p.append(w_k_.lora_params(), "w_k.");
    p.append(w_v_.lora_params(), "w_v.");
  } else if (kind_ == FusionKind::concatenation) {
    p.append(w_cat_.lora_params(), "w_cat.");
  }
  return p;
}

ParamList FusionModule::params() const {
  ParamList p = base_params();
  p.append(lora_params(), "");
  return p;
}

}  // namespace stvla
