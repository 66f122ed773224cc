#pragma once

// Injects projected 4-D embeddings into visual token features.

#include <cstddef>
#include <string>

#include "stvla/nn.hpp"

namespace stvla {

enum class FusionKind {
  attention,      // f_v + softmax(q kᵀ / sqrt(D)) v, q from f_v, k and v from the 4-D embeddings
  concatenation,  // Linear([f_v || f4d]) from 2D back to D
  weighting,      // f_v + g * f4d with a learned scalar gate g
  addition,       // f_v + f4d (no parameters)
};

FusionKind parse_fusion_kind(const std::string& name);
std::string fusion_kind_name(FusionKind kind);

class FusionModule {
 public:
  FusionModule() = default;
  FusionModule(FusionKind kind, std::size_t d_model, Rng& rng);

  // f_v, f4d_hat: [N, D] -> [N, D]
  Tensor fuse(const Tensor& f_v, const Tensor& f4d_hat) const;
  // Row-stochastic [N, N] attention matrix (attention kind only).
  Tensor attention_weights(const Tensor& f_v, const Tensor& f4d_hat) const;

  // LoRA on every linear map of the module; returns trainable scalars added.
  std::size_t attach_lora(std::size_t rank, double alpha, Rng& rng);

  FusionKind kind() const { return kind_; }
  std::size_t d_model() const { return d_model_; }
  Linear& w_q() { return w_q_; }
  Linear& w_k() { return w_k_; }
  Linear& w_v() { return w_v_; }
  Linear& w_cat() { return w_cat_; }
  Tensor& gate() { return gate_; }

  ParamList base_params() const;
  ParamList lora_params() const;
  ParamList params() const;

 private:
  void check_inputs(const Tensor& f_v, const Tensor& f4d_hat) const;

  FusionKind kind_ = FusionKind::attention;
  std::size_t d_model_ = 0;
  Linear w_q_, w_k_, w_v_;  // attention
  Linear w_cat_;            // concatenation
  Tensor gate_;             // weighting, shape [1]
};

}  // namespace stvla
