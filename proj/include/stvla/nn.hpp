#pragma once

// Named parameters and the LoRA-capable linear layer shared by all modules.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stvla/tensor.hpp"

namespace stvla {

using Rng = std::mt19937_64;

Tensor randn(Shape shape, double sigma, Rng& rng);
// Uniform in [lo, hi) from the top 53 bits of one draw.
double uniform(Rng& rng, double lo, double hi);
// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Ordered list of named parameter handles. Order is the registration order and
// defines checkpoint layout.
class ParamList {
 public:
  void add(std::string name, const Tensor& t) { items_.push_back({std::move(name), t}); }
  void append(const ParamList& other, const std::string& prefix);

  const std::vector<NamedParam>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;
  const Tensor* find(const std::string& name) const;

  void set_trainable(bool on) const;
  std::vector<Tensor> tensors() const;

 private:
  std::vector<NamedParam> items_;
};

// Deep copy of parameter values, for freezing checks and rollback.
struct ParamSnapshot {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;

  static ParamSnapshot take(const ParamList& params);
  void restore(const ParamList& params) const;
  // Names whose values differ bitwise between the two snapshots.
  std::vector<std::string> diff(const ParamSnapshot& other) const;
};

struct LoraAdapter {
  Tensor a;  // [in, rank], random-normal init
  Tensor b;  // [rank, out], zero init
  double scale = 1.0;  // alpha / rank
};

// y = x·W + b (+ scale·(x·A)·B when an adapter is attached). W is stored [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool bias, Rng& rng, double init_scale = 1.0);

  Tensor forward(const Tensor& x) const;

  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }
  bool has_bias() const { return bias_.numel() > 0; }

  // Attaches a rank-r adapter; returns its trainable scalar count r·(in + out).
  std::size_t attach_lora(std::size_t rank, double alpha, Rng& rng);
  bool has_lora() const { return lora_.has_value(); }
  const LoraAdapter& lora() const { return *lora_; }

  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& bias() const { return bias_; }

  // Base weight/bias only.
  ParamList base_params() const;
  // Adapter A/B only (empty without an adapter).
  ParamList lora_params() const;
  ParamList params() const;

 private:
  Tensor weight_;
  Tensor bias_;
  std::optional<LoraAdapter> lora_;
};

}  // namespace stvla
