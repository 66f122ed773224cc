#include "stvla/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace stvla {

Tensor randn(Shape shape, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

void ParamList::append(const ParamList& other, const std::string& prefix) {
  for (const auto& p : other.items_) items_.push_back({prefix + p.name, p.tensor});
}

std::size_t ParamList::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

const Tensor* ParamList::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

void ParamList::set_trainable(bool on) const {
  for (auto p : items_) p.tensor.set_requires_grad(on);
}

std::vector<Tensor> ParamList::tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : items_) out.push_back(p.tensor);
  return out;
}

ParamSnapshot ParamSnapshot::take(const ParamList& params) {
  ParamSnapshot s;
  for (const auto& p : params.items()) {
    s.names.push_back(p.name);
    s.values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  return s;
}

void ParamSnapshot::restore(const ParamList& params) const {
  if (params.size() != names.size()) throw std::invalid_argument("ParamSnapshot::restore: parameter count differs");
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor t = params.items()[i].tensor;
    if (params.items()[i].name != names[i] || t.numel() != values[i].size())
      throw std::invalid_argument("ParamSnapshot::restore: layout differs at " + names[i]);
    std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
  }
}

std::vector<std::string> ParamSnapshot::diff(const ParamSnapshot& other) const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    bool same = false;
    for (std::size_t j = 0; j < other.names.size(); ++j) {
      if (other.names[j] != names[i]) continue;
      const auto& a = values[i];
      const auto& b = other.values[j];
      same = a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
      break;
    }
    if (!same) out.push_back(names[i]);
  }
  return out;
}

Linear::Linear(std::size_t in, std::size_t out, bool bias, Rng& rng, double init_scale)
    : weight_(randn({in, out}, init_scale / std::sqrt(static_cast<double>(in)), rng)) {
  if (bias) bias_ = Tensor::zeros({out});
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = linear(x, weight_, bias_);
  if (lora_) {
    const Tensor low = linear(x, lora_->a);
    y = add(y, scale(matmul(low, lora_->b), lora_->scale));
  }
  return y;
}

std::size_t Linear::attach_lora(std::size_t rank, double alpha, Rng& rng) {
  const std::size_t in = in_features(), out = out_features();
  if (rank < 1 || rank >= std::min(in, out))
    throw std::invalid_argument("attach_lora: rank " + std::to_string(rank) + " invalid for " + std::to_string(in) +
                                "x" + std::to_string(out));
  LoraAdapter ad;
  ad.a = randn({in, rank}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  ad.b = Tensor::zeros({rank, out});
  ad.scale = alpha / static_cast<double>(rank);
  lora_ = std::move(ad);
  return rank * (in + out);
}

ParamList Linear::base_params() const {
  ParamList p;
  p.add("weight", weight_);
  if (has_bias()) p.add("bias", bias_);
  return p;
}

ParamList Linear::lora_params() const {
  ParamList p;
  if (lora_) {
    p.add("lora_a", lora_->a);
    p.add("lora_b", lora_->b);
  }
  return p;
}

ParamList Linear::params() const {
  ParamList p = base_params();
  p.append(lora_params(), "");
  return p;
}

}  // namespace stvla
