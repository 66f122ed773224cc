#pragma once

// Dense f64 tensor with a reverse-mode gradient tape.
//
// Tensors are cheap shared handles. Ops executed while a Tape is active on the
// current thread (see TapeScope) record themselves when any input requires a
// gradient; Tape::backward replays the recording in reverse. Without an active
// tape every op is a plain forward computation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stvla {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TapeEntry;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor row(std::vector<double> values, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();
  void zero_grad() { impl_->grad.clear(); }

  // Deep copy of shape and data; the copy is a fresh leaf.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend class Tape;
  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<const Tensor*>,
                               std::function<void(const TapeEntry&)>);

  std::shared_ptr<TensorImpl> impl_;
};

struct TapeEntry {
  std::shared_ptr<TensorImpl> output;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TapeEntry&)> backward;
};

// Ordered record of executed ops. Entries are appended as ops run, so the
// record is already topologically sorted.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(TapeEntry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  // Leaf gradients accumulate across calls until zero_grad().
  void backward(const Tensor& loss, bool retain = false);

  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<TapeEntry> entries_;
};

// Makes `tape` the active tape on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Builds an op output and records it on the active tape when any input
// requires a gradient.
Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<const Tensor*> inputs,
                      std::function<void(const TapeEntry&)> backward);

// Returns the gradient buffer of `impl`, allocating zeros on first use.
std::vector<double>& grad_buffer(TensorImpl& impl);

// ---- linear algebra (2-D operands) ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]·[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]·[n,k]ᵀ
// x·W + b with W stored [in, out]; bias may be an empty Tensor().
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// Trailing-dimension broadcast: b has shape [a.shape.back()].
Tensor add_bias(const Tensor& a, const Tensor& b);
Tensor mul_trailing(const Tensor& a, const Tensor& b);
// a scaled by the single element of s (shape [1]).
Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s);

Tensor cos(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor abs(const Tensor& x);  // subgradient 0 at 0
Tensor clamp_max(const Tensor& x, double hi);

// ---- structural ----
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t length);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes);
Tensor reshape(const Tensor& x, Shape shape);
Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids);
// x / sqrt(mean(x^2) + eps) along the last axis.
Tensor rms_norm(const Tensor& x, double eps = 1e-6);

// ---- reductions / losses ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor l1_loss(const Tensor& pred, const Tensor& target);

bool all_finite(std::span<const double> values);

}  // namespace stvla
