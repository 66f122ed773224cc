#include "stvla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace stvla {

namespace {

thread_local Tape* g_active_tape = nullptr;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_rank2(const Tensor& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

// C[m,n] += A[m,k] * B[k,n]; inner loop runs over contiguous rows of B and C.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[k,m]ᵀ * B[k,n]
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transpose(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// C[m,n] += A[m,k] * B[n,k]ᵀ
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::vector<double> bt = transpose(b, n, k);
  gemm_acc(a, bt.data(), c, m, k, n);
}

template <class Fwd, class Dfdx>
Tensor unary(const Tensor& x, Fwd fwd, Dfdx dfdx) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_op_result(x.shape(), std::move(out), {&x}, [dfdx](const TapeEntry& e) {
    TensorImpl& px = *e.inputs[0];
    if (!px.requires_grad) return;
    auto& gx = grad_buffer(px);
    const auto& gy = e.output->grad;
    const auto& y = e.output->data;
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * dfdx(px.data[i], y[i]);
  });
}

struct AxisLayout {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) require(d > 0, "Tensor: zero-sized dimension in " + shape_str(shape));
  require(shape_numel(shape) == data.size(),
          "Tensor: shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  require(axis < rank(), "Tensor::dim: axis out of range");
  return impl_->shape[axis];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require(rank() == 2 && r < impl_->shape[0] && c < impl_->shape[1], "Tensor::at: index out of range");
  return impl_->data[r * impl_->shape[1] + c];
}

double Tensor::item() const {
  require(numel() == 1, "Tensor::item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

std::span<double> Tensor::mutable_grad() { return grad_buffer(*impl_); }

Tensor Tensor::clone() const {
  if (impl_->data.empty()) return Tensor();
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

std::vector<double>& grad_buffer(TensorImpl& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

// ---------------------------------------------------------------------------
// Tape

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss, bool retain) {
  require(loss.numel() == 1, "backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("backward: loss does not depend on any trainable tensor");
  // Gradients of intermediates from an earlier retained pass must not leak in.
  for (auto& e : entries_) e.output->grad.clear();
  auto& seed = grad_buffer(*loss.impl());
  seed[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from the loss
    for (auto& in : it->inputs)
      if (in->requires_grad) grad_buffer(*in);
    it->backward(*it);
  }
  if (!retain) clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<const Tensor*> inputs,
                      std::function<void(const TapeEntry&)> backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  Tape* tape = g_active_tape;
  if (tape != nullptr) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor* t) { return t->requires_grad(); });
    if (any) {
      impl->requires_grad = true;
      TapeEntry entry;
      entry.output = impl;
      entry.inputs.reserve(inputs.size());
      for (const Tensor* t : inputs) entry.inputs.push_back(t->impl());
      entry.backward = std::move(backward);
      tape->record(std::move(entry));
    }
  }
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_op_result({m, n}, std::move(out), {&a, &b}, [m, k, n](const TapeEntry& e) {
    TensorImpl& pa = *e.inputs[0];
    TensorImpl& pb = *e.inputs[1];
    const double* gy = e.output->grad.data();
    if (pa.requires_grad) gemm_nt_acc(gy, pb.data.data(), grad_buffer(pa).data(), m, n, k);
    if (pb.requires_grad) gemm_tn_acc(pa.data.data(), gy, grad_buffer(pb).data(), m, k, n);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  require(b.dim(1) == k, "matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "ᵀ");
  std::vector<double> out(m * n, 0.0);
  gemm_nt_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_op_result({m, n}, std::move(out), {&a, &b}, [m, k, n](const TapeEntry& e) {
    TensorImpl& pa = *e.inputs[0];
    TensorImpl& pb = *e.inputs[1];
    const double* gy = e.output->grad.data();
    if (pa.requires_grad) gemm_acc(gy, pb.data.data(), grad_buffer(pa).data(), m, n, k);
    if (pb.requires_grad) gemm_tn_acc(gy, pa.data.data(), grad_buffer(pb).data(), m, n, k);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  require(w.dim(0) == k, "linear: input width " + std::to_string(k) + " does not match weight " + shape_str(w.shape()));
  const bool has_bias = b.numel() > 0;
  if (has_bias) require(b.shape() == Shape{n}, "linear: bias shape " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  if (has_bias)
    for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), out.begin() + i * n);
  gemm_acc(x.data().data(), w.data().data(), out.data(), m, k, n);
  std::vector<const Tensor*> inputs{&x, &w};
  if (has_bias) inputs.push_back(&b);
  return make_op_result({m, n}, std::move(out), std::move(inputs), [m, k, n, has_bias](const TapeEntry& e) {
    TensorImpl& px = *e.inputs[0];
    TensorImpl& pw = *e.inputs[1];
    const double* gy = e.output->grad.data();
    if (px.requires_grad) gemm_nt_acc(gy, pw.data.data(), grad_buffer(px).data(), m, n, k);
    if (pw.requires_grad) gemm_tn_acc(px.data.data(), gy, grad_buffer(pw).data(), m, k, n);
    if (has_bias && e.inputs[2]->requires_grad) {
      auto& gb = grad_buffer(*e.inputs[2]);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += gy[i * n + j];
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w) { return linear(x, w, Tensor()); }

// ---------------------------------------------------------------------------
// Elementwise

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class F>
Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* op, F f, double sign_b, bool product) {
  require_same_shape(a, b, op);
  const auto da = a.data();
  const auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = f(da[i], db[i]);
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [sign_b, product](const TapeEntry& e) {
    TensorImpl& pa = *e.inputs[0];
    TensorImpl& pb = *e.inputs[1];
    const auto& gy = e.output->grad;
    if (pa.requires_grad) {
      auto& ga = grad_buffer(pa);
      if (product)
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * pb.data[i];
      else
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (pb.requires_grad) {
      auto& gb = grad_buffer(pb);
      if (product)
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * pa.data[i];
      else
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += sign_b * gy[i];
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(a, b, "add", [](double x, double y) { return x + y; }, 1.0, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(a, b, "sub", [](double x, double y) { return x - y; }, -1.0, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(a, b, "mul", [](double x, double y) { return x * y; }, 1.0, true);
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor add_bias(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 1 && b.shape() == Shape{a.shape().back()},
          "add_bias: bias " + shape_str(b.shape()) + " does not match trailing dim of " + shape_str(a.shape()));
  const std::size_t n = b.numel();
  const auto da = a.data();
  const auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] + db[i % n];
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [n](const TapeEntry& e) {
    const auto& gy = e.output->grad;
    if (e.inputs[0]->requires_grad) {
      auto& ga = grad_buffer(*e.inputs[0]);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (e.inputs[1]->requires_grad) {
      auto& gb = grad_buffer(*e.inputs[1]);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i % n] += gy[i];
    }
  });
}

Tensor mul_trailing(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 1 && b.shape() == Shape{a.shape().back()},
          "mul_trailing: " + shape_str(b.shape()) + " does not match trailing dim of " + shape_str(a.shape()));
  const std::size_t n = b.numel();
  const auto da = a.data();
  const auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] * db[i % n];
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [n](const TapeEntry& e) {
    const auto& gy = e.output->grad;
    TensorImpl& pa = *e.inputs[0];
    TensorImpl& pb = *e.inputs[1];
    if (pa.requires_grad) {
      auto& ga = grad_buffer(pa);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * pb.data[i % n];
    }
    if (pb.requires_grad) {
      auto& gb = grad_buffer(pb);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i % n] += gy[i] * pa.data[i];
    }
  });
}

Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s) {
  require(s.numel() == 1, "mul_scalar_tensor: gate must have one element");
  const double sv = s[0];
  const auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] * sv;
  return make_op_result(a.shape(), std::move(out), {&a, &s}, [](const TapeEntry& e) {
    const auto& gy = e.output->grad;
    TensorImpl& pa = *e.inputs[0];
    TensorImpl& ps = *e.inputs[1];
    if (pa.requires_grad) {
      auto& ga = grad_buffer(pa);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * ps.data[0];
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * pa.data[i];
      grad_buffer(ps)[0] += acc;
    }
  });
}

Tensor cos(const Tensor& x) {
  return unary(x, [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); });
}

Tensor sin(const Tensor& x) {
  return unary(x, [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double ev = std::exp(v);
        return ev / (1.0 + ev);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  auto sig = [](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double ev = std::exp(v);
    return ev / (1.0 + ev);
  };
  return unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [sig](double v, double) { return sig(v); });
}

Tensor gelu(const Tensor& x) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
      [](double v, double) {
        const double u = c * (v + a * v * v * v);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * a * v * v);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
      });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor clamp_max(const Tensor& x, double hi) {
  return unary(x, [hi](double v) { return std::min(v, hi); },
               [hi](double v, double) { return v < hi ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Structural

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), "softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const auto in = x.data();
  if (!all_finite(in)) throw std::domain_error("softmax: non-finite logits");
  const AxisLayout l = axis_layout(x.shape(), axis);
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < l.len; ++j) mx = std::max(mx, in[base + j * l.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < l.len; ++j) {
        const double ev = std::exp(in[base + j * l.inner] - mx);
        out[base + j * l.inner] = ev;
        total += ev;
      }
      const double inv = 1.0 / total;
      for (std::size_t j = 0; j < l.len; ++j) out[base + j * l.inner] *= inv;
    }
  }
  return make_op_result(x.shape(), std::move(out), {&x}, [l](const TapeEntry& e) {
    TensorImpl& px = *e.inputs[0];
    if (!px.requires_grad) return;
    auto& gx = grad_buffer(px);
    const auto& gy = e.output->grad;
    const auto& y = e.output->data;
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t base = o * l.len * l.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < l.len; ++j) dot += gy[base + j * l.inner] * y[base + j * l.inner];
        for (std::size_t j = 0; j < l.len; ++j) {
          const std::size_t idx = base + j * l.inner;
          gx[idx] += y[idx] * (gy[idx] - dot);
        }
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  require(axis < ref.size(), "concat: axis out of range");
  std::size_t total_len = 0;
  for (const auto& p : parts) {
    require(p.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d)
      if (d != axis)
        require(p.shape()[d] == ref[d], "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    total_len += p.shape()[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total_len;
  const AxisLayout lo = axis_layout(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[axis];
    const auto src = p.data();
    const std::size_t chunk = len * lo.inner;
    for (std::size_t o = 0; o < lo.outer; ++o)
      std::copy_n(src.begin() + o * chunk, chunk, out.begin() + o * lo.len * lo.inner + offset * lo.inner);
    offset += len;
  }
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return make_op_result(std::move(out_shape), std::move(out), std::move(inputs),
                        [lo, offsets, axis](const TapeEntry& e) {
                          const auto& gy = e.output->grad;
                          for (std::size_t k = 0; k < e.inputs.size(); ++k) {
                            TensorImpl& pk = *e.inputs[k];
                            if (!pk.requires_grad) continue;
                            auto& gk = grad_buffer(pk);
                            const std::size_t chunk = pk.shape[axis] * lo.inner;
                            for (std::size_t o = 0; o < lo.outer; ++o) {
                              const std::size_t src = o * lo.len * lo.inner + offsets[k] * lo.inner;
                              for (std::size_t i = 0; i < chunk; ++i) gk[o * chunk + i] += gy[src + i];
                            }
                          }
                        });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t length) {
  require(axis < x.rank(), "slice: axis out of range");
  require(length > 0 && begin + length <= x.shape()[axis],
          "slice: range [" + std::to_string(begin) + "," + std::to_string(begin + length) + ") outside " +
              shape_str(x.shape()));
  const AxisLayout li = axis_layout(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * li.inner;
  const auto src = x.data();
  std::vector<double> out(li.outer * chunk);
  for (std::size_t o = 0; o < li.outer; ++o)
    std::copy_n(src.begin() + o * li.len * li.inner + begin * li.inner, chunk, out.begin() + o * chunk);
  return make_op_result(std::move(out_shape), std::move(out), {&x}, [li, begin, chunk](const TapeEntry& e) {
    TensorImpl& px = *e.inputs[0];
    if (!px.requires_grad) return;
    auto& gx = grad_buffer(px);
    const auto& gy = e.output->grad;
    for (std::size_t o = 0; o < li.outer; ++o) {
      const std::size_t dst = o * li.len * li.inner + begin * li.inner;
      for (std::size_t i = 0; i < chunk; ++i) gx[dst + i] += gy[o * chunk + i];
    }
  });
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  require(axis < x.rank(), "split: axis out of range");
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  require(total == x.shape()[axis], "split: sizes do not cover axis");
  std::vector<Tensor> out;
  std::size_t begin = 0;
  for (auto s : sizes) {
    out.push_back(slice(x, axis, begin, s));
    begin += s;
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op_result(std::move(shape), std::move(out), {&x}, [](const TapeEntry& e) {
    TensorImpl& px = *e.inputs[0];
    if (!px.requires_grad) return;
    auto& gx = grad_buffer(px);
    const auto& gy = e.output->grad;
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids) {
  require_rank2(table, "embedding");
  require(!ids.empty(), "embedding: empty id list");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  std::vector<double> out(ids.size() * width);
  const auto src = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] < vocab, "embedding: id " + std::to_string(ids[r]) + " outside table of " + std::to_string(vocab));
    std::copy_n(src.begin() + ids[r] * width, width, out.begin() + r * width);
  }
  return make_op_result({ids.size(), width}, std::move(out), {&table}, [ids, width](const TapeEntry& e) {
    TensorImpl& pt = *e.inputs[0];
    if (!pt.requires_grad) return;
    auto& gt = grad_buffer(pt);
    const auto& gy = e.output->grad;
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < width; ++j) gt[ids[r] * width + j] += gy[r * width + j];
  });
}

Tensor rms_norm(const Tensor& x, double eps) {
  require(x.rank() >= 1, "rms_norm: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto in = x.data();
  std::vector<double> out(in.size());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += in[r * n + j] * in[r * n + j];
    inv_rms[r] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[r * n + j] * inv_rms[r];
  }
  return make_op_result(x.shape(), std::move(out), {&x}, [n, rows, inv_rms](const TapeEntry& e) {
    TensorImpl& px = *e.inputs[0];
    if (!px.requires_grad) return;
    auto& gx = grad_buffer(px);
    const auto& gy = e.output->grad;
    const auto& y = e.output->data;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[r * n + j] * y[r * n + j];
      const double m = dot / static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += inv_rms[r] * (gy[r * n + j] - y[r * n + j] * m);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_op_result({1}, {acc}, {&x}, [](const TapeEntry& e) {
    TensorImpl& px = *e.inputs[0];
    if (!px.requires_grad) return;
    auto& gx = grad_buffer(px);
    const double g = e.output->grad[0];
    for (auto& v : gx) v += g;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "l1_loss");
  const auto p = pred.data();
  const auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - t[i]);
  const double inv_n = 1.0 / static_cast<double>(p.size());
  return make_op_result({1}, {acc * inv_n}, {&pred, &target}, [inv_n](const TapeEntry& e) {
    TensorImpl& pp = *e.inputs[0];
    TensorImpl& pt = *e.inputs[1];
    const double g = e.output->grad[0] * inv_n;
    for (std::size_t i = 0; i < pp.data.size(); ++i) {
      const double d = pp.data[i] - pt.data[i];
      const double s = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      if (pp.requires_grad) grad_buffer(pp)[i] += g * s;
      if (pt.requires_grad) grad_buffer(pt)[i] -= g * s;
    }
  });
}

}  // namespace stvla
