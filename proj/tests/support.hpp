#pragma once

#include <cstring>

#include <doctest.h>

#include "stvla/grad_check.hpp"
#include "stvla/nn.hpp"

namespace stvla::test {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor(std::move(shape), std::move(v), grad);
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  return true;
}

inline void check_grads(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double tol = 1e-4) {
  GradCheckOptions opt;
  opt.tolerance = tol;
  const auto r = grad_check(f, params, opt);
  INFO("worst rel err " << r.worst << " at param " << r.worst_param << "[" << r.worst_index << "]");
  CHECK(r.passed);
}

}  // namespace stvla::test
