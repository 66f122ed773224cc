#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stvla/tensor.hpp"

namespace stvla {

struct GradCheckReport {
  // Per-parameter maximum of |analytic - numeric| / max(|analytic|, |numeric|, floor).
  std::vector<double> max_rel_error;
  double worst = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor; keeps near-zero gradients from turning roundoff into relative error.
  double floor = 1e-6;
};

// Compares tape gradients of the scalar `f` against central differences for every
// element of every tensor in `params`. `f` must rebuild its graph on each call.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace stvla
