#include "stvla/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stvla {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
  const double v = f().item();
  if (!std::isfinite(v)) throw std::domain_error("grad_check: function value is not finite");
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           const GradCheckOptions& options) {
  std::vector<bool> saved_flags;
  for (auto p : params) {
    saved_flags.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw std::domain_error("grad_check: function value is not finite");
    if (loss.requires_grad()) tape.backward(loss);
  }
  for (const auto& p : params) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.numel(), 0.0);
  }

  GradCheckReport report;
  report.max_rel_error.assign(params.size(), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + options.step;
      const double fp = eval_scalar(f);
      values[i] = orig - options.step;
      const double fm = eval_scalar(f);
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * options.step);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > report.max_rel_error[k]) report.max_rel_error[k] = rel;
      if (rel > report.worst) {
        report.worst = rel;
        report.worst_param = k;
        report.worst_index = i;
      }
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    p.zero_grad();
    p.set_requires_grad(saved_flags[k]);
  }
  report.passed = report.worst <= options.tolerance;
  return report;
}

}  // namespace stvla
