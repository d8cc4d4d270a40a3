#pragma once

#include <functional>
#include <span>
#include <vector>

#include "storm/autodiff.hpp"

namespace storm::num {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;  // flat coordinate index of the worst error
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t coordinates = 0;
};

// Compares a reverse-mode gradient to central differences
// (f(p+h) - f(p-h)) / 2h, coordinate by coordinate. Relative error uses
// max(|analytic|, |numeric|, 1e-8) as denominator.
//
// `f(p, grad)` evaluates the scalar at p; when `grad` is non-empty it must
// also write the analytic gradient into it.
using ScalarFn = std::function<double(std::span<const double> p, std::span<double> grad)>;

GradCheckResult finite_diff_check(const ScalarFn& f, std::vector<double> params, double h);

// ParamSet flavour: `loss(with_grad)` evaluates the objective from the current
// parameter values and, when asked, leaves gradients in params.grad(). Every
// coordinate of every tensor is checked unless `stride` > 1, in which case
// every stride-th flat coordinate is.
GradCheckResult finite_diff_check(ParamSet& params, const std::function<double(bool with_grad)>& loss,
                                  double h, std::size_t stride = 1);

}  // namespace storm::num
