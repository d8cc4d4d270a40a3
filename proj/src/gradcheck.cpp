#include "storm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "storm/error.hpp"

namespace storm::num {
namespace {

void record(GradCheckResult& r, std::size_t idx, double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  const double rel = std::abs(analytic - numeric) / denom;
  if (r.coordinates == 0 || rel > r.max_rel_error) {
    r.max_rel_error = rel;
    r.worst_index = idx;
    r.analytic_at_worst = analytic;
    r.numeric_at_worst = numeric;
  }
  r.coordinates += 1;
}

}  // namespace

GradCheckResult finite_diff_check(const ScalarFn& f, std::vector<double> params, double h) {
  if (!(h > 0.0)) fail(ErrorKind::Config, "finite difference step must be positive");
  std::vector<double> grad(params.size(), 0.0);
  f(params, grad);
  GradCheckResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + h;
    const double up = f(params, {});
    params[i] = orig - h;
    const double down = f(params, {});
    params[i] = orig;
    record(r, i, grad[i], (up - down) / (2.0 * h));
  }
  return r;
}

GradCheckResult finite_diff_check(ParamSet& params, const std::function<double(bool)>& loss, double h,
                                  std::size_t stride) {
  if (!(h > 0.0)) fail(ErrorKind::Config, "finite difference step must be positive");
  if (stride == 0) stride = 1;
  params.zero_grad();
  loss(true);
  std::vector<Tensor> analytic;
  for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(params.grad(i));

  GradCheckResult r;
  std::size_t flat = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& v = params.value(t);
    for (std::size_t j = 0; j < v.size(); ++j, ++flat) {
      if (flat % stride != 0) continue;
      const double orig = v[j];
      v[j] = orig + h;
      const double up = loss(false);
      v[j] = orig - h;
      const double down = loss(false);
      v[j] = orig;
      record(r, flat, analytic[t][j], (up - down) / (2.0 * h));
    }
  }
  params.zero_grad();
  return r;
}

}  // namespace storm::num
