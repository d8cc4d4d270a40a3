#include "storm/optim.hpp"

#include <cmath>

#include "storm/error.hpp"
#include "storm/kernels.hpp"

namespace storm::num {

OptimizerState make_adam_state(const ParamSet& params, AdamConfig config) {
  OptimizerState s;
  s.config = config;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.first_moment.emplace_back(params.value(i).shape());
    s.second_moment.emplace_back(params.value(i).shape());
  }
  return s;
}

void adam_step(ParamSet& params, OptimizerState& state) {
  if (state.first_moment.size() != params.size())
    fail(ErrorKind::Dimension, "optimizer state holds " + std::to_string(state.first_moment.size()) +
                                   " moment buffers for " + std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].shape() != params.value(i).shape())
      fail(ErrorKind::Dimension, "moment shape mismatch for " + params.name(i));
    if (!params.grad(i).all_finite())
      fail(ErrorKind::Numeric, "non-finite gradient in parameter " + params.name(i));
  }

  const AdamConfig& c = state.config;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& g = params.grad(i);
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    Tensor& p = params.value(i);
    bool any = false;
    for (double x : g.values()) any = any || x != 0.0;
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
    }
    if (!any) continue;
    if (c.weight_decay > 0.0 && p.shape().size() == 2) {
      const double keep = 1.0 - c.learning_rate * c.weight_decay;
      for (std::size_t j = 0; j < p.size(); ++j) p[j] *= keep;
    }
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
    if (!p.all_finite()) fail(ErrorKind::Numeric, "parameter " + params.name(i) + " became non-finite");
  }
}

double clip_grad_norm(ParamSet& params, double max_norm) {
  const double norm = params.grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& g = params.grad(i);
      kernels::active().scale(g.size(), f, g.data(), g.data());
    }
  }
  return norm;
}

}  // namespace storm::num
