#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "cpolab/error.hpp"
#include "cpolab/model.hpp"

namespace cpolab {

struct AdamWOptions {
  double lr = 1e-5;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

/// One AdamW step: bias-corrected moments, then decoupled weight decay
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
inline void optimizer_step(Parameters& params, std::span<const double> grad, AdamState& state,
                           const AdamWOptions& opt) {
  require(grad.size() == params.size(), "gradient shape does not match parameters");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  require(state.m.size() == params.size(), "optimizer state shape does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  auto p = params.flat();
  for (std::size_t i = 0; i < p.size(); ++i) {
    state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * grad[i];
    state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
    const double update = (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + opt.eps);
    p[i] -= opt.lr * (update + opt.weight_decay * p[i]);
  }
}

}  // namespace cpolab
