#pragma once

// Adam with bias correction.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmpt/models.hpp"

namespace xmpt {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamMoments {
  std::vector<double> m, v;
};

/// One Adam update of `param` in place. `step` counts from 1. The result
/// depends only on the arguments.
inline void adam_update(std::span<double> param, std::span<const double> grad, AdamMoments& state, std::size_t step,
                        const AdamConfig& cfg, const std::string& name = "parameter") {
  if (grad.size() != param.size())
    throw OptimizerError("adam: gradient of '" + name + "' has " + std::to_string(grad.size()) + " values, expected " +
                         std::to_string(param.size()));
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw OptimizerError("adam: non-finite gradient in parameter '" + name + "' at index " + std::to_string(i));
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

/// Optimizer over a fixed parameter list. A parameter that received no
/// gradient this step is updated with a zero gradient.
class Adam {
 public:
  Adam(ParameterList params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg), state_(params_.size()) {
    if (!(cfg_.lr > 0.0)) throw OptimizerError("adam: learning rate must be positive");
  }

  void step() {
    ++steps_;
    // Validate everything first so a bad gradient leaves all parameters untouched.
    for (auto& p : params_) {
      for (std::size_t i = 0; i < p.tensor.grad().size(); ++i)
        if (!std::isfinite(p.tensor.grad()[i]))
          throw OptimizerError("adam: non-finite gradient in parameter '" + p.name + "' at index " +
                               std::to_string(i) + " (step " + std::to_string(steps_) + ")");
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& t = params_[k].tensor;
      std::vector<double> zero;
      std::span<const double> g = t.grad();
      if (!t.has_grad()) {
        zero.assign(t.numel(), 0.0);
        g = zero;
      }
      adam_update(t.mutable_data(), g, state_[k], steps_, cfg_, params_[k].name);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::size_t steps() const { return steps_; }
  const ParameterList& parameters() const { return params_; }

 private:
  ParameterList params_;
  AdamConfig cfg_;
  std::vector<AdamMoments> state_;
  std::size_t steps_ = 0;
};

}  // namespace xmpt
