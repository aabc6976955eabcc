#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "xmpt/tensor.hpp"

namespace xmpt {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // coordinates excluded because a relu switched sign
};

namespace detail {

struct Evaluation {
  double value;
  std::vector<std::uint8_t> pattern;
};

inline Evaluation evaluate_tracked(const std::function<Tensor()>& f) {
  GraphScope scope;
  scope.graph().set_track_kinks(true);
  NoGradGuard no_grad;
  Tensor y = f();
  if (y.numel() != 1) throw AutodiffError("finite_diff_check: function output " + to_string(y.shape()) + " is not scalar");
  return {y.item(), std::move(scope.graph().kink_pattern())};
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

}  // namespace detail

/// Compares d f / d p for every listed leaf tensor p against central
/// differences. f is re-evaluated with each coordinate perturbed in place.
/// A coordinate whose ±h evaluations change any relu's sign pattern sits on
/// (or straddles) a kink and is skipped. `stride` > 1 checks every stride-th
/// coordinate of each tensor.
inline GradCheckResult finite_diff_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                                double h = 1e-3, std::size_t stride = 1) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");
  std::vector<std::vector<double>> analytic;
  std::vector<bool> flags;
  for (auto& p : params) flags.push_back(p.requires_grad());
  {
    GraphScope scope;
    for (auto& p : params) {
      p.set_requires_grad(true);
      p.zero_grad();
    }
    Tensor y = f();
    if (y.numel() != 1) throw AutodiffError("finite_diff_check: function output " + to_string(y.shape()) + " is not scalar");
    backward(y);
    for (auto& p : params) {
      analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                         : std::vector<double>(p.numel(), 0.0));
      p.zero_grad();
    }
  }
  const auto base = detail::evaluate_tracked(f);
  GradCheckResult r;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    for (std::size_t i = 0; i < data.size(); i += stride) {
      const double orig = data[i];
      data[i] = orig + h;
      const auto plus = detail::evaluate_tracked(f);
      data[i] = orig - h;
      const auto minus = detail::evaluate_tracked(f);
      data[i] = orig;
      if (plus.pattern != base.pattern || minus.pattern != base.pattern) {
        ++r.kinks;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * h);
      r.max_rel_err = std::max(r.max_rel_err, detail::relative_error(analytic[pi][i], numeric));
      ++r.checked;
    }
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi].set_requires_grad(flags[pi]);
  return r;
}

/// Single-input form: f maps x to a scalar.
inline GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                         double h = 1e-3) {
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  return finite_diff_check_params([&] { return f(leaf); }, {leaf}, h);
}

}  // namespace xmpt
