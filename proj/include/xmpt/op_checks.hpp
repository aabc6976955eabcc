#pragma once

// Randomised finite-difference checks, one per op kind. Each check builds a
// small random instance, contracts the op output with a fixed random tensor
// so every output coordinate matters, and compares gradients for all
// differentiable inputs.

#include <functional>
#include <vector>

#include "xmpt/gradcheck.hpp"
#include "xmpt/rng.hpp"
#include "xmpt/tensor.hpp"

namespace xmpt {

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(numel_of(shape));
  for (auto& v : d) v = uniform(rng, lo, hi);
  return Tensor::from(std::move(shape), std::move(d));
}

// sum(y * r) for a fixed random r of y's shape.
inline std::function<Tensor(const Tensor&)> contraction(const Shape& shape, Rng& rng) {
  Tensor r = random_tensor(shape, rng);
  return [r](const Tensor& y) { return sum(mul(y, r)); };
}

}  // namespace detail

/// One randomised gradient check of `kind`.
inline GradCheckResult check_op_once(OpKind kind, Rng& rng) {
  using detail::contraction;
  using detail::random_tensor;
  const double h = 1e-3;
  switch (kind) {
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      Tensor a = random_tensor({3, 4}, rng);
      Tensor b = random_tensor(bernoulli(rng, 0.5) ? Shape{3, 4} : Shape{4}, rng);
      auto c = contraction({3, 4}, rng);
      return finite_diff_check_params(
          [=] {
            if (kind == OpKind::kAdd) return c(add(a, b));
            if (kind == OpKind::kSub) return c(sub(a, b));
            return c(mul(a, b));
          },
          {a, b}, h);
    }
    case OpKind::kScalarMul: {
      Tensor a = random_tensor({2, 5}, rng);
      const double s = uniform(rng, -2.0, 2.0);
      auto c = contraction({2, 5}, rng);
      return finite_diff_check_params([=] { return c(scalar_mul(a, s)); }, {a}, h);
    }
    case OpKind::kMatMul: {
      Tensor a = random_tensor({3, 4}, rng);
      Tensor b = random_tensor({4, 2}, rng);
      auto c = contraction({3, 2}, rng);
      return finite_diff_check_params([=] { return c(matmul(a, b)); }, {a, b}, h);
    }
    case OpKind::kConv2d: {
      Tensor x = random_tensor({2, 5, 5}, rng);
      Tensor w = random_tensor({3, 2, 3, 3}, rng);
      Tensor b = random_tensor({3}, rng);
      const Conv2dOptions opt{1 + uniform_index(rng, 2), uniform_index(rng, 2)};
      const std::size_t ho = (5 + 2 * opt.padding - 3) / opt.stride + 1;
      auto c = contraction({3, ho, ho}, rng);
      return finite_diff_check_params([=] { return c(conv2d(x, w, b, opt)); }, {x, w, b}, h);
    }
    case OpKind::kUpsample2x: {
      Tensor x = random_tensor({2, 3, 4}, rng);
      auto c = contraction({2, 6, 8}, rng);
      return finite_diff_check_params([=] { return c(upsample2x(x)); }, {x}, h);
    }
    case OpKind::kRelu: {
      Tensor x = random_tensor({12}, rng);
      auto c = contraction({12}, rng);
      return finite_diff_check_params([=] { return c(relu(x)); }, {x}, h);
    }
    case OpKind::kExp: {
      Tensor x = random_tensor({6}, rng, -2.0, 2.0);
      auto c = contraction({6}, rng);
      return finite_diff_check_params([=] { return c(exp(x)); }, {x}, h);
    }
    case OpKind::kLog: {
      Tensor x = random_tensor({6}, rng, 0.5, 2.0);
      auto c = contraction({6}, rng);
      return finite_diff_check_params([=] { return c(log(x)); }, {x}, h);
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      Tensor x = random_tensor({3, 4, 2}, rng);
      const std::size_t axis = uniform_index(rng, 3);
      Shape out = x.shape();
      out.erase(out.begin() + static_cast<long>(axis));
      auto c = contraction(out, rng);
      const double wt = uniform(rng, 0.5, 1.5);
      return finite_diff_check_params(
          [=] {
            Tensor reduced = kind == OpKind::kSum ? sum(x, axis) : mean(x, axis);
            Tensor total = kind == OpKind::kSum ? sum(x) : mean(x);
            return add(c(reduced), scalar_mul(total, wt));
          },
          {x}, h);
    }
    case OpKind::kConcat: {
      Tensor a = random_tensor({2, 3}, rng);
      Tensor b = random_tensor({2, 2}, rng);
      auto c = contraction({2, 5}, rng);
      return finite_diff_check_params([=] { return c(concat({a, b}, 1)); }, {a, b}, h);
    }
    case OpKind::kGatherRows: {
      Tensor x = random_tensor({4, 3}, rng);
      std::vector<std::size_t> rows(6);
      for (auto& r : rows) r = uniform_index(rng, 4);
      auto c = contraction({6, 3}, rng);
      return finite_diff_check_params([=] { return c(gather_rows(x, rows)); }, {x}, h);
    }
    case OpKind::kL2Normalize: {
      Tensor x = random_tensor({3, 4}, rng);
      auto c = contraction({3, 4}, rng);
      return finite_diff_check_params([=] { return c(l2_normalize(x)); }, {x}, h);
    }
    case OpKind::kSoftmax: {
      Tensor x = random_tensor({3, 5}, rng, -2.0, 2.0);
      auto c = contraction({3, 5}, rng);
      return finite_diff_check_params([=] { return c(softmax(x)); }, {x}, h);
    }
    case OpKind::kBilinearSample: {
      Tensor map = random_tensor({4, 5, 2}, rng);
      std::vector<Point2> at(7);
      for (auto& p : at) p = {uniform(rng, -0.5, 4.5), uniform(rng, -0.5, 3.5)};
      auto c = contraction({7, 2}, rng);
      return finite_diff_check_params([=] { return c(bilinear_sample(map, at)); }, {map}, h);
    }
    case OpKind::kTranspose: {
      Tensor x = random_tensor({3, 4}, rng);
      auto c = contraction({4, 3}, rng);
      return finite_diff_check_params([=] { return c(transpose(x)); }, {x}, h);
    }
    case OpKind::kReshape: {
      Tensor x = random_tensor({3, 4}, rng);
      auto c = contraction({2, 6}, rng);
      return finite_diff_check_params([=] { return c(reshape(x, {2, 6})); }, {x}, h);
    }
    case OpKind::kTakeAlongRows: {
      Tensor x = random_tensor({3, 5}, rng);
      std::vector<std::size_t> cols(3 * 4);
      for (auto& col : cols) col = uniform_index(rng, 5);
      auto c = contraction({3, 4}, rng);
      return finite_diff_check_params([=] { return c(take_along_rows(x, cols, 4)); }, {x}, h);
    }
  }
  return {};
}

/// Worst result over `trials` random instances.
inline GradCheckResult check_op(OpKind kind, std::size_t trials, std::uint64_t seed) {
  Rng rng = derive_rng(seed, static_cast<std::uint64_t>(kind));
  GradCheckResult worst;
  for (std::size_t t = 0; t < trials; ++t) {
    auto r = check_op_once(kind, rng);
    worst.max_rel_err = std::max(worst.max_rel_err, r.max_rel_err);
    worst.checked += r.checked;
    worst.kinks += r.kinks;
  }
  return worst;
}

}  // namespace xmpt
