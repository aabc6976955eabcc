#pragma once

#include <string>
#include <vector>

#include "xmpt/contrastive.hpp"
#include "xmpt/models.hpp"
#include "xmpt/op_checks.hpp"

namespace xmpt {

struct NamedCheck {
  std::string name;
  GradCheckResult result;
};

inline std::vector<Tensor> tensors_of(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

/// Every parameter of a 2D net on an 8×8 image, through a small InfoNCE.
inline GradCheckResult check_image_net_end_to_end(std::uint64_t seed, std::size_t stride = 11) {
  Rng rng = derive_rng(seed, 0x2DC);
  Image img(8, 8);
  for (auto& v : img.rgb) v = uniform01(rng);
  Image2DNet net(seed);
  const std::vector<std::size_t> a_idx{0, 9, 27, 44, 63}, p_idx{1, 18, 28, 36, 62};
  auto f = [&] {
    const Tensor rows = reshape(net.forward(img), {64, kOutputChannels});
    Rng sampler = derive_rng(seed, 0x2DD);
    return info_nce({gather_rows(rows, a_idx), gather_rows(rows, p_idx), std::nullopt, 0.4, 3}, sampler);
  };
  return finite_diff_check_params(f, tensors_of(net.parameters()), 1e-3, stride);
}

/// Every parameter of a 3D net on 12 points against fixed unit targets.
inline GradCheckResult check_point_net_end_to_end(std::uint64_t seed, std::size_t stride = 3) {
  Rng rng = derive_rng(seed, 0x3DC);
  constexpr std::size_t n = 12;
  std::vector<double> d(n * 6), t(n * kOutputChannels);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < 3; ++a) d[i * 6 + a] = uniform(rng, -2.0, 2.0);
    for (std::size_t c = 3; c < 6; ++c) d[i * 6 + c] = uniform01(rng);
  }
  for (auto& v : t) v = normal(rng);
  const Tensor cloud = Tensor::from({n, 6}, d);
  Tensor targets;
  {
    NoGradGuard g;
    targets = l2_normalize(Tensor::from({n, kOutputChannels}, t)).detach();
  }
  Point3DNet net(seed);
  auto f = [&] {
    Rng sampler = derive_rng(seed, 0x3DD);
    return info_nce({net.forward(cloud), targets, std::nullopt, 0.4, 6}, sampler);
  };
  return finite_diff_check_params(f, tensors_of(net.parameters()), 1e-3, stride);
}

/// The full finite-difference suite: each op kind over `trials` random
/// instances, then both models end to end.
inline std::vector<NamedCheck> run_gradcheck_suite(std::size_t trials = 100, std::uint64_t seed = 77) {
  std::vector<NamedCheck> out;
  for (OpKind k : kAllOpKinds) out.push_back({std::string(op_name(k)), check_op(k, trials, seed)});
  out.push_back({"image2d_info_nce", check_image_net_end_to_end(seed)});
  out.push_back({"point3d_info_nce", check_point_net_end_to_end(seed)});
  return out;
}

}  // namespace xmpt
