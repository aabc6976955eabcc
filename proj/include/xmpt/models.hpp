#pragma once

// Desk-scale feature networks.
//
// Image2DNet: three stride-2 conv encoder stages (16, 32, 64 channels), three
// bilinear-upsample + conv decoder stages with skips from the matching
// encoder resolution (the input image at full resolution), and a 1×1 conv
// head to 16 channels. Output features are unit length per pixel.
//
// Point3DNet: per-point MLP on (xyz − centroid, rgb), mean of k-nearest
// neighbour features concatenated with the point's own, a second MLP, and a
// per-point linear head to 16 channels. Output features are unit length.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xmpt/geometry.hpp"
#include "xmpt/image.hpp"
#include "xmpt/rng.hpp"
#include "xmpt/tensor.hpp"

namespace xmpt {

inline constexpr std::size_t kOutputChannels = 16;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// He-uniform weights (bound sqrt(6 / fan_in)), bias uniform in ±1/sqrt(fan_in).
inline void he_uniform(Tensor& weight, Tensor& bias, std::size_t fan_in, Rng& rng) {
  const double wb = std::sqrt(6.0 / static_cast<double>(fan_in));
  const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : weight.mutable_data()) v = uniform(rng, -wb, wb);
  for (auto& v : bias.mutable_data()) v = uniform(rng, -bb, bb);
}

}  // namespace detail

struct Conv2dLayer {
  Tensor weight, bias;
  Conv2dOptions options;

  Conv2dLayer() = default;
  Conv2dLayer(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride, Rng& rng)
      : weight(Tensor::zeros({cout, cin, kernel, kernel}, true)),
        bias(Tensor::zeros({cout}, true)),
        options{stride, kernel / 2} {
    reset(rng);
  }

  void reset(Rng& rng) { detail::he_uniform(weight, bias, weight.dim(1) * weight.dim(2) * weight.dim(3), rng); }
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, options); }
};

struct LinearLayer {
  Tensor weight, bias;  // in×out, out

  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out, Rng& rng)
      : weight(Tensor::zeros({in, out}, true)), bias(Tensor::zeros({out}, true)) {
    reset(rng);
  }

  void reset(Rng& rng) { detail::he_uniform(weight, bias, weight.dim(0), rng); }
  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
};

/// Converts an H×W×3 image in [0, 1] to a 3×H×W tensor scaled to [−1, 1].
inline Tensor image_to_chw(const Image& img) {
  std::vector<double> d(3 * img.pixels());
  for (std::size_t p = 0; p < img.pixels(); ++p)
    for (std::size_t c = 0; c < 3; ++c) d[c * img.pixels() + p] = 2.0 * img.rgb[p * 3 + c] - 1.0;
  return Tensor::from({3, img.height, img.width}, std::move(d));
}

class Image2DNet {
 public:
  explicit Image2DNet(std::uint64_t seed = 0) {
    Rng rng = derive_rng(seed, 0x2D);
    enc1_ = Conv2dLayer(3, 16, 3, 2, rng);
    enc2_ = Conv2dLayer(16, 32, 3, 2, rng);
    enc3_ = Conv2dLayer(32, 64, 3, 2, rng);
    dec3_ = Conv2dLayer(64 + 32, 32, 3, 1, rng);
    dec2_ = Conv2dLayer(32 + 16, 16, 3, 1, rng);
    dec1_ = Conv2dLayer(16 + 3, 16, 3, 1, rng);
    head_ = Conv2dLayer(16, kOutputChannels, 1, 1, rng);
  }

  /// Pre-head decoder features, 16×H×W.
  Tensor backbone(const Image& img) const {
    if (img.height == 0 || img.width == 0 || img.height % 8 != 0 || img.width % 8 != 0)
      throw ModelError("Image2DNet: extents " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                       " must be positive multiples of 8");
    const Tensor x = image_to_chw(img);
    const Tensor e1 = relu(enc1_(x));   // H/2
    const Tensor e2 = relu(enc2_(e1));  // H/4
    const Tensor e3 = relu(enc3_(e2));  // H/8
    const Tensor d3 = relu(dec3_(concat({upsample2x(e3), e2}, 0)));
    const Tensor d2 = relu(dec2_(concat({upsample2x(d3), e1}, 0)));
    return relu(dec1_(concat({upsample2x(d2), x}, 0)));
  }

  /// H×W×16 features, unit length per pixel.
  Tensor forward(const Image& img) const {
    const Tensor h = head_(backbone(img));
    const std::size_t hw = img.pixels();
    const Tensor rows = transpose(reshape(h, {kOutputChannels, hw}));
    return reshape(l2_normalize(rows), {img.height, img.width, kOutputChannels});
  }

  ParameterList parameters() const {
    ParameterList out = backbone_parameters();
    for (auto& p : head_parameters()) out.push_back(std::move(p));
    return out;
  }

  ParameterList backbone_parameters() const {
    ParameterList out;
    auto push = [&](const char* name, const Conv2dLayer& l) {
      out.push_back({std::string(name) + ".weight", l.weight});
      out.push_back({std::string(name) + ".bias", l.bias});
    };
    push("enc1", enc1_);
    push("enc2", enc2_);
    push("enc3", enc3_);
    push("dec3", dec3_);
    push("dec2", dec2_);
    push("dec1", dec1_);
    return out;
  }

  ParameterList head_parameters() const { return {{"head.weight", head_.weight}, {"head.bias", head_.bias}}; }

  void reset_head(std::uint64_t seed) {
    Rng rng = derive_rng(seed, 0x2DEAD);
    head_.reset(rng);
  }

 private:
  Conv2dLayer enc1_, enc2_, enc3_, dec3_, dec2_, dec1_, head_;
};

/// Indices of the k nearest other points for each point, nearest first.
/// Ties are broken by coordinates, so the result does not depend on the
/// input order unless points coincide exactly (then by index). With fewer
/// than two points each point is its own neighbour.
inline std::vector<std::size_t> knn_indices(std::span<const Vec3> pts, std::size_t k, std::size_t* k_used = nullptr) {
  const std::size_t n = pts.size();
  const std::size_t kk = n > 1 ? std::min(k, n - 1) : 1;
  if (k_used) *k_used = kk;
  std::vector<std::size_t> out(n * kk);
  if (n == 1) {
    out[0] = 0;
    return out;
  }
  struct Cand {
    double d;
    std::size_t j;
  };
  auto less = [&](const Cand& a, const Cand& b) {
    if (a.d != b.d) return a.d < b.d;
    const Vec3 &p = pts[a.j], &q = pts[b.j];
    if (p.x != q.x) return p.x < q.x;
    if (p.y != q.y) return p.y < q.y;
    if (p.z != q.z) return p.z < q.z;
    return a.j < b.j;
  };
  // Uniform grid over the bounding box; rings of cells are searched outward
  // until no unvisited cell can hold a point nearer than the k-th candidate.
  Vec3 lo = pts[0], hi = pts[0];
  for (const Vec3& p : pts) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  const double extent = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
  const auto g = static_cast<std::ptrdiff_t>(std::clamp(std::cbrt(static_cast<double>(n) / 2.0), 1.0, 64.0));
  const double cell = extent > 0.0 ? extent / static_cast<double>(g) : 1.0;
  auto coord = [&](double v, double o) {
    return std::clamp(static_cast<std::ptrdiff_t>(std::floor((v - o) / cell)), std::ptrdiff_t{0}, g - 1);
  };
  std::vector<std::size_t> start(static_cast<std::size_t>(g * g * g) + 1, 0), order(n);
  std::vector<std::size_t> cell_of(n);
  for (std::size_t i = 0; i < n; ++i) {
    cell_of[i] = static_cast<std::size_t>((coord(pts[i].x, lo.x) * g + coord(pts[i].y, lo.y)) * g +
                                          coord(pts[i].z, lo.z));
    ++start[cell_of[i] + 1];
  }
  for (std::size_t c = 1; c < start.size(); ++c) start[c] += start[c - 1];
  {
    std::vector<std::size_t> fill(start.begin(), start.end() - 1);
    for (std::size_t i = 0; i < n; ++i) order[fill[cell_of[i]]++] = i;
  }

  std::vector<Cand> cand;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 pi = pts[i];
    const std::ptrdiff_t cx = coord(pi.x, lo.x), cy = coord(pi.y, lo.y), cz = coord(pi.z, lo.z);
    cand.clear();
    for (std::ptrdiff_t r = 0;; ++r) {
      for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(cx - r, 0); x <= std::min(cx + r, g - 1); ++x)
        for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(cy - r, 0); y <= std::min(cy + r, g - 1); ++y)
          for (std::ptrdiff_t z = std::max<std::ptrdiff_t>(cz - r, 0); z <= std::min(cz + r, g - 1); ++z) {
            if (std::max({std::abs(x - cx), std::abs(y - cy), std::abs(z - cz)}) != r) continue;
            const auto c = static_cast<std::size_t>((x * g + y) * g + z);
            for (std::size_t s = start[c]; s < start[c + 1]; ++s) {
              const std::size_t j = order[s];
              if (j == i) continue;
              const double dx = pts[j].x - pi.x, dy = pts[j].y - pi.y, dz = pts[j].z - pi.z;
              cand.push_back({dx * dx + dy * dy + dz * dz, j});
            }
          }
      const bool whole_grid = cx - r <= 0 && cy - r <= 0 && cz - r <= 0 && cx + r >= g - 1 && cy + r >= g - 1 &&
                              cz + r >= g - 1;
      if (whole_grid) break;
      if (cand.size() < kk) continue;
      std::nth_element(cand.begin(), cand.begin() + static_cast<long>(kk - 1), cand.end(), less);
      const double reach = static_cast<double>(r) * cell * (1.0 - 1e-9);
      if (cand[kk - 1].d < reach * reach) break;
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<long>(kk), cand.end(), less);
    for (std::size_t m = 0; m < kk; ++m) out[i * kk + m] = cand[m].j;
  }
  return out;
}

/// Sum of values independent of their order (sorted before summing).
inline double order_free_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

/// N×6 network input (xyz, rgb) from parallel point and colour arrays.
inline Tensor cloud_tensor(std::span<const Vec3> xyz, std::span<const Rgb> rgb) {
  if (xyz.size() != rgb.size()) throw ModelError("cloud_tensor: point and colour counts differ");
  std::vector<double> d(xyz.size() * 6);
  for (std::size_t i = 0; i < xyz.size(); ++i) {
    const double row[6] = {xyz[i].x, xyz[i].y, xyz[i].z, rgb[i].r, rgb[i].g, rgb[i].b};
    std::copy(std::begin(row), std::end(row), d.begin() + static_cast<long>(i * 6));
  }
  return Tensor::from({xyz.size(), 6}, std::move(d));
}

inline Tensor cloud_tensor(const PointCloud& cloud) { return cloud_tensor(cloud.xyz, cloud.rgb); }

class Point3DNet {
 public:
  static constexpr std::size_t kNeighbours = 16;
  static constexpr std::size_t kBackboneWidth = 64;

  explicit Point3DNet(std::uint64_t seed = 0) {
    Rng rng = derive_rng(seed, 0x3D);
    in1_ = LinearLayer(6, 32, rng);
    in2_ = LinearLayer(32, 64, rng);
    post1_ = LinearLayer(128, 64, rng);
    post2_ = LinearLayer(64, kBackboneWidth, rng);
    head_ = LinearLayer(kBackboneWidth, kOutputChannels, rng);
  }

  /// Pre-head per-point features, N×64.
  Tensor backbone(const Tensor& cloud) const {
    if (!cloud.defined() || cloud.rank() != 2 || cloud.dim(1) != 6)
      throw ModelError("Point3DNet: expected an N×6 cloud");
    const std::size_t n = cloud.dim(0);
    if (n == 0) throw ModelError("Point3DNet: empty cloud");
    const auto raw = cloud.data();
    double centroid[3];
    for (std::size_t a = 0; a < 3; ++a) {
      std::vector<double> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = raw[i * 6 + a];
      centroid[a] = order_free_sum(std::move(col)) / static_cast<double>(n);
    }
    std::vector<Vec3> centred(n);
    std::vector<double> input(n * 6);
    for (std::size_t i = 0; i < n; ++i) {
      centred[i] = {raw[i * 6] - centroid[0], raw[i * 6 + 1] - centroid[1], raw[i * 6 + 2] - centroid[2]};
      input[i * 6 + 0] = centred[i].x;
      input[i * 6 + 1] = centred[i].y;
      input[i * 6 + 2] = centred[i].z;
      for (std::size_t c = 0; c < 3; ++c) input[i * 6 + 3 + c] = 2.0 * raw[i * 6 + 3 + c] - 1.0;
    }
    std::size_t k = 0;
    const auto nbr = knn_indices(centred, kNeighbours, &k);

    const Tensor x = Tensor::from({n, 6}, std::move(input));
    const Tensor h = relu(in2_(relu(in1_(x))));  // N×64
    const Tensor agg = mean(reshape(gather_rows(h, nbr), {n, k, 64}), 1);
    const Tensor c = concat({h, agg}, 1);
    return relu(post2_(relu(post1_(c))));
  }

  /// N×16 features, unit length per point.
  Tensor forward(const Tensor& cloud) const { return l2_normalize(head_(backbone(cloud))); }

  ParameterList parameters() const {
    ParameterList out = backbone_parameters();
    for (auto& p : head_parameters()) out.push_back(std::move(p));
    return out;
  }

  ParameterList backbone_parameters() const {
    return {{"in1.weight", in1_.weight},     {"in1.bias", in1_.bias},     {"in2.weight", in2_.weight},
            {"in2.bias", in2_.bias},         {"post1.weight", post1_.weight}, {"post1.bias", post1_.bias},
            {"post2.weight", post2_.weight}, {"post2.bias", post2_.bias}};
  }

  ParameterList head_parameters() const { return {{"head.weight", head_.weight}, {"head.bias", head_.bias}}; }

  void reset_head(std::uint64_t seed) {
    Rng rng = derive_rng(seed, 0x3DEAD);
    head_.reset(rng);
  }

 private:
  LinearLayer in1_, in2_, post1_, post2_, head_;
};

/// Disjoint partition of a network's parameters: everything before the
/// final per-pixel / per-point projection, and that projection.
template <class Net>
std::pair<ParameterList, ParameterList> split_backbone_head(const Net& net) {
  return {net.backbone_parameters(), net.head_parameters()};
}

inline std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

/// Copies values into a network's parameters by name; shapes must match and
/// every parameter must be present.
inline void assign_parameters(const ParameterList& dst, const ParameterList& src, const std::string& what) {
  for (const auto& d : dst) {
    auto it = std::find_if(src.begin(), src.end(), [&](const NamedTensor& s) { return s.name == d.name; });
    if (it == src.end()) throw ModelError(what + ": missing parameter '" + d.name + "'");
    if (it->tensor.shape() != d.tensor.shape())
      throw ModelError(what + ": parameter '" + d.name + "' has shape " + to_string(it->tensor.shape()) +
                       ", expected " + to_string(d.tensor.shape()));
    Tensor t = d.tensor;
    auto out = t.mutable_data();
    std::copy(it->tensor.data().begin(), it->tensor.data().end(), out.begin());
  }
}

}  // namespace xmpt
