#pragma once

// Stochastic view generation for images and point clouds with exact
// coordinate bookkeeping.
//
// Image coordinates put pixel centres at integers: pixel j spans
// [j - 0.5, j + 0.5), so a continuous coordinate x belongs to pixel
// floor(x + 0.5). Each AugmentedView carries the affine map taking
// original-image coordinates to view coordinates.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "xmpt/geometry.hpp"
#include "xmpt/image.hpp"
#include "xmpt/rng.hpp"
#include "xmpt/tensor.hpp"

namespace xmpt {

class AugmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// x' = a·x + b·y + tx,  y' = c·x + d·y + ty
struct Affine2 {
  double a = 1, b = 0, c = 0, d = 1, tx = 0, ty = 0;

  Point2 apply(Point2 p) const { return {a * p.x + b * p.y + tx, c * p.x + d * p.y + ty}; }
  double det() const { return a * d - b * c; }

  Affine2 inverse() const {
    const double k = det();
    if (k == 0.0) throw AugmentError("affine map is singular");
    Affine2 inv{d / k, -b / k, -c / k, a / k, 0, 0};
    inv.tx = -(inv.a * tx + inv.b * ty);
    inv.ty = -(inv.c * tx + inv.d * ty);
    return inv;
  }

  /// this ∘ other (other applied first).
  Affine2 compose(const Affine2& o) const {
    return {a * o.a + b * o.c, a * o.b + b * o.d, c * o.a + d * o.c,
            c * o.b + d * o.d, a * o.tx + b * o.ty + tx, c * o.tx + d * o.ty + ty};
  }
};

/// Axis-aligned rectangle in original-image coordinates (edges, not centres).
struct CropRect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  bool empty() const { return !(x1 > x0) || !(y1 > y0); }

  static CropRect full(std::size_t w, std::size_t h) {
    return {-0.5, -0.5, static_cast<double>(w) - 0.5, static_cast<double>(h) - 0.5};
  }
  CropRect intersect(const CropRect& o) const {
    return {std::max(x0, o.x0), std::max(y0, o.y0), std::min(x1, o.x1), std::min(y1, o.y1)};
  }
};

/// Photometric jitter as a pure per-colour function. `reference_luma` is the
/// mean luminance the contrast factor pivots around, fixed when the
/// parameters are drawn so the same colour always maps to the same result.
struct ColorJitter {
  bool active = false;
  double brightness = 1.0, contrast = 1.0, saturation = 1.0;
  double reference_luma = 0.0;
  bool grayscale = false;

  Rgb operator()(Rgb in) const {
    double r = in.r, g = in.g, b = in.b;
    if (active) {
      r *= brightness;
      g *= brightness;
      b *= brightness;
      const double m = reference_luma * brightness;
      r = m + contrast * (r - m);
      g = m + contrast * (g - m);
      b = m + contrast * (b - m);
      const double l = luminance(r, g, b);
      r = l + saturation * (r - l);
      g = l + saturation * (g - l);
      b = l + saturation * (b - l);
    }
    if (grayscale) r = g = b = luminance(r, g, b);
    return {std::clamp(r, 0.0, 1.0), std::clamp(g, 0.0, 1.0), std::clamp(b, 0.0, 1.0)};
  }
};

struct JitterConfig {
  double probability = 0.8;
  double factor_min = 0.6, factor_max = 1.4;
  double grayscale_probability = 0.2;
};

inline ColorJitter sample_jitter(const JitterConfig& cfg, double reference_luma, Rng& rng) {
  ColorJitter j;
  j.reference_luma = reference_luma;
  if (bernoulli(rng, cfg.probability)) {
    j.active = true;
    j.brightness = uniform(rng, cfg.factor_min, cfg.factor_max);
    j.contrast = uniform(rng, cfg.factor_min, cfg.factor_max);
    j.saturation = uniform(rng, cfg.factor_min, cfg.factor_max);
  }
  j.grayscale = bernoulli(rng, cfg.grayscale_probability);
  return j;
}

struct Augment2DConfig {
  std::size_t out_height = 0, out_width = 0;  // 0: same as the input
  double area_min = 0.4, area_max = 1.0;
  double aspect_min = 3.0 / 4.0, aspect_max = 4.0 / 3.0;
  bool full_crop = false;
  double flip_probability = 0.5;
  JitterConfig jitter;
};

struct Augment2DParams {
  CropRect crop;
  bool flipped = false;
  ColorJitter jitter;
  std::uint64_t seed = 0;
};

struct AugmentedView {
  Image image;
  Affine2 fwd_map;  // original-image coordinates -> view coordinates
  Augment2DParams params;

  Affine2 inverse_map() const { return fwd_map.inverse(); }
};

namespace detail {

inline CropRect sample_crop(std::size_t w, std::size_t h, const Augment2DConfig& cfg, Rng& rng) {
  const CropRect full = CropRect::full(w, h);
  if (cfg.full_crop) return full;
  const double area = static_cast<double>(w * h);
  const double log_lo = std::log(cfg.aspect_min), log_hi = std::log(cfg.aspect_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, cfg.area_min, cfg.area_max);
    const double ratio = std::exp(uniform(rng, log_lo, log_hi));
    const double cw = std::sqrt(target * ratio);
    const double ch = std::sqrt(target / ratio);
    if (cw <= static_cast<double>(w) && ch <= static_cast<double>(h)) {
      const double x0 = -0.5 + uniform(rng, 0.0, static_cast<double>(w) - cw);
      const double y0 = -0.5 + uniform(rng, 0.0, static_cast<double>(h) - ch);
      return {x0, y0, x0 + cw, y0 + ch};
    }
  }
  return full;
}

inline std::optional<std::size_t> pixel_index(double x, std::size_t extent) {
  const double f = std::floor(x + 0.5);
  if (f < 0.0 || f >= static_cast<double>(extent)) return std::nullopt;
  return static_cast<std::size_t>(f);
}

}  // namespace detail

/// Random resized crop, horizontal flip, colour jitter and grayscale, in
/// that order. Only the geometric steps enter fwd_map.
inline AugmentedView augment_image(const Image& image, Rng& rng, const Augment2DConfig& cfg) {
  if (image.empty()) throw AugmentError("augment_image: empty image");
  for (double v : image.rgb)
    if (!(v >= 0.0 && v <= 1.0)) throw AugmentError("augment_image: image values must lie in [0, 1]");
  const std::size_t out_h = cfg.out_height ? cfg.out_height : image.height;
  const std::size_t out_w = cfg.out_width ? cfg.out_width : image.width;

  AugmentedView view;
  view.params.seed = rng();
  Rng local(view.params.seed);
  const CropRect crop = detail::sample_crop(image.width, image.height, cfg, local);
  if (crop.width() < 2.0 || crop.height() < 2.0)
    throw AugmentError("augment_image: degenerate crop " + std::to_string(crop.width()) + "x" +
                       std::to_string(crop.height()) + " (need at least 2 pixels per side)");
  view.params.crop = crop;
  view.params.flipped = bernoulli(local, cfg.flip_probability);

  const double sx = static_cast<double>(out_w) / crop.width();
  const double sy = static_cast<double>(out_h) / crop.height();
  Affine2 fwd{sx, 0, 0, sy, -crop.x0 * sx - 0.5, -crop.y0 * sy - 0.5};
  if (view.params.flipped) fwd = Affine2{-1, 0, 0, 1, static_cast<double>(out_w) - 1.0, 0}.compose(fwd);
  view.fwd_map = fwd;

  const Affine2 inv = fwd.inverse();
  Image out(out_h, out_w);
  double luma_sum = 0.0;
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const Point2 src = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      const auto taps = kernels::bilinear_taps(src.x, src.y, image.width, image.height);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = 0.0;
        for (int k = 0; k < 4; ++k) v += taps.wt[k] * image.rgb[taps.idx[k] * 3 + c];
        out.at(y, x, c) = v;
      }
      luma_sum += luminance(out.at(y, x, 0), out.at(y, x, 1), out.at(y, x, 2));
    }

  view.params.jitter = sample_jitter(cfg.jitter, luma_sum / static_cast<double>(out.pixels()), local);
  if (view.params.jitter.active || view.params.jitter.grayscale) {
    for (std::size_t p = 0; p < out.pixels(); ++p) {
      const Rgb j = view.params.jitter({out.rgb[3 * p], out.rgb[3 * p + 1], out.rgb[3 * p + 2]});
      out.rgb[3 * p] = j.r;
      out.rgb[3 * p + 1] = j.g;
      out.rgb[3 * p + 2] = j.b;
    }
  }
  view.image = std::move(out);
  return view;
}

struct PixelPair {
  PixelCoord a, b;
  friend bool operator==(const PixelPair&, const PixelPair&) = default;
};

/// Pixel pairs of two views that come from the same original-image location.
/// Anchors are drawn uniformly in the overlap of the two crops, snapped to
/// the centre of their pixel in view A, and carried into view B. Returns up
/// to n pairs, unique in view A; empty when the crops do not overlap.
inline std::vector<PixelPair> sample_positive_pixels(const AugmentedView& a, const AugmentedView& b, std::size_t n,
                                                     Rng& rng) {
  std::vector<PixelPair> out;
  const CropRect overlap = a.params.crop.intersect(b.params.crop);
  if (overlap.empty() || n == 0) return out;
  const Affine2 inv_a = a.inverse_map();
  std::unordered_set<std::size_t> seen;
  for (std::size_t attempt = 0; attempt < 4 * n && out.size() < n; ++attempt) {
    const Point2 orig{uniform(rng, overlap.x0, overlap.x1), uniform(rng, overlap.y0, overlap.y1)};
    const Point2 in_a = a.fwd_map.apply(orig);
    const auto ua = detail::pixel_index(in_a.x, a.image.width);
    const auto va = detail::pixel_index(in_a.y, a.image.height);
    if (!ua || !va) continue;
    const Point2 centre = inv_a.apply({static_cast<double>(*ua), static_cast<double>(*va)});
    const Point2 in_b = b.fwd_map.apply(centre);
    const auto ub = detail::pixel_index(in_b.x, b.image.width);
    const auto vb = detail::pixel_index(in_b.y, b.image.height);
    if (!ub || !vb) continue;
    if (!seen.insert(*va * a.image.width + *ua).second) continue;
    out.push_back({{*ua, *va}, {*ub, *vb}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Point clouds.

enum class RotationMode { kNone, kGravity, kFull };

struct Augment3DConfig {
  RotationMode rotation = RotationMode::kGravity;
  double keep_min = 0.6, keep_max = 1.0;
  JitterConfig jitter{0.8, 0.6, 1.4, 0.0};
};

struct Augment3DParams {
  Transform rotation;
  double keep_rate = 1.0;
  ColorJitter jitter;
  std::uint64_t seed = 0;
};

struct AugmentedCloud {
  std::vector<Vec3> points;
  std::vector<Rgb> colors;
  std::vector<std::uint16_t> labels;
  std::vector<std::size_t> index_map;  // survivor -> source index, ascending
  Augment3DParams params;

  std::size_t size() const { return points.size(); }
};

namespace detail {

inline Transform random_rotation(RotationMode mode, Rng& rng) {
  switch (mode) {
    case RotationMode::kNone:
      return Transform::identity();
    case RotationMode::kGravity:
      return Transform::rotation_z(uniform(rng, 0.0, 2.0 * std::numbers::pi));
    case RotationMode::kFull: {
      double q[4], n2 = 0.0;
      do {
        n2 = 0.0;
        for (double& v : q) {
          v = normal(rng);
          n2 += v * v;
        }
      } while (n2 < 1e-12);
      const double s = 1.0 / std::sqrt(n2);
      const double w = q[0] * s, x = q[1] * s, y = q[2] * s, z = q[3] * s;
      return Transform::from_rotation_translation(
          {1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w), 2 * (x * y + z * w),
           1 - 2 * (x * x + z * z), 2 * (y * z - x * w), 2 * (x * z - y * w), 2 * (y * z + x * w),
           1 - 2 * (x * x + y * y)},
          {});
    }
  }
  return Transform::identity();
}

inline double mean_luma(const std::vector<Rgb>& colors) {
  double s = 0.0;
  for (const auto& c : colors) s += luminance(c.r, c.g, c.b);
  return colors.empty() ? 0.0 : s / static_cast<double>(colors.size());
}

}  // namespace detail

/// Rotation, uniform point dropout and colour jitter. At least one point
/// always survives.
inline AugmentedCloud augment_cloud(const PointCloud& cloud, Rng& rng, const Augment3DConfig& cfg) {
  if (cloud.empty()) throw AugmentError("augment_cloud: empty point cloud");
  AugmentedCloud out;
  out.params.seed = rng();
  Rng local(out.params.seed);
  out.params.rotation = detail::random_rotation(cfg.rotation, local);
  out.params.keep_rate = uniform(local, cfg.keep_min, cfg.keep_max);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (out.params.keep_rate >= 1.0 || bernoulli(local, out.params.keep_rate)) out.index_map.push_back(i);
  if (out.index_map.empty()) out.index_map.push_back(uniform_index(local, cloud.size()));
  out.params.jitter = sample_jitter(cfg.jitter, detail::mean_luma(cloud.rgb), local);

  const bool has_labels = cloud.label.size() == cloud.size();
  out.points.reserve(out.index_map.size());
  out.colors.reserve(out.index_map.size());
  for (std::size_t src : out.index_map) {
    out.points.push_back(out.params.rotation.apply(cloud.xyz[src]));
    out.colors.push_back(out.params.jitter(cloud.rgb[src]));
    if (has_labels) out.labels.push_back(cloud.label[src]);
  }
  return out;
}

}  // namespace xmpt
