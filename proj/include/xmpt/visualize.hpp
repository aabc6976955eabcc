#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmpt/checkpoint.hpp"
#include "xmpt/geometry.hpp"
#include "xmpt/image.hpp"
#include "xmpt/models.hpp"
#include "xmpt/scenegen.hpp"

namespace xmpt {

class VisualizeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Three principal directions of a feature set plus the colour range of
/// the projected features.
struct PcaBasis {
  std::size_t dims = 0;
  std::vector<double> mean;                      // dims
  std::array<std::vector<double>, 3> component;  // each dims, unit length or all zero
  std::array<double, 3> lo{}, hi{};
};

/// Fits on row-major `rows × dims` features. Each component's largest-magnitude
/// loading is made positive; zero-variance directions come out as zero vectors.
inline PcaBasis fit_pca(const std::vector<double>& features, std::size_t dims) {
  if (dims == 0 || features.empty() || features.size() % dims != 0)
    throw VisualizeError("fit_pca: feature buffer is not a whole number of rows");
  const std::size_t rows = features.size() / dims;
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(
      features.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dims));

  PcaBasis b;
  b.dims = dims;
  const Eigen::RowVectorXd mu = x.colwise().mean();
  b.mean.assign(mu.data(), mu.data() + dims);
  const Eigen::MatrixXd centred = x.rowwise() - mu;
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(rows);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const double scale = std::max(cov.diagonal().maxCoeff(), 0.0);

  for (std::size_t k = 0; k < 3; ++k) {
    b.component[k].assign(dims, 0.0);
    if (k >= dims) continue;
    const auto col = static_cast<Eigen::Index>(dims - 1 - k);
    if (!(eig.eigenvalues()(col) > 1e-12 * scale) || scale <= 0.0) continue;
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    if (v(arg) < 0.0) v = -v;
    b.component[k].assign(v.data(), v.data() + dims);
  }

  for (std::size_t k = 0; k < 3; ++k) {
    b.lo[k] = 0.0;
    b.hi[k] = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < dims; ++c) s += (features[r * dims + c] - b.mean[c]) * b.component[k][c];
      if (r == 0 || s < b.lo[k]) b.lo[k] = s;
      if (r == 0 || s > b.hi[k]) b.hi[k] = s;
    }
  }
  return b;
}

/// Colour of one feature row: each component mapped min→0, max→255; a
/// degenerate component sits at mid-gray.
inline std::array<std::uint8_t, 3> pca_color(const PcaBasis& b, const double* row) {
  std::array<std::uint8_t, 3> rgb{};
  for (std::size_t k = 0; k < 3; ++k) {
    const double span = b.hi[k] - b.lo[k];
    if (!(span > 1e-12)) {
      rgb[k] = 128;
      continue;
    }
    double s = 0.0;
    for (std::size_t c = 0; c < b.dims; ++c) s += (row[c] - b.mean[c]) * b.component[k][c];
    const double t = std::clamp((s - b.lo[k]) / span, 0.0, 1.0);
    rgb[k] = static_cast<std::uint8_t>(std::lround(255.0 * t));
  }
  return rgb;
}

/// 8-bit heatmap with a coverage mask (false where no feature landed).
struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> rgb;
  std::vector<bool> covered;

  Image image() const {
    Image img(height, width);
    for (std::size_t i = 0; i < rgb.size(); ++i) img.rgb[i] = rgb[i] / 255.0;
    return img;
  }
};

inline Heatmap pixel_heatmap(const PcaBasis& b, const std::vector<double>& features, std::size_t height,
                             std::size_t width) {
  if (features.size() != height * width * b.dims) throw VisualizeError("pixel_heatmap: feature/image size mismatch");
  Heatmap h{height, width, std::vector<std::uint8_t>(height * width * 3), std::vector<bool>(height * width, true)};
  for (std::size_t i = 0; i < height * width; ++i) {
    const auto c = pca_color(b, features.data() + i * b.dims);
    std::copy(c.begin(), c.end(), h.rgb.begin() + static_cast<long>(i * 3));
  }
  return h;
}

/// Points splatted through the camera into single pixels; nearest depth
/// wins, ties to the lower point index. Uncovered pixels stay black.
inline Heatmap point_heatmap(const PcaBasis& b, const std::vector<double>& features, const PointCloud& cloud,
                             const CameraModel& cam) {
  if (features.size() != cloud.size() * b.dims) throw VisualizeError("point_heatmap: feature/cloud size mismatch");
  Heatmap h{cam.height, cam.width, std::vector<std::uint8_t>(cam.height * cam.width * 3, 0),
            std::vector<bool>(cam.height * cam.width, false)};
  std::vector<double> zbuf(cam.height * cam.width, 0.0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto p = project(cloud.xyz[i], cam);
    if (!p) continue;
    const auto px = pixel_of(*p, cam);
    if (!px) continue;
    const std::size_t k = px->v * cam.width + px->u;
    if (h.covered[k] && !(p->depth < zbuf[k])) continue;
    h.covered[k] = true;
    zbuf[k] = p->depth;
    const auto c = pca_color(b, features.data() + i * b.dims);
    std::copy(c.begin(), c.end(), h.rgb.begin() + static_cast<long>(k * 3));
  }
  return h;
}

/// Mean Euclidean RGB distance (0–255 units) over pixels covered in both maps.
inline double heatmap_distance(const Heatmap& a, const Heatmap& b) {
  if (a.height != b.height || a.width != b.width) throw VisualizeError("heatmap_distance: size mismatch");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < a.covered.size(); ++k) {
    if (!a.covered[k] || !b.covered[k]) continue;
    double d2 = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = static_cast<double>(a.rgb[k * 3 + c]) - static_cast<double>(b.rgb[k * 3 + c]);
      d2 += d * d;
    }
    total += std::sqrt(d2);
    ++n;
  }
  if (n == 0) throw VisualizeError("heatmap_distance: no pixel covered in both heatmaps");
  return total / static_cast<double>(n);
}

struct HeatmapSet {
  std::optional<Heatmap> image, points;
  PcaBasis basis;
};

inline std::vector<double> pixel_features(const Image2DNet& net, const Image& img) {
  NoGradGuard no_grad;
  const Tensor f = net.forward(img);
  return {f.data().begin(), f.data().end()};
}

inline std::vector<double> point_features(const Point3DNet& net, const PointCloud& cloud) {
  NoGradGuard no_grad;
  const Tensor f = net.forward(cloud_tensor(cloud));
  return {f.data().begin(), f.data().end()};
}

/// Heatmaps for whichever nets are given. With both, one basis is fit on the
/// union of pixel and point features so the two maps share colours.
inline HeatmapSet render_heatmaps(const SceneSample& scene, const Image2DNet* net2d, const Point3DNet* net3d) {
  if (!net2d && !net3d) throw VisualizeError("visualize: no network given");
  if (scene.image.height != scene.camera.height || scene.image.width != scene.camera.width)
    throw VisualizeError("visualize: image is " + std::to_string(scene.image.width) + "x" +
                         std::to_string(scene.image.height) + " but the camera is " +
                         std::to_string(scene.camera.width) + "x" + std::to_string(scene.camera.height));
  std::vector<double> f2, f3;
  if (net2d) f2 = pixel_features(*net2d, scene.image);
  if (net3d) f3 = point_features(*net3d, scene.cloud);
  std::vector<double> all = f2;
  all.insert(all.end(), f3.begin(), f3.end());

  HeatmapSet out;
  out.basis = fit_pca(all, kOutputChannels);
  if (net2d) out.image = pixel_heatmap(out.basis, f2, scene.image.height, scene.image.width);
  if (net3d) out.points = point_heatmap(out.basis, f3, scene.cloud, scene.camera);
  return out;
}

inline std::string encode_heatmap(const Heatmap& h) {
  std::string s = "P6\n" + std::to_string(h.width) + " " + std::to_string(h.height) + "\n255\n";
  s.append(reinterpret_cast<const char*>(h.rgb.data()), h.rgb.size());
  return s;
}

/// Writes `<prefix>_2d.ppm` and/or `<prefix>_3d.ppm`; returns the paths written.
inline std::vector<std::filesystem::path> write_heatmaps(const HeatmapSet& set, const std::string& prefix) {
  std::vector<std::filesystem::path> written;
  auto put = [&](const Heatmap& h, const char* suffix) {
    const std::filesystem::path p = prefix + suffix;
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    detail::write_file_atomic(p, encode_heatmap(h));
    written.push_back(p);
  };
  if (set.image) put(*set.image, "_2d.ppm");
  if (set.points) put(*set.points, "_3d.ppm");
  return written;
}

}  // namespace xmpt
