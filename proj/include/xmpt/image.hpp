#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmpt {

/// H×W×3 image, interleaved row-major, values nominally in [0, 1].
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), rgb(h * w * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
  std::size_t pixels() const { return height * width; }
  bool empty() const { return rgb.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

inline double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

}  // namespace xmpt
