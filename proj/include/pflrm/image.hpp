#pragma once

#include <string>
#include <vector>

#include "pflrm/common.hpp"

namespace pflrm {

/// Row-major H x W x 3 image, values in [0,1]. Metrics and losses operate on
/// this floating-point buffer; PNG files are the quantized transport format.
struct Image {
  int width = 0, height = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0.0) {}

  double& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::size_t size() const { return rgb.size(); }
};

/// 8-bit RGB PNG (values rounded; out-of-range clamped).
void save_png(const std::string& path, const Image& img);
/// Reads 8-bit RGB/RGBA/gray PNGs; alpha is composited over white.
Image load_png(const std::string& path);

/// Raw bytes as they would be written by save_png; used for bitwise checks.
std::vector<unsigned char> quantize_rgb8(const Image& img);

}  // namespace pflrm
