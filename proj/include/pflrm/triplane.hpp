#pragma once

#include <random>
#include <string>
#include <vector>

#include "pflrm/checkpoint.hpp"
#include "pflrm/ops.hpp"
#include "pflrm/tensor.hpp"

namespace pflrm::field {

/// Three axis-aligned feature planes over the fixed box [-1,1]^3, each of
/// shape [H,W,C]. Plane-to-coordinate assignment (pinned by tests):
///   xy sampled at (x, y), xz at (x, z), yz at (y, z),
/// with the first named coordinate on the W axis and the second on the H axis.
struct Triplane {
  ad::Tensor xy, xz, yz;

  std::size_t height() const { return xy.extent(0); }
  std::size_t width() const { return xy.extent(1); }
  std::size_t channels() const { return xy.extent(2); }

  static Triplane zeros(std::size_t h, std::size_t w, std::size_t c);
  void validate() const;
};

/// Concatenated bilinear samples of the three planes at `points` [N,3] in box
/// coordinates -> [N, 3C]. Coordinates outside the box clamp to the edge.
ad::Tensor sample_features(const Triplane& tri, const ad::Tensor& points);

struct DecodeOut {
  ad::Tensor sigma;  // [N], nonnegative
  ad::Tensor color;  // [N,3], in (0,1)
};

/// Shared MLP decoding triplane features to density and color. Hidden layers
/// use ReLU; outputs go through softplus (density) and sigmoid (color).
struct NerfDecoder {
  int depth = 3;
  int width = 32;
  std::vector<ad::Tensor> weights;  // depth entries
  std::vector<ad::Tensor> biases;

  static NerfDecoder init(int in_dim, int depth, int width, std::mt19937_64& rng);
  DecodeOut decode(const ad::Tensor& features) const;  // features [N, in_dim]
  /// Raw pre-activation outputs [N,4]: density logit + 3 color logits.
  ad::Tensor logits(const ad::Tensor& features) const;
  std::size_t in_dim() const { return weights.front().extent(0); }
};

/// factor 1: identity reshape of [3,h,w,D] tokens; factor 2: learned 2x2
/// stride-2 transposed convolution per plane (kernel [2,2,D,D], shared across
/// planes) -> [3,2h,2w,D].
ad::Tensor upsample(const ad::Tensor& tri_tokens, int factor, const ad::Tensor& kernel);

/// Checkpoint dump: plane_xy / plane_xz / plane_yz plus decoder weights.
std::vector<ad::NamedTensor> triplane_tensors(const Triplane& tri, const NerfDecoder& dec);

}  // namespace pflrm::field
