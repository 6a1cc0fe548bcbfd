#include "pflrm/triplane.hpp"

#include <cmath>

namespace pflrm::field {

using ad::Tensor;

Triplane Triplane::zeros(std::size_t h, std::size_t w, std::size_t c) {
  return Triplane{Tensor::zeros({h, w, c}), Tensor::zeros({h, w, c}), Tensor::zeros({h, w, c})};
}

void Triplane::validate() const {
  const auto& s = xy.shape();
  if (s.size() != 3 || xz.shape() != s || yz.shape() != s)
    throw ShapeError("Triplane: planes must share shape [H,W,C]");
  if (!xy.all_finite() || !xz.all_finite() || !yz.all_finite())
    throw Error("Triplane: non-finite plane values");
}

Tensor sample_features(const Triplane& tri, const ad::Tensor& points) {
  if (points.ndim() != 2 || points.extent(1) != 3)
    throw ShapeError("sample_features: points must be [N,3], got " +
                     ad::shape_str(points.shape()));
  // Column pairs per plane: (x,y), (x,z), (y,z).
  Tensor x = ad::slice(points, 1, 0, 1);
  Tensor y = ad::slice(points, 1, 1, 1);
  Tensor z = ad::slice(points, 1, 2, 1);
  Tensor f_xy = ad::grid_sample_bilinear(tri.xy, ad::concat({x, y}, 1));
  Tensor f_xz = ad::grid_sample_bilinear(tri.xz, ad::concat({x, z}, 1));
  Tensor f_yz = ad::grid_sample_bilinear(tri.yz, ad::concat({y, z}, 1));
  return ad::concat({f_xy, f_xz, f_yz}, 1);
}

NerfDecoder NerfDecoder::init(int in_dim, int depth, int width, std::mt19937_64& rng) {
  if (depth < 2) throw Error("NerfDecoder: depth must be at least 2");
  NerfDecoder dec;
  dec.depth = depth;
  dec.width = width;
  int prev = in_dim;
  for (int layer = 0; layer < depth; ++layer) {
    const int next = layer + 1 == depth ? 4 : width;
    const double stddev = std::sqrt(2.0 / static_cast<double>(prev));
    dec.weights.push_back(
        Tensor::randn({static_cast<std::size_t>(prev), static_cast<std::size_t>(next)}, rng,
                      stddev)
            .set_requires_grad(true));
    dec.biases.push_back(Tensor::zeros({static_cast<std::size_t>(next)}).set_requires_grad(true));
    prev = next;
  }
  return dec;
}

ad::Tensor NerfDecoder::logits(const ad::Tensor& features) const {
  if (features.ndim() != 2 || features.extent(1) != in_dim())
    throw ShapeError("NerfDecoder: features must be [N," + std::to_string(in_dim()) + "], got " +
                     ad::shape_str(features.shape()));
  Tensor h = features;
  for (std::size_t layer = 0; layer < weights.size(); ++layer) {
    h = ad::add(ad::matmul(h, weights[layer]), biases[layer]);
    if (layer + 1 < weights.size()) h = ad::relu(h);
  }
  return h;
}

DecodeOut NerfDecoder::decode(const ad::Tensor& features) const {
  Tensor out = logits(features);
  const std::size_t n = out.extent(0);
  Tensor sigma = ad::reshape(ad::softplus(ad::slice(out, 1, 0, 1)), {n});
  Tensor color = ad::sigmoid(ad::slice(out, 1, 1, 3));
  return DecodeOut{sigma, color};
}

ad::Tensor upsample(const ad::Tensor& tri_tokens, int factor, const ad::Tensor& kernel) {
  const auto& s = tri_tokens.shape();
  if (s.size() != 4 || s[0] != 3)
    throw ShapeError("upsample: expected [3,h,w,D] tokens, got " + ad::shape_str(s));
  if (factor == 1) return tri_tokens;
  if (factor != 2) throw Error("upsample: unsupported factor " + std::to_string(factor));
  const std::size_t h = s[1], w = s[2], d = s[3];
  if (kernel.shape() != ad::Shape{2, 2, d, d})
    throw ShapeError("upsample: kernel must be [2,2,D,D], got " + ad::shape_str(kernel.shape()));
  Tensor flat = ad::reshape(tri_tokens, {3 * h * w, d});
  // One matmul per kernel tap; taps then interleave into the 2x stride grid.
  std::vector<Tensor> taps;
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b) {
      Tensor k = ad::reshape(ad::slice(ad::reshape(kernel, {4, d, d}), 0, a * 2 + b, 1), {d, d});
      taps.push_back(ad::reshape(ad::matmul(flat, k), {3, h, w, 1, 1, d}));
    }
  Tensor row0 = ad::concat({taps[0], taps[1]}, 4);  // [3,h,w,1,2,d]
  Tensor row1 = ad::concat({taps[2], taps[3]}, 4);
  Tensor grid = ad::concat({row0, row1}, 3);        // [3,h,w,2,2,d]
  grid = ad::transpose(grid, {0, 1, 3, 2, 4, 5});   // [3,h,2,w,2,d]
  return ad::reshape(grid, {3, 2 * h, 2 * w, d});
}

std::vector<ad::NamedTensor> triplane_tensors(const Triplane& tri, const NerfDecoder& dec) {
  std::vector<ad::NamedTensor> out;
  out.push_back({"plane_xy", tri.xy.detach(), ad::Dtype::F64});
  out.push_back({"plane_xz", tri.xz.detach(), ad::Dtype::F64});
  out.push_back({"plane_yz", tri.yz.detach(), ad::Dtype::F64});
  for (std::size_t i = 0; i < dec.weights.size(); ++i) {
    out.push_back({"decoder.w" + std::to_string(i), dec.weights[i].detach(), ad::Dtype::F64});
    out.push_back({"decoder.b" + std::to_string(i), dec.biases[i].detach(), ad::Dtype::F64});
  }
  return out;
}

}  // namespace pflrm::field
