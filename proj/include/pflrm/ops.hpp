#pragma once

#include <vector>

#include "pflrm/tensor.hpp"

namespace pflrm::ad {

// Elementwise binary ops with numpy-style broadcasting (trailing axes aligned,
// extent-1 axes stretch). Backward reduces over the broadcast axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);

// Elementwise unary.
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);

// [m,k]@[k,n] -> [m,n]; or batched [B,m,k]@[B,k,n] -> [B,m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Reductions.
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);

// Shape manipulation (all produce fresh buffers).
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

// Normalization / attention building blocks over the last axis.
Tensor softmax_last(const Tensor& a);
Tensor layer_norm_last(const Tensor& a, double eps = 1e-8);

// y[..., k] = sum_{k' < k} x[..., k'].
Tensor exclusive_cumsum_last(const Tensor& a);

/// Bilinear sample of `plane` [H,W,C] at normalized coords [N,2] in [-1,1]^2
/// (align-corners mapping: -1 -> node 0, +1 -> node W-1 / H-1; column order
/// is (u -> W axis, v -> H axis)). Out-of-box coords clamp to the edge.
/// Differentiable w.r.t. both the plane and the coordinates.
Tensor grid_sample_bilinear(const Tensor& plane, const Tensor& coords);

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b);

}  // namespace pflrm::ad
