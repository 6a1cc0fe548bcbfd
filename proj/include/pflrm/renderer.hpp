#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "pflrm/camera.hpp"
#include "pflrm/image.hpp"
#include "pflrm/triplane.hpp"

namespace pflrm::render {

/// K midpoint samples of the ray segment clipped to the box [-1,1]^3.
struct RaySamples {
  bool valid = false;
  double t_near = 0.0, t_far = 0.0;
  std::vector<Eigen::Vector3d> points;  // K entries when valid
  std::vector<double> deltas;           // K entries, all (t_far-t_near)/K
};

RaySamples march(const geom::Ray& ray, int k);

/// Plain (non-differentiable) compositing of one ray; shared by the synthetic
/// ground-truth renderer and the oracle tests. White background composite.
struct CompositeOut {
  Eigen::Vector3d color = Eigen::Vector3d::Ones();
  Eigen::Vector3d xbar = Eigen::Vector3d::Zero();
  double taubar = 1.0;
  std::vector<double> weights;
};

CompositeOut composite(std::span<const double> sigma, std::span<const Eigen::Vector3d> color,
                       std::span<const double> delta, std::span<const Eigen::Vector3d> points);

/// Differentiable single-ray render; graph outputs for tests and probes.
struct PixelRender {
  bool valid = false;
  ad::Tensor color;    // [3]
  ad::Tensor xbar;     // [3]
  ad::Tensor taubar;   // [1]
  ad::Tensor weights;  // [K]
};

PixelRender render_pixel(const field::Triplane& tri, const field::NerfDecoder& dec,
                         const RaySamples& samples);

/// Batched differentiable render of many rays in one graph. Invalid rays
/// produce white, taubar 1, xbar 0, and are flagged in `valid`.
struct BatchRender {
  ad::Tensor colors;  // [P,3]
  ad::Tensor xbar;    // [P,3]
  ad::Tensor taubar;  // [P]
  std::vector<std::uint8_t> valid;
};

BatchRender render_rays(const field::Triplane& tri, const field::NerfDecoder& dec,
                        std::span<const RaySamples> rays);

struct CropRect {
  int x0 = 0, y0 = 0, width = 0, height = 0;
};

/// Render a crop through pixel centers; row-major pixel order.
BatchRender render_crop(const field::Triplane& tri, const field::NerfDecoder& dec,
                        const geom::Pose& pose, const geom::Intrinsics& intr, const CropRect& crop,
                        int k);

/// Evaluate-only full image from a triplane (values detached from any tape).
Image render_image(const field::Triplane& tri, const field::NerfDecoder& dec,
                   const geom::Pose& pose, const geom::Intrinsics& intr, int size, int k);

}  // namespace pflrm::render
