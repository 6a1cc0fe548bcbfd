#include "pflrm/renderer.hpp"

#include <cmath>
#include <limits>

namespace pflrm::render {

using ad::Tensor;

RaySamples march(const geom::Ray& ray, int k) {
  if (k < 2) throw Error("march: need at least 2 samples, got " + std::to_string(k));
  RaySamples out;
  double t_near = 0.0;
  double t_far = std::numeric_limits<double>::infinity();
  for (int axis = 0; axis < 3; ++axis) {
    const double o = ray.origin[axis];
    const double d = ray.direction[axis];
    if (std::abs(d) < 1e-12) {
      if (o < -1.0 || o > 1.0) return out;  // parallel and outside the slab
      continue;
    }
    double t0 = (-1.0 - o) / d;
    double t1 = (1.0 - o) / d;
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
  }
  if (!(t_far > t_near)) return out;
  out.valid = true;
  out.t_near = t_near;
  out.t_far = t_far;
  const double dt = (t_far - t_near) / static_cast<double>(k);
  out.points.reserve(k);
  out.deltas.assign(k, dt);
  for (int i = 0; i < k; ++i)
    out.points.push_back(ray.origin + (t_near + (i + 0.5) * dt) * ray.direction);
  return out;
}

CompositeOut composite(std::span<const double> sigma, std::span<const Eigen::Vector3d> color,
                       std::span<const double> delta, std::span<const Eigen::Vector3d> points) {
  CompositeOut out;
  const std::size_t k = sigma.size();
  out.weights.assign(k, 0.0);
  out.color.setZero();
  double tau = 1.0;  // tau_0 = 1
  for (std::size_t i = 0; i < k; ++i) {
    const double a = 1.0 - std::exp(-sigma[i] * delta[i]);
    const double w = tau * a;
    out.weights[i] = w;
    out.color += w * color[i];
    out.xbar += w * points[i];
    tau *= std::exp(-sigma[i] * delta[i]);
  }
  out.taubar = tau;
  out.color += tau * Eigen::Vector3d::Ones();  // white background
  return out;
}

namespace {

struct Assembled {
  Tensor points;  // [P*K,3]
  Tensor deltas;  // [P,K]
  std::size_t p = 0, k = 0;
  std::vector<std::uint8_t> valid;
};

Assembled assemble(std::span<const RaySamples> rays) {
  Assembled a;
  a.p = rays.size();
  a.k = 0;
  for (const auto& r : rays)
    if (r.valid) {
      a.k = r.points.size();
      break;
    }
  if (a.k == 0) a.k = 2;  // no valid ray; any K works, outputs are constant
  std::vector<double> pts(a.p * a.k * 3, 0.0);
  std::vector<double> deltas(a.p * a.k, 0.0);
  a.valid.assign(a.p, 0);
  for (std::size_t i = 0; i < a.p; ++i) {
    const auto& r = rays[i];
    if (!r.valid) continue;
    if (r.points.size() != a.k) throw ShapeError("render_rays: rays disagree on K");
    a.valid[i] = 1;
    for (std::size_t j = 0; j < a.k; ++j) {
      pts[(i * a.k + j) * 3 + 0] = r.points[j].x();
      pts[(i * a.k + j) * 3 + 1] = r.points[j].y();
      pts[(i * a.k + j) * 3 + 2] = r.points[j].z();
      deltas[i * a.k + j] = r.deltas[j];
    }
  }
  a.points = Tensor::from({a.p * a.k, 3}, std::move(pts));
  a.deltas = Tensor::from({a.p, a.k}, std::move(deltas));
  return a;
}

}  // namespace

BatchRender render_rays(const field::Triplane& tri, const field::NerfDecoder& dec,
                        std::span<const RaySamples> rays) {
  Assembled a = assemble(rays);
  const std::size_t p = a.p, k = a.k;

  Tensor feats = field::sample_features(tri, a.points);
  field::DecodeOut decoded = dec.decode(feats);

  Tensor sd = ad::mul(ad::reshape(decoded.sigma, {p, k}), a.deltas);      // sigma_k * delta_k
  Tensor tau_prev = ad::exp(ad::neg(ad::exclusive_cumsum_last(sd)));      // tau_{k-1}
  Tensor alpha = ad::add(ad::neg(ad::exp(ad::neg(sd))), 1.0);            // 1 - exp(-sd)
  Tensor w = ad::mul(tau_prev, alpha);                                    // [P,K]
  Tensor w3 = ad::reshape(w, {p, k, 1});
  Tensor c = ad::reshape(decoded.color, {p, k, 3});
  Tensor craw = ad::sum(ad::mul(w3, c), 1);                               // [P,3]
  Tensor pts = ad::reshape(a.points, {p, k, 3});
  Tensor xbar = ad::sum(ad::mul(w3, pts), 1);                             // [P,3]
  Tensor taubar = ad::exp(ad::neg(ad::sum(sd, 1)));                       // [P]

  BatchRender out;
  out.colors = ad::add(craw, ad::reshape(taubar, {p, 1}));                // white background
  out.xbar = xbar;
  out.taubar = taubar;
  out.valid = std::move(a.valid);
  return out;
}

PixelRender render_pixel(const field::Triplane& tri, const field::NerfDecoder& dec,
                         const RaySamples& samples) {
  PixelRender out;
  out.valid = samples.valid;
  if (!samples.valid) {
    out.color = Tensor::ones({3});
    out.xbar = Tensor::zeros({3});
    out.taubar = Tensor::ones({1});
    out.weights = Tensor::zeros({2});
    return out;
  }
  const std::size_t k = samples.points.size();
  Assembled a = assemble(std::span<const RaySamples>(&samples, 1));
  Tensor feats = field::sample_features(tri, a.points);
  field::DecodeOut decoded = dec.decode(feats);
  Tensor sd = ad::mul(ad::reshape(decoded.sigma, {1, k}), a.deltas);
  Tensor tau_prev = ad::exp(ad::neg(ad::exclusive_cumsum_last(sd)));
  Tensor alpha = ad::add(ad::neg(ad::exp(ad::neg(sd))), 1.0);
  Tensor w = ad::reshape(ad::mul(tau_prev, alpha), {k});
  Tensor w1 = ad::reshape(w, {k, 1});
  out.weights = w;
  out.taubar = ad::exp(ad::neg(ad::sum(sd)));
  Tensor craw = ad::reshape(ad::sum(ad::mul(w1, decoded.color), 0), {3});
  out.color = ad::add(craw, out.taubar);  // [3] + [1] broadcasts
  out.xbar = ad::reshape(ad::sum(ad::mul(w1, a.points), 0), {3});
  return out;
}

BatchRender render_crop(const field::Triplane& tri, const field::NerfDecoder& dec,
                        const geom::Pose& pose, const geom::Intrinsics& intr, const CropRect& crop,
                        int k) {
  if (crop.x0 < 0 || crop.y0 < 0 || crop.width <= 0 || crop.height <= 0 ||
      crop.x0 + crop.width > intr.width || crop.y0 + crop.height > intr.height)
    throw Error("render_crop: crop outside image bounds");
  std::vector<RaySamples> rays;
  rays.reserve(static_cast<std::size_t>(crop.width) * crop.height);
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x) {
      const geom::Ray ray =
          geom::ray_for_pixel(pose, intr, crop.x0 + x + 0.5, crop.y0 + y + 0.5);
      rays.push_back(march(ray, k));
    }
  return render_rays(tri, dec, rays);
}

Image render_image(const field::Triplane& tri, const field::NerfDecoder& dec,
                   const geom::Pose& pose, const geom::Intrinsics& intr, int size, int k) {
  ad::NoGrad guard;
  geom::Intrinsics local = intr;
  local.width = size;
  local.height = size;
  BatchRender batch = render_crop(tri, dec, pose, local, CropRect{0, 0, size, size}, k);
  Image img(size, size);
  for (std::size_t i = 0; i < static_cast<std::size_t>(size) * size; ++i)
    for (int c = 0; c < 3; ++c) img.rgb[i * 3 + c] = batch.colors.data()[i * 3 + c];
  return img;
}

}  // namespace pflrm::render
