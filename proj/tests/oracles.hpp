// Independent reference implementations used as test oracles. These stay
// deliberately naive (literal loops, textbook formulas) and never call the
// code paths they check.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

/// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> fd_gradient(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
    double step = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double fp = f(x);
    x[i] = saved - step;
    const double fm = f(x);
    x[i] = saved;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

inline double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst,
                     std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(numeric[i])));
  return worst;
}

/// Literal transcription of the volume rendering sum: weights, color with
/// white background, expected point, final transmittance.
struct RenderLoop {
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
  Eigen::Vector3d xbar = Eigen::Vector3d::Zero();
  double taubar = 1.0;
  std::vector<double> weights;
};

inline RenderLoop render_loop(const std::vector<double>& sigma,
                              const std::vector<Eigen::Vector3d>& color,
                              const std::vector<double>& delta,
                              const std::vector<Eigen::Vector3d>& points) {
  RenderLoop out;
  const std::size_t k = sigma.size();
  out.weights.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    double tau_prev = 1.0;
    for (std::size_t j = 0; j < i; ++j) tau_prev *= std::exp(-sigma[j] * delta[j]);
    out.weights[i] = tau_prev * (1.0 - std::exp(-sigma[i] * delta[i]));
    out.color += out.weights[i] * color[i];
    out.xbar += out.weights[i] * points[i];
  }
  double acc = 0.0;
  for (std::size_t j = 0; j < k; ++j) acc += sigma[j] * delta[j];
  out.taubar = std::exp(-acc);
  out.color += out.taubar * Eigen::Vector3d::Ones();
  return out;
}

/// Projection through an explicit 3x4 homogeneous matrix pipeline.
inline Eigen::Vector2d project_homogeneous(const Eigen::Matrix3d& R, const Eigen::Vector3d& t,
                                           double fx, double fy, double cx, double cy,
                                           const Eigen::Vector3d& p) {
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  K(0, 0) = fx;
  K(1, 1) = fy;
  K(0, 2) = cx;
  K(1, 2) = cy;
  Eigen::Matrix<double, 3, 4> P;
  P.leftCols<3>() = R;
  P.col(3) = t;
  const Eigen::Vector4d xh(p.x(), p.y(), p.z(), 1.0);
  const Eigen::Vector3d h = K * (P * xh);
  return {h.x() / h.z(), h.y() / h.z()};
}

/// Rotation angle through the quaternion double cover: 2*acos(|<qa,qb>|).
inline double quaternion_angle_deg(const Eigen::Matrix3d& Ra, const Eigen::Matrix3d& Rb) {
  const Eigen::Quaterniond qa(Ra), qb(Rb);
  const double dot = std::abs(qa.dot(qb));
  return 2.0 * std::acos(std::min(dot, 1.0)) * 180.0 / 3.14159265358979323846;
}

/// log of the trapezoid quadrature of exp(-energy) over [lo, hi].
inline double grid_log_integral(const std::function<double(double)>& energy, double lo, double hi,
                                int nodes) {
  const double h = (hi - lo) / (nodes - 1);
  // Max-shift for stability.
  std::vector<double> vals(nodes);
  double m = -1e300;
  for (int i = 0; i < nodes; ++i) {
    vals[i] = -energy(lo + i * h);
    m = std::max(m, vals[i]);
  }
  double acc = 0.0;
  for (int i = 0; i < nodes; ++i) {
    const double w = (i == 0 || i == nodes - 1) ? 0.5 : 1.0;
    acc += w * std::exp(vals[i] - m);
  }
  return m + std::log(acc * h);
}

}  // namespace oracle
