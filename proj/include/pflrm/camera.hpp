#pragma once

#include <Eigen/Dense>

#include "pflrm/common.hpp"

namespace pflrm::geom {

struct Intrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  void validate() const;
};

/// World-to-camera rigid transform: x_cam = R * x_world + t.
struct Pose {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  static Pose identity() { return Pose{}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R * p + t; }
  Eigen::Vector3d camera_center() const { return -R.transpose() * t; }
  Pose inverse() const { return Pose{R.transpose(), -R.transpose() * t}; }
  bool is_valid(double tol = 1e-9) const;
};

/// apply b, then a: (a ∘ b)(x) = a(b(x)).
Pose compose(const Pose& a, const Pose& b);

/// The pose y with compose(y, reference) == other; maps reference-camera
/// coordinates to other-camera coordinates.
Pose relative_pose(const Pose& reference, const Pose& other);

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;  // unit
  Eigen::Vector2d pixel;
};

class BehindCameraError : public Error {
 public:
  explicit BehindCameraError(double depth)
      : Error("behind camera: depth " + std::to_string(depth)), depth(depth) {}
  double depth;
};

/// Pinhole projection to continuous image coordinates; throws BehindCameraError
/// when the camera-frame depth is not positive.
Eigen::Vector2d project(const Pose& pose, const Intrinsics& intr, const Eigen::Vector3d& p);

/// World-space ray through continuous image point (u, v).
Ray ray_for_pixel(const Pose& pose, const Intrinsics& intr, double u, double v);

/// Geodesic angle between two rotations, degrees in [0, 180].
double rotation_error_deg(const Eigen::Matrix3d& Ra, const Eigen::Matrix3d& Rb);

inline double translation_error(const Eigen::Vector3d& ta, const Eigen::Vector3d& tb) {
  return (ta - tb).norm();
}

// Axis-angle (Rodrigues) chart on SO(3).
Eigen::Matrix3d rotation_from_axis_angle(const Eigen::Vector3d& w);
Eigen::Vector3d axis_angle_from_rotation(const Eigen::Matrix3d& R);
Eigen::Matrix3d skew(const Eigen::Vector3d& v);

/// Right Jacobian of SO(3): exp((w + dw)^) ≈ exp(w^) exp((Jr(w) dw)^).
Eigen::Matrix3d right_jacobian_so3(const Eigen::Vector3d& w);

/// World-to-camera pose looking from `eye` toward `target`; +z forward,
/// +y down in the image. Falls back to `fallback_up` when `up` is parallel
/// to the view direction.
Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
             const Eigen::Vector3d& up = Eigen::Vector3d(0, 1, 0),
             const Eigen::Vector3d& fallback_up = Eigen::Vector3d(1, 0, 0));

}  // namespace pflrm::geom
