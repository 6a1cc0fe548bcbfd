#include "pflrm/camera.hpp"

#include <cmath>

namespace pflrm::geom {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void Intrinsics::validate() const {
  if (fx <= 0.0 || fy <= 0.0)
    throw Error("Intrinsics: focal lengths must be positive");
  if (cx < 0.0 || cx > width || cy < 0.0 || cy > height)
    throw Error("Intrinsics: principal point outside the image");
}

bool Pose::is_valid(double tol) const {
  const Eigen::Matrix3d err = R.transpose() * R - Eigen::Matrix3d::Identity();
  return err.cwiseAbs().maxCoeff() <= tol && std::abs(R.determinant() - 1.0) <= tol;
}

Pose compose(const Pose& a, const Pose& b) { return Pose{a.R * b.R, a.R * b.t + a.t}; }

Pose relative_pose(const Pose& reference, const Pose& other) {
  return compose(other, reference.inverse());
}

Eigen::Vector2d project(const Pose& pose, const Intrinsics& intr, const Eigen::Vector3d& p) {
  const Eigen::Vector3d x = pose.apply(p);
  if (x.z() <= 0.0) throw BehindCameraError(x.z());
  return {intr.fx * x.x() / x.z() + intr.cx, intr.fy * x.y() / x.z() + intr.cy};
}

Ray ray_for_pixel(const Pose& pose, const Intrinsics& intr, double u, double v) {
  const Eigen::Vector3d dir_cam((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
  Ray ray;
  ray.origin = pose.camera_center();
  ray.direction = (pose.R.transpose() * dir_cam).normalized();
  ray.pixel = {u, v};
  return ray;
}

double rotation_error_deg(const Eigen::Matrix3d& Ra, const Eigen::Matrix3d& Rb) {
  const double tr = (Ra.transpose() * Rb).trace();
  const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / kPi;
}

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

Eigen::Matrix3d rotation_from_axis_angle(const Eigen::Vector3d& w) {
  const double theta = w.norm();
  if (theta < 1e-12) {
    // Second-order expansion keeps the chart smooth through zero.
    const Eigen::Matrix3d K = skew(w);
    return Eigen::Matrix3d::Identity() + K + 0.5 * K * K;
  }
  const Eigen::Vector3d axis = w / theta;
  return Eigen::AngleAxisd(theta, axis).toRotationMatrix();
}

Eigen::Vector3d axis_angle_from_rotation(const Eigen::Matrix3d& R) {
  const Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

Eigen::Matrix3d right_jacobian_so3(const Eigen::Vector3d& w) {
  const double theta = w.norm();
  const Eigen::Matrix3d K = skew(w);
  if (theta < 1e-6) {
    return Eigen::Matrix3d::Identity() - 0.5 * K + (1.0 / 6.0) * K * K;
  }
  const double t2 = theta * theta;
  const double a = (1.0 - std::cos(theta)) / t2;
  const double b = (theta - std::sin(theta)) / (t2 * theta);
  return Eigen::Matrix3d::Identity() - a * K + b * K * K;
}

Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up,
             const Eigen::Vector3d& fallback_up) {
  const Eigen::Vector3d f = (target - eye).normalized();
  Eigen::Vector3d u = up;
  if (std::abs(f.dot(u.normalized())) > 0.999) u = fallback_up;
  const Eigen::Vector3d x = f.cross(u).normalized();
  const Eigen::Vector3d y = f.cross(x);  // y-down image convention
  Pose pose;
  pose.R.row(0) = x;
  pose.R.row(1) = y;
  pose.R.row(2) = f;
  pose.t = -pose.R * eye;
  return pose;
}

}  // namespace pflrm::geom
