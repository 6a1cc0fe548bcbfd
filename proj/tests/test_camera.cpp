#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "pflrm/camera.hpp"

using namespace pflrm;
using geom::Intrinsics;
using geom::Pose;

namespace {

Pose random_pose(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  Pose pose;
  pose.R = q.toRotationMatrix();
  pose.t = Eigen::Vector3d(n(rng), n(rng), n(rng));
  return pose;
}

Intrinsics test_intr() {
  Intrinsics intr;
  intr.fx = 76.8;
  intr.fy = 76.8;
  intr.cx = 32.0;
  intr.cy = 32.0;
  intr.width = 64;
  intr.height = 64;
  return intr;
}

}  // namespace

TEST_CASE("project trivial cases") {
  Intrinsics unit;
  unit.fx = unit.fy = 1.0;
  unit.cx = unit.cy = 0.0;
  unit.width = unit.height = 2;
  Eigen::Vector2d uv = geom::project(Pose::identity(), unit, {0, 0, 2});
  CHECK(uv.x() == doctest::Approx(0));
  CHECK(uv.y() == doctest::Approx(0));

  Intrinsics intr;
  intr.fx = intr.fy = 100.0;
  intr.cx = intr.cy = 128.0;
  intr.width = intr.height = 256;
  uv = geom::project(Pose::identity(), intr, {1, 1, 2});
  CHECK(uv.x() == doctest::Approx(178));
  CHECK(uv.y() == doctest::Approx(178));
}

TEST_CASE("project matches the homogeneous-matrix pipeline") {
  std::mt19937_64 rng(101);
  const Intrinsics intr = test_intr();
  int tested = 0;
  while (tested < 50) {
    Pose pose = random_pose(rng);
    Eigen::Vector3d p = Eigen::Vector3d::Random();
    if (pose.apply(p).z() <= 0.1) continue;
    const Eigen::Vector2d mine = geom::project(pose, intr, p);
    const Eigen::Vector2d ref =
        oracle::project_homogeneous(pose.R, pose.t, intr.fx, intr.fy, intr.cx, intr.cy, p);
    CHECK((mine - ref).norm() < 1e-9);
    ++tested;
  }
}

TEST_CASE("project throws behind-camera with the depth attached") {
  const Intrinsics intr = test_intr();
  try {
    geom::project(Pose::identity(), intr, {0, 0, -2});
    FAIL("expected BehindCameraError");
  } catch (const geom::BehindCameraError& e) {
    CHECK(e.depth == doctest::Approx(-2.0));
  }
}

TEST_CASE("ray through the principal point is the camera forward axis") {
  std::mt19937_64 rng(103);
  const Intrinsics intr = test_intr();
  Pose pose = random_pose(rng);
  geom::Ray ray = geom::ray_for_pixel(pose, intr, intr.cx, intr.cy);
  const Eigen::Vector3d forward = pose.R.row(2);
  CHECK((ray.direction - forward).norm() < 1e-12);
}

TEST_CASE("project-ray roundtrip over random pixels") {
  std::mt19937_64 rng(107);
  const Intrinsics intr = test_intr();
  std::uniform_real_distribution<double> px(0.0, 64.0);
  for (int i = 0; i < 100; ++i) {
    Pose pose = random_pose(rng);
    const double u = px(rng), v = px(rng);
    geom::Ray ray = geom::ray_for_pixel(pose, intr, u, v);
    for (double s : {0.5, 2.0, 7.5}) {
      const Eigen::Vector2d uv = geom::project(pose, intr, ray.origin + s * ray.direction);
      CHECK(std::abs(uv.x() - u) < 1e-6);
      CHECK(std::abs(uv.y() - v) < 1e-6);
    }
  }
}

TEST_CASE("rays from one camera share the camera center exactly") {
  std::mt19937_64 rng(109);
  const Intrinsics intr = test_intr();
  Pose pose = random_pose(rng);
  geom::Ray a = geom::ray_for_pixel(pose, intr, 3.0, 4.0);
  geom::Ray b = geom::ray_for_pixel(pose, intr, 60.0, 10.0);
  CHECK((a.origin - b.origin).norm() == 0.0);  // both are exactly -R^T t
  CHECK((a.origin - pose.camera_center()).norm() == 0.0);
}

TEST_CASE("relative pose identities") {
  std::mt19937_64 rng(113);
  Pose y = random_pose(rng);
  Pose rel = geom::relative_pose(y, y);
  CHECK((rel.R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(rel.t.norm() < 1e-12);

  Pose other = random_pose(rng);
  Pose from_identity = geom::relative_pose(Pose::identity(), other);
  CHECK((from_identity.R - other.R).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((from_identity.t - other.t).norm() < 1e-12);

  for (int i = 0; i < 20; ++i) {
    Pose ref = random_pose(rng);
    Pose target = random_pose(rng);
    Pose rel2 = geom::relative_pose(ref, target);
    Pose back = geom::compose(rel2, ref);
    CHECK((back.R - target.R).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((back.t - target.t).norm() < 1e-9);
  }
}

TEST_CASE("rotation error trivial and constructed cases") {
  std::mt19937_64 rng(127);
  Pose a = random_pose(rng);
  CHECK(geom::rotation_error_deg(a.R, a.R) == doctest::Approx(0.0));

  const Eigen::Vector3d axis = Eigen::Vector3d(0.3, -1.2, 0.5).normalized();
  const Eigen::Matrix3d spun =
      a.R * Eigen::AngleAxisd(30.0 * M_PI / 180.0, axis).toRotationMatrix();
  CHECK(geom::rotation_error_deg(a.R, spun) == doctest::Approx(30.0).epsilon(1e-9));
}

TEST_CASE("rotation error agrees with the quaternion oracle") {
  std::mt19937_64 rng(131);
  for (int i = 0; i < 100; ++i) {
    Pose a = random_pose(rng);
    Pose b = random_pose(rng);
    const double mine = geom::rotation_error_deg(a.R, b.R);
    const double ref = oracle::quaternion_angle_deg(a.R, b.R);
    CHECK(std::abs(mine - ref) < 1e-6);
  }
}

TEST_CASE("rotation error is bi-invariant") {
  std::mt19937_64 rng(137);
  for (int i = 0; i < 20; ++i) {
    Pose a = random_pose(rng);
    Pose b = random_pose(rng);
    Pose q = random_pose(rng);
    const double base = geom::rotation_error_deg(a.R, b.R);
    const double moved = geom::rotation_error_deg(q.R * a.R, q.R * b.R);
    CHECK(std::abs(base - moved) < 1e-6);
  }
}

TEST_CASE("translation error is a metric on translations") {
  std::mt19937_64 rng(139);
  Pose a = random_pose(rng);
  Pose b = random_pose(rng);
  CHECK(geom::translation_error(a.t, a.t) == 0.0);
  CHECK(geom::translation_error(a.t, b.t) > 0.0);
  CHECK(geom::translation_error(a.t, b.t) == doctest::Approx(geom::translation_error(b.t, a.t)));
}

TEST_CASE("pose composition is associative") {
  std::mt19937_64 rng(149);
  for (int i = 0; i < 20; ++i) {
    Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    Pose left = geom::compose(geom::compose(a, b), c);
    Pose right = geom::compose(a, geom::compose(b, c));
    CHECK((left.R - right.R).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((left.t - right.t).norm() < 1e-9);
  }
}

TEST_CASE("axis-angle chart roundtrip and right Jacobian") {
  std::mt19937_64 rng(151);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    const Eigen::Vector3d w(n(rng), n(rng), n(rng));
    const Eigen::Matrix3d R = geom::rotation_from_axis_angle(w);
    CHECK(std::abs(R.determinant() - 1.0) < 1e-12);
    const Eigen::Vector3d back = geom::axis_angle_from_rotation(R);
    const Eigen::Matrix3d R2 = geom::rotation_from_axis_angle(back);
    CHECK((R - R2).cwiseAbs().maxCoeff() < 1e-9);

    // d(R(w) p)/dw == -R [p]x Jr(w), checked by finite differences.
    const Eigen::Vector3d p(n(rng), n(rng), n(rng));
    const Eigen::Matrix3d analytic = -R * geom::skew(p) * geom::right_jacobian_so3(w);
    const double h = 1e-6;
    for (int axis = 0; axis < 3; ++axis) {
      Eigen::Vector3d wp = w, wm = w;
      wp[axis] += h;
      wm[axis] -= h;
      const Eigen::Vector3d numeric =
          (geom::rotation_from_axis_angle(wp) * p - geom::rotation_from_axis_angle(wm) * p) /
          (2 * h);
      CHECK((analytic.col(axis) - numeric).norm() < 1e-6);
    }
  }
}

TEST_CASE("look_at produces valid poses aimed at the target") {
  std::mt19937_64 rng(157);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    const Eigen::Vector3d eye = 2.7 * Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
    Pose pose = geom::look_at(eye, Eigen::Vector3d::Zero());
    CHECK(pose.is_valid(1e-9));
    // The origin lies on the optical axis in front of the camera.
    const Eigen::Vector3d origin_cam = pose.apply(Eigen::Vector3d::Zero());
    CHECK(origin_cam.x() == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(origin_cam.y() == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(origin_cam.z() == doctest::Approx(2.7));
    CHECK((pose.camera_center() - eye).norm() < 1e-9);
  }
}

TEST_CASE("intrinsics validation") {
  Intrinsics intr = test_intr();
  CHECK_NOTHROW(intr.validate());
  intr.fx = -1.0;
  CHECK_THROWS_AS(intr.validate(), Error);
  intr = test_intr();
  intr.cx = 1000.0;
  CHECK_THROWS_AS(intr.validate(), Error);
}

TEST_CASE("pose validity checks orthonormality and handedness") {
  Pose pose;
  CHECK(pose.is_valid());
  pose.R(0, 0) = -1.0;  // reflection
  CHECK(!pose.is_valid());
}
