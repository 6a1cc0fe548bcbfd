#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "pflrm/camera.hpp"
#include "pflrm/image.hpp"

namespace pflrm::synth {

/// Analytic scene primitive. The density field is
///   sigma(x) = density_scale * sigmoid(-k_falloff * signed_distance(x))
/// of the nearest primitive, whose RGB is the color; k_falloff = 40.
struct Primitive {
  enum class Kind { Sphere, Box } kind = Kind::Sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 0.3;                                       // spheres
  Eigen::Vector3d half_extents = Eigen::Vector3d(0.3, 0.3, 0.3);  // boxes
  Eigen::Vector3d rgb = Eigen::Vector3d(0.5, 0.5, 0.5);
  double density_scale = 40.0;

  double signed_distance(const Eigen::Vector3d& x) const;
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  std::uint64_t seed = 0;

  /// Analytic density/color field; empty scenes evaluate to free space.
  void field(const Eigen::Vector3d& x, double& sigma, Eigen::Vector3d& color) const;
  void validate() const;  // 1-5 primitives, all inside [-1,1]^3
};

constexpr double kFieldFalloff = 40.0;

/// Deterministic scene from seed: 2-5 primitives, all inside [-1,1]^3.
SceneSpec generate_scene(std::uint64_t seed);

struct ViewSet {
  std::vector<geom::Pose> poses;  // world-to-camera, looking at the origin
  std::vector<double> radii;
  geom::Intrinsics intrinsics;    // shared across views
};

class InfeasibleViews : public Error {
 public:
  using Error::Error;
};

/// Rejection-samples N camera directions with pairwise angular separation
/// >= min_angle_deg; cameras look at the origin from radius in [2.2, 3.2].
/// Throws InfeasibleViews after 10^4 rejected draws.
ViewSet sample_viewset(std::uint64_t seed, int n, double min_angle_deg, int image_size);

/// Full-image ground-truth render of the analytic field (Eq. 3 compositing
/// with the analytic sigma/color in place of the decoder).
Image render_groundtruth_view(const SceneSpec& spec, const geom::Pose& pose,
                              const geom::Intrinsics& intr, int size, int ray_steps);

struct DatasetConfig {
  std::uint64_t seed = 0;
  int scenes = 1;
  int views = 5;
  double min_angle_deg = 45.0;
  int image_size = 64;
  int ray_steps = 64;
};

struct Scene {
  SceneSpec spec;
  ViewSet views;
  std::vector<Image> images;
};

/// In-memory dataset; a pure function of its config.
struct Dataset {
  DatasetConfig config;
  std::vector<Scene> scenes;

  static Dataset generate(const DatasetConfig& config);
  static Dataset load(const std::string& root);
  void write(const std::string& root) const;
};

}  // namespace pflrm::synth
