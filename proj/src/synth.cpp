#include "pflrm/synth.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "pflrm/renderer.hpp"

namespace pflrm::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr double kPi = 3.14159265358979323846;
// Primitives stay inside this radius so the object remains in frame and in
// the triplane box after reference-view canonicalization.
constexpr double kPlacementBound = 0.55;
}  // namespace

double Primitive::signed_distance(const Eigen::Vector3d& x) const {
  if (kind == Kind::Sphere) return (x - center).norm() - radius;
  const Eigen::Vector3d d = (x - center).cwiseAbs() - half_extents;
  const Eigen::Vector3d outside = d.cwiseMax(0.0);
  const double inside = std::min(d.maxCoeff(), 0.0);
  return outside.norm() + inside;
}

void SceneSpec::field(const Eigen::Vector3d& x, double& sigma, Eigen::Vector3d& color) const {
  sigma = 0.0;
  color = Eigen::Vector3d::Ones();
  if (primitives.empty()) return;
  const Primitive* nearest = &primitives[0];
  double best = nearest->signed_distance(x);
  for (std::size_t i = 1; i < primitives.size(); ++i) {
    const double sd = primitives[i].signed_distance(x);
    if (sd < best) {
      best = sd;
      nearest = &primitives[i];
    }
  }
  sigma = nearest->density_scale / (1.0 + std::exp(kFieldFalloff * best));
  color = nearest->rgb;
}

void SceneSpec::validate() const {
  if (primitives.empty() || primitives.size() > 5)
    throw Error("SceneSpec: expected 1-5 primitives, got " + std::to_string(primitives.size()));
  for (const auto& p : primitives) {
    const Eigen::Vector3d ext =
        p.kind == Primitive::Kind::Sphere ? Eigen::Vector3d::Constant(p.radius) : p.half_extents;
    for (int a = 0; a < 3; ++a)
      if (std::abs(p.center[a]) + ext[a] > 1.0)
        throw Error("SceneSpec: primitive exceeds the unit box");
  }
}

SceneSpec generate_scene(std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0xabcdef));
  std::uniform_int_distribution<int> count_dist(2, 5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SceneSpec spec;
  spec.seed = seed;
  const int count = count_dist(rng);
  for (int i = 0; i < count; ++i) {
    Primitive p;
    p.kind = unit(rng) < 0.5 ? Primitive::Kind::Sphere : Primitive::Kind::Box;
    if (p.kind == Primitive::Kind::Sphere) {
      p.radius = 0.2 + 0.15 * unit(rng);
      for (int a = 0; a < 3; ++a) {
        const double room = kPlacementBound - p.radius;
        p.center[a] = (2.0 * unit(rng) - 1.0) * std::max(room, 0.0);
      }
    } else {
      for (int a = 0; a < 3; ++a) p.half_extents[a] = 0.2 + 0.12 * unit(rng);
      for (int a = 0; a < 3; ++a) {
        const double room = kPlacementBound - p.half_extents[a];
        p.center[a] = (2.0 * unit(rng) - 1.0) * std::max(room, 0.0);
      }
    }
    for (int c = 0; c < 3; ++c) p.rgb[c] = 0.08 + 0.8 * unit(rng);
    p.density_scale = 25.0 + 35.0 * unit(rng);
    spec.primitives.push_back(p);
  }
  spec.validate();
  return spec;
}

ViewSet sample_viewset(std::uint64_t seed, int n, double min_angle_deg, int image_size) {
  if (n < 1) throw Error("sample_viewset: need at least one view");
  std::mt19937_64 rng(mix_seed(seed, 0x5eed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double cos_min = std::cos(min_angle_deg * kPi / 180.0);

  std::vector<Eigen::Vector3d> dirs;
  int rejections = 0;
  while (static_cast<int>(dirs.size()) < n) {
    // Uniform direction on the sphere.
    const double z = 2.0 * unit(rng) - 1.0;
    const double phi = 2.0 * kPi * unit(rng);
    const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Eigen::Vector3d d(s * std::cos(phi), s * std::sin(phi), z);
    bool ok = true;
    for (const auto& other : dirs)
      if (d.dot(other) > cos_min) {
        ok = false;
        break;
      }
    if (ok) {
      dirs.push_back(d);
    } else if (++rejections >= 10000) {
      throw InfeasibleViews("sample_viewset: could not place " + std::to_string(n) +
                            " views with min separation " + std::to_string(min_angle_deg) +
                            " deg after 10000 rejections");
    }
  }

  ViewSet vs;
  vs.intrinsics.fx = vs.intrinsics.fy = 1.2 * image_size;
  vs.intrinsics.cx = vs.intrinsics.cy = 0.5 * image_size;
  vs.intrinsics.width = vs.intrinsics.height = image_size;
  for (const auto& d : dirs) {
    const double radius = 2.2 + unit(rng);  // [2.2, 3.2]
    vs.radii.push_back(radius);
    vs.poses.push_back(geom::look_at(radius * d, Eigen::Vector3d::Zero()));
  }
  return vs;
}

Image render_groundtruth_view(const SceneSpec& spec, const geom::Pose& pose,
                              const geom::Intrinsics& intr, int size, int ray_steps) {
  Image img(size, size);
  geom::Intrinsics local = intr;
  local.width = size;
  local.height = size;
  parallel_for(
      static_cast<std::size_t>(size),
      [&](std::size_t lo, std::size_t hi) {
        std::vector<double> sigma(ray_steps);
        std::vector<Eigen::Vector3d> color(ray_steps);
        for (std::size_t y = lo; y < hi; ++y) {
          for (int x = 0; x < size; ++x) {
            const geom::Ray ray = geom::ray_for_pixel(pose, local, x + 0.5, y + 0.5);
            const render::RaySamples samples = render::march(ray, ray_steps);
            Eigen::Vector3d c = Eigen::Vector3d::Ones();
            if (samples.valid) {
              for (int i = 0; i < ray_steps; ++i) spec.field(samples.points[i], sigma[i], color[i]);
              c = render::composite(sigma, color, samples.deltas, samples.points).color;
            }
            for (int ch = 0; ch < 3; ++ch) img.at(static_cast<int>(y), x, ch) = c[ch];
          }
        }
      },
      4);
  return img;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

json pose_to_json(const geom::Pose& pose, const geom::Intrinsics& intr) {
  json j;
  std::vector<double> r(9);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r[i * 3 + k] = pose.R(i, k);
  j["rotation"] = r;
  j["translation"] = {pose.t.x(), pose.t.y(), pose.t.z()};
  j["fx"] = intr.fx;
  j["fy"] = intr.fy;
  j["cx"] = intr.cx;
  j["cy"] = intr.cy;
  j["width"] = intr.width;
  j["height"] = intr.height;
  return j;
}

void pose_from_json(const json& j, geom::Pose& pose, geom::Intrinsics& intr) {
  const auto r = j.at("rotation").get<std::vector<double>>();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) pose.R(i, k) = r.at(i * 3 + k);
  const auto t = j.at("translation").get<std::vector<double>>();
  pose.t = Eigen::Vector3d(t.at(0), t.at(1), t.at(2));
  intr.fx = j.at("fx").get<double>();
  intr.fy = j.at("fy").get<double>();
  intr.cx = j.at("cx").get<double>();
  intr.cy = j.at("cy").get<double>();
  intr.width = j.at("width").get<int>();
  intr.height = j.at("height").get<int>();
}

json primitive_to_json(const Primitive& p) {
  json j;
  j["kind"] = p.kind == Primitive::Kind::Sphere ? "sphere" : "box";
  j["center"] = {p.center.x(), p.center.y(), p.center.z()};
  j["radius"] = p.radius;
  j["half_extents"] = {p.half_extents.x(), p.half_extents.y(), p.half_extents.z()};
  j["rgb"] = {p.rgb.x(), p.rgb.y(), p.rgb.z()};
  j["density_scale"] = p.density_scale;
  return j;
}

Primitive primitive_from_json(const json& j) {
  Primitive p;
  p.kind = j.at("kind").get<std::string>() == "sphere" ? Primitive::Kind::Sphere
                                                       : Primitive::Kind::Box;
  const auto c = j.at("center").get<std::vector<double>>();
  p.center = Eigen::Vector3d(c.at(0), c.at(1), c.at(2));
  p.radius = j.at("radius").get<double>();
  const auto h = j.at("half_extents").get<std::vector<double>>();
  p.half_extents = Eigen::Vector3d(h.at(0), h.at(1), h.at(2));
  const auto rgb = j.at("rgb").get<std::vector<double>>();
  p.rgb = Eigen::Vector3d(rgb.at(0), rgb.at(1), rgb.at(2));
  p.density_scale = j.at("density_scale").get<double>();
  return p;
}

}  // namespace

Dataset Dataset::generate(const DatasetConfig& config) {
  Dataset ds;
  ds.config = config;
  ds.scenes.resize(config.scenes);
  for (int idx = 0; idx < config.scenes; ++idx) {
    Scene& scene = ds.scenes[idx];
    const std::uint64_t scene_seed = mix_seed(config.seed, static_cast<std::uint64_t>(idx));
    scene.spec = generate_scene(scene_seed);
    scene.views =
        sample_viewset(scene_seed, config.views, config.min_angle_deg, config.image_size);
    scene.images.reserve(config.views);
    for (int v = 0; v < config.views; ++v)
      scene.images.push_back(render_groundtruth_view(scene.spec, scene.views.poses[v],
                                                     scene.views.intrinsics, config.image_size,
                                                     config.ray_steps));
  }
  return ds;
}

void Dataset::write(const std::string& root) const {
  fs::create_directories(root);
  json global;
  global["seed"] = config.seed;
  global["scenes"] = config.scenes;
  global["views"] = config.views;
  global["min_angle_deg"] = config.min_angle_deg;
  global["image_size"] = config.image_size;
  global["ray_steps"] = config.ray_steps;
  std::ofstream(fs::path(root) / "dataset.json") << global.dump(2) << "\n";

  for (std::size_t idx = 0; idx < scenes.size(); ++idx) {
    const Scene& scene = scenes[idx];
    const fs::path dir = fs::path(root) / ("scene_" + std::to_string(idx));
    fs::create_directories(dir);
    json manifest;
    manifest["seed"] = scene.spec.seed;
    json cams = json::array();
    for (std::size_t v = 0; v < scene.views.poses.size(); ++v) {
      json cam = pose_to_json(scene.views.poses[v], scene.views.intrinsics);
      cam["radius"] = scene.views.radii[v];
      cams.push_back(cam);
    }
    manifest["cameras"] = cams;
    json prims = json::array();
    for (const auto& p : scene.spec.primitives) prims.push_back(primitive_to_json(p));
    manifest["primitives"] = prims;
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
    for (std::size_t v = 0; v < scene.images.size(); ++v)
      save_png((dir / ("view_" + std::to_string(v) + ".png")).string(), scene.images[v]);
  }
}

Dataset Dataset::load(const std::string& root) {
  std::ifstream global_in(fs::path(root) / "dataset.json");
  if (!global_in) throw Error("Dataset::load: missing dataset.json under " + root);
  json global = json::parse(global_in);
  Dataset ds;
  ds.config.seed = global.at("seed").get<std::uint64_t>();
  ds.config.scenes = global.at("scenes").get<int>();
  ds.config.views = global.at("views").get<int>();
  ds.config.min_angle_deg = global.at("min_angle_deg").get<double>();
  ds.config.image_size = global.at("image_size").get<int>();
  ds.config.ray_steps = global.at("ray_steps").get<int>();

  ds.scenes.resize(ds.config.scenes);
  for (int idx = 0; idx < ds.config.scenes; ++idx) {
    Scene& scene = ds.scenes[idx];
    const fs::path dir = fs::path(root) / ("scene_" + std::to_string(idx));
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw Error("Dataset::load: missing manifest for scene " + std::to_string(idx));
    json manifest = json::parse(mf);
    scene.spec.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& pj : manifest.at("primitives"))
      scene.spec.primitives.push_back(primitive_from_json(pj));
    for (const auto& cj : manifest.at("cameras")) {
      geom::Pose pose;
      pose_from_json(cj, pose, scene.views.intrinsics);
      scene.views.poses.push_back(pose);
      scene.views.radii.push_back(cj.value("radius", 0.0));
    }
    for (int v = 0; v < ds.config.views; ++v)
      scene.images.push_back(
          load_png((dir / ("view_" + std::to_string(v) + ".png")).string()));
  }
  return ds;
}

}  // namespace pflrm::synth
