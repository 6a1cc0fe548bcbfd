// Command-line entry points: dataset generation, training, evaluation, and
// single-shot inference on unposed images.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pflrm/metrics.hpp"
#include "pflrm/renderer.hpp"
#include "pflrm/runconfig.hpp"
#include "pflrm/synth.hpp"
#include "pflrm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pflrm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInfeasible = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitCheckpointMismatch = 4;
constexpr int kExitInputMismatch = 5;

int cmd_gen_data(const std::string& out, int scenes, int views, double min_angle, int size,
                 std::uint64_t seed) {
  if (scenes < 1 || views < 1 || size < 1) {
    std::cerr << "gen-data: scenes, views and size must be positive\n";
    return 1;
  }
  const auto t0 = std::chrono::steady_clock::now();
  synth::DatasetConfig config;
  config.seed = seed;
  config.scenes = scenes;
  config.views = views;
  config.min_angle_deg = min_angle;
  config.image_size = size;
  try {
    synth::Dataset ds = synth::Dataset::generate(config);
    ds.write(out);
  } catch (const synth::InfeasibleViews& e) {
    std::cerr << "gen-data: " << e.what() << "\n";
    return kExitInfeasible;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "wrote " << scenes << " scenes (" << scenes * views << " views) to " << out
            << " in " << secs << " s\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_root,
              const std::string& out_dir, const std::string& resume,
              const std::vector<std::string>& overrides) {
  cli::RunConfig cfg = cli::RunConfig::from_file(config_path, overrides);
  if (!fs::exists(fs::path(data_root) / "dataset.json")) {
    std::cerr << "train: no dataset at " << data_root << "\n";
    return 1;
  }
  if (!resume.empty() && !fs::exists(resume)) {
    std::cerr << "train: resume checkpoint " << resume << " does not exist\n";
    return kExitCheckpointMismatch;
  }
  cfg.train.validate();
  synth::Dataset ds = synth::Dataset::load(data_root);
  model::Model m = model::Model::init(cfg.model, cfg.train.seed);
  fs::create_directories(out_dir);
  cfg.data.root = data_root;
  cfg.save((fs::path(out_dir) / "config.json").string());
  try {
    train::train(ds, m, cfg.train, out_dir, nullptr, resume);
  } catch (const train::TrainingDiverged& e) {
    std::cerr << "train: " << e.what() << " (batch dump: " << e.dump_path << ")\n";
    return kExitDiverged;
  }
  std::cout << "finished " << cfg.train.total_steps << " steps; checkpoint at "
            << (fs::path(out_dir) / "ckpt_final.pftn").string() << "\n";
  return kExitOk;
}

model::Model load_model_for(const std::string& checkpoint, const std::string& config_path,
                            cli::RunConfig* out_cfg) {
  std::string cfg_file = config_path;
  if (cfg_file.empty()) {
    const fs::path sibling = fs::path(checkpoint).parent_path() / "config.json";
    if (!fs::exists(sibling))
      throw Error("no config.json beside the checkpoint; pass --config");
    cfg_file = sibling.string();
  }
  cli::RunConfig cfg = cli::RunConfig::from_file(cfg_file, {});
  if (out_cfg) *out_cfg = cfg;
  return model::Model::load(cfg.model, checkpoint);
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path,
             const std::string& data_root, int views, std::uint64_t seed,
             const std::string& out_dir) {
  cli::RunConfig cfg;
  model::Model m = [&] {
    try {
      return load_model_for(checkpoint, config_path, &cfg);
    } catch (const Error& e) {
      std::cerr << "eval: " << e.what() << "\n";
      std::exit(kExitCheckpointMismatch);
    }
  }();
  synth::Dataset ds = synth::Dataset::load(data_root);
  metrics::EvalProtocol protocol;
  protocol.n_input_views = views;
  protocol.seed = seed;
  protocol.pnp = cfg.train.pnp.solve;
  metrics::EvalReport report = metrics::evaluate(m, ds, protocol);
  fs::create_directories(out_dir);
  report.write_json((fs::path(out_dir) / "report.json").string());
  report.write_csv((fs::path(out_dir) / "report.csv").string());
  std::cout << "scenes " << report.scene_count << "  R.err " << report.mean_rotation_deg
            << " deg  Acc@15 " << report.acc15 << "  Acc@30 " << report.acc30 << "  T.err "
            << report.mean_translation << "  PSNR(gt) " << report.psnr_gt << "  PSNR(pred) "
            << report.psnr_pred << "  PSNR(novel) " << report.psnr_novel << "  fail "
            << report.failure_rate << "\n";
  return kExitOk;
}

json pose_json(const geom::Pose& pose) {
  json j;
  std::vector<double> r(9);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r[i * 3 + k] = pose.R(i, k);
  j["rotation"] = r;
  j["translation"] = {pose.t.x(), pose.t.y(), pose.t.z()};
  return j;
}

int cmd_infer(const std::string& checkpoint, const std::string& config_path,
              const std::vector<std::string>& image_paths, const std::string& intrinsics_path,
              const std::string& out_dir, std::uint64_t seed) {
  cli::RunConfig cfg;
  model::Model m = [&] {
    try {
      return load_model_for(checkpoint, config_path, &cfg);
    } catch (const Error& e) {
      std::cerr << "infer: " << e.what() << "\n";
      std::exit(kExitCheckpointMismatch);
    }
  }();

  std::vector<Image> images;
  for (const auto& path : image_paths) {
    Image img = load_png(path);
    if (img.width != m.config().image_size || img.height != m.config().image_size) {
      std::cerr << "infer: " << path << " is " << img.width << "x" << img.height
                << ", model expects " << m.config().image_size << "\n";
      return kExitInputMismatch;
    }
    images.push_back(std::move(img));
  }
  if (images.empty() || images.size() > static_cast<std::size_t>(m.config().max_views)) {
    std::cerr << "infer: need 1.." << m.config().max_views << " images\n";
    return kExitInputMismatch;
  }

  std::ifstream intr_in(intrinsics_path);
  if (!intr_in) {
    std::cerr << "infer: cannot open intrinsics file " << intrinsics_path << "\n";
    return kExitInputMismatch;
  }
  json intr_json = json::parse(intr_in);
  auto parse_intr = [](const json& j) {
    geom::Intrinsics intr;
    intr.fx = j.at("fx");
    intr.fy = j.at("fy");
    intr.cx = j.at("cx");
    intr.cy = j.at("cy");
    intr.width = j.at("width");
    intr.height = j.at("height");
    intr.validate();
    return intr;
  };
  std::vector<geom::Intrinsics> intrs;
  if (intr_json.is_array()) {
    for (const auto& j : intr_json) intrs.push_back(parse_intr(j));
    if (intrs.size() != images.size()) {
      std::cerr << "infer: intrinsics count does not match image count\n";
      return kExitInputMismatch;
    }
  } else {
    intrs.assign(images.size(), parse_intr(intr_json));
  }

  fs::create_directories(out_dir);
  model::ModelOutput out = m.forward(images, intrs, 0);

  // Relative poses (reference identity) plus absolute canonical poses.
  std::vector<geom::Pose> abs_poses;
  if (m.config().ablation == model::AblationMode::NoPose || images.size() == 1) {
    abs_poses.assign(1, train::canonical_reference_pose());
  } else {
    pnp::SolveOptions opts = cfg.train.pnp.solve;
    opts.seed = seed;
    abs_poses = metrics::predict_poses(m, out, intrs[0], opts);
  }
  json poses = json::array();
  for (std::size_t v = 0; v < abs_poses.size(); ++v) {
    json j = pose_json(geom::relative_pose(abs_poses[0], abs_poses[v]));
    j["view"] = v;
    j["reference"] = v == 0;
    poses.push_back(j);
  }
  std::ofstream(fs::path(out_dir) / "poses.json") << poses.dump(2) << "\n";

  const int size = m.config().image_size;
  const int rays = m.config().ray_steps;
  for (std::size_t v = 0; v < images.size(); ++v) {
    const geom::Pose pose =
        v < abs_poses.size() ? abs_poses[v] : train::canonical_reference_pose();
    Image render = render::render_image(out.triplane, out.decoder, pose, intrs[v], size, rays);
    save_png((fs::path(out_dir) / ("render_view_" + std::to_string(v) + ".png")).string(),
             render);
  }

  // Turntable strip: 8 novel views orbiting the canonical frame.
  Image strip(size * 8, size);
  for (int k = 0; k < 8; ++k) {
    const double az = 2.0 * 3.14159265358979323846 * k / 8.0;
    const double el = 20.0 * 3.14159265358979323846 / 180.0;
    const Eigen::Vector3d eye(2.7 * std::sin(az) * std::cos(el), 2.7 * std::sin(el),
                              2.7 * std::cos(az) * std::cos(el));
    const geom::Pose pose = geom::look_at(eye, Eigen::Vector3d::Zero());
    Image view = render::render_image(out.triplane, out.decoder, pose, intrs[0], size, rays);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (int c = 0; c < 3; ++c) strip.at(y, k * size + x, c) = view.at(y, x, c);
  }
  save_png((fs::path(out_dir) / "turntable.png").string(), strip);

  ad::save_checkpoint((fs::path(out_dir) / "triplane.pftn").string(),
                      field::triplane_tensors(out.triplane, out.decoder));
  std::cout << "wrote poses, renders, turntable and triplane dump to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pose-free sparse-view reconstructor"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-view dataset");
  std::string gen_out;
  int gen_scenes = 20, gen_views = 5, gen_size = 64;
  double gen_angle = 45.0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--scenes", gen_scenes);
  gen->add_option("--views", gen_views);
  gen->add_option("--min-angle-deg", gen_angle);
  gen->add_option("--size", gen_size);
  gen->add_option("--seed", gen_seed);

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  tr->allow_extras();
  std::string tr_config, tr_data, tr_out, tr_resume;
  tr->add_option("--config", tr_config);
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--out", tr_out)->required();
  tr->add_option("--resume", tr_resume);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_config, ev_data, ev_out;
  int ev_views = 4;
  std::uint64_t ev_seed = 0;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--config", ev_config);
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--views", ev_views);
  ev->add_option("--seed", ev_seed);
  ev->add_option("--out", ev_out)->required();

  // infer
  auto* in = app.add_subcommand("infer", "reconstruct from unposed images");
  std::string in_ckpt, in_config, in_intr, in_out;
  std::vector<std::string> in_images;
  std::uint64_t in_seed = 0;
  in->add_option("--checkpoint", in_ckpt)->required();
  in->add_option("--config", in_config);
  in->add_option("--intrinsics", in_intr)->required();
  in->add_option("--out", in_out)->required();
  in->add_option("--seed", in_seed);
  in->add_option("images", in_images)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_scenes, gen_views, gen_angle, gen_size, gen_seed);
    if (tr->parsed())
      return cmd_train(tr_config, tr_data, tr_out, tr_resume,
                       cli::collect_overrides(tr->remaining()));
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_config, ev_data, ev_views, ev_seed, ev_out);
    if (in->parsed()) return cmd_infer(in_ckpt, in_config, in_images, in_intr, in_out, in_seed);
  } catch (const synth::InfeasibleViews& e) {
    std::cerr << e.what() << "\n";
    return kExitInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
