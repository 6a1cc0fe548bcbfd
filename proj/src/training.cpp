#include "pflrm/training.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "pflrm/ops.hpp"

namespace pflrm::train {

namespace fs = std::filesystem;
using ad::Tensor;
using nlohmann::json;

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void TrainConfig::validate() const {
  if (warmup_steps > total_steps)
    throw Error("TrainConfig: warmup steps exceed total steps");
  if (total_steps < 0 || batch_size < 1 || crop < 1 || n_input_views < 1)
    throw Error("TrainConfig: invalid step/batch/crop/view settings");
}

geom::Pose canonical_reference_pose() {
  return geom::look_at(Eigen::Vector3d(0, 0, 2.7), Eigen::Vector3d::Zero());
}

geom::Pose canonicalize(const geom::Pose& world_pose, const geom::Pose& reference_world_pose) {
  // world' = C0^{-1} ∘ Y_ref applied to world; pose in world' is Y ∘ G^{-1}.
  return geom::compose(geom::relative_pose(reference_world_pose, world_pose),
                       canonical_reference_pose());
}

SceneBatch make_batch(const synth::Scene& scene, int scene_index, int n_input_views, int crop,
                      std::uint64_t seed) {
  const int total_views = static_cast<int>(scene.views.poses.size());
  if (total_views < n_input_views + 1)
    throw Error("make_batch: scene has " + std::to_string(total_views) + " views, need " +
                std::to_string(n_input_views + 1));
  std::mt19937_64 rng(mix_seed(seed, 0xbe7c + static_cast<std::uint64_t>(scene_index)));
  std::vector<int> order(total_views);
  for (int i = 0; i < total_views; ++i) order[i] = i;
  for (int i = total_views - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }

  SceneBatch batch;
  batch.scene_index = scene_index;
  const geom::Pose& ref_world = scene.views.poses[order[0]];
  for (int v = 0; v < n_input_views; ++v) {
    const int idx = order[v];
    batch.view_indices.push_back(idx);
    batch.images.push_back(scene.images[idx]);
    batch.intrs.push_back(scene.views.intrinsics);
    batch.gt_poses.push_back(canonicalize(scene.views.poses[idx], ref_world));
  }
  const int heldout = order[n_input_views];
  batch.view_indices.push_back(heldout);
  batch.heldout_image = scene.images[heldout];
  batch.heldout_pose = canonicalize(scene.views.poses[heldout], ref_world);

  const int size = scene.views.intrinsics.width;
  std::uniform_int_distribution<int> offset(0, std::max(size - crop, 0));
  for (int v = 0; v < n_input_views + 1; ++v)
    batch.crops.push_back(render::CropRect{offset(rng), offset(rng), crop, crop});
  return batch;
}

Tensor rendering_loss(const Tensor& pred, const Tensor& gt, double gamma_l2, double gamma_lpips) {
  if (pred.shape() != gt.shape())
    throw ShapeError("rendering_loss: shape mismatch " + ad::shape_str(pred.shape()) + " vs " +
                     ad::shape_str(gt.shape()));
  (void)gamma_lpips;  // perceptual slot kept for weight bookkeeping; term is 0
  return ad::mul(ad::mean(ad::square(ad::sub(pred, gt))), gamma_l2);
}

std::pair<Tensor, Tensor> point_losses(const Tensor& points, const Tensor& alphas,
                                       const Tensor& xbar, const Tensor& taubar) {
  if (points.shape() != xbar.shape())
    throw ShapeError("point_losses: points " + ad::shape_str(points.shape()) + " vs xbar " +
                     ad::shape_str(xbar.shape()));
  if (alphas.shape() != taubar.shape())
    throw ShapeError("point_losses: alphas " + ad::shape_str(alphas.shape()) + " vs taubar " +
                     ad::shape_str(taubar.shape()));
  Tensor l_p = ad::sum(ad::square(ad::sub(points, xbar)));
  Tensor l_alpha = ad::sum(ad::square(ad::sub(alphas, ad::add(ad::neg(taubar), 1.0))));
  return {l_p, l_alpha};
}

namespace {

Tensor crop_to_tensor(const Image& img, const render::CropRect& crop) {
  std::vector<double> data(static_cast<std::size_t>(crop.width) * crop.height * 3);
  std::size_t i = 0;
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x)
      for (int c = 0; c < 3; ++c) data[i++] = img.at(crop.y0 + y, crop.x0 + x, c);
  return Tensor::from({static_cast<std::size_t>(crop.width) * crop.height, 3}, std::move(data));
}

/// Detached expected point / final transmittance along patch-center rays
/// marched from the ground-truth pose.
void patch_ray_targets(const model::ModelOutput& out, const geom::Pose& gt_pose,
                       const geom::Intrinsics& intr, std::size_t view, int ray_steps,
                       Tensor& xbar, Tensor& taubar) {
  ad::NoGrad guard;
  const auto& centers = out.centers[view];
  std::vector<render::RaySamples> rays;
  rays.reserve(centers.size());
  for (const auto& q : centers)
    rays.push_back(render::march(geom::ray_for_pixel(gt_pose, intr, q.x(), q.y()), ray_steps));
  render::BatchRender render = render::render_rays(out.triplane, out.decoder, rays);
  xbar = render.xbar.detach();
  taubar = render.taubar.detach();
}

}  // namespace

TotalLoss total_loss(const model::Model& m, const SceneBatch& batch, const LossWeights& weights,
                     const pnp::McOptions& pnp_opts, int ray_steps, McCache* cache) {
  const std::size_t n = batch.images.size();
  model::ModelOutput out = m.forward(batch.images, batch.intrs, 0);

  TotalLoss result;

  // Rendering term: crops of every input view plus the held-out view, all at
  // ground-truth poses, gathered into one buffer so the loss is the mean over
  // every supervised value.
  std::vector<Tensor> pred_parts, gt_parts;
  for (std::size_t v = 0; v < n; ++v) {
    render::BatchRender r = render::render_crop(out.triplane, out.decoder, batch.gt_poses[v],
                                                batch.intrs[v], batch.crops[v], ray_steps);
    pred_parts.push_back(r.colors);
    gt_parts.push_back(crop_to_tensor(batch.images[v], batch.crops[v]));
  }
  {
    render::BatchRender r = render::render_crop(out.triplane, out.decoder, batch.heldout_pose,
                                                batch.intrs[0], batch.crops[n], ray_steps);
    pred_parts.push_back(r.colors);
    gt_parts.push_back(crop_to_tensor(batch.heldout_image, batch.crops[n]));
  }
  Tensor l_c = rendering_loss(ad::concat(pred_parts, 0), ad::concat(gt_parts, 0),
                              weights.render_l2, weights.render_lpips);

  Tensor loss = l_c;
  result.breakdown.l_c = l_c.item();

  const auto mode = m.config().ablation;
  if (mode != model::AblationMode::NoPose) {
    // Point/opacity distillation against the rendered geometry.
    std::vector<Tensor> points_all, alphas_all, xbar_all, taubar_all;
    for (std::size_t v = 0; v < n; ++v) {
      Tensor xbar, taubar;
      patch_ray_targets(out, batch.gt_poses[v], batch.intrs[v], v, ray_steps, xbar, taubar);
      points_all.push_back(out.points[v]);
      alphas_all.push_back(out.alphas[v]);
      xbar_all.push_back(xbar);
      taubar_all.push_back(taubar);
    }
    auto [l_p_raw, l_alpha_raw] =
        point_losses(ad::concat(points_all, 0), ad::concat(alphas_all, 0),
                     ad::concat(xbar_all, 0), ad::concat(taubar_all, 0));
    Tensor l_p = ad::mul(l_p_raw, weights.point);
    Tensor l_alpha = ad::mul(l_alpha_raw, weights.alpha);
    result.breakdown.l_p = l_p.item();
    result.breakdown.l_alpha = l_alpha.item();
    loss = ad::add(loss, ad::add(l_p, l_alpha));
  }

  // Pose term over source views (the reference defines the frame).
  if (weights.pose > 0.0 && n > 1) {
    Tensor l_y_sum;
    if (mode == model::AblationMode::DiffPnp) {
      for (std::size_t v = 1; v < n; ++v) {
        Tensor beta = ad::mul(out.alphas[v], out.confs[v]);
        pnp::McOptions opts = pnp_opts;
        opts.solve.seed = mix_seed(pnp_opts.solve.seed, v);
        opts.amis.seed = mix_seed(pnp_opts.amis.seed, v);
        const pnp::McSampleSet* frozen = nullptr;
        if (cache) {
          auto it = cache->find(v);
          if (it != cache->end()) frozen = &it->second;
        }
        pnp::McResult mc = pnp::mc_pose_loss(out.points[v], beta, out.centers[v], batch.intrs[v],
                                             batch.gt_poses[v], opts, frozen);
        if (cache && !frozen) (*cache)[v] = mc.samples;
        l_y_sum = l_y_sum.defined() ? ad::add(l_y_sum, mc.loss) : mc.loss;
      }
    } else if (mode == model::AblationMode::MlpPoseCls ||
               mode == model::AblationMode::MlpPosePatch) {
      for (std::size_t v = 1; v < n; ++v) {
        const Eigen::Quaterniond gt_q(batch.gt_poses[v].R);
        // Resolve the double cover toward the prediction.
        const double* qd = out.pose_quats[v].data();
        const double dot =
            gt_q.w() * qd[0] + gt_q.x() * qd[1] + gt_q.y() * qd[2] + gt_q.z() * qd[3];
        const double sign = dot >= 0.0 ? 1.0 : -1.0;
        Tensor gt_quat = Tensor::from(
            {4}, {sign * gt_q.w(), sign * gt_q.x(), sign * gt_q.y(), sign * gt_q.z()});
        Tensor gt_t = Tensor::from({3}, {batch.gt_poses[v].t.x(), batch.gt_poses[v].t.y(),
                                         batch.gt_poses[v].t.z()});
        Tensor term = ad::add(ad::sum(ad::square(ad::sub(out.pose_quats[v], gt_quat))),
                              ad::sum(ad::square(ad::sub(out.pose_trans[v], gt_t))));
        l_y_sum = l_y_sum.defined() ? ad::add(l_y_sum, term) : term;
      }
    }
    if (l_y_sum.defined()) {
      Tensor l_y = ad::mul(l_y_sum, weights.pose);
      result.breakdown.l_y = l_y.item();
      loss = ad::add(loss, l_y);
    }
  }

  result.loss = loss;
  result.breakdown.total = loss.item();
  return result;
}

// ---------------------------------------------------------------------------
// Optimizer loop

double lr_at_step(const TrainConfig& config, int step) {
  if (config.warmup_steps > 0 && step < config.warmup_steps)
    return config.lr_peak * static_cast<double>(step + 1) /
           static_cast<double>(config.warmup_steps);
  const int decay_span = std::max(config.total_steps - config.warmup_steps, 1);
  const double progress =
      static_cast<double>(step - config.warmup_steps) / static_cast<double>(decay_span);
  return config.lr_peak * 0.5 * (1.0 + std::cos(kPi * std::min(progress, 1.0)));
}

void save_train_checkpoint(const std::string& path, const model::Model& m,
                           const std::vector<Tensor>& adam_m, const std::vector<Tensor>& adam_v,
                           int step) {
  std::vector<ad::NamedTensor> all;
  for (const auto& nt : m.params())
    all.push_back({"param/" + nt.name, nt.tensor.detach(), ad::Dtype::F64});
  for (std::size_t i = 0; i < adam_m.size(); ++i) {
    all.push_back({"adam_m/" + m.params()[i].name, adam_m[i].detach(), ad::Dtype::F64});
    all.push_back({"adam_v/" + m.params()[i].name, adam_v[i].detach(), ad::Dtype::F64});
  }
  all.push_back({"meta/step", Tensor::scalar(static_cast<double>(step)), ad::Dtype::F64});
  ad::save_checkpoint(path, all);
}

namespace {

int load_train_checkpoint(const std::string& path, model::Model& m, std::vector<Tensor>& adam_m,
                          std::vector<Tensor>& adam_v) {
  const auto all = ad::load_checkpoint(path);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    auto& dst = m.params()[i];
    const Tensor& p = ad::find_tensor(all, "param/" + dst.name);
    const Tensor& mm = ad::find_tensor(all, "adam_m/" + dst.name);
    const Tensor& vv = ad::find_tensor(all, "adam_v/" + dst.name);
    if (p.shape() != dst.tensor.shape())
      throw Error("resume: shape mismatch for " + dst.name);
    std::copy(p.data(), p.data() + p.size(), dst.tensor.data());
    adam_m[i] = mm.detach();
    adam_v[i] = vv.detach();
  }
  return static_cast<int>(ad::find_tensor(all, "meta/step").item());
}

std::string dump_batch(const std::string& out_dir, int step, const SceneBatch& batch,
                       const LossBreakdown& breakdown) {
  json j;
  j["step"] = step;
  j["scene_index"] = batch.scene_index;
  j["view_indices"] = batch.view_indices;
  json crops = json::array();
  for (const auto& c : batch.crops) crops.push_back({{"x0", c.x0}, {"y0", c.y0},
                                                     {"w", c.width}, {"h", c.height}});
  j["crops"] = crops;
  j["l_c"] = breakdown.l_c;
  j["l_p"] = breakdown.l_p;
  j["l_alpha"] = breakdown.l_alpha;
  j["l_y"] = breakdown.l_y;
  const std::string path = (fs::path(out_dir) / "diverged_batch.json").string();
  std::ofstream(path) << j.dump(2) << "\n";
  return path;
}

}  // namespace

void train(const synth::Dataset& dataset, model::Model& m, const TrainConfig& config,
           const std::string& out_dir, const std::function<void(const StepLog&)>& on_step,
           const std::string& resume_checkpoint) {
  config.validate();
  if (dataset.scenes.empty()) throw Error("train: dataset is empty");
  fs::create_directories(out_dir);

  auto& params = m.params();
  std::vector<Tensor> adam_m(params.size()), adam_v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_m[i] = Tensor::zeros(params[i].tensor.shape());
    adam_v[i] = Tensor::zeros(params[i].tensor.shape());
  }
  int start_step = 0;
  if (!resume_checkpoint.empty())
    start_step = load_train_checkpoint(resume_checkpoint, m, adam_m, adam_v);

  std::ofstream log(fs::path(out_dir) / "log.jsonl",
                    start_step > 0 ? std::ios::app : std::ios::out);
  const double eps = 1e-8;

  if (config.total_steps == 0 && start_step == 0) {
    save_train_checkpoint((fs::path(out_dir) / "ckpt_final.pftn").string(), m, adam_m, adam_v, 0);
    return;
  }

  for (int step = start_step; step < config.total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at_step(config, step);

    LossBreakdown mean_breakdown;
    ad::GradMap grads;
    {
      ad::Tape tape;
      Tensor batch_loss;
      for (int b = 0; b < config.batch_size; ++b) {
        const std::uint64_t step_seed =
            mix_seed(config.seed, static_cast<std::uint64_t>(step) * 131 + b);
        std::mt19937_64 pick_rng(step_seed);
        std::uniform_int_distribution<std::size_t> pick(0, dataset.scenes.size() - 1);
        const std::size_t scene_idx = pick(pick_rng);
        SceneBatch batch = make_batch(dataset.scenes[scene_idx], static_cast<int>(scene_idx),
                                      config.n_input_views, config.crop, step_seed);
        pnp::McOptions pnp_opts = config.pnp;
        pnp_opts.solve.seed = mix_seed(step_seed, 0x501e);
        pnp_opts.amis.seed = mix_seed(step_seed, 0xa815);
        TotalLoss tl = total_loss(m, batch, config.weights, pnp_opts, m.config().ray_steps);
        if (!std::isfinite(tl.breakdown.total)) {
          const std::string dump = dump_batch(out_dir, step, batch, tl.breakdown);
          throw TrainingDiverged("train: non-finite loss at step " + std::to_string(step), dump);
        }
        mean_breakdown.total += tl.breakdown.total / config.batch_size;
        mean_breakdown.l_c += tl.breakdown.l_c / config.batch_size;
        mean_breakdown.l_p += tl.breakdown.l_p / config.batch_size;
        mean_breakdown.l_alpha += tl.breakdown.l_alpha / config.batch_size;
        mean_breakdown.l_y += tl.breakdown.l_y / config.batch_size;
        Tensor scaled = ad::mul(tl.loss, 1.0 / config.batch_size);
        batch_loss = batch_loss.defined() ? ad::add(batch_loss, scaled) : scaled;
      }
      grads = ad::backward(batch_loss);
    }

    // AdamW update; decoupled decay applies to weight matrices only.
    const int t = step + 1;
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor g = grads.grad(params[i].tensor);
      double* pm = adam_m[i].data();
      double* pv = adam_v[i].data();
      double* pp = params[i].tensor.data();
      const double* pg = g.data();
      const bool decay = params[i].tensor.ndim() >= 2;
      for (std::size_t j = 0; j < g.size(); ++j) {
        pm[j] = config.beta1 * pm[j] + (1.0 - config.beta1) * pg[j];
        pv[j] = config.beta2 * pv[j] + (1.0 - config.beta2) * pg[j] * pg[j];
        const double mhat = pm[j] / bc1;
        const double vhat = pv[j] / bc2;
        double update = mhat / (std::sqrt(vhat) + eps);
        if (decay) update += config.weight_decay * pp[j];
        pp[j] -= lr * update;
      }
    }

    const auto t1 = std::chrono::steady_clock::now();
    StepLog entry;
    entry.step = step;
    entry.lr = lr;
    entry.losses = mean_breakdown;
    entry.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    json jl;
    jl["step"] = entry.step;
    jl["lr"] = entry.lr;
    jl["total"] = entry.losses.total;
    jl["l_c"] = entry.losses.l_c;
    jl["l_p"] = entry.losses.l_p;
    jl["l_alpha"] = entry.losses.l_alpha;
    jl["l_y"] = entry.losses.l_y;
    jl["wall_ms"] = entry.wall_ms;
    log << jl.dump() << "\n";
    if (on_step) on_step(entry);

    if (config.checkpoint_interval > 0 && (step + 1) % config.checkpoint_interval == 0)
      save_train_checkpoint(
          (fs::path(out_dir) / ("ckpt_step" + std::to_string(step + 1) + ".pftn")).string(), m,
          adam_m, adam_v, step + 1);
  }
  save_train_checkpoint((fs::path(out_dir) / "ckpt_final.pftn").string(), m, adam_m, adam_v,
                        std::max(config.total_steps, start_step));
}

}  // namespace pflrm::train
