#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pflrm/model.hpp"
#include "pflrm/pnp.hpp"
#include "pflrm/renderer.hpp"
#include "pflrm/synth.hpp"

namespace pflrm::train {

struct LossWeights {
  double render_l2 = 1.0;     // gamma'_C
  double render_lpips = 0.0;  // gamma''_C slot; perceptual term not built
  double point = 1.0;         // gamma_p
  double alpha = 1.0;         // gamma_alpha
  double pose = 1.0;          // gamma_y
};

struct TrainConfig {
  double lr_peak = 4e-4;
  int warmup_steps = 3000;
  int total_steps = 5000;
  int batch_size = 1;
  int crop = 16;           // supervision crop is crop x crop
  int n_input_views = 4;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  int checkpoint_interval = 0;  // 0: final checkpoint only
  LossWeights weights;
  pnp::McOptions pnp;
  bool render_at_predicted_poses = false;  // experimental, off by default

  void validate() const;
};

/// The reference camera's canonical pose: looking at the origin from
/// (0,0,2.7) with y-down image axes. The model's world frame is the scene
/// frame remapped so the reference view sits exactly here.
geom::Pose canonical_reference_pose();

/// Scene-world pose -> canonical-frame pose, given the reference view's
/// scene-world pose.
geom::Pose canonicalize(const geom::Pose& world_pose, const geom::Pose& reference_world_pose);

struct SceneBatch {
  std::vector<Image> images;              // input views
  std::vector<geom::Intrinsics> intrs;
  std::vector<geom::Pose> gt_poses;       // canonical-frame poses of the inputs
  Image heldout_image;                    // extra supervision view
  geom::Pose heldout_pose;                // canonical frame
  std::vector<render::CropRect> crops;    // one per input view + one for heldout
  int scene_index = 0;
  std::vector<int> view_indices;          // dataset view ids (inputs then heldout)
};

/// Deterministic batch assembly for one scene at one step.
SceneBatch make_batch(const synth::Scene& scene, int scene_index, int n_input_views, int crop,
                      std::uint64_t seed);

struct LossBreakdown {
  double total = 0.0;
  double l_c = 0.0;      // weighted rendering term
  double l_p = 0.0;      // weighted point term
  double l_alpha = 0.0;  // weighted opacity term
  double l_y = 0.0;      // weighted pose term
};

ad::Tensor rendering_loss(const ad::Tensor& pred, const ad::Tensor& gt, double gamma_l2,
                          double gamma_lpips = 0.0);

/// (L_p, L_alpha) summed over patches; xbar/taubar enter as constants.
std::pair<ad::Tensor, ad::Tensor> point_losses(const ad::Tensor& points,
                                               const ad::Tensor& alphas, const ad::Tensor& xbar,
                                               const ad::Tensor& taubar);

/// Frozen MC sample sets keyed by source-view slot; lets two total_loss
/// evaluations share identical Monte-Carlo draws (gradient checks).
using McCache = std::map<std::size_t, pnp::McSampleSet>;

struct TotalLoss {
  ad::Tensor loss;
  LossBreakdown breakdown;
};

TotalLoss total_loss(const model::Model& m, const SceneBatch& batch, const LossWeights& weights,
                     const pnp::McOptions& pnp_opts, int ray_steps, McCache* cache = nullptr);

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::string dump)
      : Error(what), dump_path(std::move(dump)) {}
  std::string dump_path;
};

struct StepLog {
  int step = 0;
  double lr = 0.0;
  LossBreakdown losses;
  double wall_ms = 0.0;
};

double lr_at_step(const TrainConfig& config, int step);

/// AdamW with linear warmup and cosine decay; writes checkpoints and a JSONL
/// metric log under out_dir. Fully deterministic given the seed.
void train(const synth::Dataset& dataset, model::Model& m, const TrainConfig& config,
           const std::string& out_dir,
           const std::function<void(const StepLog&)>& on_step = nullptr,
           const std::string& resume_checkpoint = "");

/// Optimizer + parameter state snapshot (param/, adam_m/, adam_v/, meta/step).
void save_train_checkpoint(const std::string& path, const model::Model& m,
                           const std::vector<ad::Tensor>& adam_m,
                           const std::vector<ad::Tensor>& adam_v, int step);

}  // namespace pflrm::train
