#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pflrm/image.hpp"
#include "pflrm/model.hpp"
#include "pflrm/pnp.hpp"
#include "pflrm/synth.hpp"

namespace pflrm::metrics {

struct PoseMetrics {
  double mean_rotation_deg = 0.0;
  double acc15 = 0.0;
  double acc30 = 0.0;
  double mean_translation = 0.0;
};

/// Pair-wise relative rotation errors over every unordered view pair plus
/// per-source-view translation error. Inputs are poses relative to view 1
/// (index 0 carries the identity reference).
PoseMetrics pose_metrics(std::span<const geom::Pose> pred, std::span<const geom::Pose> gt);

/// 10*log10(1/MSE) over all values; identical images cap at 99 dB.
double psnr(const Image& a, const Image& b);

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2,
/// channels averaged. Throws when either side of the image is below 11.
double ssim(const Image& a, const Image& b);

struct SceneRow {
  int scene = 0;
  double r_err_deg = 0.0;
  double acc15 = 0.0;
  double acc30 = 0.0;
  double t_err = 0.0;
  double psnr_gt = 0.0;
  double psnr_pred = 0.0;
  double psnr_novel = 0.0;
  double ssim_novel = 0.0;
  bool pose_failed = false;
};

struct EvalReport {
  double mean_rotation_deg = 0.0;
  double acc15 = 0.0;
  double acc30 = 0.0;
  double mean_translation = 0.0;
  double psnr_gt = 0.0;
  double psnr_pred = 0.0;
  double psnr_novel = 0.0;
  double ssim_novel = 0.0;
  double failure_rate = 0.0;  // scenes with degenerate PnP
  int scene_count = 0;
  std::vector<SceneRow> rows;

  std::string to_json() const;
  void write_csv(const std::string& path) const;
  void write_json(const std::string& path) const;
};

struct EvalProtocol {
  int n_input_views = 4;
  std::uint64_t seed = 0;
  pnp::SolveOptions pnp;
};

/// Per scene: forward on N inputs, PnP per source view, pose metrics, PSNR at
/// ground-truth and predicted input poses, PSNR/SSIM at the held-out view.
EvalReport evaluate(const model::Model& m, const synth::Dataset& dataset,
                    const EvalProtocol& protocol);

/// Poses recovered for each input view in the canonical (reference) frame;
/// entry 0 is the canonical reference pose itself.
std::vector<geom::Pose> predict_poses(const model::Model& m, const model::ModelOutput& out,
                                      const geom::Intrinsics& intr,
                                      const pnp::SolveOptions& opts, bool* degenerate = nullptr);

}  // namespace pflrm::metrics
