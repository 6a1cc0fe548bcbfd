#include "pflrm/metrics.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

#include "pflrm/renderer.hpp"
#include "pflrm/training.hpp"

namespace pflrm::metrics {

using nlohmann::json;

PoseMetrics pose_metrics(std::span<const geom::Pose> pred, std::span<const geom::Pose> gt) {
  if (pred.size() != gt.size())
    throw Error("pose_metrics: predicted " + std::to_string(pred.size()) + " poses, ground truth " +
                std::to_string(gt.size()));
  if (pred.size() < 2) throw Error("pose_metrics: need at least 2 views");
  PoseMetrics out;
  int pairs = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = i + 1; j < pred.size(); ++j) {
      const Eigen::Matrix3d rel_pred = pred[i].R * pred[j].R.transpose();
      const Eigen::Matrix3d rel_gt = gt[i].R * gt[j].R.transpose();
      const double err = geom::rotation_error_deg(rel_pred, rel_gt);
      out.mean_rotation_deg += err;
      out.acc15 += err < 15.0 ? 1.0 : 0.0;
      out.acc30 += err < 30.0 ? 1.0 : 0.0;
      ++pairs;
    }
  out.mean_rotation_deg /= pairs;
  out.acc15 /= pairs;
  out.acc30 /= pairs;
  for (std::size_t i = 1; i < pred.size(); ++i)
    out.mean_translation += geom::translation_error(pred[i].t, gt[i].t);
  out.mean_translation /= static_cast<double>(pred.size() - 1);
  return out;
}

double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw Error("psnr: image shapes differ");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = a.rgb[i] - b.rgb[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.rgb.size());
  if (mse <= 0.0) return 99.0;
  return std::min(10.0 * std::log10(1.0 / mse), 99.0);
}

namespace {

std::vector<double> gaussian_window() {
  const int half = 5;
  std::vector<double> w(11);
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) {
    w[i + half] = std::exp(-0.5 * i * i / (1.5 * 1.5));
    sum += w[i + half];
  }
  for (auto& v : w) v /= sum;
  return w;
}

/// Separable Gaussian filter, valid region only: output is (h-10)x(w-10).
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w) {
  static const std::vector<double> win = gaussian_window();
  const int vw = w - 10;
  std::vector<double> rows(static_cast<std::size_t>(h) * vw);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < vw; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 11; ++k) acc += win[k] * img[static_cast<std::size_t>(y) * w + x + k];
      rows[static_cast<std::size_t>(y) * vw + x] = acc;
    }
  const int vh = h - 10;
  std::vector<double> out(static_cast<std::size_t>(vh) * vw);
  for (int y = 0; y < vh; ++y)
    for (int x = 0; x < vw; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 11; ++k) acc += win[k] * rows[static_cast<std::size_t>(y + k) * vw + x];
      out[static_cast<std::size_t>(y) * vw + x] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw Error("ssim: image shapes differ");
  if (a.width < 11 || a.height < 11)
    throw Error("ssim: image smaller than the 11x11 window");
  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  const int h = a.height, w = a.width;
  double total = 0.0;
  for (int ch = 0; ch < 3; ++ch) {
    std::vector<double> xa(static_cast<std::size_t>(h) * w), xb(xa.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        xa[static_cast<std::size_t>(y) * w + x] = a.at(y, x, ch);
        xb[static_cast<std::size_t>(y) * w + x] = b.at(y, x, ch);
      }
    std::vector<double> aa(xa.size()), bb(xa.size()), ab(xa.size());
    for (std::size_t i = 0; i < xa.size(); ++i) {
      aa[i] = xa[i] * xa[i];
      bb[i] = xb[i] * xb[i];
      ab[i] = xa[i] * xb[i];
    }
    const auto mu_a = filter_valid(xa, h, w);
    const auto mu_b = filter_valid(xb, h, w);
    const auto m_aa = filter_valid(aa, h, w);
    const auto m_bb = filter_valid(bb, h, w);
    const auto m_ab = filter_valid(ab, h, w);
    double acc = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double va = m_aa[i] - mu_a[i] * mu_a[i];
      const double vb = m_bb[i] - mu_b[i] * mu_b[i];
      const double cov = m_ab[i] - mu_a[i] * mu_b[i];
      acc += ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(mu_a.size());
  }
  return total / 3.0;
}

// ---------------------------------------------------------------------------

std::vector<geom::Pose> predict_poses(const model::Model& m, const model::ModelOutput& out,
                                      const geom::Intrinsics& intr,
                                      const pnp::SolveOptions& opts, bool* degenerate) {
  const std::size_t n = out.centers.size();
  std::vector<geom::Pose> poses;
  poses.push_back(train::canonical_reference_pose());
  if (degenerate) *degenerate = false;
  const auto mode = m.config().ablation;
  for (std::size_t v = 1; v < n; ++v) {
    if (mode == model::AblationMode::MlpPoseCls || mode == model::AblationMode::MlpPosePatch) {
      poses.push_back(out.regressed_pose(v));
      continue;
    }
    if (mode == model::AblationMode::NoPose)
      throw Error("predict_poses: the no-pose ablation has no pose branch");
    const auto preds = out.patch_predictions(v);
    std::vector<pnp::Correspondence> corrs;
    corrs.reserve(preds.size());
    for (const auto& pp : preds)
      corrs.push_back(pnp::Correspondence{pp.p, pp.q, pp.alpha * pp.w});
    try {
      pnp::SolveOptions local = opts;
      local.seed = mix_seed(opts.seed, v);
      poses.push_back(pnp::solve(corrs, intr, local).pose);
    } catch (const pnp::DegenerateError&) {
      if (degenerate) *degenerate = true;
      poses.push_back(train::canonical_reference_pose());
    }
  }
  return poses;
}

EvalReport evaluate(const model::Model& m, const synth::Dataset& dataset,
                    const EvalProtocol& protocol) {
  EvalReport report;
  const int n = protocol.n_input_views;
  const int size = dataset.config.image_size;
  const int rays = m.config().ray_steps;

  int pose_scenes = 0, failures = 0, img_scenes = 0;
  for (std::size_t s = 0; s < dataset.scenes.size(); ++s) {
    const auto& scene = dataset.scenes[s];
    train::SceneBatch batch = train::make_batch(scene, static_cast<int>(s), n, 1,
                                                mix_seed(protocol.seed, s));
    model::ModelOutput out = m.forward(batch.images, batch.intrs, 0);

    SceneRow row;
    row.scene = static_cast<int>(s);

    std::vector<geom::Pose> pred_poses;
    if (n >= 2 && m.config().ablation != model::AblationMode::NoPose) {
      bool degenerate = false;
      pred_poses = predict_poses(m, out, batch.intrs[0], protocol.pnp, &degenerate);
      row.pose_failed = degenerate;
      if (!degenerate) {
        // Both sets are expressed relative to view 1 (reference frame).
        std::vector<geom::Pose> pred_rel, gt_rel;
        for (int v = 0; v < n; ++v) {
          pred_rel.push_back(geom::relative_pose(pred_poses[0], pred_poses[v]));
          gt_rel.push_back(geom::relative_pose(batch.gt_poses[0], batch.gt_poses[v]));
        }
        const PoseMetrics pm = pose_metrics(pred_rel, gt_rel);
        row.r_err_deg = pm.mean_rotation_deg;
        row.acc15 = pm.acc15;
        row.acc30 = pm.acc30;
        row.t_err = pm.mean_translation;
        report.mean_rotation_deg += pm.mean_rotation_deg;
        report.acc15 += pm.acc15;
        report.acc30 += pm.acc30;
        report.mean_translation += pm.mean_translation;
        ++pose_scenes;
      } else {
        ++failures;
      }
    }

    // Rendering quality at ground-truth and predicted input poses, plus the
    // held-out novel view.
    double psnr_gt = 0.0, psnr_pred = 0.0;
    for (int v = 0; v < n; ++v) {
      const Image at_gt = render::render_image(out.triplane, out.decoder, batch.gt_poses[v],
                                               batch.intrs[v], size, rays);
      psnr_gt += psnr(at_gt, batch.images[v]);
      if (!pred_poses.empty() && !row.pose_failed) {
        const Image at_pred = render::render_image(out.triplane, out.decoder, pred_poses[v],
                                                   batch.intrs[v], size, rays);
        psnr_pred += psnr(at_pred, batch.images[v]);
      }
    }
    row.psnr_gt = psnr_gt / n;
    row.psnr_pred = (!pred_poses.empty() && !row.pose_failed) ? psnr_pred / n : row.psnr_gt;
    const Image novel = render::render_image(out.triplane, out.decoder, batch.heldout_pose,
                                             batch.intrs[0], size, rays);
    row.psnr_novel = psnr(novel, batch.heldout_image);
    row.ssim_novel = ssim(novel, batch.heldout_image);
    report.psnr_gt += row.psnr_gt;
    report.psnr_pred += row.psnr_pred;
    report.psnr_novel += row.psnr_novel;
    report.ssim_novel += row.ssim_novel;
    ++img_scenes;

    report.rows.push_back(row);
  }

  report.scene_count = static_cast<int>(dataset.scenes.size());
  if (pose_scenes > 0) {
    report.mean_rotation_deg /= pose_scenes;
    report.acc15 /= pose_scenes;
    report.acc30 /= pose_scenes;
    report.mean_translation /= pose_scenes;
  }
  if (pose_scenes + failures > 0)
    report.failure_rate = static_cast<double>(failures) / (pose_scenes + failures);
  if (img_scenes > 0) {
    report.psnr_gt /= img_scenes;
    report.psnr_pred /= img_scenes;
    report.psnr_novel /= img_scenes;
    report.ssim_novel /= img_scenes;
  }
  return report;
}

std::string EvalReport::to_json() const {
  json j;
  j["mean_rotation_deg"] = mean_rotation_deg;
  j["acc15"] = acc15;
  j["acc30"] = acc30;
  j["mean_translation"] = mean_translation;
  j["psnr_gt"] = psnr_gt;
  j["psnr_pred"] = psnr_pred;
  j["psnr_novel"] = psnr_novel;
  j["ssim_novel"] = ssim_novel;
  j["failure_rate"] = failure_rate;
  j["scene_count"] = scene_count;
  json rows_json = json::array();
  for (const auto& r : rows) {
    json rj;
    rj["scene"] = r.scene;
    rj["r_err_deg"] = r.r_err_deg;
    rj["acc15"] = r.acc15;
    rj["acc30"] = r.acc30;
    rj["t_err"] = r.t_err;
    rj["psnr_gt"] = r.psnr_gt;
    rj["psnr_pred"] = r.psnr_pred;
    rj["psnr_novel"] = r.psnr_novel;
    rj["ssim_novel"] = r.ssim_novel;
    rj["pose_failed"] = r.pose_failed;
    rows_json.push_back(rj);
  }
  j["rows"] = rows_json;
  return j.dump(2);
}

void EvalReport::write_json(const std::string& path) const {
  std::ofstream(path) << to_json() << "\n";
}

void EvalReport::write_csv(const std::string& path) const {
  std::ofstream os(path);
  os << "scene,r_err_deg,acc15,acc30,t_err,psnr_gt,psnr_pred,psnr_novel,ssim_novel\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.scene << "," << r.r_err_deg << "," << r.acc15 << "," << r.acc30 << "," << r.t_err
       << "," << r.psnr_gt << "," << r.psnr_pred << "," << r.psnr_novel << "," << r.ssim_novel
       << "\n";
}

}  // namespace pflrm::metrics
