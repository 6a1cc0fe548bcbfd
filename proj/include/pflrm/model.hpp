#pragma once

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pflrm/camera.hpp"
#include "pflrm/checkpoint.hpp"
#include "pflrm/image.hpp"
#include "pflrm/triplane.hpp"

namespace pflrm::model {

enum class AblationMode { DiffPnp, MlpPoseCls, MlpPosePatch, NonDiffPnp, NoPose };

std::string to_string(AblationMode mode);
AblationMode ablation_from_string(const std::string& name);

struct ModelConfig {
  int image_size = 64;
  int patch_size = 16;
  int dim = 64;        // token width D
  int layers = 2;      // attention layers L
  int heads = 4;
  int tri_tokens = 8;  // triplane token grid is 3 x tri_tokens x tri_tokens
  int tri_channels = 8;
  int upsample_factor = 2;
  int point_head_depth = 2;
  int point_head_width = 64;
  int intr_mlp_depth = 2;
  int intr_mlp_width = 64;
  int decoder_depth = 3;
  int decoder_width = 32;
  int ray_steps = 32;
  int max_views = 4;
  AblationMode ablation = AblationMode::DiffPnp;

  static ModelConfig desk();
  static ModelConfig paper_s();
  static ModelConfig paper_l();

  int tokens_per_view() const { return (image_size / patch_size) * (image_size / patch_size); }
  int patches_per_side() const { return image_size / patch_size; }
  int triplane_token_count() const { return 3 * tri_tokens * tri_tokens; }
  int plane_resolution() const { return tri_tokens * upsample_factor; }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Per-patch outputs extracted as plain values (for the PnP solver and eval).
struct PatchPrediction {
  Eigen::Vector3d p;
  double alpha = 0.0;
  double w = 0.0;
  Eigen::Vector2d q;
};

struct ModelOutput {
  field::Triplane triplane;
  field::NerfDecoder decoder;
  std::vector<ad::Tensor> points;  // per view, [M,3]
  std::vector<ad::Tensor> alphas;  // per view, [M]
  std::vector<ad::Tensor> confs;   // per view, [M]
  std::vector<std::vector<Eigen::Vector2d>> centers;  // per view patch-center pixels
  // Populated in the MLP pose ablation modes:
  std::vector<ad::Tensor> pose_quats;  // per view, [4], unit norm
  std::vector<ad::Tensor> pose_trans;  // per view, [3]

  std::vector<PatchPrediction> patch_predictions(std::size_t view) const;
  geom::Pose regressed_pose(std::size_t view) const;
};

struct ViewEmbed {
  ad::Tensor tokens;       // [M, D]
  ad::Tensor conditioning;  // [1, D]  m = intr MLP + view encoding
};

class Model {
 public:
  static Model init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<ad::NamedTensor>& params() { return params_; }
  const std::vector<ad::NamedTensor>& params() const { return params_; }
  const ad::Tensor& param(const std::string& name) const;

  ViewEmbed embed_view(const Image& image, const geom::Intrinsics& intr, bool is_reference) const;

  ModelOutput forward(std::span<const Image> images, std::span<const geom::Intrinsics> intrs,
                      std::size_t reference = 0) const;

  void save(const std::string& path) const;
  /// Loads parameters into a model built from `config`; shape or name
  /// mismatches raise Error (checkpoint incompatibility).
  static Model load(const ModelConfig& config, const std::string& path);
  void load_params(const std::vector<ad::NamedTensor>& tensors);

  field::NerfDecoder decoder() const;

 private:
  Model() = default;
  ad::Tensor& add_param(const std::string& name, ad::Tensor value);
  ad::Tensor mlp(const std::string& prefix, int depth, const ad::Tensor& input,
                 bool gelu_hidden) const;

  ModelConfig config_;
  std::vector<ad::NamedTensor> params_;
};

}  // namespace pflrm::model
