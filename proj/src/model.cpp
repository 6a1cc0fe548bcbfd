#include "pflrm/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

#include "pflrm/ops.hpp"

namespace pflrm::model {

using ad::Tensor;
using nlohmann::json;

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::DiffPnp: return "diff-pnp";
    case AblationMode::MlpPoseCls: return "mlp-pose-cls";
    case AblationMode::MlpPosePatch: return "mlp-pose-patch";
    case AblationMode::NonDiffPnp: return "non-diff-pnp";
    case AblationMode::NoPose: return "no-pose";
  }
  throw Error("unknown ablation mode");
}

AblationMode ablation_from_string(const std::string& name) {
  if (name == "diff-pnp") return AblationMode::DiffPnp;
  if (name == "mlp-pose-cls") return AblationMode::MlpPoseCls;
  if (name == "mlp-pose-patch") return AblationMode::MlpPosePatch;
  if (name == "non-diff-pnp") return AblationMode::NonDiffPnp;
  if (name == "no-pose") return AblationMode::NoPose;
  throw Error("unknown ablation mode \"" + name + "\"");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_s() {
  ModelConfig c;
  c.image_size = 256;
  c.dim = 1024;
  c.layers = 24;
  c.heads = 16;
  c.tri_tokens = 32;
  c.tri_channels = 32;
  c.upsample_factor = 1;
  c.point_head_depth = 4;
  c.point_head_width = 512;
  c.intr_mlp_depth = 5;
  c.intr_mlp_width = 768;
  c.decoder_depth = 5;
  c.decoder_width = 64;
  c.ray_steps = 64;
  return c;
}

ModelConfig ModelConfig::paper_l() {
  ModelConfig c = paper_s();
  c.image_size = 512;
  c.layers = 36;
  c.upsample_factor = 2;
  c.ray_steps = 128;
  return c;
}

void ModelConfig::validate() const {
  if (image_size % patch_size != 0)
    throw Error("ModelConfig: image size must be divisible by patch size");
  if (dim % heads != 0) throw Error("ModelConfig: dim must be divisible by heads");
  if (upsample_factor != 1 && upsample_factor != 2)
    throw Error("ModelConfig: upsample factor must be 1 or 2");
  if (max_views < 1) throw Error("ModelConfig: max_views must be positive");
}

json ModelConfig::to_json() const {
  json j;
  j["image_size"] = image_size;
  j["patch_size"] = patch_size;
  j["dim"] = dim;
  j["layers"] = layers;
  j["heads"] = heads;
  j["tri_tokens"] = tri_tokens;
  j["tri_channels"] = tri_channels;
  j["upsample_factor"] = upsample_factor;
  j["point_head_depth"] = point_head_depth;
  j["point_head_width"] = point_head_width;
  j["intr_mlp_depth"] = intr_mlp_depth;
  j["intr_mlp_width"] = intr_mlp_width;
  j["decoder_depth"] = decoder_depth;
  j["decoder_width"] = decoder_width;
  j["ray_steps"] = ray_steps;
  j["max_views"] = max_views;
  j["ablation"] = to_string(ablation);
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.tri_tokens = j.value("tri_tokens", c.tri_tokens);
  c.tri_channels = j.value("tri_channels", c.tri_channels);
  c.upsample_factor = j.value("upsample_factor", c.upsample_factor);
  c.point_head_depth = j.value("point_head_depth", c.point_head_depth);
  c.point_head_width = j.value("point_head_width", c.point_head_width);
  c.intr_mlp_depth = j.value("intr_mlp_depth", c.intr_mlp_depth);
  c.intr_mlp_width = j.value("intr_mlp_width", c.intr_mlp_width);
  c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
  c.decoder_width = j.value("decoder_width", c.decoder_width);
  c.ray_steps = j.value("ray_steps", c.ray_steps);
  c.max_views = j.value("max_views", c.max_views);
  if (j.contains("ablation")) c.ablation = ablation_from_string(j.at("ablation"));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

ad::Tensor& Model::add_param(const std::string& name, ad::Tensor value) {
  value.set_requires_grad(true);
  params_.push_back(ad::NamedTensor{name, std::move(value), ad::Dtype::F64});
  return params_.back().tensor;
}

const ad::Tensor& Model::param(const std::string& name) const {
  for (const auto& nt : params_)
    if (nt.name == name) return nt.tensor;
  throw Error("Model: missing parameter \"" + name + "\"");
}

namespace {

void init_linear(Model& m, std::vector<ad::NamedTensor>& params, const std::string& prefix,
                 int in, int out, std::mt19937_64& rng, double scale = 1.0) {
  (void)m;
  const double stddev = scale / std::sqrt(static_cast<double>(in));
  params.push_back({prefix + ".weight",
                    Tensor::randn({static_cast<std::size_t>(in), static_cast<std::size_t>(out)},
                                  rng, stddev)
                        .set_requires_grad(true),
                    ad::Dtype::F64});
  params.push_back({prefix + ".bias",
                    Tensor::zeros({static_cast<std::size_t>(out)}).set_requires_grad(true),
                    ad::Dtype::F64});
}

void init_mlp(Model& m, std::vector<ad::NamedTensor>& params, const std::string& prefix, int in,
              int width, int out, int depth, std::mt19937_64& rng) {
  int prev = in;
  for (int layer = 0; layer < depth; ++layer) {
    const int next = layer + 1 == depth ? out : width;
    init_linear(m, params, prefix + ".fc" + std::to_string(layer), prev, next, rng);
    prev = next;
  }
}

}  // namespace

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  std::mt19937_64 rng(mix_seed(seed, 0x0de1));

  const auto D = static_cast<std::size_t>(config.dim);
  const auto M = static_cast<std::size_t>(config.tokens_per_view());
  const auto patch_in = static_cast<std::size_t>(config.patch_size * config.patch_size * 3);
  const auto C = static_cast<std::size_t>(config.tri_channels);

  auto& p = m.params_;
  init_linear(m, p, "patch_embed", static_cast<int>(patch_in), config.dim, rng);
  p.push_back({"pos_embed", Tensor::randn({M, D}, rng, 0.02).set_requires_grad(true),
               ad::Dtype::F64});
  p.push_back({"view_ref", Tensor::randn({1, D}, rng, 0.02).set_requires_grad(true),
               ad::Dtype::F64});
  p.push_back({"view_src", Tensor::randn({1, D}, rng, 0.02).set_requires_grad(true),
               ad::Dtype::F64});
  init_mlp(m, p, "intr_mlp", 4, config.intr_mlp_width, config.dim, config.intr_mlp_depth, rng);
  p.push_back({"tri_pos",
               Tensor::randn({static_cast<std::size_t>(config.triplane_token_count()), D}, rng,
                             0.02)
                   .set_requires_grad(true),
               ad::Dtype::F64});

  const double resid_scale = 1.0 / std::sqrt(2.0 * config.layers);
  for (int b = 0; b < config.layers; ++b) {
    const std::string pre = "blocks." + std::to_string(b);
    init_linear(m, p, pre + ".attn.qkv", config.dim, 3 * config.dim, rng);
    init_linear(m, p, pre + ".attn.proj", config.dim, config.dim, rng, resid_scale);
    init_linear(m, p, pre + ".mlp.fc0", config.dim, 4 * config.dim, rng);
    init_linear(m, p, pre + ".mlp.fc1", 4 * config.dim, config.dim, rng, resid_scale);
    // Near-identity modulation at init; small but nonzero so the conditioning
    // branch receives gradient from step one.
    init_linear(m, p, pre + ".mod", config.dim, 4 * config.dim, rng, 1e-3);
  }

  init_linear(m, p, "tri_head", config.dim, config.tri_channels, rng);
  if (config.upsample_factor == 2) {
    Tensor kernel = Tensor::randn({2, 2, C, C}, rng, 0.02);
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < C; ++c) kernel.data()[((a * 2 + b) * C + c) * C + c] += 1.0;
    p.push_back({"upsample_kernel", kernel.set_requires_grad(true), ad::Dtype::F64});
  }

  if (config.ablation != AblationMode::NoPose) {
    init_mlp(m, p, "point_head", config.dim, config.point_head_width, 5, config.point_head_depth,
             rng);
    // Final layer small: points start near the box center.
    auto& w = p[p.size() - 2].tensor;
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] *= 1e-2;
    auto& bias = p.back().tensor;
    bias.data()[4] = std::log(std::exp(1.0) - 1.0);  // softplus -> confidence 1 at init
  }

  if (config.ablation == AblationMode::MlpPoseCls) {
    p.push_back({"cls_token", Tensor::randn({1, D}, rng, 0.02).set_requires_grad(true),
                 ad::Dtype::F64});
    init_mlp(m, p, "pose_head", config.dim, config.point_head_width, 7, 2, rng);
  } else if (config.ablation == AblationMode::MlpPosePatch) {
    init_mlp(m, p, "pose_head", static_cast<int>(M) * config.dim, config.point_head_width, 7, 2,
             rng);
  }

  {
    std::mt19937_64 dec_rng(mix_seed(seed, 0xdec0));
    field::NerfDecoder dec =
        field::NerfDecoder::init(3 * config.tri_channels, config.decoder_depth,
                                 config.decoder_width, dec_rng);
    for (std::size_t i = 0; i < dec.weights.size(); ++i) {
      p.push_back({"decoder.w" + std::to_string(i), dec.weights[i], ad::Dtype::F64});
      p.push_back({"decoder.b" + std::to_string(i), dec.biases[i], ad::Dtype::F64});
    }
  }
  return m;
}

field::NerfDecoder Model::decoder() const {
  field::NerfDecoder dec;
  dec.depth = config_.decoder_depth;
  dec.width = config_.decoder_width;
  for (int i = 0; i < config_.decoder_depth; ++i) {
    dec.weights.push_back(param("decoder.w" + std::to_string(i)));
    dec.biases.push_back(param("decoder.b" + std::to_string(i)));
  }
  return dec;
}

ad::Tensor Model::mlp(const std::string& prefix, int depth, const ad::Tensor& input,
                      bool gelu_hidden) const {
  Tensor h = input;
  for (int layer = 0; layer < depth; ++layer) {
    h = ad::add(ad::matmul(h, param(prefix + ".fc" + std::to_string(layer) + ".weight")),
                param(prefix + ".fc" + std::to_string(layer) + ".bias"));
    if (layer + 1 < depth) h = gelu_hidden ? ad::gelu(h) : ad::relu(h);
  }
  return h;
}

ViewEmbed Model::embed_view(const Image& image, const geom::Intrinsics& intr,
                            bool is_reference) const {
  if (image.width != config_.image_size || image.height != config_.image_size)
    throw Error("embed_view: image is " + std::to_string(image.width) + "x" +
                std::to_string(image.height) + ", model expects " +
                std::to_string(config_.image_size));
  const int ps = config_.patch_size;
  const int side = config_.patches_per_side();
  const auto M = static_cast<std::size_t>(config_.tokens_per_view());
  const auto patch_in = static_cast<std::size_t>(ps * ps * 3);

  std::vector<double> patches(M * patch_in);
  for (int pr = 0; pr < side; ++pr)
    for (int pc = 0; pc < side; ++pc) {
      double* dst = patches.data() + (static_cast<std::size_t>(pr) * side + pc) * patch_in;
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int c = 0; c < 3; ++c)
            *dst++ = image.at(pr * ps + y, pc * ps + x, c);
    }
  Tensor patch_mat = Tensor::from({M, patch_in}, std::move(patches));
  Tensor tokens = ad::add(ad::matmul(patch_mat, param("patch_embed.weight")),
                          param("patch_embed.bias"));
  tokens = ad::add(tokens, param("pos_embed"));

  // Intrinsics normalized by the image extent before conditioning.
  Tensor intr_in = Tensor::from(
      {1, 4}, {intr.fx / intr.width, intr.fy / intr.height, intr.cx / intr.width,
               intr.cy / intr.height});
  Tensor cond = mlp("intr_mlp", config_.intr_mlp_depth, intr_in, true);
  cond = ad::add(cond, is_reference ? param("view_ref") : param("view_src"));
  return ViewEmbed{tokens, cond};
}

ModelOutput Model::forward(std::span<const Image> images, std::span<const geom::Intrinsics> intrs,
                           std::size_t reference) const {
  const std::size_t n = images.size();
  if (n < 1 || n > static_cast<std::size_t>(config_.max_views))
    throw Error("forward: view count " + std::to_string(n) + " outside [1," +
                std::to_string(config_.max_views) + "]");
  if (intrs.size() != n) throw Error("forward: images/intrinsics count mismatch");
  if (reference >= n) throw Error("forward: reference index out of range");

  const auto D = static_cast<std::size_t>(config_.dim);
  const auto M = static_cast<std::size_t>(config_.tokens_per_view());
  const std::size_t t_tri = static_cast<std::size_t>(config_.triplane_token_count());
  const bool with_cls = config_.ablation == AblationMode::MlpPoseCls;
  const std::size_t view_len = M + (with_cls ? 1 : 0);

  std::vector<Tensor> conds(n);
  std::vector<Tensor> blocks_in;
  blocks_in.push_back(param("tri_pos"));
  for (std::size_t v = 0; v < n; ++v) {
    ViewEmbed embed = embed_view(images[v], intrs[v], v == reference);
    conds[v] = embed.conditioning;
    Tensor tokens = embed.tokens;
    if (with_cls) tokens = ad::concat({tokens, param("cls_token")}, 0);
    blocks_in.push_back(tokens);
  }
  Tensor x = ad::concat(blocks_in, 0);  // [T, D]
  const std::size_t seq = t_tri + n * view_len;

  // Per-view (scale,bias) pairs for the two norms of each block come from the
  // conditioning vector; triplane tokens keep identity modulation.
  const int heads = config_.heads;
  const std::size_t dh = D / static_cast<std::size_t>(heads);
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int b = 0; b < config_.layers; ++b) {
    const std::string pre = "blocks." + std::to_string(b);
    std::vector<Tensor> mods(n);
    for (std::size_t v = 0; v < n; ++v)
      mods[v] = ad::add(ad::matmul(ad::gelu(conds[v]), param(pre + ".mod.weight")),
                        param(pre + ".mod.bias"));  // [1, 4D]

    auto modulated_norm = [&](const Tensor& input, int which) {
      Tensor normed = ad::layer_norm_last(input);
      std::vector<Tensor> parts;
      parts.push_back(ad::slice(normed, 0, 0, t_tri));
      for (std::size_t v = 0; v < n; ++v) {
        Tensor rows = ad::slice(normed, 0, t_tri + v * view_len, view_len);
        Tensor scale = ad::slice(mods[v], 1, static_cast<std::size_t>(which) * 2 * D, D);
        Tensor bias = ad::slice(mods[v], 1, static_cast<std::size_t>(which) * 2 * D + D, D);
        parts.push_back(ad::add(ad::mul(rows, ad::add(scale, 1.0)), bias));
      }
      return ad::concat(parts, 0);
    };

    // Attention.
    Tensor normed = modulated_norm(x, 0);
    Tensor qkv = ad::add(ad::matmul(normed, param(pre + ".attn.qkv.weight")),
                         param(pre + ".attn.qkv.bias"));  // [T, 3D]
    Tensor qkv_h = ad::transpose(
        ad::reshape(qkv, {seq, 3, static_cast<std::size_t>(heads), dh}), {1, 2, 0, 3});
    Tensor q = ad::reshape(ad::slice(qkv_h, 0, 0, 1), {static_cast<std::size_t>(heads), seq, dh});
    Tensor k = ad::reshape(ad::slice(qkv_h, 0, 1, 1), {static_cast<std::size_t>(heads), seq, dh});
    Tensor v = ad::reshape(ad::slice(qkv_h, 0, 2, 1), {static_cast<std::size_t>(heads), seq, dh});
    Tensor scores = ad::mul(ad::matmul(q, ad::transpose(k, {0, 2, 1})), attn_scale);
    Tensor attn = ad::softmax_last(scores);
    Tensor ctx = ad::reshape(ad::transpose(ad::matmul(attn, v), {1, 0, 2}), {seq, D});
    Tensor proj = ad::add(ad::matmul(ctx, param(pre + ".attn.proj.weight")),
                          param(pre + ".attn.proj.bias"));
    x = ad::add(x, proj);

    // MLP.
    Tensor normed2 = modulated_norm(x, 1);
    Tensor h = ad::gelu(ad::add(ad::matmul(normed2, param(pre + ".mlp.fc0.weight")),
                                param(pre + ".mlp.fc0.bias")));
    Tensor out = ad::add(ad::matmul(h, param(pre + ".mlp.fc1.weight")),
                         param(pre + ".mlp.fc1.bias"));
    x = ad::add(x, out);
  }

  Tensor y = ad::layer_norm_last(x);

  ModelOutput result;
  result.decoder = decoder();

  // Triplane head.
  Tensor tri_tok = ad::slice(y, 0, 0, t_tri);
  Tensor tri_feat = ad::add(ad::matmul(tri_tok, param("tri_head.weight")),
                            param("tri_head.bias"));
  const auto ht = static_cast<std::size_t>(config_.tri_tokens);
  const auto C = static_cast<std::size_t>(config_.tri_channels);
  Tensor grid = ad::reshape(tri_feat, {3, ht, ht, C});
  Tensor planes = config_.upsample_factor == 2
                      ? field::upsample(grid, 2, param("upsample_kernel"))
                      : grid;
  const auto res = static_cast<std::size_t>(config_.plane_resolution());
  result.triplane.xy = ad::reshape(ad::slice(planes, 0, 0, 1), {res, res, C});
  result.triplane.xz = ad::reshape(ad::slice(planes, 0, 1, 1), {res, res, C});
  result.triplane.yz = ad::reshape(ad::slice(planes, 0, 2, 1), {res, res, C});

  // Per-view heads.
  const int side = config_.patches_per_side();
  const int ps = config_.patch_size;
  for (std::size_t v = 0; v < n; ++v) {
    Tensor rows = ad::slice(y, 0, t_tri + v * view_len, M);
    if (config_.ablation != AblationMode::NoPose) {
      Tensor out = mlp("point_head", config_.point_head_depth, rows, true);  // [M,5]
      result.points.push_back(ad::slice(out, 1, 0, 3));
      result.alphas.push_back(ad::reshape(ad::sigmoid(ad::slice(out, 1, 3, 1)), {M}));
      result.confs.push_back(ad::reshape(ad::softplus(ad::slice(out, 1, 4, 1)), {M}));
    }
    std::vector<Eigen::Vector2d> centers;
    centers.reserve(M);
    for (int pr = 0; pr < side; ++pr)
      for (int pc = 0; pc < side; ++pc)
        centers.emplace_back(pc * ps + ps * 0.5, pr * ps + ps * 0.5);
    result.centers.push_back(std::move(centers));

    if (config_.ablation == AblationMode::MlpPoseCls ||
        config_.ablation == AblationMode::MlpPosePatch) {
      Tensor head_in = config_.ablation == AblationMode::MlpPoseCls
                           ? ad::slice(y, 0, t_tri + v * view_len + M, 1)
                           : ad::reshape(rows, {1, M * D});
      Tensor out = ad::reshape(mlp("pose_head", 2, head_in, true), {7});
      Tensor quat = ad::slice(out, 0, 0, 4);
      Tensor norm = ad::sqrt(ad::sum(ad::square(quat)));
      result.pose_quats.push_back(ad::div(quat, norm));
      result.pose_trans.push_back(ad::slice(out, 0, 4, 3));
    }
  }
  return result;
}

std::vector<PatchPrediction> ModelOutput::patch_predictions(std::size_t view) const {
  if (view >= points.size()) throw Error("patch_predictions: view index out of range");
  const std::size_t m = alphas[view].size();
  std::vector<PatchPrediction> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    out[j].p = Eigen::Vector3d(points[view].data()[j * 3], points[view].data()[j * 3 + 1],
                               points[view].data()[j * 3 + 2]);
    out[j].alpha = alphas[view].data()[j];
    out[j].w = confs[view].data()[j];
    out[j].q = centers[view][j];
  }
  return out;
}

geom::Pose ModelOutput::regressed_pose(std::size_t view) const {
  if (view >= pose_quats.size())
    throw Error("regressed_pose: pose head output missing (wrong ablation mode?)");
  const double* qd = pose_quats[view].data();
  Eigen::Quaterniond quat(qd[0], qd[1], qd[2], qd[3]);
  quat.normalize();
  geom::Pose pose;
  pose.R = quat.toRotationMatrix();
  pose.t = Eigen::Vector3d(pose_trans[view].data()[0], pose_trans[view].data()[1],
                           pose_trans[view].data()[2]);
  return pose;
}

void Model::save(const std::string& path) const { ad::save_checkpoint(path, params_); }

void Model::load_params(const std::vector<ad::NamedTensor>& raw) {
  // Accept both bare parameter files and training checkpoints (param/ prefix).
  std::vector<ad::NamedTensor> tensors;
  bool prefixed = false;
  for (const auto& nt : raw)
    if (nt.name.rfind("param/", 0) == 0) {
      prefixed = true;
      break;
    }
  for (const auto& nt : raw) {
    if (prefixed) {
      if (nt.name.rfind("param/", 0) == 0)
        tensors.push_back({nt.name.substr(6), nt.tensor, nt.dtype});
    } else {
      tensors.push_back(nt);
    }
  }
  if (tensors.size() != params_.size())
    throw Error("checkpoint mismatch: expected " + std::to_string(params_.size()) +
                " tensors, file has " + std::to_string(tensors.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const ad::Tensor& src = find_tensor(tensors, params_[i].name);
    if (src.shape() != params_[i].tensor.shape())
      throw Error("checkpoint mismatch: tensor \"" + params_[i].name + "\" has shape " +
                  ad::shape_str(src.shape()) + ", model expects " +
                  ad::shape_str(params_[i].tensor.shape()));
    std::copy(src.data(), src.data() + src.size(), params_[i].tensor.data());
  }
}

Model Model::load(const ModelConfig& config, const std::string& path) {
  Model m = Model::init(config, 0);
  m.load_params(ad::load_checkpoint(path));
  return m;
}

}  // namespace pflrm::model
