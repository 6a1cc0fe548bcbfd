#include "pflrm/runconfig.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>

namespace pflrm::cli {

using nlohmann::json;

namespace {

const std::set<std::string> kModelKeys = {
    "preset",          "image_size",      "patch_size",     "dim",
    "layers",          "heads",           "tri_tokens",     "tri_channels",
    "upsample_factor", "point_head_depth", "point_head_width", "intr_mlp_depth",
    "intr_mlp_width",  "decoder_depth",   "decoder_width",  "ray_steps",
    "max_views",       "ablation"};

const std::set<std::string> kTrainKeys = {
    "lr",          "warmup",       "steps",         "batch_size",
    "crop",        "views",        "seed",          "beta1",
    "beta2",       "weight_decay", "checkpoint_interval",
    "gamma_c_l2",  "gamma_c_lpips", "gamma_p",      "gamma_alpha",
    "gamma_y",     "render_at_predicted_poses"};

const std::set<std::string> kDataKeys = {"root"};
const std::set<std::string> kEvalKeys = {"views", "seed"};
const std::set<std::string> kPnpKeys = {"starts",       "max_iterations", "grad_tol",
                                        "lambda_init",  "depth_clamp",    "amis_rounds",
                                        "amis_samples", "t_dof",          "seed"};

void reject_unknown(const json& section, const std::set<std::string>& known,
                    const std::string& name) {
  for (auto it = section.begin(); it != section.end(); ++it)
    if (!known.count(it.key()))
      throw Error("config: unknown key \"" + name + "." + it.key() + "\"");
}

void apply_model(model::ModelConfig& m, const json& j) {
  reject_unknown(j, kModelKeys, "model");
  if (j.contains("preset")) {
    const std::string preset = j.at("preset");
    if (preset == "desk")
      m = model::ModelConfig::desk();
    else if (preset == "paper-s")
      m = model::ModelConfig::paper_s();
    else if (preset == "paper-l")
      m = model::ModelConfig::paper_l();
    else
      throw Error("config: unknown model preset \"" + preset + "\"");
  }
  if (j.contains("image_size")) m.image_size = j.at("image_size");
  if (j.contains("patch_size")) m.patch_size = j.at("patch_size");
  if (j.contains("dim")) m.dim = j.at("dim");
  if (j.contains("layers")) m.layers = j.at("layers");
  if (j.contains("heads")) m.heads = j.at("heads");
  if (j.contains("tri_tokens")) m.tri_tokens = j.at("tri_tokens");
  if (j.contains("tri_channels")) m.tri_channels = j.at("tri_channels");
  if (j.contains("upsample_factor")) m.upsample_factor = j.at("upsample_factor");
  if (j.contains("point_head_depth")) m.point_head_depth = j.at("point_head_depth");
  if (j.contains("point_head_width")) m.point_head_width = j.at("point_head_width");
  if (j.contains("intr_mlp_depth")) m.intr_mlp_depth = j.at("intr_mlp_depth");
  if (j.contains("intr_mlp_width")) m.intr_mlp_width = j.at("intr_mlp_width");
  if (j.contains("decoder_depth")) m.decoder_depth = j.at("decoder_depth");
  if (j.contains("decoder_width")) m.decoder_width = j.at("decoder_width");
  if (j.contains("ray_steps")) m.ray_steps = j.at("ray_steps");
  if (j.contains("max_views")) m.max_views = j.at("max_views");
  if (j.contains("ablation")) m.ablation = model::ablation_from_string(j.at("ablation"));
}

void apply_train(train::TrainConfig& t, const json& j) {
  reject_unknown(j, kTrainKeys, "train");
  if (j.contains("lr")) t.lr_peak = j.at("lr");
  if (j.contains("warmup")) t.warmup_steps = j.at("warmup");
  if (j.contains("steps")) t.total_steps = j.at("steps");
  if (j.contains("batch_size")) t.batch_size = j.at("batch_size");
  if (j.contains("crop")) t.crop = j.at("crop");
  if (j.contains("views")) t.n_input_views = j.at("views");
  if (j.contains("seed")) t.seed = j.at("seed");
  if (j.contains("beta1")) t.beta1 = j.at("beta1");
  if (j.contains("beta2")) t.beta2 = j.at("beta2");
  if (j.contains("weight_decay")) t.weight_decay = j.at("weight_decay");
  if (j.contains("checkpoint_interval")) t.checkpoint_interval = j.at("checkpoint_interval");
  if (j.contains("gamma_c_l2")) t.weights.render_l2 = j.at("gamma_c_l2");
  if (j.contains("gamma_c_lpips")) t.weights.render_lpips = j.at("gamma_c_lpips");
  if (j.contains("gamma_p")) t.weights.point = j.at("gamma_p");
  if (j.contains("gamma_alpha")) t.weights.alpha = j.at("gamma_alpha");
  if (j.contains("gamma_y")) t.weights.pose = j.at("gamma_y");
  if (j.contains("render_at_predicted_poses"))
    t.render_at_predicted_poses = j.at("render_at_predicted_poses");
}

void apply_pnp(pnp::McOptions& p, const json& j) {
  reject_unknown(j, kPnpKeys, "pnp");
  if (j.contains("starts")) p.solve.starts = j.at("starts");
  if (j.contains("max_iterations")) p.solve.max_iterations = j.at("max_iterations");
  if (j.contains("grad_tol")) p.solve.grad_tol = j.at("grad_tol");
  if (j.contains("lambda_init")) p.solve.lambda_init = j.at("lambda_init");
  if (j.contains("depth_clamp")) p.solve.depth_clamp = j.at("depth_clamp");
  if (j.contains("amis_rounds")) p.amis.rounds = j.at("amis_rounds");
  if (j.contains("amis_samples")) p.amis.samples_per_round = j.at("amis_samples");
  if (j.contains("t_dof")) p.amis.t_dof = j.at("t_dof");
  if (j.contains("seed")) {
    p.solve.seed = j.at("seed");
    p.amis.seed = j.at("seed");
  }
}

void apply_json(RunConfig& cfg, const json& j) {
  static const std::set<std::string> sections = {"model", "train", "data", "eval", "pnp"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!sections.count(it.key()))
      throw Error("config: unknown section \"" + it.key() + "\"");
  if (j.contains("model")) apply_model(cfg.model, j.at("model"));
  if (j.contains("train")) apply_train(cfg.train, j.at("train"));
  if (j.contains("pnp")) apply_pnp(cfg.train.pnp, j.at("pnp"));
  if (j.contains("data")) {
    reject_unknown(j.at("data"), kDataKeys, "data");
    if (j.at("data").contains("root")) cfg.data.root = j.at("data").at("root");
  }
  if (j.contains("eval")) {
    reject_unknown(j.at("eval"), kEvalKeys, "eval");
    if (j.at("eval").contains("views")) cfg.eval.views = j.at("eval").at("views");
    if (j.at("eval").contains("seed")) cfg.eval.seed = j.at("eval").at("seed");
  }
  cfg.model.validate();
}

json parse_value(const std::string& text) {
  // Numbers and booleans parse as themselves; anything else is a string.
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

}  // namespace

void RunConfig::apply_override(const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos)
    throw Error("config: override key \"" + dotted_key + "\" needs a section prefix");
  json j;
  j[dotted_key.substr(0, dot)][dotted_key.substr(dot + 1)] = parse_value(value);
  apply_json(*this, j);
}

RunConfig RunConfig::from_file(const std::string& path,
                               const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw Error("config: cannot open " + path);
    apply_json(cfg, json::parse(in));
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) throw Error("config: override \"" + ov + "\" is not key=value");
    cfg.apply_override(ov.substr(0, eq), ov.substr(eq + 1));
  }
  return cfg;
}

RunConfig RunConfig::from_overrides(const std::vector<std::string>& overrides) {
  return from_file("", overrides);
}

std::string RunConfig::to_json() const {
  json j;
  j["model"] = model.to_json();
  json t;
  t["lr"] = train.lr_peak;
  t["warmup"] = train.warmup_steps;
  t["steps"] = train.total_steps;
  t["batch_size"] = train.batch_size;
  t["crop"] = train.crop;
  t["views"] = train.n_input_views;
  t["seed"] = train.seed;
  t["beta1"] = train.beta1;
  t["beta2"] = train.beta2;
  t["weight_decay"] = train.weight_decay;
  t["checkpoint_interval"] = train.checkpoint_interval;
  t["gamma_c_l2"] = train.weights.render_l2;
  t["gamma_c_lpips"] = train.weights.render_lpips;
  t["gamma_p"] = train.weights.point;
  t["gamma_alpha"] = train.weights.alpha;
  t["gamma_y"] = train.weights.pose;
  t["render_at_predicted_poses"] = train.render_at_predicted_poses;
  j["train"] = t;
  json p;
  p["starts"] = train.pnp.solve.starts;
  p["max_iterations"] = train.pnp.solve.max_iterations;
  p["grad_tol"] = train.pnp.solve.grad_tol;
  p["lambda_init"] = train.pnp.solve.lambda_init;
  p["depth_clamp"] = train.pnp.solve.depth_clamp;
  p["amis_rounds"] = train.pnp.amis.rounds;
  p["amis_samples"] = train.pnp.amis.samples_per_round;
  p["t_dof"] = train.pnp.amis.t_dof;
  j["pnp"] = p;
  json d;
  d["root"] = data.root;
  j["data"] = d;
  json e;
  e["views"] = eval.views;
  e["seed"] = eval.seed;
  j["eval"] = e;
  return j.dump(2);
}

void RunConfig::save(const std::string& path) const {
  std::ofstream(path) << to_json() << "\n";
}

std::vector<std::string> collect_overrides(const std::vector<std::string>& extras) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string tok = extras[i];
    if (tok.rfind("--", 0) != 0)
      throw Error("unrecognized argument \"" + tok + "\"");
    tok = tok.substr(2);
    const auto eq = tok.find('=');
    if (eq != std::string::npos) {
      out.push_back(tok);
    } else {
      if (i + 1 >= extras.size())
        throw Error("override \"--" + tok + "\" is missing a value");
      out.push_back(tok + "=" + extras[++i]);
    }
  }
  return out;
}

}  // namespace pflrm::cli
