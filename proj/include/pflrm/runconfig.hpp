#pragma once

#include <string>
#include <vector>

#include "pflrm/model.hpp"
#include "pflrm/training.hpp"

namespace pflrm::cli {

struct EvalSettings {
  int views = 4;
  std::uint64_t seed = 0;
};

struct DataSettings {
  std::string root;
};

/// Merged run configuration: JSON config file sections (model, train, data,
/// eval, pnp) plus dotted-path overrides like --train.steps=100. Unknown keys
/// are rejected.
struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  DataSettings data;
  EvalSettings eval;

  static RunConfig from_file(const std::string& path,
                             const std::vector<std::string>& overrides = {});
  static RunConfig from_overrides(const std::vector<std::string>& overrides);
  void apply_override(const std::string& dotted_key, const std::string& value);
  std::string to_json() const;
  void save(const std::string& path) const;
};

/// Parses leftover CLI tokens of the form --a.b=v or --a.b v into overrides.
std::vector<std::string> collect_overrides(const std::vector<std::string>& extras);

}  // namespace pflrm::cli
