#pragma once

// Single-document JSON run configuration: corpus spec, model, training,
// calibration, and eval options. Unknown keys are rejected up front.

#include <string>

#include "calm/model.hpp"
#include "calm/train.hpp"

namespace calm::config {

struct EvalOptions {
  int knn_k = 10;
  std::array<double, 3> split_ratios{0.8, 0.0, 0.2};
};

struct RunConfig {
  corpus::CorpusSpec corpus_spec;
  model::ModelConfig model;
  train::TrainConfig train;
  EvalOptions eval;
  std::uint64_t seed = 1;

  // Applies the top-level seed to the sub-configs that consume it.
  void propagate_seed();
};

RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& json_text);

// Canonical serialized form; its FNV-1a hash goes into run manifests.
std::string canonical_json(const RunConfig& cfg);

void write_manifest(const std::string& dir, const RunConfig& cfg);

}  // namespace calm::config
