#pragma once

// Whole-model assembly: encoder trunk + ACS heads, contrastive projection
// heads, alignment pool, and reflective loop share one parameter registry.
// Checkpoints are a raw little-endian parameter blob plus a JSON manifest.

#include "calm/reflect.hpp"

namespace calm::model {

struct ModelConfig {
  encoder::EncoderConfig encoder;
  alignment::AlignmentConfig alignment;
  reflect::ReflectConfig reflect;
  contrastive::ContrastiveConfig contrastive;
  reflect::CalibrationConfig calibration;
  int proj_hidden = 64;  // contrastive projection head hidden width
  int num_cultures = 8;
  int task_label_count = 4;
  std::uint64_t init_seed = 1;
};

class CalmModel {
 public:
  explicit CalmModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }

  const encoder::Encoder& enc() const { return encoder_; }
  const contrastive::ProjectionHeads& heads() const { return heads_; }
  const alignment::AlignmentPool& pool() const { return pool_; }
  const reflect::ReflectiveLoop& loop() const { return loop_; }

  // Per-example forward to refined per-token features (both channels).
  struct Refined {
    ad::Value h_task;       // n x d_model
    ad::Value refined_explicit;  // n x d, row-normalized
    ad::Value refined_latent;
    encoder::ACSRepresentation acs;
  };
  Refined refine(const std::vector<int>& tokens) const;

  // Pooled refined embedding used by probes: unit-normalized mean of each
  // channel's refined token features, concatenated (explicit then latent).
  Eigen::RowVectorXd refined_embedding(const std::vector<int>& tokens) const;

  void save_checkpoint(const std::string& dir, const std::string& config_hash,
                       std::uint64_t seed) const;
  void load_checkpoint(const std::string& dir);

 private:
  ModelConfig cfg_;
  nn::ParamRegistry reg_;
  encoder::Encoder encoder_;
  contrastive::ProjectionHeads heads_;
  alignment::AlignmentPool pool_;
  reflect::ReflectiveLoop loop_;
};

}  // namespace calm::model
