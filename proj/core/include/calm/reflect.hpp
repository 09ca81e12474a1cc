#pragma once

// Reflective reasoning loop: identity-conditioned prompt generation,
// prompt-conditioned task prediction, inverse identity estimation, and a
// threshold-gated single correction cycle.

#include "calm/alignment.hpp"

namespace calm::reflect {

using ad::Mat;
using ad::Value;

struct ReflectConfig {
  int prompt_len = 4;       // L_p virtual tokens
  int decoder_layers = 2;   // paper setup uses 6 layers / width 768
  int identity_hidden = 64; // inverse-identity MLP hidden width
};

struct CalibrationConfig {
  double threshold = 0.5;
  int max_cycles = 1;
  void validate() const {
    if (threshold <= 0.0 || threshold >= 1.0)
      throw ConfigError("calibration: threshold must be in (0,1)");
    if (max_cycles != 1)
      throw ConfigError("calibration: max_cycles is fixed at 1");
  }
};

struct PromptEmbedding {
  Value vectors;  // L_p x d_model
};

struct PredictionRecord {
  Value logits;   // 1 x task_label_count
  int label = 0;  // argmax
  Value penult;   // 1 x d_model, representation before the output layer
};

struct IdentityEstimate {
  Value culture_dist;  // 1 x num_cultures, softmax
  Value h_reverse;     // 1 x d_calib
};

struct ReflectiveTrace {
  PromptEmbedding prompt;
  PredictionRecord raw_output;
  Eigen::RowVectorXd h_reverse;
  double delta = 0.0;
  bool corrected = false;
  PredictionRecord final_output;
  double delta_after = 0.0;  // recorded, never used for a second cycle
};

class ReflectiveLoop {
 public:
  ReflectiveLoop() = default;
  ReflectiveLoop(nn::ParamRegistry& reg, const ReflectConfig& cfg, int d_model, int d,
                 int d_calib, int task_label_count, int num_cultures, Rng& rng);

  // detach_task stops gradient through the task-channel input so only the
  // identity state carries gradient into the prompt.
  PromptEmbedding generate_prompt(const Value& h_task,
                                  const alignment::IdentityState& identity,
                                  bool detach_task = false) const;

  // Prompt-conditioned prediction. Token positions are offset by L_p so a
  // zero prompt is exactly equivalent to an absent one. detach_direct stops
  // gradient through the direct (promptless) encoder term, leaving the
  // prompt as the only trainable conduit.
  PredictionRecord reason(const PromptEmbedding& prompt, const std::vector<int>& tokens,
                          const encoder::Encoder& enc, bool detach_direct = false) const;

  IdentityEstimate infer_identity(const PredictionRecord& raw) const;

  // Cross-entropy of the inverse culture distribution against the true
  // culture; the training signal for the identity head.
  Value identity_loss(const IdentityEstimate& est, int culture_id) const;

  // 1 - cos(h_reverse, calib) with both the calibration signature and the
  // penultimate representation held fixed: trains the inverse projection as
  // a pure readout so that the reflective delta carries signal without
  // perturbing the rest of the network.
  Value calibration_loss(const PredictionRecord& raw, const Value& calib) const;

  // Runs delta = cos(identity.calib, h_reverse) against the threshold; on
  // mismatch re-runs the alignment pool once with fresh Gumbel noise at
  // the schedule's final temperature and re-reasons.
  ReflectiveTrace calibrate_and_correct(const alignment::IdentityState& identity,
                                        const Value& h_task,
                                        const std::vector<int>& tokens,
                                        const Value& refined_explicit,
                                        const Value& refined_latent,
                                        const CalibrationConfig& cfg,
                                        const alignment::AlignmentPool& pool,
                                        const encoder::Encoder& enc,
                                        std::uint64_t correction_seed) const;

  const ReflectConfig& config() const { return cfg_; }

 private:
  ReflectConfig cfg_;
  int d_model_ = 0;
  nn::Mlp2 prompt_seed_;                      // (d_model + 2d) -> L_p*d_model
  std::vector<nn::TransformerLayer> decoder_; // causal, width d_model
  nn::Linear prompt_ctx_;                     // d_model -> d_model
  nn::Linear task_out_;                       // d_model -> task_label_count
  nn::Mlp2 identity_mlp_;                     // d_model -> num_cultures
  nn::Linear reverse_proj_;                   // d_model -> d_calib
};

}  // namespace calm::reflect
