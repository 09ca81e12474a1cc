#pragma once

// Toy trainable encoder: token + learned positional embeddings feeding a
// 2-layer transformer trunk, plus three projection heads that split the
// hidden states into task, explicit-culture, and latent-culture streams.

#include "calm/corpus.hpp"
#include "calm/nn.hpp"

namespace calm::encoder {

using ad::Mat;
using ad::Value;

struct EncoderConfig {
  int vocab_size = 512;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int ffn_hidden = 256;
  int max_len = 64;       // positions; must cover prompt offset + sequence
  int head_hidden = 64;   // projection head hidden width (paper value 512)
};

struct HiddenStates {
  Value values;  // seq_len x d_model
  int seq_len() const { return static_cast<int>(values->val.rows()); }
};

struct ACSRepresentation {
  Value h_task, h_explicit, h_latent;  // each seq_len x d_model
};

struct SpanInfillResult {
  Value loss;     // 1x1, zero when inactive
  bool active;    // false when the example has no marker positions
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParamRegistry& reg, const EncoderConfig& cfg, int num_cultures, Rng& rng);

  // pos_offset shifts the positional table (used when virtual prompt tokens
  // occupy the leading positions).
  HiddenStates encode(const std::vector<int>& tokens, int pos_offset = 0) const;
  ACSRepresentation disentangle(const HiddenStates& h) const;

  SpanInfillResult span_infill_loss(const corpus::Example& ex,
                                    const ACSRepresentation& acs) const;
  Value style_classification_loss(const corpus::Example& ex,
                                  const ACSRepresentation& acs) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  int num_cultures_ = 0;
  Value tok_emb_, pos_emb_;
  std::vector<nn::TransformerLayer> layers_;
  nn::LayerNorm final_ln_;
  nn::Mlp2 task_head_, explicit_head_, latent_head_;
  nn::Linear infill_out_;  // d_model -> vocab
  nn::Linear style_out_;   // d_model -> num_cultures
};

}  // namespace calm::encoder
