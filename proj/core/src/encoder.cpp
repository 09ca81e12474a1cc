#include "calm/encoder.hpp"

namespace calm::encoder {

Encoder::Encoder(nn::ParamRegistry& reg, const EncoderConfig& cfg, int num_cultures,
                 Rng& rng)
    : cfg_(cfg), num_cultures_(num_cultures) {
  tok_emb_ = reg.add("enc.tok_emb", nn::gaussian_init(cfg.vocab_size, cfg.d_model, rng));
  pos_emb_ = reg.add("enc.pos_emb", nn::gaussian_init(cfg.max_len, cfg.d_model, rng));
  for (int l = 0; l < cfg.n_layers; ++l)
    layers_.emplace_back(reg, "enc.layer" + std::to_string(l), cfg.d_model,
                         cfg.ffn_hidden, cfg.n_heads, rng);
  final_ln_ = nn::LayerNorm(reg, "enc.final_ln", cfg.d_model);
  task_head_ = nn::Mlp2(reg, "enc.task_head", cfg.d_model, cfg.head_hidden, cfg.d_model, rng);
  explicit_head_ =
      nn::Mlp2(reg, "enc.explicit_head", cfg.d_model, cfg.head_hidden, cfg.d_model, rng);
  latent_head_ =
      nn::Mlp2(reg, "enc.latent_head", cfg.d_model, cfg.head_hidden, cfg.d_model, rng);
  infill_out_ = nn::Linear(reg, "enc.infill_out", cfg.d_model, cfg.vocab_size, rng);
  style_out_ = nn::Linear(reg, "enc.style_out", cfg.d_model, num_cultures, rng);
}

HiddenStates Encoder::encode(const std::vector<int>& tokens, int pos_offset) const {
  if (tokens.empty()) throw InputError("encode: empty token sequence");
  std::vector<int> pos(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg_.vocab_size)
      throw InputError("encode: token id " + std::to_string(tokens[i]) +
                       " out of vocabulary");
    int p = pos_offset + static_cast<int>(i);
    if (p >= cfg_.max_len)
      throw InputError("encode: sequence exceeds max_len");
    pos[i] = p;
  }
  Value x = ad::add(ad::gather_rows(tok_emb_, tokens), ad::gather_rows(pos_emb_, pos));
  for (const auto& layer : layers_) x = layer(x);
  return HiddenStates{final_ln_(x)};
}

ACSRepresentation Encoder::disentangle(const HiddenStates& h) const {
  return {task_head_(h.values), explicit_head_(h.values), latent_head_(h.values)};
}

SpanInfillResult Encoder::span_infill_loss(const corpus::Example& ex,
                                           const ACSRepresentation& acs) const {
  if (ex.marker_positions.empty())
    return {ad::scalar(0.0), false};
  int n = static_cast<int>(acs.h_explicit->val.rows());
  std::vector<int> labels;
  std::vector<Value> rows;
  for (int p : ex.marker_positions) {
    if (p < 0 || p >= n)
      throw InputError("span_infill_loss: marker position out of range");
    rows.push_back(ad::slice_rows(acs.h_explicit, p, 1));
    labels.push_back(ex.tokens[p]);
  }
  Value logits = infill_out_(ad::concat_rows_n(rows));
  return {ad::cross_entropy_rows(logits, labels), true};
}

Value Encoder::style_classification_loss(const corpus::Example& ex,
                                         const ACSRepresentation& acs) const {
  if (ex.culture_id < 0 || ex.culture_id >= num_cultures_)
    throw InputError("style_classification_loss: invalid culture_id");
  Value pooled = ad::mean_rows(acs.h_latent);
  Value logits = style_out_(pooled);
  return ad::cross_entropy_rows(logits, {ex.culture_id});
}

}  // namespace calm::encoder
