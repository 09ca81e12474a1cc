#include "calm/reflect.hpp"

namespace calm::reflect {

ReflectiveLoop::ReflectiveLoop(nn::ParamRegistry& reg, const ReflectConfig& cfg,
                               int d_model, int d, int d_calib, int task_label_count,
                               int num_cultures, Rng& rng)
    : cfg_(cfg), d_model_(d_model) {
  prompt_seed_ = nn::Mlp2(reg, "reflect.prompt_seed", d_model + 2 * d, d_model,
                          cfg.prompt_len * d_model, rng);
  for (int l = 0; l < cfg.decoder_layers; ++l)
    decoder_.emplace_back(reg, "reflect.decoder" + std::to_string(l), d_model,
                          2 * d_model, 4, rng, /*causal=*/true);
  prompt_ctx_ = nn::Linear(reg, "reflect.prompt_ctx", d_model, d_model, rng);
  task_out_ = nn::Linear(reg, "reflect.task_out", d_model, task_label_count, rng);
  identity_mlp_ = nn::Mlp2(reg, "reflect.identity_mlp", d_model, cfg.identity_hidden,
                           num_cultures, rng);
  reverse_proj_ = nn::Linear(reg, "reflect.reverse_proj", d_model, d_calib, rng);
}

PromptEmbedding ReflectiveLoop::generate_prompt(
    const Value& h_task, const alignment::IdentityState& identity,
    bool detach_task) const {
  Value pooled_task = ad::mean_rows(h_task);                       // 1 x d_model
  if (detach_task) pooled_task = ad::constant(pooled_task->val);
  Value x = ad::concat_cols(pooled_task, identity.pooled);         // 1 x (d_model+2d)
  Value seed = ad::reshape_row(prompt_seed_(x), cfg_.prompt_len, d_model_);
  Value p = seed;
  for (const auto& layer : decoder_) p = layer(p);
  return {p};
}

PredictionRecord ReflectiveLoop::reason(const PromptEmbedding& prompt,
                                        const std::vector<int>& tokens,
                                        const encoder::Encoder& enc,
                                        bool detach_direct) const {
  // Token positions start after the virtual prompt slots.
  auto h = enc.encode(tokens, cfg_.prompt_len);
  Value pooled = ad::mean_rows(h.values);
  if (detach_direct) pooled = ad::constant(pooled->val);
  Value pctx = prompt_ctx_(ad::mean_rows(prompt.vectors));
  PredictionRecord rec;
  rec.penult = ad::add(pooled, pctx);
  rec.logits = task_out_(rec.penult);
  Eigen::Index best;
  rec.logits->val.row(0).maxCoeff(&best);
  rec.label = static_cast<int>(best);
  return rec;
}

IdentityEstimate ReflectiveLoop::infer_identity(const PredictionRecord& raw) const {
  Value logits = identity_mlp_(raw.penult);
  return {ad::softmax_rows(logits), reverse_proj_(raw.penult)};
}

Value ReflectiveLoop::identity_loss(const IdentityEstimate& est, int culture_id) const {
  // est.culture_dist is a softmax row; NLL of the true culture.
  Value p = ad::pick(est.culture_dist, 0, culture_id);
  return ad::neg(ad::log_(p));
}

Value ReflectiveLoop::calibration_loss(const PredictionRecord& raw,
                                       const Value& calib) const {
  Value target = ad::constant(calib->val);
  Value hr = reverse_proj_(ad::constant(raw.penult->val));
  return ad::add(ad::scalar(1.0), ad::neg(ad::cosine(target, hr)));
}

ReflectiveTrace ReflectiveLoop::calibrate_and_correct(
    const alignment::IdentityState& identity, const Value& h_task,
    const std::vector<int>& tokens, const Value& refined_explicit,
    const Value& refined_latent, const CalibrationConfig& cfg,
    const alignment::AlignmentPool& pool, const encoder::Encoder& enc,
    std::uint64_t correction_seed) const {
  cfg.validate();
  ReflectiveTrace trace;
  trace.prompt = generate_prompt(h_task, identity);
  trace.raw_output = reason(trace.prompt, tokens, enc);
  IdentityEstimate est = infer_identity(trace.raw_output);
  trace.h_reverse = est.h_reverse->val.row(0);
  trace.delta = ad::cosine(identity.calib, est.h_reverse)->val(0, 0);

  if (trace.delta >= cfg.threshold) {
    trace.corrected = false;
    trace.final_output = trace.raw_output;
    trace.delta_after = trace.delta;
    return trace;
  }
  // One corrective cycle: fresh Gumbel noise at the final annealing
  // temperature, new prompt, new reasoning pass. No second calibration.
  auto revised = pool.forward({refined_explicit}, {refined_latent},
                              pool.config().gumbel_temp_end, correction_seed);
  const alignment::IdentityState& id2 = revised.identities[0];
  PromptEmbedding p2 = generate_prompt(h_task, id2);
  trace.corrected = true;
  trace.final_output = reason(p2, tokens, enc);
  IdentityEstimate est2 = infer_identity(trace.final_output);
  trace.delta_after = ad::cosine(id2.calib, est2.h_reverse)->val(0, 0);
  return trace;
}

}  // namespace calm::reflect
