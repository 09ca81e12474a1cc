#include "calm/contrastive.hpp"

namespace calm::contrastive {

double nt_xent(const ProjectedEmbedding& anchor, const ProjectedEmbedding& positive,
               const std::vector<ProjectedEmbedding>& negatives, double temperature) {
  if (temperature <= 0) throw ConfigError("nt_xent: temperature must be > 0");
  if (anchor.channel != positive.channel)
    throw ContractError("nt_xent: anchor/positive channel mismatch");
  if (anchor.culture_id != positive.culture_id)
    throw ContractError("nt_xent: anchor and positive must share a culture");
  if (negatives.empty())
    throw ContractError("nt_xent: empty negative set");
  for (const auto& neg : negatives) {
    if (neg.channel != anchor.channel)
      throw ContractError("nt_xent: negative channel mismatch");
    if (neg.culture_id == anchor.culture_id)
      throw ContractError("nt_xent: negative shares the anchor culture");
  }
  double s_ap = anchor.vector.dot(positive.vector);
  // log-sum-exp over {positive} + negatives, stabilized.
  std::vector<double> scores{s_ap / temperature};
  for (const auto& neg : negatives)
    scores.push_back(anchor.vector.dot(neg.vector) / temperature);
  double m = *std::max_element(scores.begin(), scores.end());
  double z = 0;
  for (double s : scores) z += std::exp(s - m);
  return -(scores[0] - (m + std::log(z)));
}

BatchEmbeddings embed_batch(const corpus::ContrastiveBatch& batch,
                            const encoder::Encoder& enc, const ProjectionHeads& heads) {
  BatchEmbeddings be;
  auto push = [&](const corpus::Example& ex) {
    auto h = enc.encode(ex.tokens);
    auto acs = enc.disentangle(h);
    Value re = heads.refine(acs.h_explicit, Channel::Explicit);
    Value rl = heads.refine(acs.h_latent, Channel::Latent);
    be.pooled_explicit.push_back(ad::l2_normalize_rows(ad::mean_rows(re)));
    be.pooled_latent.push_back(ad::l2_normalize_rows(ad::mean_rows(rl)));
    be.culture_ids.push_back(ex.culture_id);
  };
  for (const auto& ex : batch.anchors) push(ex);
  for (const auto& ex : batch.positives) push(ex);
  return be;
}

namespace {

// Batch-mean NT-Xent over one channel; anchors without in-batch negatives
// are excluded from the mean.
Value channel_loss(const std::vector<Value>& emb, const std::vector<int>& cultures,
                   int B, double temperature) {
  std::vector<Value> per_anchor;
  for (int a = 0; a < B; ++a) {
    int pos = B + a;
    std::vector<Value> scores;
    scores.push_back(ad::scale(ad::dot(emb[a], emb[pos]), 1.0 / temperature));
    for (int j = 0; j < 2 * B; ++j) {
      if (cultures[j] == cultures[a]) continue;
      scores.push_back(ad::scale(ad::dot(emb[a], emb[j]), 1.0 / temperature));
    }
    if (scores.size() < 2) continue;  // no negatives for this anchor
    Value row = ad::transpose(ad::concat_rows_n(scores));  // 1 x (1+N)
    Value ls = ad::log_softmax_rows(row);
    per_anchor.push_back(ad::neg(ad::pick(ls, 0, 0)));
  }
  if (per_anchor.empty()) return ad::scalar(0.0);
  return ad::mean_all(ad::concat_rows_n(per_anchor));
}

}  // namespace

WindowLoss window_loss_from(const BatchEmbeddings& be, const ContrastiveConfig& cfg) {
  cfg.validate();
  int B = static_cast<int>(be.culture_ids.size()) / 2;
  WindowLoss out;
  out.l_explicit = channel_loss(be.pooled_explicit, be.culture_ids, B, cfg.temperature);
  out.l_latent = channel_loss(be.pooled_latent, be.culture_ids, B, cfg.temperature);
  out.l_window = ad::add(out.l_explicit, out.l_latent);
  return out;
}

WindowLoss window_loss(const corpus::ContrastiveBatch& batch,
                       const encoder::Encoder& enc, const ProjectionHeads& heads,
                       const ContrastiveConfig& cfg) {
  for (std::size_t i = 0; i < batch.anchors.size(); ++i)
    if (batch.anchors[i].culture_id != batch.positives[i].culture_id)
      throw ContractError("window_loss: anchor/positive culture mismatch");
  return window_loss_from(embed_batch(batch, enc, heads), cfg);
}

}  // namespace calm::contrastive
