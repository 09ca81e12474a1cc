#include "calm/alignment.hpp"

#include <algorithm>
#include <numeric>

namespace calm::alignment {

ClusterAssignment gumbel_assign(const Value& logits, double temperature,
                                std::uint64_t seed, contrastive::Channel channel,
                                const std::optional<Mat>& forced_noise) {
  if (temperature <= 0)
    throw ConfigError("gumbel_assign: temperature must be positive");
  if (!logits->val.allFinite())
    throw InputError("gumbel_assign: non-finite logits");
  Mat g;
  if (forced_noise) {
    g = *forced_noise;
    if (g.rows() != logits->val.rows() || g.cols() != logits->val.cols())
      throw ContractError("gumbel_assign: forced noise shape mismatch");
  } else {
    Rng rng(seed ^ 0x6B3A5ULL);
    g = Mat(logits->val.rows(), logits->val.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.gumbel();
  }
  Value noisy = ad::scale(ad::add(logits, ad::constant(g)), 1.0 / temperature);
  return {ad::softmax_rows(noisy), channel};
}

ClusterMatrix cluster_summaries(const Value& h_refined, const ClusterAssignment& za) {
  const double eps = 1e-8;
  const Value& z = za.z;  // n x K
  if (z->val.rows() != h_refined->val.rows())
    throw ContractError("cluster_summaries: shape mismatch");
  Value mass = ad::sum_rows(z);                          // 1 x K
  Value weighted = ad::matmul(ad::transpose(z), h_refined);  // K x d
  // centroids[j] = weighted[j] / max(mass[j], eps)
  Eigen::Index K = z->val.cols();
  std::vector<Value> rows;
  for (Eigen::Index j = 0; j < K; ++j) {
    double mj = mass->val(0, j);
    Value row = ad::slice_rows(weighted, j, 1);
    if (mj <= eps) {
      rows.push_back(ad::scale(row, 1.0 / eps));  // mass ~ 0 forces near-zero centroid
    } else {
      rows.push_back(ad::sdiv(row, ad::pick(mass, 0, j)));
    }
  }
  return {ad::concat_rows_n(rows), mass};
}

AlignmentPool::AlignmentPool(nn::ParamRegistry& reg, const AlignmentConfig& cfg, int d,
                             Rng& rng)
    : cfg_(cfg), d_(d) {
  cluster_head_explicit_ = nn::Mlp2(reg, "align.cluster_head_explicit", d,
                                    cfg.cluster_hidden, cfg.clusters, rng);
  cluster_head_latent_ = nn::Mlp2(reg, "align.cluster_head_latent", d,
                                  cfg.cluster_hidden, cfg.clusters, rng);
  cross_attn_ = nn::MultiHeadAttention(reg, "align.cross_attn", d, d, cfg.d_align,
                                       cfg.attn_heads, rng);
  for (int dim = 0; dim < 3; ++dim) {
    std::string base = std::string("align.") + dimension_name(static_cast<Dimension>(dim));
    for (int e = 0; e < cfg.experts_per_dim; ++e) {
      std::string name = base + ".expert" + std::to_string(e);
      ExpertBlock blk;
      blk.in = nn::Linear(reg, name + ".in", cfg.d_align, cfg.expert_hidden, rng);
      blk.l1 = nn::TransformerLayer(reg, name + ".l1", cfg.expert_hidden, cfg.expert_ffn,
                                    4, rng);
      blk.l2 = nn::TransformerLayer(reg, name + ".l2", cfg.expert_hidden, cfg.expert_ffn,
                                    4, rng);
      blk.out = nn::Linear(reg, name + ".out", cfg.expert_hidden, cfg.d_align, rng);
      experts_[dim].push_back(std::move(blk));
    }
    gates_[dim] = nn::Linear(reg, base + ".gate", cfg.d_align, cfg.experts_per_dim, rng);
  }
  concat_mlp_ = nn::Mlp2(reg, "align.concat_mlp", 2 * d, cfg.d_align, cfg.d_align, rng);
  fusion_ = nn::Mlp2(reg, "align.fusion", 3 * cfg.d_align, cfg.fusion_hidden, 2 * d, rng);
  calib_proj_ = nn::Linear(reg, "align.calib_proj", 2 * d, cfg.d_calib, rng);
}

Value AlignmentPool::cluster_logits(const Value& h_refined,
                                    contrastive::Channel ch) const {
  const nn::Mlp2& head = (ch == contrastive::Channel::Explicit)
                             ? cluster_head_explicit_
                             : cluster_head_latent_;
  return head(h_refined);
}

Value AlignmentPool::cross_attend(const ClusterMatrix& c_latent,
                                  const ClusterMatrix& c_explicit,
                                  std::vector<Mat>* attn_weights) const {
  return cross_attn_(c_latent.centroids, c_explicit.centroids, attn_weights);
}

std::pair<Mat, std::vector<std::vector<Value>>> AlignmentPool::expert_scores(
    const std::vector<Value>& h_align_pooled, Dimension dim) const {
  int B = static_cast<int>(h_align_pooled.size());
  int Kd = cfg_.experts_per_dim;
  Mat values(Kd, B);
  std::vector<std::vector<Value>> nodes(Kd, std::vector<Value>(B));
  const nn::Linear& gate = gates_[static_cast<int>(dim)];
  for (int b = 0; b < B; ++b) {
    Value s = gate(h_align_pooled[b]);  // 1 x Kd
    for (int k = 0; k < Kd; ++k) {
      nodes[k][b] = ad::pick(s, 0, k);
      values(k, b) = s->val(0, k);
    }
  }
  return {values, nodes};
}

RoutingDecision expert_choice_route(const Mat& score_values,
                                    const std::vector<std::vector<Value>>& score_nodes,
                                    int k, Dimension dim) {
  if (k < 1) throw ConfigError("expert_choice_route: k must be >= 1");
  int Kd = static_cast<int>(score_values.rows());
  int B = static_cast<int>(score_values.cols());
  RoutingDecision rd;
  rd.dimension = dim;
  rd.scores = score_values;
  rd.selected.resize(Kd);
  rd.gates.resize(B);

  int take = std::min(k, B);
  for (int e = 0; e < Kd; ++e) {
    std::vector<int> idx(B);
    std::iota(idx.begin(), idx.end(), 0);
    // Ties broken by lower example index (stable sort on descending score).
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return score_values(e, a) > score_values(e, b);
    });
    idx.resize(take);
    std::sort(idx.begin(), idx.end());
    rd.selected[e] = idx;
  }
  // Gate per covered example: softmax over the scores of its selectors.
  for (int b = 0; b < B; ++b) {
    std::vector<int> selectors;
    for (int e = 0; e < Kd; ++e)
      if (std::find(rd.selected[e].begin(), rd.selected[e].end(), b) !=
          rd.selected[e].end())
        selectors.push_back(e);
    if (selectors.empty()) continue;
    std::vector<Value> sc;
    for (int e : selectors) sc.push_back(score_nodes[e][b]);
    Value row = ad::softmax_rows(ad::transpose(ad::concat_rows_n(sc)));
    for (std::size_t i = 0; i < selectors.size(); ++i)
      rd.gates[b][selectors[i]] = ad::pick(row, 0, static_cast<Eigen::Index>(i));
  }
  return rd;
}

Value load_balance_loss(const std::vector<RoutingDecision>& routings, int batch_size) {
  if (routings.empty()) return ad::scalar(0.0);
  std::vector<Value> per_dim;
  for (const auto& rd : routings) {
    int Kd = static_cast<int>(rd.selected.size());
    // importance_e = total gate mass routed to expert e.
    std::vector<Value> importance(Kd, ad::scalar(0.0));
    for (int b = 0; b < batch_size; ++b)
      for (const auto& [e, gate] : rd.gates[b])
        importance[e] = ad::add(importance[e], gate);
    Value imp = ad::concat_rows_n(importance);  // Kd x 1
    Value mean = ad::mean_all(imp);
    Value dev = ad::sub(imp, ad::smul(mean, ad::constant(Mat::Ones(Kd, 1))));
    Value var = ad::mean_all(ad::mul(dev, dev));
    // CV^2 = var / mean^2; experts with zero total importance are possible,
    // but mean > 0 whenever any example is covered.
    double m = mean->val(0, 0);
    if (m <= 0) { per_dim.push_back(ad::scalar(0.0)); continue; }
    per_dim.push_back(ad::sdiv(var, ad::mul(mean, mean)));
  }
  Value total = per_dim[0];
  for (std::size_t i = 1; i < per_dim.size(); ++i) total = ad::add(total, per_dim[i]);
  return ad::scale(total, 1.0 / static_cast<double>(per_dim.size()));
}

std::vector<Value> AlignmentPool::dimension_output(const RoutingDecision& routing,
                                                   const std::vector<Value>& h_align,
                                                   Dimension dim) const {
  int B = static_cast<int>(h_align.size());
  const auto& pool = experts_[static_cast<int>(dim)];
  // Evaluate each expert only on the examples it selected.
  std::vector<std::map<int, Value>> expert_out(pool.size());
  for (std::size_t e = 0; e < pool.size(); ++e)
    for (int b : routing.selected[e])
      expert_out[e][b] = ad::mean_rows(pool[e](h_align[b]));
  std::vector<Value> out(B);
  for (int b = 0; b < B; ++b) {
    Value acc;
    for (const auto& [e, gate] : routing.gates[b]) {
      Value term = ad::smul(gate, expert_out[e][b]);
      acc = acc ? ad::add(acc, term) : term;
    }
    out[b] = acc ? acc : ad::constant(Mat::Zero(1, cfg_.d_align));
  }
  return out;
}

IdentityState AlignmentPool::fuse_identity(const Value& out_ctx, const Value& out_int,
                                           const Value& out_norm,
                                           const Value& h_explicit_ref,
                                           const Value& h_latent_ref) const {
  Value cat = ad::concat_cols(ad::concat_cols(out_ctx, out_int), out_norm);  // 1 x 3d_a
  Value fused = fusion_(cat);                                                // 1 x 2d
  Value residual = ad::concat_cols(h_explicit_ref, h_latent_ref);            // n x 2d
  Value h_self = ad::add_rowwise(residual, fused);
  Value pooled = ad::mean_rows(h_self);
  Value calib = calib_proj_(pooled);
  return {h_self, pooled, calib};
}

AlignmentPool::BatchResult AlignmentPool::forward(
    const std::vector<Value>& refined_explicit, const std::vector<Value>& refined_latent,
    double gumbel_temp, std::uint64_t noise_seed, bool freeze_noise_at_zero) const {
  int B = static_cast<int>(refined_explicit.size());
  BatchResult res;
  std::vector<Value> pooled_align;
  for (int b = 0; b < B; ++b) {
    std::optional<Mat> frozen_e, frozen_l;
    if (freeze_noise_at_zero) {
      frozen_e = Mat::Zero(refined_explicit[b]->val.rows(), cfg_.clusters);
      frozen_l = Mat::Zero(refined_latent[b]->val.rows(), cfg_.clusters);
    }
    auto z_e = gumbel_assign(cluster_logits(refined_explicit[b], contrastive::Channel::Explicit),
                             gumbel_temp, noise_seed + 2 * b, contrastive::Channel::Explicit,
                             frozen_e);
    auto z_l = gumbel_assign(cluster_logits(refined_latent[b], contrastive::Channel::Latent),
                             gumbel_temp, noise_seed + 2 * b + 1, contrastive::Channel::Latent,
                             frozen_l);
    auto c_e = cluster_summaries(refined_explicit[b], z_e);
    auto c_l = cluster_summaries(refined_latent[b], z_l);
    Value h_align;
    if (cfg_.ablate_cross_attention) {
      h_align = concat_mlp_(ad::concat_cols(c_l.centroids, c_e.centroids));
    } else {
      h_align = cross_attend(c_l, c_e);  // K x d_a
    }
    res.h_align.push_back(h_align);
    pooled_align.push_back(ad::mean_rows(h_align));
  }
  std::array<std::vector<Value>, 3> dim_outs;
  for (int dim = 0; dim < 3; ++dim) {
    auto [values, nodes] = expert_scores(pooled_align, static_cast<Dimension>(dim));
    RoutingDecision rd;
    if (cfg_.ablate_uniform_routing) {
      rd.dimension = static_cast<Dimension>(dim);
      rd.scores = values;
      rd.selected.resize(cfg_.experts_per_dim);
      rd.gates.resize(B);
      for (int e = 0; e < cfg_.experts_per_dim; ++e)
        for (int b = 0; b < B; ++b) rd.selected[e].push_back(b);
      for (int b = 0; b < B; ++b)
        for (int e = 0; e < cfg_.experts_per_dim; ++e)
          rd.gates[b][e] = ad::scalar(1.0 / cfg_.experts_per_dim);
    } else {
      rd = expert_choice_route(values, nodes, cfg_.expert_k, static_cast<Dimension>(dim));
    }
    dim_outs[dim] = dimension_output(rd, res.h_align, static_cast<Dimension>(dim));
    res.routings.push_back(std::move(rd));
  }
  res.balance_loss = load_balance_loss(res.routings, B);
  for (int b = 0; b < B; ++b)
    res.identities.push_back(fuse_identity(dim_outs[0][b], dim_outs[1][b], dim_outs[2][b],
                                           refined_explicit[b], refined_latent[b]));
  // Routing statistics (numeric).
  int covered = 0;
  for (const auto& rd : res.routings) {
    std::vector<double> imp(cfg_.experts_per_dim, 0.0);
    for (int b = 0; b < B; ++b) {
      if (!rd.gates[b].empty()) ++covered;
      for (const auto& [e, gate] : rd.gates[b]) imp[e] += gate->val(0, 0);
    }
    res.stats.importance.push_back(std::move(imp));
  }
  res.stats.coverage_fraction =
      B > 0 ? static_cast<double>(covered) / static_cast<double>(3 * B) : 0.0;
  return res;
}

}  // namespace calm::alignment
