#pragma once

// Identity alignment pool: Gumbel-Softmax clustering of refined token
// features, latent->explicit cross-attention over cluster centroids,
// dimension-partitioned expert-choice MoE, and residual identity fusion.

#include <array>
#include <map>
#include <optional>

#include "calm/contrastive.hpp"

namespace calm::alignment {

using ad::Mat;
using ad::Value;

enum class Dimension { Contextuality = 0, Interpersonality = 1, Normativity = 2 };
inline const char* dimension_name(Dimension d) {
  switch (d) {
    case Dimension::Contextuality: return "Contextuality";
    case Dimension::Interpersonality: return "Interpersonality";
    default: return "Normativity";
  }
}

struct AlignmentConfig {
  int clusters = 5;          // K
  int cluster_hidden = 256;  // cluster projection head hidden width
  int attn_heads = 8;
  int d_align = 128;         // d_a, cross-attention output width
  int experts_per_dim = 4;   // K_d
  int expert_hidden = 64;    // expert transformer width
  int expert_ffn = 256;
  int expert_k = 2;          // inputs each expert selects
  int fusion_hidden = 128;
  int d_calib = 64;
  double gumbel_temp_start = 1.0;
  double gumbel_temp_end = 0.2;
  // Ablation switches (directional comparisons only).
  bool ablate_cross_attention = false;  // concat + MLP instead of attention
  bool ablate_uniform_routing = false;  // every expert serves every example
};

// Cosine decay of the Gumbel temperature across training.
inline double gumbel_temperature(const AlignmentConfig& cfg, long step, long total) {
  if (total <= 0) return cfg.gumbel_temp_start;
  double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  double w = 0.5 * (1.0 + std::cos(M_PI * t));
  return cfg.gumbel_temp_end + (cfg.gumbel_temp_start - cfg.gumbel_temp_end) * w;
}

struct ClusterAssignment {
  Value z;  // n_tokens x K, row-stochastic
  contrastive::Channel channel = contrastive::Channel::Explicit;
};

struct ClusterMatrix {
  Value centroids;  // K x d
  Value mass;       // 1 x K
};

struct RoutingDecision {
  Dimension dimension = Dimension::Contextuality;
  Mat scores;                                  // K_d x B (numeric copy)
  std::vector<std::vector<int>> selected;      // per expert, chosen example ids
  std::vector<std::map<int, Value>> gates;     // per example, expert -> gate (1x1)
};

struct IdentityState {
  Value h_self;   // n_tokens x 2d
  Value pooled;   // 1 x 2d
  Value calib;    // 1 x d_calib
};

// z = softmax((logits + g) / temperature), g ~ Gumbel(0,1) from `seed`.
// Pass `forced_noise` to pin g (tests, finite-difference checks).
ClusterAssignment gumbel_assign(const Value& logits, double temperature,
                                std::uint64_t seed, contrastive::Channel channel,
                                const std::optional<Mat>& forced_noise = std::nullopt);

ClusterMatrix cluster_summaries(const Value& h_refined, const ClusterAssignment& z);

RoutingDecision expert_choice_route(const Mat& score_values,
                                    const std::vector<std::vector<Value>>& score_nodes,
                                    int k, Dimension dim);

Value load_balance_loss(const std::vector<RoutingDecision>& routings, int batch_size);

struct RoutingStats {
  std::vector<std::vector<double>> importance;  // [dimension][expert]
  double coverage_fraction = 0.0;               // covered examples / (3*B)
};

class AlignmentPool {
 public:
  AlignmentPool() = default;
  AlignmentPool(nn::ParamRegistry& reg, const AlignmentConfig& cfg, int d, Rng& rng);

  // Cluster logits for refined token features of one channel.
  Value cluster_logits(const Value& h_refined, contrastive::Channel ch) const;

  // Multi-head cross-attention, latent centroids as queries.
  Value cross_attend(const ClusterMatrix& c_latent, const ClusterMatrix& c_explicit,
                     std::vector<Mat>* attn_weights = nullptr) const;

  // scores[k][b] nodes plus a numeric matrix, per dimension.
  std::pair<Mat, std::vector<std::vector<Value>>> expert_scores(
      const std::vector<Value>& h_align_pooled, Dimension dim) const;

  // Weighted expert outputs per example; uncovered rows are zero.
  std::vector<Value> dimension_output(const RoutingDecision& routing,
                                      const std::vector<Value>& h_align,
                                      Dimension dim) const;

  IdentityState fuse_identity(const Value& out_ctx, const Value& out_int,
                              const Value& out_norm, const Value& h_explicit_ref,
                              const Value& h_latent_ref) const;

  struct BatchResult {
    std::vector<IdentityState> identities;
    std::vector<Value> h_align;            // per example, K x d_a
    std::vector<RoutingDecision> routings; // one per dimension
    Value balance_loss;                    // 1x1
    RoutingStats stats;
  };

  // Full pool over a batch of refined per-token features.
  BatchResult forward(const std::vector<Value>& refined_explicit,
                      const std::vector<Value>& refined_latent,
                      double gumbel_temp, std::uint64_t noise_seed,
                      bool freeze_noise_at_zero = false) const;

  const AlignmentConfig& config() const { return cfg_; }

 private:
  AlignmentConfig cfg_;
  int d_ = 0;
  nn::Mlp2 cluster_head_explicit_, cluster_head_latent_;
  nn::MultiHeadAttention cross_attn_;
  struct ExpertBlock {
    nn::Linear in;
    nn::TransformerLayer l1, l2;
    nn::Linear out;
    Value operator()(const Value& x) const { return out(l2(l1(in(x)))); }
  };
  std::array<std::vector<ExpertBlock>, 3> experts_;
  std::array<nn::Linear, 3> gates_;  // d_align -> experts_per_dim
  nn::Mlp2 concat_mlp_;              // 2d -> d_align, cross-attention ablation
  nn::Mlp2 fusion_;                  // 3*d_align -> 2d
  nn::Linear calib_proj_;            // 2d -> d_calib
};

}  // namespace calm::alignment
