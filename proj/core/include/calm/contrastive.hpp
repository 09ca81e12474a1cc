#pragma once

// Contrastive window: per-channel projection heads producing refined
// token features, plus the NT-Xent losses over pooled normalized
// embeddings with in-batch cross-culture negatives.

#include "calm/encoder.hpp"

namespace calm::contrastive {

using ad::Mat;
using ad::Value;

enum class Channel { Explicit, Latent };

struct ProjectedEmbedding {
  Eigen::RowVectorXd vector;  // unit L2 norm
  Channel channel = Channel::Explicit;
  int culture_id = 0;
};

struct ContrastiveConfig {
  double temperature = 0.07;
  int batch_size = 64;
  void validate() const {
    if (temperature <= 0) throw ConfigError("contrastive: temperature must be > 0");
    if (batch_size < 2) throw ConfigError("contrastive: batch_size must be >= 2");
  }
};

// Pure scalar NT-Xent; the graph path in window_loss is checked against it.
double nt_xent(const ProjectedEmbedding& anchor, const ProjectedEmbedding& positive,
               const std::vector<ProjectedEmbedding>& negatives, double temperature);

struct ProjectionHeads {
  nn::Mlp2 proj_explicit, proj_latent;
  ProjectionHeads() = default;
  ProjectionHeads(nn::ParamRegistry& reg, int d, int hidden, Rng& rng)
      : proj_explicit(reg, "contrastive.proj_explicit", d, hidden, d, rng),
        proj_latent(reg, "contrastive.proj_latent", d, hidden, d, rng) {}

  // Refined per-token features: projected then row-normalized.
  Value refine(const Value& h_channel, Channel ch) const {
    const nn::Mlp2& head = (ch == Channel::Explicit) ? proj_explicit : proj_latent;
    return ad::l2_normalize_rows(head(h_channel));
  }
};

struct WindowLoss {
  Value l_explicit, l_latent, l_window;  // 1x1 each; l_window = sum
};

// Per-example channel embeddings for a batch: pooled refined features,
// L2-normalized. Rows follow [anchors..., positives...].
struct BatchEmbeddings {
  std::vector<Value> pooled_explicit;  // each 1 x d
  std::vector<Value> pooled_latent;
  std::vector<int> culture_ids;        // size 2B
};

BatchEmbeddings embed_batch(const corpus::ContrastiveBatch& batch,
                            const encoder::Encoder& enc, const ProjectionHeads& heads);

WindowLoss window_loss(const corpus::ContrastiveBatch& batch,
                       const encoder::Encoder& enc, const ProjectionHeads& heads,
                       const ContrastiveConfig& cfg);

// Same loss computed from precomputed embeddings (lets the training loop
// reuse one forward pass for both the window loss and the alignment pool).
WindowLoss window_loss_from(const BatchEmbeddings& be, const ContrastiveConfig& cfg);

}  // namespace calm::contrastive
