#pragma once

// Training orchestration: batch sampling, loss composition, warmup
// schedule, the in-loop reflective step, and checkpointing hooks.

#include "calm/model.hpp"

namespace calm::train {

struct LossWeights {
  double task = 1.0;
  double window = 1.0;
  double explicit_aux = 0.5;
  double latent_aux = 0.5;
  double balance = 0.01;
  double identity = 0.5;
};

struct TrainConfig {
  double learning_rate = 3e-5;
  double weight_decay = 0.01;
  double warmup_fraction = 0.10;
  double clip_norm = 1.0;
  int epochs = 10;
  int batch_size = 64;
  LossWeights loss_weights;
  std::uint64_t seed = 1;
  bool two_stage = false;      // optional: contrastive-only first half
  bool reflect_in_loop = true; // Algorithm-style reflective step during training
  // Route the identity loss gradient exclusively through the identity prompt
  // (and hence the alignment pool): the direct encoder term and the task
  // channel are detached for that loss only. Forward values are unchanged.
  bool identity_through_pool = false;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("train: learning_rate must be positive");
    if (warmup_fraction <= 0 || warmup_fraction >= 1)
      throw ConfigError("train: warmup_fraction must be in (0,1)");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
    const double* w[] = {&loss_weights.task,       &loss_weights.window,
                         &loss_weights.explicit_aux, &loss_weights.latent_aux,
                         &loss_weights.balance,     &loss_weights.identity};
    for (auto p : w)
      if (*p < 0) throw ConfigError("train: loss weights must be nonnegative");
  }
};

// Linear ramp 0 -> lr over the warmup window, constant afterwards.
double lr_schedule(long step, long total_steps, const TrainConfig& cfg);

struct LossBreakdown {
  double task = 0, window = 0, explicit_aux = 0, latent_aux = 0, balance = 0,
         identity = 0;
  double total = 0;  // weighted sum of the terms above
};

// One batch's composed loss; `loss` is the graph scalar to backprop.
struct TotalLoss {
  ad::Value loss;
  LossBreakdown breakdown;
};

TotalLoss total_loss(const corpus::ContrastiveBatch& batch, const model::CalmModel& m,
                     const TrainConfig& cfg, double gumbel_temp,
                     std::uint64_t noise_seed, bool contrastive_only = false);

struct EpochMetrics {
  LossBreakdown mean;  // per-term epoch means
  double lr = 0;
  double gumbel_temp = 0;
  int corrections = 0;  // reflective corrections triggered this epoch
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  alignment::RoutingStats last_routing_stats;
};

TrainResult train(model::CalmModel& m, const std::vector<corpus::Example>& corpus,
                  const TrainConfig& cfg);

}  // namespace calm::train
