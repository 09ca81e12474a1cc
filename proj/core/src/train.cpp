#include "calm/train.hpp"

namespace calm::train {

double lr_schedule(long step, long total_steps, const TrainConfig& cfg) {
  if (step < 0 || step > total_steps)
    throw ContractError("lr_schedule: step outside [0, total_steps]");
  long warmup = static_cast<long>(cfg.warmup_fraction * static_cast<double>(total_steps));
  if (warmup > 0 && step < warmup)
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
  return cfg.learning_rate;
}

namespace {

struct BatchForward {
  TotalLoss out;
  int corrections = 0;
  alignment::RoutingStats stats;
};

BatchForward forward_batch(const corpus::ContrastiveBatch& batch,
                           const model::CalmModel& m, const TrainConfig& cfg,
                           double gumbel_temp, std::uint64_t noise_seed,
                           bool contrastive_only) {
  int B = static_cast<int>(batch.anchors.size());
  const auto& w = cfg.loss_weights;
  BatchForward bf;

  // One shared forward per example feeds both the contrastive window and
  // the alignment pool.
  std::vector<model::CalmModel::Refined> anchors_r;
  contrastive::BatchEmbeddings be;
  auto pool_embed = [&](const model::CalmModel::Refined& r) {
    be.pooled_explicit.push_back(
        ad::l2_normalize_rows(ad::mean_rows(r.refined_explicit)));
    be.pooled_latent.push_back(ad::l2_normalize_rows(ad::mean_rows(r.refined_latent)));
  };
  for (const auto& ex : batch.anchors) {
    anchors_r.push_back(m.refine(ex.tokens));
    pool_embed(anchors_r.back());
    be.culture_ids.push_back(ex.culture_id);
  }
  for (const auto& ex : batch.positives) {
    auto r = m.refine(ex.tokens);
    pool_embed(r);
    be.culture_ids.push_back(ex.culture_id);
  }

  auto wl = contrastive::window_loss_from(be, m.config().contrastive);

  // Auxiliary stream objectives on anchors.
  ad::Value span_sum = ad::scalar(0.0), style_sum = ad::scalar(0.0);
  int span_active = 0;
  for (int b = 0; b < B; ++b) {
    auto sir = m.enc().span_infill_loss(batch.anchors[b], anchors_r[b].acs);
    if (sir.active) { span_sum = ad::add(span_sum, sir.loss); ++span_active; }
    style_sum = ad::add(
        style_sum, m.enc().style_classification_loss(batch.anchors[b], anchors_r[b].acs));
  }
  ad::Value span_mean =
      span_active > 0 ? ad::scale(span_sum, 1.0 / span_active) : span_sum;
  ad::Value style_mean = ad::scale(style_sum, 1.0 / B);

  ad::Value task_mean = ad::scalar(0.0);
  ad::Value identity_mean = ad::scalar(0.0);
  ad::Value balance = ad::scalar(0.0);

  if (!contrastive_only) {
    std::vector<ad::Value> re, rl;
    for (auto& r : anchors_r) { re.push_back(r.refined_explicit); rl.push_back(r.refined_latent); }
    auto pr = m.pool().forward(re, rl, gumbel_temp, noise_seed);
    balance = pr.balance_loss;
    bf.stats = pr.stats;

    std::vector<ad::Value> task_terms, id_terms;
    for (int b = 0; b < B; ++b) {
      const auto& ex = batch.anchors[b];
      auto prompt = m.loop().generate_prompt(anchors_r[b].h_task, pr.identities[b]);
      auto raw = m.loop().reason(prompt, ex.tokens, m.enc());
      reflect::IdentityEstimate est;
      if (cfg.identity_through_pool) {
        // Separate graph whose only trainable conduit is the identity state;
        // values match `raw` exactly, gradients skip the direct paths.
        auto prompt_id = m.loop().generate_prompt(anchors_r[b].h_task,
                                                  pr.identities[b], true);
        auto raw_id = m.loop().reason(prompt_id, ex.tokens, m.enc(), true);
        est = m.loop().infer_identity(raw_id);
      } else {
        est = m.loop().infer_identity(raw);
      }
      id_terms.push_back(m.loop().identity_loss(est, ex.culture_id));

      reflect::PredictionRecord final_rec = raw;
      if (cfg.reflect_in_loop) {
        double delta =
            ad::cosine(pr.identities[b].calib, est.h_reverse)->val(0, 0);
        if (delta < m.config().calibration.threshold) {
          ++bf.corrections;
          auto revised = m.pool().forward({re[b]}, {rl[b]},
                                          m.config().alignment.gumbel_temp_end,
                                          noise_seed ^ (0xD00DULL + b));
          auto p2 = m.loop().generate_prompt(anchors_r[b].h_task, revised.identities[0]);
          final_rec = m.loop().reason(p2, ex.tokens, m.enc());
        }
      }
      task_terms.push_back(
          ad::cross_entropy_rows(final_rec.logits, {ex.task_label}));
    }
    task_mean = ad::mean_all(ad::concat_rows_n(task_terms));
    identity_mean = ad::mean_all(ad::concat_rows_n(id_terms));
  }

  auto& out = bf.out;
  out.breakdown.task = task_mean->val(0, 0);
  out.breakdown.window = wl.l_window->val(0, 0);
  out.breakdown.explicit_aux = span_mean->val(0, 0);
  out.breakdown.latent_aux = style_mean->val(0, 0);
  out.breakdown.balance = balance->val(0, 0);
  out.breakdown.identity = identity_mean->val(0, 0);

  out.loss = ad::add(
      ad::add(ad::add(ad::scale(task_mean, w.task), ad::scale(wl.l_window, w.window)),
              ad::add(ad::scale(span_mean, w.explicit_aux),
                      ad::scale(style_mean, w.latent_aux))),
      ad::add(ad::scale(balance, w.balance), ad::scale(identity_mean, w.identity)));
  out.breakdown.total = out.loss->val(0, 0);

  struct Term { const char* name; double v; };
  for (auto [name, v] : {Term{"task", out.breakdown.task},
                         Term{"window", out.breakdown.window},
                         Term{"explicit_aux", out.breakdown.explicit_aux},
                         Term{"latent_aux", out.breakdown.latent_aux},
                         Term{"balance", out.breakdown.balance},
                         Term{"identity", out.breakdown.identity}})
    if (!std::isfinite(v))
      throw ContractError(std::string("train: non-finite loss term: ") + name);
  return bf;
}

}  // namespace

TotalLoss total_loss(const corpus::ContrastiveBatch& batch, const model::CalmModel& m,
                     const TrainConfig& cfg, double gumbel_temp,
                     std::uint64_t noise_seed, bool contrastive_only) {
  cfg.validate();
  return forward_batch(batch, m, cfg, gumbel_temp, noise_seed, contrastive_only).out;
}

TrainResult train(model::CalmModel& m, const std::vector<corpus::Example>& corpus,
                  const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  if (cfg.epochs == 0) return result;

  long steps_per_epoch =
      std::max<long>(1, static_cast<long>(corpus.size()) / cfg.batch_size);
  long total_steps = steps_per_epoch * cfg.epochs;

  nn::AdamW opt(m.params().params(), 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochMetrics em;
    bool contrastive_only = cfg.two_stage && epoch < cfg.epochs / 2;
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      auto batch = corpus::sample_contrastive_batch(
          corpus, cfg.batch_size, cfg.seed ^ (0x9E37ULL * (step + 1)));
      double temp = alignment::gumbel_temperature(m.config().alignment, step, total_steps);
      m.params().zero_grad();
      auto bf = forward_batch(batch, m, cfg, temp, cfg.seed ^ (0xA11CEULL * (step + 1)),
                              contrastive_only);
      ad::backward(bf.out.loss);
      double lr = lr_schedule(step, total_steps, cfg);
      opt.step(lr);

      em.mean.task += bf.out.breakdown.task;
      em.mean.window += bf.out.breakdown.window;
      em.mean.explicit_aux += bf.out.breakdown.explicit_aux;
      em.mean.latent_aux += bf.out.breakdown.latent_aux;
      em.mean.balance += bf.out.breakdown.balance;
      em.mean.identity += bf.out.breakdown.identity;
      em.mean.total += bf.out.breakdown.total;
      em.corrections += bf.corrections;
      em.lr = lr;
      em.gumbel_temp = temp;
      result.last_routing_stats = bf.stats;
    }
    double inv = 1.0 / static_cast<double>(steps_per_epoch);
    em.mean.task *= inv;
    em.mean.window *= inv;
    em.mean.explicit_aux *= inv;
    em.mean.latent_aux *= inv;
    em.mean.balance *= inv;
    em.mean.identity *= inv;
    em.mean.total *= inv;
    result.history.push_back(em);
  }
  return result;
}

}  // namespace calm::train
