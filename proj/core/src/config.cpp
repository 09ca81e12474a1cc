#include "calm/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace calm::config {

using json = nlohmann::ordered_json;

namespace {

void require_keys(const json& j, const std::string& where,
                  const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k))
      throw ConfigError("config: unknown key '" + k + "' in " + where);
}

template <typename T>
void opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_corpus(const json& j, corpus::CorpusSpec& s) {
  require_keys(j, "corpus",
               {"num_cultures", "vocab_size", "marker_vocab_per_culture",
                "marker_insert_prob", "style_params", "task_label_count",
                "sequence_length_range", "num_examples", "seed"});
  opt(j, "num_cultures", s.num_cultures);
  opt(j, "vocab_size", s.vocab_size);
  opt(j, "marker_vocab_per_culture", s.marker_vocab_per_culture);
  opt(j, "marker_insert_prob", s.marker_insert_prob);
  opt(j, "task_label_count", s.task_label_count);
  opt(j, "num_examples", s.num_examples);
  opt(j, "seed", s.seed);
  if (j.contains("sequence_length_range")) {
    auto r = j.at("sequence_length_range").get<std::vector<int>>();
    if (r.size() != 2) throw ConfigError("config: sequence_length_range needs 2 entries");
    s.min_length = r[0];
    s.max_length = r[1];
  }
  if (j.contains("style_params")) {
    s.style_params.clear();
    for (const auto& sp : j.at("style_params")) {
      require_keys(sp, "style_params[]",
                   {"mean_length", "formality_rate", "indirectness_rate"});
      corpus::StyleParams p;
      opt(sp, "mean_length", p.mean_length);
      opt(sp, "formality_rate", p.formality_rate);
      opt(sp, "indirectness_rate", p.indirectness_rate);
      s.style_params.push_back(p);
    }
  }
}

void default_style_params(corpus::CorpusSpec& s) {
  if (!s.style_params.empty()) return;
  for (int c = 0; c < s.num_cultures; ++c) {
    corpus::StyleParams p;
    p.mean_length = 10.0 + 1.5 * c;
    p.formality_rate = 0.1 + 0.08 * (c % 4);
    p.indirectness_rate = 0.1 + 0.08 * (c / 4);
    s.style_params.push_back(p);
  }
}

void parse_model(const json& j, model::ModelConfig& m) {
  require_keys(j, "model",
               {"d_model", "n_layers", "n_heads", "ffn_hidden", "head_hidden",
                "proj_hidden", "clusters", "cluster_hidden", "attn_heads", "d_align",
                "experts_per_dim", "expert_hidden", "expert_ffn", "expert_k",
                "fusion_hidden", "d_calib", "prompt_len", "decoder_layers",
                "temperature", "contrastive_batch_size", "calibration_threshold",
                "ablate_cross_attention", "ablate_uniform_routing"});
  opt(j, "d_model", m.encoder.d_model);
  opt(j, "n_layers", m.encoder.n_layers);
  opt(j, "n_heads", m.encoder.n_heads);
  opt(j, "ffn_hidden", m.encoder.ffn_hidden);
  opt(j, "head_hidden", m.encoder.head_hidden);
  opt(j, "proj_hidden", m.proj_hidden);
  opt(j, "clusters", m.alignment.clusters);
  opt(j, "cluster_hidden", m.alignment.cluster_hidden);
  opt(j, "attn_heads", m.alignment.attn_heads);
  opt(j, "d_align", m.alignment.d_align);
  opt(j, "experts_per_dim", m.alignment.experts_per_dim);
  opt(j, "expert_hidden", m.alignment.expert_hidden);
  opt(j, "expert_ffn", m.alignment.expert_ffn);
  opt(j, "expert_k", m.alignment.expert_k);
  opt(j, "fusion_hidden", m.alignment.fusion_hidden);
  opt(j, "d_calib", m.alignment.d_calib);
  opt(j, "prompt_len", m.reflect.prompt_len);
  opt(j, "decoder_layers", m.reflect.decoder_layers);
  opt(j, "temperature", m.contrastive.temperature);
  opt(j, "contrastive_batch_size", m.contrastive.batch_size);
  opt(j, "calibration_threshold", m.calibration.threshold);
  opt(j, "ablate_cross_attention", m.alignment.ablate_cross_attention);
  opt(j, "ablate_uniform_routing", m.alignment.ablate_uniform_routing);
}

void parse_train(const json& j, train::TrainConfig& t) {
  require_keys(j, "train",
               {"learning_rate", "weight_decay", "warmup_fraction", "clip_norm",
                "epochs", "batch_size", "loss_weights", "seed", "two_stage",
                "reflect_in_loop", "identity_through_pool"});
  opt(j, "learning_rate", t.learning_rate);
  opt(j, "weight_decay", t.weight_decay);
  opt(j, "warmup_fraction", t.warmup_fraction);
  opt(j, "clip_norm", t.clip_norm);
  opt(j, "epochs", t.epochs);
  opt(j, "batch_size", t.batch_size);
  opt(j, "seed", t.seed);
  opt(j, "two_stage", t.two_stage);
  opt(j, "reflect_in_loop", t.reflect_in_loop);
  opt(j, "identity_through_pool", t.identity_through_pool);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    require_keys(w, "loss_weights",
                 {"task", "window", "explicit_aux", "latent_aux", "balance", "identity"});
    opt(w, "task", t.loss_weights.task);
    opt(w, "window", t.loss_weights.window);
    opt(w, "explicit_aux", t.loss_weights.explicit_aux);
    opt(w, "latent_aux", t.loss_weights.latent_aux);
    opt(w, "balance", t.loss_weights.balance);
    opt(w, "identity", t.loss_weights.identity);
  }
}

void parse_eval(const json& j, EvalOptions& e) {
  require_keys(j, "eval", {"knn_k", "split_ratios"});
  opt(j, "knn_k", e.knn_k);
  if (j.contains("split_ratios")) {
    auto r = j.at("split_ratios").get<std::vector<double>>();
    if (r.size() != 3) throw ConfigError("config: split_ratios needs 3 entries");
    e.split_ratios = {r[0], r[1], r[2]};
  }
}

}  // namespace

void RunConfig::propagate_seed() {
  const char* env = std::getenv("CALM_SEED");
  if (env) seed = std::strtoull(env, nullptr, 10);
  corpus_spec.seed = corpus_spec.seed ? corpus_spec.seed : seed;
  train.seed = seed;
  model.init_seed = seed;
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  require_keys(j, "run config",
               {"corpus", "model", "train", "eval", "seed", "output_dir"});
  RunConfig cfg;
  if (j.contains("corpus")) parse_corpus(j.at("corpus"), cfg.corpus_spec);
  default_style_params(cfg.corpus_spec);
  if (j.contains("model")) parse_model(j.at("model"), cfg.model);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("eval")) parse_eval(j.at("eval"), cfg.eval);
  opt(j, "seed", cfg.seed);
  cfg.model.num_cultures = cfg.corpus_spec.num_cultures;
  cfg.model.task_label_count = cfg.corpus_spec.task_label_count;
  cfg.model.encoder.vocab_size = cfg.corpus_spec.vocab_size;
  cfg.model.encoder.max_len =
      cfg.corpus_spec.max_length + cfg.model.reflect.prompt_len + 4;
  cfg.propagate_seed();
  cfg.corpus_spec.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::string canonical_json(const RunConfig& cfg) {
  json j;
  json c;
  c["num_cultures"] = cfg.corpus_spec.num_cultures;
  c["vocab_size"] = cfg.corpus_spec.vocab_size;
  c["marker_vocab_per_culture"] = cfg.corpus_spec.marker_vocab_per_culture;
  c["marker_insert_prob"] = cfg.corpus_spec.marker_insert_prob;
  c["task_label_count"] = cfg.corpus_spec.task_label_count;
  c["sequence_length_range"] = {cfg.corpus_spec.min_length, cfg.corpus_spec.max_length};
  c["num_examples"] = cfg.corpus_spec.num_examples;
  c["seed"] = cfg.corpus_spec.seed;
  json sps = json::array();
  for (const auto& sp : cfg.corpus_spec.style_params)
    sps.push_back({{"mean_length", sp.mean_length},
                   {"formality_rate", sp.formality_rate},
                   {"indirectness_rate", sp.indirectness_rate}});
  c["style_params"] = sps;
  j["corpus"] = c;
  j["model"] = {{"d_model", cfg.model.encoder.d_model},
                {"n_layers", cfg.model.encoder.n_layers},
                {"n_heads", cfg.model.encoder.n_heads},
                {"ffn_hidden", cfg.model.encoder.ffn_hidden},
                {"head_hidden", cfg.model.encoder.head_hidden},
                {"proj_hidden", cfg.model.proj_hidden},
                {"clusters", cfg.model.alignment.clusters},
                {"cluster_hidden", cfg.model.alignment.cluster_hidden},
                {"attn_heads", cfg.model.alignment.attn_heads},
                {"d_align", cfg.model.alignment.d_align},
                {"experts_per_dim", cfg.model.alignment.experts_per_dim},
                {"expert_hidden", cfg.model.alignment.expert_hidden},
                {"expert_ffn", cfg.model.alignment.expert_ffn},
                {"expert_k", cfg.model.alignment.expert_k},
                {"fusion_hidden", cfg.model.alignment.fusion_hidden},
                {"d_calib", cfg.model.alignment.d_calib},
                {"prompt_len", cfg.model.reflect.prompt_len},
                {"decoder_layers", cfg.model.reflect.decoder_layers},
                {"temperature", cfg.model.contrastive.temperature},
                {"contrastive_batch_size", cfg.model.contrastive.batch_size},
                {"calibration_threshold", cfg.model.calibration.threshold},
                {"ablate_cross_attention", cfg.model.alignment.ablate_cross_attention},
                {"ablate_uniform_routing", cfg.model.alignment.ablate_uniform_routing}};
  j["train"] = {{"learning_rate", cfg.train.learning_rate},
                {"weight_decay", cfg.train.weight_decay},
                {"warmup_fraction", cfg.train.warmup_fraction},
                {"clip_norm", cfg.train.clip_norm},
                {"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"two_stage", cfg.train.two_stage},
                {"reflect_in_loop", cfg.train.reflect_in_loop},
                {"identity_through_pool", cfg.train.identity_through_pool},
                {"loss_weights",
                 {{"task", cfg.train.loss_weights.task},
                  {"window", cfg.train.loss_weights.window},
                  {"explicit_aux", cfg.train.loss_weights.explicit_aux},
                  {"latent_aux", cfg.train.loss_weights.latent_aux},
                  {"balance", cfg.train.loss_weights.balance},
                  {"identity", cfg.train.loss_weights.identity}}}};
  j["eval"] = {{"knn_k", cfg.eval.knn_k},
               {"split_ratios",
                {cfg.eval.split_ratios[0], cfg.eval.split_ratios[1],
                 cfg.eval.split_ratios[2]}}};
  j["seed"] = cfg.seed;
  return j.dump();
}

void write_manifest(const std::string& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  json m;
  m["version"] = "calm-0.1.0";
  m["config_hash"] = hex64(fnv1a(canonical_json(cfg)));
  m["seed"] = cfg.seed;
  std::ofstream f(dir + "/manifest.json");
  if (!f) throw InputError("manifest: cannot write in " + dir);
  f << m.dump(2) << "\n";
}

}  // namespace calm::config
