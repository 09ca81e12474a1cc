#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <calm/train.hpp>

using namespace calm;

namespace {

corpus::CorpusSpec small_spec(int cultures, int examples, std::uint64_t seed) {
  corpus::CorpusSpec spec;
  spec.num_cultures = cultures;
  spec.vocab_size = 160;
  spec.marker_vocab_per_culture = 4;
  spec.num_examples = examples;
  spec.min_length = 6;
  spec.max_length = 12;
  spec.seed = seed;
  for (int c = 0; c < cultures; ++c)
    spec.style_params.push_back({8.0 + c, 0.1 + 0.1 * c, 0.1 + 0.05 * c});
  return spec;
}

model::ModelConfig small_model_cfg(const corpus::CorpusSpec& spec) {
  model::ModelConfig cfg;
  cfg.encoder.vocab_size = spec.vocab_size;
  cfg.encoder.d_model = 16;
  cfg.encoder.n_layers = 1;
  cfg.encoder.n_heads = 2;
  cfg.encoder.ffn_hidden = 32;
  cfg.encoder.max_len = spec.max_length + 8;
  cfg.encoder.head_hidden = 8;
  cfg.alignment.clusters = 3;
  cfg.alignment.cluster_hidden = 8;
  cfg.alignment.attn_heads = 2;
  cfg.alignment.d_align = 8;
  cfg.alignment.experts_per_dim = 2;
  cfg.alignment.expert_hidden = 8;
  cfg.alignment.expert_ffn = 16;
  cfg.alignment.fusion_hidden = 8;
  cfg.alignment.d_calib = 6;
  cfg.reflect.decoder_layers = 1;
  cfg.reflect.identity_hidden = 16;
  cfg.proj_hidden = 16;
  cfg.num_cultures = spec.num_cultures;
  cfg.task_label_count = spec.task_label_count;
  cfg.init_seed = 5;
  return cfg;
}

std::vector<Eigen::MatrixXd> snapshot(const model::CalmModel& m) {
  std::vector<Eigen::MatrixXd> out;
  for (const auto& p : m.params().params()) out.push_back(p->val);
  return out;
}

bool identical(const std::vector<Eigen::MatrixXd>& a,
               const std::vector<Eigen::MatrixXd>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i])) return false;
  return true;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("learning rate schedule ramps linearly then holds") {
  train::TrainConfig cfg;  // lr 3e-5, warmup fraction 0.10
  long total = 100;        // -> 10 warmup steps
  CHECK(train::lr_schedule(0, total, cfg) == doctest::Approx(0.0));
  CHECK(train::lr_schedule(5, total, cfg) == doctest::Approx(1.5e-5));
  CHECK(train::lr_schedule(10, total, cfg) == doctest::Approx(3e-5));
  CHECK(train::lr_schedule(57, total, cfg) == 3e-5);
  CHECK(train::lr_schedule(100, total, cfg) == 3e-5);
  CHECK_THROWS_AS(train::lr_schedule(-1, total, cfg), ContractError);
  CHECK_THROWS_AS(train::lr_schedule(101, total, cfg), ContractError);
}

TEST_CASE("train config validation") {
  train::TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.learning_rate = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.warmup_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.loss_weights.window = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("loss composition") {
  auto spec = small_spec(4, 60, 3);
  auto corpus_ = corpus::generate_corpus(spec);
  model::CalmModel m(small_model_cfg(spec));
  auto batch = corpus::sample_contrastive_batch(corpus_, 8, 17);
  train::TrainConfig cfg;

  SUBCASE("all weights zero gives a zero total") {
    cfg.loss_weights = {0, 0, 0, 0, 0, 0};
    auto tl = train::total_loss(batch, m, cfg, 1.0, 23);
    CHECK(tl.breakdown.total == 0.0);
    CHECK(tl.loss->val(0, 0) == 0.0);
  }

  SUBCASE("a single active weight isolates its term") {
    cfg.loss_weights = {0, 1.0, 0, 0, 0, 0};
    auto tl = train::total_loss(batch, m, cfg, 1.0, 23);
    CHECK(tl.breakdown.total == doctest::Approx(tl.breakdown.window).epsilon(1e-12));
    CHECK(tl.breakdown.window > 0.0);
  }

  SUBCASE("breakdown total equals the weighted sum of terms") {
    auto tl = train::total_loss(batch, m, cfg, 1.0, 23);
    const auto& w = cfg.loss_weights;
    const auto& b = tl.breakdown;
    double expect = w.task * b.task + w.window * b.window +
                    w.explicit_aux * b.explicit_aux + w.latent_aux * b.latent_aux +
                    w.balance * b.balance + w.identity * b.identity;
    CHECK(b.total == doctest::Approx(expect).epsilon(1e-9));
    CHECK(tl.loss->val(0, 0) == doctest::Approx(b.total).epsilon(1e-9));
  }

  SUBCASE("contrastive-only mode drops every non-window term") {
    auto tl = train::total_loss(batch, m, cfg, 1.0, 23, /*contrastive_only=*/true);
    CHECK(tl.breakdown.task == 0.0);
    CHECK(tl.breakdown.identity == 0.0);
    CHECK(tl.breakdown.balance == 0.0);
    CHECK(tl.breakdown.window > 0.0);
  }
}

TEST_CASE("parameters are initialized as small gaussians with zero biases") {
  auto spec = small_spec(4, 10, 7);
  model::CalmModel m(small_model_cfg(spec));
  const auto& names = m.params().names();
  const auto& params = m.params().params();
  double sum = 0, sumsq = 0;
  long n = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& v = params[i]->val;
    if (names[i].size() >= 2 && names[i].substr(names[i].size() - 2) == ".b") {
      CHECK(v.isZero(0.0));
    } else if (v.size() >= 256) {
      sum += v.sum();
      sumsq += v.array().square().sum();
      n += v.size();
    }
  }
  REQUIRE(n > 1000);
  double mean = sum / n;
  double sd = std::sqrt(sumsq / n - mean * mean);
  CHECK(std::abs(mean) < 0.005);
  CHECK(sd == doctest::Approx(0.02).epsilon(0.15));
}

TEST_CASE("zero epochs leaves the model untouched") {
  auto spec = small_spec(4, 40, 9);
  auto corpus_ = corpus::generate_corpus(spec);
  model::CalmModel m(small_model_cfg(spec));
  auto before = snapshot(m);
  train::TrainConfig cfg;
  cfg.epochs = 0;
  cfg.batch_size = 8;
  auto result = train::train(m, corpus_, cfg);
  CHECK(result.history.empty());
  CHECK(identical(before, snapshot(m)));
}

TEST_CASE("training is deterministic in the seed") {
  auto spec = small_spec(4, 48, 11);
  auto corpus_ = corpus::generate_corpus(spec);
  train::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 77;
  cfg.reflect_in_loop = false;

  model::CalmModel m1(small_model_cfg(spec));
  auto r1 = train::train(m1, corpus_, cfg);
  model::CalmModel m2(small_model_cfg(spec));
  auto r2 = train::train(m2, corpus_, cfg);
  CHECK(identical(snapshot(m1), snapshot(m2)));
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t e = 0; e < r1.history.size(); ++e) {
    CHECK(r1.history[e].mean.total == r2.history[e].mean.total);
    CHECK(r1.history[e].corrections == r2.history[e].corrections);
  }
  // A different seed must change the trajectory.
  cfg.seed = 78;
  model::CalmModel m3(small_model_cfg(spec));
  auto r3 = train::train(m3, corpus_, cfg);
  CHECK_FALSE(identical(snapshot(m1), snapshot(m3)));
}

TEST_CASE("window loss falls over a short contrastive-only run") {
  auto spec = small_spec(4, 96, 13);
  auto corpus_ = corpus::generate_corpus(spec);
  model::CalmModel m(small_model_cfg(spec));
  train::TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-3;
  cfg.reflect_in_loop = false;
  cfg.loss_weights = {0, 1.0, 0, 0, 0, 0};
  auto result = train::train(m, corpus_, cfg);
  REQUIRE(result.history.size() == 4);
  CHECK(result.history.back().mean.window < result.history.front().mean.window);
  // Schedule metadata is recorded per epoch.
  CHECK(result.history.front().lr > 0.0);
  CHECK(result.history.front().gumbel_temp >= result.history.back().gumbel_temp);
}

TEST_CASE("checkpoints round-trip byte for byte") {
  namespace fs = std::filesystem;
  auto spec = small_spec(4, 10, 15);
  model::CalmModel m(small_model_cfg(spec));
  fs::path dir_a = fs::temp_directory_path() / "calm_ckpt_a";
  fs::path dir_b = fs::temp_directory_path() / "calm_ckpt_b";
  fs::create_directories(dir_a);
  fs::create_directories(dir_b);
  m.save_checkpoint(dir_a.string(), "cfg-hash", 15);

  model::CalmModel fresh(small_model_cfg(spec));
  // Perturb to prove load actually restores values.
  fresh.params().params()[0]->val.array() += 1.0;
  fresh.load_checkpoint(dir_a.string());
  CHECK(identical(snapshot(m), snapshot(fresh)));
  fresh.save_checkpoint(dir_b.string(), "cfg-hash", 15);
  CHECK(read_file((dir_a / "params.bin").string()) ==
        read_file((dir_b / "params.bin").string()));
  CHECK(read_file((dir_a / "manifest.json").string()) ==
        read_file((dir_b / "manifest.json").string()));
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}
