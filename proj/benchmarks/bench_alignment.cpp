#include <benchmark/benchmark.h>

#include <calm/alignment.hpp>

namespace {

std::vector<calm::ad::Value> random_features(int batch, int tokens, int dim,
                                             std::uint64_t seed) {
  calm::Rng rng(seed);
  std::vector<calm::ad::Value> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    Eigen::MatrixXd m(tokens, dim);
    for (int i = 0; i < tokens; ++i) {
      for (int j = 0; j < dim; ++j) {
        m(i, j) = rng.normal();
      }
    }
    out.push_back(calm::ad::constant(m));
  }
  return out;
}

void BM_AlignmentForward(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  const int d = 64;
  calm::alignment::AlignmentConfig cfg;
  cfg.d_align = 64;
  cfg.cluster_hidden = 128;
  cfg.fusion_hidden = 64;
  calm::nn::ParamRegistry reg;
  calm::Rng rng(7);
  calm::alignment::AlignmentPool pool(reg, cfg, d, rng);
  auto exp = random_features(batch, 12, d, 21);
  auto lat = random_features(batch, 12, d, 23);
  std::uint64_t seed = 100;
  for (auto _ : state) {
    auto result = pool.forward(exp, lat, 0.5, seed++);
    benchmark::DoNotOptimize(result.balance_loss->val(0, 0));
  }
}

}  // namespace

BENCHMARK(BM_AlignmentForward)->Arg(8)->Arg(32);
