#include <benchmark/benchmark.h>

#include <calm/contrastive.hpp>

namespace {

using calm::contrastive::Channel;
using calm::contrastive::ProjectedEmbedding;

Eigen::RowVectorXd random_unit(int dim, calm::Rng& rng) {
  Eigen::RowVectorXd v(dim);
  for (int j = 0; j < dim; ++j) {
    v(j) = rng.normal();
  }
  return v / v.norm();
}

void BM_NtXentScalar(benchmark::State& state) {
  const int negatives_n = static_cast<int>(state.range(0));
  calm::Rng rng(11);
  const int dim = 128;
  ProjectedEmbedding anchor{random_unit(dim, rng), Channel::Explicit, 0};
  ProjectedEmbedding positive{random_unit(dim, rng), Channel::Explicit, 0};
  std::vector<ProjectedEmbedding> negatives;
  negatives.reserve(static_cast<std::size_t>(negatives_n));
  for (int i = 0; i < negatives_n; ++i) {
    negatives.push_back({random_unit(dim, rng), Channel::Explicit, 1 + i % 3});
  }
  for (auto _ : state) {
    double loss = calm::contrastive::nt_xent(anchor, positive, negatives, 0.07);
    benchmark::DoNotOptimize(loss);
  }
}

void BM_WindowLossGraph(benchmark::State& state) {
  const int pairs = static_cast<int>(state.range(0));
  calm::Rng rng(17);
  const int dim = 128;
  calm::contrastive::BatchEmbeddings be;
  for (int i = 0; i < 2 * pairs; ++i) {
    be.pooled_explicit.push_back(calm::ad::constant(random_unit(dim, rng)));
    be.pooled_latent.push_back(calm::ad::constant(random_unit(dim, rng)));
    be.culture_ids.push_back((i % pairs) % 4);
  }
  calm::contrastive::ContrastiveConfig cfg;
  for (auto _ : state) {
    auto loss = calm::contrastive::window_loss_from(be, cfg);
    calm::ad::backward(loss.l_window);
    benchmark::DoNotOptimize(loss.l_window->val(0, 0));
  }
}

}  // namespace

BENCHMARK(BM_NtXentScalar)->Arg(16)->Arg(63);
BENCHMARK(BM_WindowLossGraph)->Arg(16)->Arg(64);

BENCHMARK_MAIN();
