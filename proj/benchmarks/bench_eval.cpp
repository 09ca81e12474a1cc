#include <benchmark/benchmark.h>

#include <calm/eval.hpp>

namespace {

void BM_KnnProbe(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int dim = 128;
  calm::Rng rng(5);
  Eigen::MatrixXd emb(n, dim);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = i % 8;
    for (int j = 0; j < dim; ++j) {
      emb(i, j) = rng.normal() + (j % 8 == i % 8 ? 1.5 : 0.0);
    }
  }
  for (auto _ : state) {
    auto result = calm::eval::knn_probe(emb, labels, 10);
    benchmark::DoNotOptimize(result.acc);
  }
}

void BM_AttributionSimilarity(benchmark::State& state) {
  const int pairs_n = static_cast<int>(state.range(0));
  calm::Rng rng(9);
  std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs;
  pairs.reserve(static_cast<std::size_t>(pairs_n));
  for (int i = 0; i < pairs_n; ++i) {
    Eigen::VectorXd a(64), b(64);
    for (int j = 0; j < 64; ++j) {
      a(j) = rng.normal();
      b(j) = 0.7 * a(j) + 0.3 * rng.normal();
    }
    pairs.emplace_back(a, b);
  }
  for (auto _ : state) {
    auto stats = calm::eval::attribution_similarity(
        pairs, calm::eval::SimilarityMetric::Cosine);
    benchmark::DoNotOptimize(stats.z);
  }
}

}  // namespace

BENCHMARK(BM_KnnProbe)->Arg(200)->Arg(1000);
BENCHMARK(BM_AttributionSimilarity)->Arg(100)->Arg(1000);
