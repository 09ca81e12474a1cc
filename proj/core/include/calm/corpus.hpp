#pragma once

// Synthetic multi-culture corpus with ground-truth explicit markers
// (disjoint per-culture token ranges) and latent style controls
// (length, formality rate, indirectness rate).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "calm/common.hpp"

namespace calm::corpus {

struct StyleParams {
  double mean_length = 16.0;       // target sequence length, within range
  double formality_rate = 0.2;     // rate of formality-class tokens
  double indirectness_rate = 0.2;  // rate of indirectness-class tokens
};

struct CorpusSpec {
  int num_cultures = 8;
  int vocab_size = 512;
  int marker_vocab_per_culture = 8;
  double marker_insert_prob = 0.3;
  std::vector<StyleParams> style_params;  // one per culture
  int task_label_count = 4;
  int min_length = 8;
  int max_length = 24;
  int num_examples = 4000;
  std::uint64_t seed = 0;

  // Marker range for culture c: [marker_base(c), marker_base(c) + per-culture).
  int marker_base(int culture) const { return culture * marker_vocab_per_culture; }
  void validate() const;
};

struct Example {
  std::vector<int> tokens;
  int culture_id = 0;
  std::vector<double> style_vector;
  int task_label = 0;
  std::vector<int> marker_positions;
};

struct ContrastiveBatch {
  std::vector<Example> anchors;
  std::vector<Example> positives;
  std::vector<int> culture_ids;
};

std::vector<Example> generate_corpus(const CorpusSpec& spec);

ContrastiveBatch sample_contrastive_batch(const std::vector<Example>& corpus,
                                          int batch_size, std::uint64_t seed);

struct Split {
  std::vector<Example> train, val, test;
};
Split split(const std::vector<Example>& corpus, const std::array<double, 3>& ratios,
            std::uint64_t seed = 1);

// JSONL persistence; one Example per line.
void save_jsonl(const std::vector<Example>& corpus, const std::string& path);
std::vector<Example> load_jsonl(const std::string& path);

// Size of each latent style token class (formality, indirectness).
int kStyleClassSize();

// Bag-of-marker-tokens classifier: predicts the culture whose marker range
// contains the most tokens of the example. Separability oracle for tests.
int marker_vote(const Example& ex, const CorpusSpec& spec);

}  // namespace calm::corpus
