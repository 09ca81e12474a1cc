#include "calm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace calm::corpus {

using json = nlohmann::ordered_json;

void CorpusSpec::validate() const {
  if (num_cultures < 2) throw ConfigError("corpus: num_cultures must be >= 2");
  if (vocab_size <= 0) throw ConfigError("corpus: vocab_size must be positive");
  if (marker_vocab_per_culture <= 0)
    throw ConfigError("corpus: marker_vocab_per_culture must be positive");
  if (marker_insert_prob < 0.0 || marker_insert_prob > 1.0)
    throw ConfigError("corpus: marker_insert_prob must be in [0,1]");
  if (task_label_count <= 0) throw ConfigError("corpus: task_label_count must be positive");
  if (min_length < 1 || max_length < min_length)
    throw ConfigError("corpus: invalid sequence_length_range");
  if (num_examples <= 0) throw ConfigError("corpus: num_examples must be positive");
  // Marker ranges are blocked consecutively, which makes them disjoint by
  // construction; they still must fit in the vocabulary together with the
  // style token classes and the general pool.
  if (num_cultures * marker_vocab_per_culture + 2 * kStyleClassSize() + 1 > vocab_size)
    throw ConfigError("corpus: vocab_size too small for marker and style ranges");
  if (static_cast<int>(style_params.size()) != num_cultures)
    throw ConfigError("corpus: style_params must have one entry per culture");
  for (int a = 0; a < num_cultures; ++a)
    for (int b = a + 1; b < num_cultures; ++b) {
      const auto& pa = style_params[a];
      const auto& pb = style_params[b];
      if (pa.mean_length == pb.mean_length && pa.formality_rate == pb.formality_rate &&
          pa.indirectness_rate == pb.indirectness_rate)
        throw ConfigError("corpus: style parameter vectors of cultures " +
                          std::to_string(a) + " and " + std::to_string(b) +
                          " are identical");
    }
}

// Vocabulary layout: [marker ranges | formality class | indirectness class |
// general tokens]. Style classes have a fixed size.
static constexpr int kStyleClass = 16;
int kStyleClassSize() { return kStyleClass; }

namespace {

int formality_base(const CorpusSpec& spec) {
  return spec.num_cultures * spec.marker_vocab_per_culture;
}
int indirect_base(const CorpusSpec& spec) { return formality_base(spec) + kStyleClass; }
int general_base(const CorpusSpec& spec) { return indirect_base(spec) + kStyleClass; }

}  // namespace

std::vector<Example> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(spec.seed ^ 0xC0FFEEULL);

  // Round-robin culture assignment keeps per-culture counts within +-1 of
  // uniform; order is shuffled afterwards.
  std::vector<int> cultures(spec.num_examples);
  for (int i = 0; i < spec.num_examples; ++i) cultures[i] = i % spec.num_cultures;
  rng.shuffle(cultures);

  std::vector<Example> out;
  out.reserve(spec.num_examples);
  int gbase = general_base(spec);
  int gcount = spec.vocab_size - gbase;
  for (int i = 0; i < spec.num_examples; ++i) {
    Example ex;
    ex.culture_id = cultures[i];
    const StyleParams& sp = spec.style_params[ex.culture_id];
    // Realized latent controls: culture parameters with small jitter.
    double len = sp.mean_length + 2.0 * rng.normal();
    double form = std::clamp(sp.formality_rate + 0.03 * rng.normal(), 0.0, 1.0);
    double indir = std::clamp(sp.indirectness_rate + 0.03 * rng.normal(), 0.0, 1.0);
    int n = std::clamp(static_cast<int>(std::lround(len)), spec.min_length,
                       spec.max_length);
    ex.style_vector = {static_cast<double>(n), form, indir};
    ex.task_label = static_cast<int>(rng.below(spec.task_label_count));
    ex.tokens.resize(n);
    for (int t = 0; t < n; ++t) {
      double u = rng.uniform();
      if (u < spec.marker_insert_prob) {
        ex.tokens[t] = spec.marker_base(ex.culture_id) +
                       static_cast<int>(rng.below(spec.marker_vocab_per_culture));
        ex.marker_positions.push_back(t);
      } else if (rng.uniform() < form) {
        ex.tokens[t] = formality_base(spec) + static_cast<int>(rng.below(kStyleClass));
      } else if (rng.uniform() < indir) {
        ex.tokens[t] = indirect_base(spec) + static_cast<int>(rng.below(kStyleClass));
      } else {
        ex.tokens[t] = gbase + static_cast<int>(rng.below(gcount));
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

ContrastiveBatch sample_contrastive_batch(const std::vector<Example>& corpus,
                                          int batch_size, std::uint64_t seed) {
  if (batch_size < 2)
    throw SamplingError("batch: batch_size must be >= 2 for in-batch negatives");
  std::map<int, std::vector<int>> by_culture;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    by_culture[corpus[i].culture_id].push_back(static_cast<int>(i));
  if (by_culture.size() < 2)
    throw SamplingError("batch: corpus has a single culture, no negatives possible");
  for (auto& [c, idx] : by_culture)
    if (idx.size() < 2)
      throw SamplingError("batch: culture " + std::to_string(c) +
                          " has fewer than 2 examples");

  Rng rng(seed ^ 0xBA7C4ULL);
  ContrastiveBatch batch;
  // Anchors drawn uniformly; the loop guarantees >=2 cultures in-batch so
  // every anchor has a nonempty negative set.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    batch.anchors.clear();
    batch.positives.clear();
    batch.culture_ids.clear();
    for (int b = 0; b < batch_size; ++b) {
      int ai = static_cast<int>(rng.below(corpus.size()));
      const Example& anchor = corpus[ai];
      // Positive: distinct same-culture example; prefer matching task label.
      const auto& pool = by_culture[anchor.culture_id];
      std::vector<int> same_task;
      for (int j : pool)
        if (j != ai && corpus[j].task_label == anchor.task_label) same_task.push_back(j);
      int pi;
      if (!same_task.empty()) {
        pi = same_task[rng.below(same_task.size())];
      } else {
        do { pi = pool[rng.below(pool.size())]; } while (pi == ai);
      }
      batch.anchors.push_back(anchor);
      batch.positives.push_back(corpus[pi]);
      batch.culture_ids.push_back(anchor.culture_id);
    }
    bool mixed = false;
    for (int c : batch.culture_ids)
      if (c != batch.culture_ids[0]) { mixed = true; break; }
    if (mixed) return batch;
  }
  throw SamplingError("batch: failed to sample a culturally mixed batch");
}

Split split(const std::vector<Example>& corpus, const std::array<double, 3>& ratios,
            std::uint64_t seed) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split: ratios must sum to 1");
  for (double r : ratios)
    if (r < 0) throw ConfigError("split: ratios must be nonnegative");

  // Stratified by culture: within each culture, allocate proportionally
  // (largest-remainder), preserving per-culture proportions within +-1.
  std::map<int, std::vector<int>> by_culture;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    by_culture[corpus[i].culture_id].push_back(static_cast<int>(i));

  Rng rng(seed ^ 0x5917ULL);
  Split out;
  for (auto& [c, idx] : by_culture) {
    rng.shuffle(idx);
    int n = static_cast<int>(idx.size());
    int n_train = static_cast<int>(std::floor(ratios[0] * n + 0.5));
    int n_val = static_cast<int>(std::floor(ratios[1] * n + 0.5));
    n_train = std::min(n_train, n);
    n_val = std::min(n_val, n - n_train);
    int p = 0;
    for (int k = 0; k < n_train; ++k) out.train.push_back(corpus[idx[p++]]);
    for (int k = 0; k < n_val; ++k) out.val.push_back(corpus[idx[p++]]);
    while (p < n) out.test.push_back(corpus[idx[p++]]);
  }
  // Zero-ratio splits must stay empty even under rounding.
  if (ratios[1] == 0.0 && !out.val.empty()) {
    for (auto& e : out.val) out.train.push_back(e);
    out.val.clear();
  }
  if (ratios[2] == 0.0 && !out.test.empty()) {
    for (auto& e : out.test) out.train.push_back(e);
    out.test.clear();
  }
  return out;
}

void save_jsonl(const std::vector<Example>& corpus, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot open for write: " + path);
  for (const auto& ex : corpus) {
    json j;
    j["tokens"] = ex.tokens;
    j["culture_id"] = ex.culture_id;
    j["style_vector"] = ex.style_vector;
    j["task_label"] = ex.task_label;
    j["marker_positions"] = ex.marker_positions;
    f << j.dump() << "\n";
  }
}

std::vector<Example> load_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open: " + path);
  std::vector<Example> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Example ex;
    ex.tokens = j.at("tokens").get<std::vector<int>>();
    ex.culture_id = j.at("culture_id").get<int>();
    ex.style_vector = j.at("style_vector").get<std::vector<double>>();
    ex.task_label = j.at("task_label").get<int>();
    ex.marker_positions = j.at("marker_positions").get<std::vector<int>>();
    out.push_back(std::move(ex));
  }
  return out;
}

int marker_vote(const Example& ex, const CorpusSpec& spec) {
  std::vector<int> counts(spec.num_cultures, 0);
  int marker_total = spec.num_cultures * spec.marker_vocab_per_culture;
  for (int t : ex.tokens)
    if (t < marker_total) counts[t / spec.marker_vocab_per_culture]++;
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) -
                          counts.begin());
}

}  // namespace calm::corpus
