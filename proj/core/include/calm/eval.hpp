#pragma once

// Evaluation machinery: k-NN and linear probes over embeddings,
// classification metrics, stereotype prevalence, out-of-choice rate, and
// one-sample Z-test statistics over attribution-similarity pairs.

#include <Eigen/Dense>

#include <map>
#include <set>
#include <vector>

#include "calm/common.hpp"

namespace calm::eval {

using Mat = Eigen::MatrixXd;

struct ProbeResult {
  double acc = 0.0;
  double f1_macro = 0.0;
  std::map<int, double> acc_at;  // keys 1, 5, 10
};

enum class SimilarityMetric { Cosine, Pearson, JensenShannon };

struct SimilarityStats {
  double mean = 0.0;
  double std = 0.0;
  double z = 0.0;
  double p = 1.0;
  SimilarityMetric metric = SimilarityMetric::Cosine;
  bool degenerate = false;  // zero variance; z undefined, p reported as 0
};

// Leave-one-out k-NN with cosine distance; majority vote, ties to the
// smallest label id.
ProbeResult knn_probe(const Mat& embeddings, const std::vector<int>& labels, int k);

// Multinomial logistic probe; Acc@k = truth within top-k logits.
ProbeResult linear_probe(const Mat& train_emb, const std::vector<int>& train_labels,
                         const Mat& test_emb, const std::vector<int>& test_labels);

double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels);

double stereotype_rate(const std::vector<int>& binary_preds);

double ooc_rate(const std::vector<int>& outputs, const std::set<int>& valid_set);

// Per-pair similarity between attribution vectors, then mean, sample std,
// one-sample Z against the metric's no-similarity threshold, two-tailed p.
SimilarityStats attribution_similarity(
    const std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>>& pairs,
    SimilarityMetric metric);

// Exposed for oracle tests: the scalar metrics behind attribution_similarity.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
double pearson_correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
// Natural-log JS divergence over abs+L1-normalized vectors; in [0, ln 2].
double js_divergence(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace calm::eval
