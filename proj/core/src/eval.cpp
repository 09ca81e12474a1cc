#include "calm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace calm::eval {

namespace {

Mat normalize_rows(const Mat& m) {
  Mat out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    double n = out.row(i).norm();
    if (n > 0) out.row(i) /= n;
  }
  return out;
}

}  // namespace

ProbeResult knn_probe(const Mat& embeddings, const std::vector<int>& labels, int k) {
  int n = static_cast<int>(embeddings.rows());
  if (n != static_cast<int>(labels.size()))
    throw InputError("knn_probe: embedding/label count mismatch");
  if (n < k + 1) throw InputError("knn_probe: need at least k+1 points");
  Mat unit = normalize_rows(embeddings);
  Mat sim = unit * unit.transpose();  // cosine similarity
  std::vector<int> preds(n);
  for (int i = 0; i < n; ++i) {
    std::vector<int> idx;
    idx.reserve(n - 1);
    for (int j = 0; j < n; ++j)
      if (j != i) idx.push_back(j);
    // Nearest = highest cosine similarity; distance ties keep lower index.
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return sim(i, a) > sim(i, b); });
    std::map<int, int> votes;
    for (int r = 0; r < k; ++r) votes[labels[idx[r]]]++;
    int best = votes.begin()->first, best_count = votes.begin()->second;
    for (const auto& [lbl, c] : votes)
      if (c > best_count) { best = lbl; best_count = c; }  // tie -> smallest label id
    preds[i] = best;
  }
  ProbeResult out;
  int correct = 0;
  for (int i = 0; i < n; ++i)
    if (preds[i] == labels[i]) ++correct;
  out.acc = static_cast<double>(correct) / n;
  out.f1_macro = macro_f1(preds, labels);
  return out;
}

ProbeResult linear_probe(const Mat& train_emb, const std::vector<int>& train_labels,
                         const Mat& test_emb, const std::vector<int>& test_labels) {
  std::set<int> train_classes(train_labels.begin(), train_labels.end());
  if (train_classes.size() < 2) throw InputError("linear_probe: need >= 2 classes");
  for (int l : test_labels)
    if (!train_classes.count(l))
      throw InputError("linear_probe: test class absent from training set");

  // Dense class relabeling.
  std::map<int, int> to_dense;
  for (int c : train_classes) to_dense[c] = static_cast<int>(to_dense.size());
  int C = static_cast<int>(to_dense.size());
  int n = static_cast<int>(train_emb.rows()), d = static_cast<int>(train_emb.cols());

  // Multinomial logistic regression, full-batch gradient descent with
  // backtracking line search; stop at gradient inf-norm < 1e-6 or 1000 iters.
  Mat W = Mat::Zero(d, C);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(C);
  auto forward = [&](const Mat& X) {
    Mat logits = X * W;
    logits.rowwise() += b;
    return logits;
  };
  auto nll = [&](const Mat& logits, const std::vector<int>& y) {
    double s = 0;
    for (int i = 0; i < static_cast<int>(y.size()); ++i) {
      Eigen::RowVectorXd r = logits.row(i);
      double m = r.maxCoeff();
      double lse = m + std::log((r.array() - m).exp().sum());
      s += lse - r(to_dense.at(y[i]));
    }
    return s / static_cast<double>(y.size());
  };
  double step_size = 1.0;
  for (int it = 0; it < 1000; ++it) {
    Mat logits = forward(train_emb);
    Mat probs(n, C);
    for (int i = 0; i < n; ++i) {
      Eigen::RowVectorXd r = logits.row(i);
      double m = r.maxCoeff();
      r = (r.array() - m).exp();
      probs.row(i) = r / r.sum();
    }
    Mat resid = probs;
    for (int i = 0; i < n; ++i) resid(i, to_dense.at(train_labels[i])) -= 1.0;
    Mat gW = train_emb.transpose() * resid / static_cast<double>(n);
    Eigen::RowVectorXd gb = resid.colwise().mean();
    double ginf = std::max(gW.cwiseAbs().maxCoeff(), gb.cwiseAbs().maxCoeff());
    if (ginf < 1e-6) break;
    double f0 = nll(logits, train_labels);
    double t = step_size;
    for (int ls = 0; ls < 40; ++ls) {
      Mat Wn = W - t * gW;
      Eigen::RowVectorXd bn = b - t * gb;
      Mat ln = train_emb * Wn;
      ln.rowwise() += bn;
      if (nll(ln, train_labels) < f0) { W = Wn; b = bn; step_size = t * 2.0; break; }
      t *= 0.5;
    }
  }

  ProbeResult out;
  Mat logits = forward(test_emb);
  int nt = static_cast<int>(test_emb.rows());
  std::vector<int> preds(nt);
  std::vector<int> dense_labels(nt);
  for (int i = 0; i < nt; ++i) dense_labels[i] = to_dense.at(test_labels[i]);
  std::vector<int> inv(C);
  for (const auto& [orig, dz] : to_dense) inv[dz] = orig;
  for (int ktop : {1, 5, 10}) {
    int hits = 0;
    for (int i = 0; i < nt; ++i) {
      std::vector<int> order(C);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int c) {
        return logits(i, a) > logits(i, c);
      });
      int kk = std::min(ktop, C);
      for (int r = 0; r < kk; ++r)
        if (order[r] == dense_labels[i]) { ++hits; break; }
      if (ktop == 1) preds[i] = inv[order[0]];
    }
    out.acc_at[ktop] = static_cast<double>(hits) / nt;
  }
  out.acc = out.acc_at[1];
  out.f1_macro = macro_f1(preds, test_labels);
  return out;
}

double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size())
    throw InputError("macro_f1: length mismatch");
  std::set<int> classes(labels.begin(), labels.end());
  classes.insert(preds.begin(), preds.end());
  double sum = 0;
  int counted = 0;
  for (int c : classes) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] == c && labels[i] == c) ++tp;
      else if (preds[i] == c) ++fp;
      else if (labels[i] == c) ++fn;
    }
    if (tp + fp + fn == 0) continue;  // class absent from both
    double f1 = (2.0 * tp) / std::max(2.0 * tp + fp + fn, 1.0);
    sum += f1;
    ++counted;
  }
  return counted > 0 ? sum / counted : 0.0;
}

double stereotype_rate(const std::vector<int>& binary_preds) {
  if (binary_preds.empty()) throw InputError("stereotype_rate: empty input");
  int ones = 0;
  for (int v : binary_preds) {
    if (v != 0 && v != 1) throw InputError("stereotype_rate: entries must be 0/1");
    ones += v;
  }
  return static_cast<double>(ones) / static_cast<double>(binary_preds.size());
}

double ooc_rate(const std::vector<int>& outputs, const std::set<int>& valid_set) {
  if (valid_set.empty()) throw ConfigError("ooc_rate: empty valid set");
  if (outputs.empty()) return 0.0;
  int invalid = 0;
  for (int o : outputs)
    if (!valid_set.count(o)) ++invalid;
  return static_cast<double>(invalid) / static_cast<double>(outputs.size());
}

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) throw InputError("cosine: zero vector");
  return a.dot(b) / (na * nb);
}

double pearson_correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  Eigen::VectorXd ac = a.array() - a.mean();
  Eigen::VectorXd bc = b.array() - b.mean();
  double na = ac.norm(), nb = bc.norm();
  if (na == 0 || nb == 0) throw InputError("pearson: constant vector");
  return ac.dot(bc) / (na * nb);
}

double js_divergence(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  // Attribution vectors become distributions by abs + L1 normalization.
  Eigen::VectorXd p = a.cwiseAbs(), q = b.cwiseAbs();
  double sp = p.sum(), sq = q.sum();
  if (sp == 0 || sq == 0) throw InputError("js: zero attribution vector");
  p /= sp;
  q /= sq;
  auto kl = [](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    double s = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (x(i) > 0) s += x(i) * std::log(x(i) / y(i));
    return s;
  };
  Eigen::VectorXd m = 0.5 * (p + q);
  return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

SimilarityStats attribution_similarity(
    const std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>>& pairs,
    SimilarityMetric metric) {
  if (pairs.size() < 2)
    throw StatsError("attribution_similarity: need >= 2 pairs for a sample std");
  std::vector<double> vals;
  vals.reserve(pairs.size());
  for (const auto& [phi, beta] : pairs) {
    if (phi.size() != beta.size())
      throw InputError("attribution_similarity: vector length mismatch in pair");
    switch (metric) {
      case SimilarityMetric::Cosine: vals.push_back(cosine_similarity(phi, beta)); break;
      case SimilarityMetric::Pearson: vals.push_back(pearson_correlation(phi, beta)); break;
      case SimilarityMetric::JensenShannon: vals.push_back(js_divergence(phi, beta)); break;
    }
  }
  double K = static_cast<double>(vals.size());
  double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / K;
  double ss = 0;
  for (double v : vals) ss += (v - mean) * (v - mean);
  double sd = std::sqrt(ss / (K - 1.0));

  SimilarityStats out;
  out.metric = metric;
  out.mean = mean;
  out.std = sd;
  double t_m = (metric == SimilarityMetric::JensenShannon) ? 1.0 : 0.0;
  if (sd == 0.0) {
    out.degenerate = true;
    out.z = 0.0;
    out.p = 0.0;  // zero-variance: every pair identical, reported degenerate
    return out;
  }
  out.z = (mean - t_m) / (sd / std::sqrt(K));
  out.p = std::erfc(std::abs(out.z) / std::sqrt(2.0));  // two-tailed
  return out;
}

}  // namespace calm::eval
