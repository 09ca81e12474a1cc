#pragma once

// Layers built on the autodiff tape: linear, 2-layer MLP, multi-head
// attention, transformer encoder layer, embeddings. Parameters are
// persistent leaf nodes registered by name so checkpoints and the
// optimizer see a stable, deterministic ordering.

#include <map>
#include <string>
#include <vector>

#include "calm/ad.hpp"

namespace calm::nn {

using ad::Mat;
using ad::Value;

class ParamRegistry {
 public:
  Value add(const std::string& name, Mat init) {
    Value v = ad::param(std::move(init));
    names_.push_back(name);
    params_.push_back(v);
    return v;
  }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Value>& params() const { return params_; }
  void zero_grad() {
    for (auto& p : params_) { p->ensure_grad(); p->grad.setZero(); }
  }
  std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::string> names_;
  std::vector<Value> params_;
};

// Weights N(0, 0.02), biases zero.
inline Mat gaussian_init(Eigen::Index r, Eigen::Index c, Rng& rng, double std = 0.02) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = std * rng.normal();
  return m;
}

struct Linear {
  Value W, b;  // W: in x out, b: 1 x out
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng) {
    W = reg.add(name + ".W", gaussian_init(in, out, rng));
    b = reg.add(name + ".b", Mat::Zero(1, out));
  }
  Value operator()(const Value& x) const {
    return ad::add_rowwise(ad::matmul(x, W), b);
  }
};

struct Mlp2 {
  Linear l1, l2;
  Mlp2() = default;
  Mlp2(ParamRegistry& reg, const std::string& name, int in, int hidden, int out,
       Rng& rng)
      : l1(reg, name + ".l1", in, hidden, rng), l2(reg, name + ".l2", hidden, out, rng) {}
  Value operator()(const Value& x) const { return l2(ad::relu(l1(x))); }
};

struct LayerNorm {
  Value gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& name, int d) {
    gamma = reg.add(name + ".gamma", Mat::Ones(1, d));
    beta = reg.add(name + ".beta", Mat::Zero(1, d));
  }
  Value operator()(const Value& x) const { return ad::layer_norm_rows(x, gamma, beta); }
};

// Multi-head attention with per-head projection matrices. Queries may come
// from a different source than keys/values (cross-attention).
struct MultiHeadAttention {
  std::vector<Value> Wq, Wk, Wv;  // each d_in x d_head
  Linear out;                     // h*d_head -> d_out
  int heads = 0, d_head = 0;
  bool causal = false;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry& reg, const std::string& name, int d_q, int d_kv,
                     int d_out, int n_heads, Rng& rng, bool causal_mask = false)
      : heads(n_heads), causal(causal_mask) {
    if (d_out % n_heads != 0)
      throw ConfigError("attention: head count must divide output width");
    d_head = d_out / n_heads;
    for (int h = 0; h < n_heads; ++h) {
      Wq.push_back(reg.add(name + ".h" + std::to_string(h) + ".Wq",
                           gaussian_init(d_q, d_head, rng)));
      Wk.push_back(reg.add(name + ".h" + std::to_string(h) + ".Wk",
                           gaussian_init(d_kv, d_head, rng)));
      Wv.push_back(reg.add(name + ".h" + std::to_string(h) + ".Wv",
                           gaussian_init(d_kv, d_head, rng)));
    }
    out = Linear(reg, name + ".out", n_heads * d_head, d_out, rng);
  }

  // Returns attention output; if weights_out is non-null, stores the
  // per-head row-stochastic attention matrices (numeric values).
  Value operator()(const Value& q_in, const Value& kv_in,
                   std::vector<Mat>* weights_out = nullptr) const {
    std::vector<Value> head_outs;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
    for (int h = 0; h < heads; ++h) {
      Value q = ad::matmul(q_in, Wq[h]);
      Value k = ad::matmul(kv_in, Wk[h]);
      Value v = ad::matmul(kv_in, Wv[h]);
      Value scores = ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt);
      if (causal) {
        Mat mask = Mat::Zero(scores->val.rows(), scores->val.cols());
        for (Eigen::Index i = 0; i < mask.rows(); ++i)
          for (Eigen::Index j = i + 1; j < mask.cols(); ++j) mask(i, j) = -1e9;
        scores = ad::add(scores, ad::constant(mask));
      }
      Value attn = ad::softmax_rows(scores);
      if (weights_out) weights_out->push_back(attn->val);
      head_outs.push_back(ad::matmul(attn, v));
    }
    Value merged = head_outs[0];
    for (int h = 1; h < heads; ++h) merged = ad::concat_cols(merged, head_outs[h]);
    return out(merged);
  }
};

// Pre-LN transformer layer: x + MHA(LN(x)), then x + FFN(LN(x)).
struct TransformerLayer {
  MultiHeadAttention attn;
  LayerNorm ln1, ln2;
  Linear ff1, ff2;

  TransformerLayer() = default;
  TransformerLayer(ParamRegistry& reg, const std::string& name, int d, int ffn_hidden,
                   int n_heads, Rng& rng, bool causal = false)
      : attn(reg, name + ".attn", d, d, d, n_heads, rng, causal),
        ln1(reg, name + ".ln1", d),
        ln2(reg, name + ".ln2", d),
        ff1(reg, name + ".ff1", d, ffn_hidden, rng),
        ff2(reg, name + ".ff2", ffn_hidden, d, rng) {}

  Value operator()(const Value& x) const {
    Value h = ad::add(x, [&] { Value n = ln1(x); return attn(n, n); }());
    return ad::add(h, ff2(ad::relu(ff1(ln2(h)))));
  }
};

// AdamW with decoupled weight decay and global-norm gradient clipping.
class AdamW {
 public:
  AdamW(const std::vector<Value>& params, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8, double weight_decay = 0.01, double clip_norm = 1.0)
      : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps),
        weight_decay_(weight_decay), clip_norm_(clip_norm) {
    for (auto& p : params_) {
      m_.push_back(Mat::Zero(p->val.rows(), p->val.cols()));
      v_.push_back(Mat::Zero(p->val.rows(), p->val.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    if (clip_norm_ > 0) {
      double sq = 0;
      for (auto& p : params_) { p->ensure_grad(); sq += p->grad.squaredNorm(); }
      double nrm = std::sqrt(sq);
      if (nrm > clip_norm_) {
        double s = clip_norm_ / nrm;
        for (auto& p : params_) p->grad *= s;
      }
    }
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      p->ensure_grad();
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p->grad;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
      Mat mhat = m_[i] / bc1;
      Mat vhat = v_[i] / bc2;
      p->val -= lr * weight_decay_ * p->val;
      p->val -= lr * mhat.cwiseQuotient((vhat.array().sqrt() + eps_).matrix());
    }
  }

 private:
  std::vector<Value> params_;
  std::vector<Mat> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_, clip_norm_;
  long t_ = 0;
};

}  // namespace calm::nn
