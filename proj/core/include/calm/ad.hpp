#pragma once

// Small reverse-mode automatic differentiation over Eigen matrices.
// Graphs are built eagerly out of shared nodes; backward() runs a
// topological sweep accumulating gradients into every node that
// requires them. Scalars are 1x1 matrices.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "calm/common.hpp"

namespace calm::ad {

using Mat = Eigen::MatrixXd;

class Node;
using Value = std::shared_ptr<Node>;

class Node {
 public:
  Mat val;
  Mat grad;
  bool requires_grad = false;
  std::vector<Value> parents;
  std::function<void(Node&)> backfn;

  void ensure_grad() {
    if (grad.rows() != val.rows() || grad.cols() != val.cols())
      grad = Mat::Zero(val.rows(), val.cols());
  }
};

inline Value make_node(Mat v, std::vector<Value> parents,
                       std::function<void(Node&)> backfn) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  for (auto& p : parents)
    if (p->requires_grad) { n->requires_grad = true; break; }
  n->parents = std::move(parents);
  if (n->requires_grad) n->backfn = std::move(backfn);
  return n;
}

inline Value constant(Mat m) {
  auto n = std::make_shared<Node>();
  n->val = std::move(m);
  return n;
}

inline Value scalar(double x) { return constant(Mat::Constant(1, 1, x)); }

inline Value param(Mat m) {
  auto n = std::make_shared<Node>();
  n->val = std::move(m);
  n->requires_grad = true;
  return n;
}

inline void backward(const Value& root) {
  if (root->val.size() != 1)
    throw ContractError("backward: root must be a scalar");
  // Post-order topological sort (iterative).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i == 0 && !seen.insert(n).second) { stack.pop_back(); continue; }
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->ensure_grad();
  root->grad.setConstant(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backfn) {
      for (auto& p : n->parents) p->ensure_grad();
      n->backfn(*n);
    }
  }
}

// ---- elementwise / arithmetic ----

inline Value add(const Value& a, const Value& b) {
  return make_node(a->val + b->val, {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad;
    if (n.parents[1]->requires_grad) n.parents[1]->grad += n.grad;
  });
}

inline Value sub(const Value& a, const Value& b) {
  return make_node(a->val - b->val, {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad;
    if (n.parents[1]->requires_grad) n.parents[1]->grad -= n.grad;
  });
}

inline Value mul(const Value& a, const Value& b) {
  return make_node(a->val.cwiseProduct(b->val), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad += n.grad.cwiseProduct(n.parents[1]->val);
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad += n.grad.cwiseProduct(n.parents[0]->val);
  });
}

inline Value scale(const Value& a, double s) {
  return make_node(a->val * s, {a}, [s](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad * s;
  });
}

inline Value neg(const Value& a) { return scale(a, -1.0); }

// Multiply matrix by a 1x1 scalar value.
inline Value smul(const Value& s, const Value& a) {
  return make_node(a->val * s->val(0, 0), {s, a}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad(0, 0) += n.grad.cwiseProduct(n.parents[1]->val).sum();
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad += n.grad * n.parents[0]->val(0, 0);
  });
}

// Divide matrix by a 1x1 scalar value.
inline Value sdiv(const Value& a, const Value& s) {
  double d = s->val(0, 0);
  return make_node(a->val / d, {a, s}, [d](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad / d;
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad(0, 0) +=
          -n.grad.cwiseProduct(n.parents[0]->val).sum() / (d * d);
  });
}

inline Value matmul(const Value& a, const Value& b) {
  return make_node(a->val * b->val, {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad += n.grad * n.parents[1]->val.transpose();
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad += n.parents[0]->val.transpose() * n.grad;
  });
}

inline Value transpose(const Value& a) {
  return make_node(a->val.transpose(), {a}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad.transpose();
  });
}

// Add a 1 x d row vector to every row of an n x d matrix.
inline Value add_rowwise(const Value& m, const Value& r) {
  Mat out = m->val;
  out.rowwise() += Eigen::RowVectorXd(r->val.row(0));
  return make_node(std::move(out), {m, r}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad;
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad.row(0) += n.grad.colwise().sum();
  });
}

inline Value relu(const Value& a) {
  return make_node(a->val.cwiseMax(0.0), {a}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad +=
          n.grad.cwiseProduct((n.parents[0]->val.array() > 0.0).cast<double>().matrix());
  });
}

inline Value tanh_(const Value& a) {
  Mat t = a->val.array().tanh().matrix();
  return make_node(t, {a}, [t](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad +=
          n.grad.cwiseProduct((1.0 - t.array().square()).matrix());
  });
}

inline Value exp_(const Value& a) {
  Mat e = a->val.array().exp().matrix();
  return make_node(e, {a}, [e](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad.cwiseProduct(e);
  });
}

inline Value log_(const Value& a) {
  return make_node(a->val.array().log().matrix(), {a}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad += n.grad.cwiseQuotient(n.parents[0]->val);
  });
}

inline Value sqrt_(const Value& a) {
  Mat s = a->val.array().sqrt().matrix();
  return make_node(s, {a}, [s](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad += n.grad.cwiseQuotient(2.0 * s);
  });
}

// ---- reductions ----

inline Value sum_all(const Value& a) {
  return make_node(Mat::Constant(1, 1, a->val.sum()), {a}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad.array() += n.grad(0, 0);
  });
}

inline Value mean_all(const Value& a) {
  double inv = 1.0 / static_cast<double>(a->val.size());
  return make_node(Mat::Constant(1, 1, a->val.mean()), {a}, [inv](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad.array() += n.grad(0, 0) * inv;
  });
}

// Mean over rows: n x d -> 1 x d.
inline Value mean_rows(const Value& a) {
  double inv = 1.0 / static_cast<double>(a->val.rows());
  Mat out = a->val.colwise().mean();
  return make_node(std::move(out), {a}, [inv](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad += (n.grad.row(0) * inv).replicate(n.parents[0]->val.rows(), 1);
  });
}

// Sum over rows: n x d -> 1 x d.
inline Value sum_rows(const Value& a) {
  Mat out = a->val.colwise().sum();
  return make_node(std::move(out), {a}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad += n.grad.row(0).replicate(n.parents[0]->val.rows(), 1);
  });
}

inline Value dot(const Value& a, const Value& b) {  // row vectors
  return make_node(Mat::Constant(1, 1, a->val.cwiseProduct(b->val).sum()), {a, b},
                   [](Node& n) {
                     if (n.parents[0]->requires_grad)
                       n.parents[0]->grad += n.grad(0, 0) * n.parents[1]->val;
                     if (n.parents[1]->requires_grad)
                       n.parents[1]->grad += n.grad(0, 0) * n.parents[0]->val;
                   });
}

// ---- structure ----

inline Value concat_cols(const Value& a, const Value& b) {
  Mat out(a->val.rows(), a->val.cols() + b->val.cols());
  out << a->val, b->val;
  return make_node(std::move(out), {a, b}, [](Node& n) {
    Eigen::Index ca = n.parents[0]->val.cols();
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad += n.grad.leftCols(ca);
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad += n.grad.rightCols(n.grad.cols() - ca);
  });
}

inline Value concat_rows_n(const std::vector<Value>& parts) {
  if (parts.empty()) throw ContractError("concat_rows_n: empty");
  Eigen::Index rows = 0, cols = parts[0]->val.cols();
  for (auto& p : parts) rows += p->val.rows();
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (auto& p : parts) { out.middleRows(r, p->val.rows()) = p->val; r += p->val.rows(); }
  return make_node(std::move(out), parts, [](Node& n) {
    Eigen::Index r = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) p->grad += n.grad.middleRows(r, p->val.rows());
      r += p->val.rows();
    }
  });
}

inline Value slice_rows(const Value& a, Eigen::Index start, Eigen::Index count) {
  return make_node(a->val.middleRows(start, count), {a}, [start, count](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad.middleRows(start, count) += n.grad;
  });
}

inline Value pick(const Value& a, Eigen::Index i, Eigen::Index j) {
  return make_node(Mat::Constant(1, 1, a->val(i, j)), {a}, [i, j](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad(i, j) += n.grad(0, 0);
  });
}

// Reshape a 1 x (r*c) row into an r x c matrix (row-major fill).
inline Value reshape_row(const Value& a, Eigen::Index r, Eigen::Index c) {
  if (a->val.rows() != 1 || a->val.cols() != r * c)
    throw ContractError("reshape_row: shape mismatch");
  Mat out(r, c);
  for (Eigen::Index i = 0; i < r; ++i) out.row(i) = a->val.block(0, i * c, 1, c);
  return make_node(std::move(out), {a}, [r, c](Node& n) {
    if (n.parents[0]->requires_grad)
      for (Eigen::Index i = 0; i < r; ++i)
        n.parents[0]->grad.block(0, i * c, 1, c) += n.grad.row(i);
  });
}

// Row gather from a table (embedding lookup); backward scatter-adds.
inline Value gather_rows(const Value& table, const std::vector<int>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), table->val.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = table->val.row(idx[i]);
  return make_node(std::move(out), {table}, [idx](Node& n) {
    if (n.parents[0]->requires_grad)
      for (std::size_t i = 0; i < idx.size(); ++i)
        n.parents[0]->grad.row(idx[i]) += n.grad.row(i);
  });
}

// ---- row-wise nonlinear blocks ----

inline Value softmax_rows(const Value& a) {
  Mat out = a->val;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    Eigen::RowVectorXd r = out.row(i);
    double m = r.maxCoeff();
    r = (r.array() - m).exp();
    out.row(i) = r / r.sum();
  }
  return make_node(out, {a}, [out](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      Eigen::RowVectorXd s = out.row(i);
      Eigen::RowVectorXd g = n.grad.row(i);
      double gs = g.cwiseProduct(s).sum();
      n.parents[0]->grad.row(i) += (s.array() * (g.array() - gs)).matrix();
    }
  });
}

inline Value log_softmax_rows(const Value& a) {
  Mat out = a->val;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    Eigen::RowVectorXd r = out.row(i);
    double m = r.maxCoeff();
    double lse = m + std::log((r.array() - m).exp().sum());
    out.row(i) = r.array() - lse;
  }
  return make_node(out, {a}, [out](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      Eigen::RowVectorXd s = out.row(i).array().exp();
      Eigen::RowVectorXd g = n.grad.row(i);
      n.parents[0]->grad.row(i) += g - s * g.sum();
    }
  });
}

inline Value l2_normalize_rows(const Value& a, double eps = 1e-12) {
  Mat out = a->val;
  Eigen::VectorXd norms(out.rows());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    double nrm = std::max(out.row(i).norm(), eps);
    norms(i) = nrm;
    out.row(i) /= nrm;
  }
  return make_node(out, {a}, [out, norms](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      Eigen::RowVectorXd u = out.row(i);
      Eigen::RowVectorXd g = n.grad.row(i);
      n.parents[0]->grad.row(i) += (g - u * g.cwiseProduct(u).sum()) / norms(i);
    }
  });
}

inline Value layer_norm_rows(const Value& a, const Value& gamma, const Value& beta,
                             double eps = 1e-5) {
  Eigen::Index nr = a->val.rows(), d = a->val.cols();
  Mat xhat(nr, d);
  Eigen::VectorXd inv_std(nr);
  for (Eigen::Index i = 0; i < nr; ++i) {
    double mu = a->val.row(i).mean();
    Eigen::RowVectorXd c = a->val.row(i).array() - mu;
    double var = c.squaredNorm() / static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(i) = is;
    xhat.row(i) = c * is;
  }
  Mat out = xhat;
  for (Eigen::Index i = 0; i < nr; ++i)
    out.row(i) = xhat.row(i).cwiseProduct(gamma->val.row(0)) + beta->val.row(0);
  return make_node(std::move(out), {a, gamma, beta}, [xhat, inv_std](Node& n) {
    Eigen::Index nr = xhat.rows(), d = xhat.cols();
    auto& x = n.parents[0];
    auto& gamma = n.parents[1];
    auto& beta = n.parents[2];
    for (Eigen::Index i = 0; i < nr; ++i) {
      Eigen::RowVectorXd g = n.grad.row(i);
      if (gamma->requires_grad) gamma->grad.row(0) += g.cwiseProduct(xhat.row(i));
      if (beta->requires_grad) beta->grad.row(0) += g;
      if (x->requires_grad) {
        Eigen::RowVectorXd gh = g.cwiseProduct(gamma->val.row(0));
        double m1 = gh.mean();
        double m2 = gh.cwiseProduct(xhat.row(i)).mean();
        x->grad.row(i) +=
            inv_std(i) * (gh.array() - m1 - xhat.row(i).array() * m2).matrix();
      }
    }
    (void)d;
  });
}

// Mean negative log-likelihood of per-row labels under row logits.
inline Value cross_entropy_rows(const Value& logits, const std::vector<int>& labels) {
  Value ls = log_softmax_rows(logits);
  std::vector<Value> picks;
  picks.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    picks.push_back(pick(ls, static_cast<Eigen::Index>(i), labels[i]));
  return scale(mean_all(concat_rows_n(picks)), -1.0);
}

// Cosine similarity of two row vectors.
inline Value cosine(const Value& a, const Value& b, double eps = 1e-12) {
  Value na = sqrt_(add(dot(a, a), scalar(eps)));
  Value nb = sqrt_(add(dot(b, b), scalar(eps)));
  return sdiv(sdiv(dot(a, b), na), nb);
}

}  // namespace calm::ad
