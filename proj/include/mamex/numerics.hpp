// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense numeric core: vectors, matrices, stabilized softmax, top-k
// selection, KL-to-uniform, and a reverse-mode gradient tape covering exactly
// the primitives the model needs. Everything is 64-bit; gradient checking is
// not meaningful in single precision.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mamex::num {

using Vector = std::vector<double>;

struct Matrix {
  int rows = 0;
  int cols = 0;
  Vector a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}
  Matrix(int r, int c, Vector data) : rows(r), cols(c), a(std::move(data)) {
    if (static_cast<std::size_t>(rows) * cols != a.size())
      throw std::invalid_argument("Matrix: shape inconsistent with element count");
  }

  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
};

inline bool all_finite(std::span<const double> x) {
  for (double v : x)
    if (!std::isfinite(v)) return false;
  return true;
}

// log-argument floor inside KL; top-k routing produces exact zeros and the
// 0*ln(0) = 0 convention has to survive them.
inline constexpr double kKlClamp = 1e-10;

// ---------------------------------------------------------------------------
// Plain kernels. The tape ops below call these same functions in their
// forward passes, so traced and untraced evaluations agree bitwise.
// ---------------------------------------------------------------------------

// y = W x + b; pass an empty b for a bias-free map.
inline Vector affine_map(const Matrix& w, const Vector& b, const Vector& x) {
  if (static_cast<int>(x.size()) != w.cols)
    throw std::invalid_argument("affine_map: input length " + std::to_string(x.size()) +
                                " does not match matrix cols " + std::to_string(w.cols));
  if (!b.empty() && static_cast<int>(b.size()) != w.rows)
    throw std::invalid_argument("affine_map: bias length does not match matrix rows");
  Vector y(w.rows, 0.0);
  for (int r = 0; r < w.rows; ++r) {
    double acc = b.empty() ? 0.0 : b[r];
    const double* row = &w.a[static_cast<std::size_t>(r) * w.cols];
    for (int c = 0; c < w.cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

// Softmax restricted to `idx`; positions outside the subset are exactly zero.
// Max-subtraction keeps logits of magnitude ~1000 finite.
inline Vector softmax_over(std::span<const double> logits, std::span<const int> idx) {
  if (idx.empty()) throw std::invalid_argument("softmax: empty index set");
  double mx = -std::numeric_limits<double>::infinity();
  for (int i : idx) {
    if (!std::isfinite(logits[i])) throw std::invalid_argument("softmax: non-finite logit");
    mx = std::max(mx, logits[i]);
  }
  Vector out(logits.size(), 0.0);
  double sum = 0.0;
  for (int i : idx) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (int i : idx) out[i] /= sum;
  return out;
}

inline Vector softmax(const Vector& logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  return softmax_over(logits, idx);
}

struct TopK {
  std::vector<int> indices;  // selected positions, ascending
  Vector weights;            // softmax renormalized over the selection, zero elsewhere
  Vector dense_probs;        // full softmax of the logits
};

// Selects the k largest logits (ties broken toward the lower index). The
// sparse weights are computed as a softmax restricted to the selection, so
// k == n reproduces the dense softmax bit for bit.
inline TopK top_k_renormalized(const Vector& logits, int k) {
  const int n = static_cast<int>(logits.size());
  if (k < 1 || k > n)
    throw std::invalid_argument("top_k_renormalized: k=" + std::to_string(k) +
                                " out of range for length " + std::to_string(n));
  TopK out;
  out.dense_probs = softmax(logits);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  });
  out.indices.assign(order.begin(), order.begin() + k);
  std::sort(out.indices.begin(), out.indices.end());
  out.weights = softmax_over(logits, out.indices);
  return out;
}

// KL(p || uniform) = sum_i p_i * ln(p_i * n), with log arguments floored at
// kKlClamp so exact zeros contribute exactly zero.
inline double kl_to_uniform(const Vector& p) {
  const int n = static_cast<int>(p.size());
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw std::domain_error("kl_to_uniform: negative or NaN entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::domain_error("kl_to_uniform: input sums to " + std::to_string(sum) +
                            ", expected 1");
  double kl = 0.0;
  for (double v : p) kl += v * std::log(std::max(v, kKlClamp) * n);
  return std::max(kl, 0.0);
}

// Numerically stable ln(1 + e^x); -ln sigma(x) == softplus(-x).
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Gradient tape. Forward values are computed eagerly as ops are recorded;
// backward() replays the records in strict reverse execution order and
// accumulates adjoints additively, so a parameter used twice sums both
// contributions. Single-threaded by contract.
// ---------------------------------------------------------------------------

struct Node {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Node constant(Vector v, int rows = -1, int cols = 1) {
    const int r = rows < 0 ? static_cast<int>(v.size()) : rows;
    if (static_cast<std::size_t>(r) * cols != v.size())
      throw std::invalid_argument("Tape::constant: shape inconsistent with element count");
    return push(std::move(v), r, cols, nullptr);
  }

  Node matrix_constant(const Matrix& m) { return constant(m.a, m.rows, m.cols); }

  std::size_t size() const { return recs_.size(); }
  const Vector& value(Node n) const { return recs_[n.id].val; }
  const Vector& grad(Node n) const { return recs_[n.id].grad; }
  int rows(Node n) const { return recs_[n.id].rows; }
  int cols(Node n) const { return recs_[n.id].cols; }
  double scalar(Node n) const {
    if (recs_[n.id].val.size() != 1) throw std::logic_error("Tape::scalar: node is not scalar");
    return recs_[n.id].val[0];
  }

  // y = row r of a matrix node (embedding lookup).
  Node row(Node table, int r) {
    const Rec& t = recs_[table.id];
    if (r < 0 || r >= t.rows) throw std::invalid_argument("Tape::row: row out of range");
    Vector v(t.val.begin() + static_cast<std::size_t>(r) * t.cols,
             t.val.begin() + static_cast<std::size_t>(r + 1) * t.cols);
    Node out = push(std::move(v), t.cols, 1, nullptr);
    recs_[out.id].back = [table, r, out](Tape& tp) {
      Rec& tr = tp.recs_[table.id];
      const Vector& g = tp.recs_[out.id].grad;
      for (int c = 0; c < tr.cols; ++c) tr.grad[static_cast<std::size_t>(r) * tr.cols + c] += g[c];
    };
    return out;
  }

  // y = W x + b; pass Node{} as b for no bias.
  Node affine(Node w, Node b, Node x) {
    const Rec& wr = recs_[w.id];
    Matrix wm(wr.rows, wr.cols, wr.val);
    const Vector bias = b.valid() ? recs_[b.id].val : Vector{};
    Vector y = affine_map(wm, bias, recs_[x.id].val);
    Node out = push(std::move(y), wr.rows, 1, nullptr);
    recs_[out.id].back = [w, b, x, out](Tape& tp) {
      Rec& wrr = tp.recs_[w.id];
      Rec& xr = tp.recs_[x.id];
      const Vector& g = tp.recs_[out.id].grad;
      for (int r = 0; r < wrr.rows; ++r) {
        const double gr = g[r];
        double* wg = &wrr.grad[static_cast<std::size_t>(r) * wrr.cols];
        const double* wv = &wrr.val[static_cast<std::size_t>(r) * wrr.cols];
        for (int c = 0; c < wrr.cols; ++c) {
          wg[c] += gr * xr.val[c];
          xr.grad[c] += wv[c] * gr;
        }
      }
      if (b.valid()) {
        Rec& br = tp.recs_[b.id];
        for (int r = 0; r < wrr.rows; ++r) br.grad[r] += g[r];
      }
    };
    return out;
  }

  Node concat(std::span<const Node> parts) {
    Vector v;
    std::vector<Node> ps(parts.begin(), parts.end());
    for (Node p : ps) v.insert(v.end(), recs_[p.id].val.begin(), recs_[p.id].val.end());
    Node out = push(std::move(v), static_cast<int>(recs_.empty() ? 0 : 0), 1, nullptr);
    // fix shape: rows = total length
    recs_[out.id].rows = static_cast<int>(recs_[out.id].val.size());
    recs_[out.id].back = [ps, out](Tape& tp) {
      const Vector& g = tp.recs_[out.id].grad;
      std::size_t off = 0;
      for (Node p : ps) {
        Rec& pr = tp.recs_[p.id];
        for (std::size_t i = 0; i < pr.val.size(); ++i) pr.grad[i] += g[off + i];
        off += pr.val.size();
      }
    };
    return out;
  }

  Node add(Node a, Node b) {
    const Vector& av = recs_[a.id].val;
    const Vector& bv = recs_[b.id].val;
    require_same_length(av, bv, "add");
    Vector v(av.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
    Node out = push(std::move(v), static_cast<int>(av.size()), 1, nullptr);
    recs_[out.id].back = [a, b, out](Tape& tp) {
      const Vector& g = tp.recs_[out.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        tp.recs_[a.id].grad[i] += g[i];
        tp.recs_[b.id].grad[i] += g[i];
      }
    };
    return out;
  }

  Node sub(Node a, Node b) {
    const Vector& av = recs_[a.id].val;
    const Vector& bv = recs_[b.id].val;
    require_same_length(av, bv, "sub");
    Vector v(av.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
    Node out = push(std::move(v), static_cast<int>(av.size()), 1, nullptr);
    recs_[out.id].back = [a, b, out](Tape& tp) {
      const Vector& g = tp.recs_[out.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        tp.recs_[a.id].grad[i] += g[i];
        tp.recs_[b.id].grad[i] -= g[i];
      }
    };
    return out;
  }

  Node scale(Node a, double c) {
    Vector v = recs_[a.id].val;
    for (double& x : v) x *= c;
    Node out = push(std::move(v), static_cast<int>(recs_[a.id].val.size()), 1, nullptr);
    recs_[out.id].back = [a, c, out](Tape& tp) {
      const Vector& g = tp.recs_[out.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) tp.recs_[a.id].grad[i] += c * g[i];
    };
    return out;
  }

  Node dot(Node a, Node b) {
    const Vector& av = recs_[a.id].val;
    const Vector& bv = recs_[b.id].val;
    require_same_length(av, bv, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
    Node out = push(Vector{acc}, 1, 1, nullptr);
    recs_[out.id].back = [a, b, out](Tape& tp) {
      const double g = tp.recs_[out.id].grad[0];
      Rec& ar = tp.recs_[a.id];
      Rec& br = tp.recs_[b.id];
      for (std::size_t i = 0; i < ar.val.size(); ++i) {
        ar.grad[i] += g * br.val[i];
        br.grad[i] += g * ar.val[i];
      }
    };
    return out;
  }

  Node sum_squares(Node a) {
    const Vector& av = recs_[a.id].val;
    double acc = 0.0;
    for (double v : av) acc += v * v;
    Node out = push(Vector{acc}, 1, 1, nullptr);
    recs_[out.id].back = [a, out](Tape& tp) {
      const double g = tp.recs_[out.id].grad[0];
      Rec& ar = tp.recs_[a.id];
      for (std::size_t i = 0; i < ar.val.size(); ++i) ar.grad[i] += 2.0 * g * ar.val[i];
    };
    return out;
  }

  Node softmax_node(Node x) {
    std::vector<int> idx(recs_[x.id].val.size());
    std::iota(idx.begin(), idx.end(), 0);
    return softmax_subset(x, std::move(idx));
  }

  // Softmax over a frozen index subset; outside positions stay exactly zero
  // and receive no gradient (the selection itself is not differentiated).
  Node softmax_subset(Node x, std::vector<int> idx) {
    Vector y = softmax_over(recs_[x.id].val, idx);
    Node out = push(std::move(y), static_cast<int>(recs_[x.id].val.size()), 1, nullptr);
    recs_[out.id].back = [x, out, idx = std::move(idx)](Tape& tp) {
      const Vector& y = tp.recs_[out.id].val;
      const Vector& g = tp.recs_[out.id].grad;
      double dot_gy = 0.0;
      for (int i : idx) dot_gy += g[i] * y[i];
      Rec& xr = tp.recs_[x.id];
      for (int i : idx) xr.grad[i] += y[i] * (g[i] - dot_gy);
    };
    return out;
  }

  // y = sum_j w[idx[j]] * vec_j. The top-k gather and every weighted mixture
  // in the model go through this one op.
  Node weighted_sum(Node w, std::vector<int> idx, std::span<const Node> vecs) {
    if (idx.size() != vecs.size())
      throw std::invalid_argument("weighted_sum: index/vector count mismatch");
    if (vecs.empty()) throw std::invalid_argument("weighted_sum: empty mixture");
    const std::size_t dim = recs_[vecs[0].id].val.size();
    Vector y(dim, 0.0);
    const Vector& wv = recs_[w.id].val;
    std::vector<Node> vs(vecs.begin(), vecs.end());
    for (std::size_t j = 0; j < vs.size(); ++j) {
      const Vector& v = recs_[vs[j].id].val;
      if (v.size() != dim) throw std::invalid_argument("weighted_sum: mixed lengths");
      const double wj = wv[idx[j]];
      for (std::size_t i = 0; i < dim; ++i) y[i] += wj * v[i];
    }
    Node out = push(std::move(y), static_cast<int>(dim), 1, nullptr);
    recs_[out.id].back = [w, out, idx = std::move(idx), vs](Tape& tp) {
      const Vector& g = tp.recs_[out.id].grad;
      Rec& wr = tp.recs_[w.id];
      for (std::size_t j = 0; j < vs.size(); ++j) {
        Rec& vr = tp.recs_[vs[j].id];
        const double wj = wr.val[idx[j]];
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          acc += g[i] * vr.val[i];
          vr.grad[i] += wj * g[i];
        }
        wr.grad[idx[j]] += acc;
      }
    };
    return out;
  }

  Node softplus_node(Node x) {
    Vector v = recs_[x.id].val;
    for (double& e : v) e = softplus(e);
    Node out = push(std::move(v), static_cast<int>(recs_[x.id].val.size()), 1, nullptr);
    recs_[out.id].back = [x, out](Tape& tp) {
      const Vector& g = tp.recs_[out.id].grad;
      Rec& xr = tp.recs_[x.id];
      for (std::size_t i = 0; i < g.size(); ++i) xr.grad[i] += g[i] * sigmoid(xr.val[i]);
    };
    return out;
  }

  // Elementwise mean of same-length vectors (batch statistics).
  Node mean_of(std::span<const Node> xs) {
    if (xs.empty()) throw std::invalid_argument("mean_of: empty batch");
    std::vector<Node> v(xs.begin(), xs.end());
    const std::size_t dim = recs_[v[0].id].val.size();
    Vector y(dim, 0.0);
    for (Node n : v) {
      const Vector& x = recs_[n.id].val;
      if (x.size() != dim) throw std::invalid_argument("mean_of: mixed lengths");
      for (std::size_t i = 0; i < dim; ++i) y[i] += x[i];
    }
    const double inv = 1.0 / static_cast<double>(v.size());
    for (double& e : y) e *= inv;
    Node out = push(std::move(y), static_cast<int>(dim), 1, nullptr);
    recs_[out.id].back = [v, inv, out](Tape& tp) {
      const Vector& g = tp.recs_[out.id].grad;
      for (Node n : v) {
        Rec& xr = tp.recs_[n.id];
        for (std::size_t i = 0; i < g.size(); ++i) xr.grad[i] += inv * g[i];
      }
    };
    return out;
  }

  Node kl_to_uniform_node(Node p) {
    const Vector& pv = recs_[p.id].val;
    const double kl = num::kl_to_uniform(pv);
    const int n = static_cast<int>(pv.size());
    Node out = push(Vector{kl}, 1, 1, nullptr);
    recs_[out.id].back = [p, out, n](Tape& tp) {
      const double g = tp.recs_[out.id].grad[0];
      Rec& pr = tp.recs_[p.id];
      for (int i = 0; i < n; ++i) {
        const double v = pr.val[i];
        const double d =
            v > kKlClamp ? std::log(v * n) + 1.0 : std::log(kKlClamp * n);
        pr.grad[i] += g * d;
      }
    };
    return out;
  }

  // Scalar linear combination: sum_i coeff_i * scalar_i.
  Node combine(std::span<const Node> scalars, std::span<const double> coeffs) {
    if (scalars.size() != coeffs.size())
      throw std::invalid_argument("combine: scalar/coefficient count mismatch");
    std::vector<Node> ss(scalars.begin(), scalars.end());
    std::vector<double> cs(coeffs.begin(), coeffs.end());
    double acc = 0.0;
    for (std::size_t i = 0; i < ss.size(); ++i) {
      if (recs_[ss[i].id].val.size() != 1) throw std::invalid_argument("combine: non-scalar term");
      acc += cs[i] * recs_[ss[i].id].val[0];
    }
    Node out = push(Vector{acc}, 1, 1, nullptr);
    recs_[out.id].back = [ss, cs, out](Tape& tp) {
      const double g = tp.recs_[out.id].grad[0];
      for (std::size_t i = 0; i < ss.size(); ++i) tp.recs_[ss[i].id].grad[0] += cs[i] * g;
    };
    return out;
  }

  // Mean of scalar nodes, convenience over combine().
  Node mean_scalar(std::span<const Node> scalars) {
    std::vector<double> cs(scalars.size(), 1.0 / static_cast<double>(scalars.size()));
    return combine(scalars, cs);
  }

  // Reverse sweep from a scalar loss. Visits records in strict reverse
  // execution order; adjoints accumulate additively.
  void backward(Node loss) {
    if (!loss.valid() || recs_[loss.id].val.size() != 1)
      throw std::logic_error("Tape::backward: loss must be a recorded scalar");
    recs_[loss.id].grad[0] += 1.0;
    for (int i = loss.id; i >= 0; --i) {
      if (recs_[i].back) recs_[i].back(*this);
    }
  }

 private:
  struct Rec {
    Vector val, grad;
    int rows = 0, cols = 1;
    std::function<void(Tape&)> back;
  };

  static void require_same_length(const Vector& a, const Vector& b, const char* who) {
    if (a.size() != b.size())
      throw std::invalid_argument(std::string(who) + ": length mismatch " +
                                  std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }

  Node push(Vector v, int rows, int cols, std::function<void(Tape&)> back) {
    Rec r;
    r.grad.assign(v.size(), 0.0);
    r.val = std::move(v);
    r.rows = rows;
    r.cols = cols;
    r.back = std::move(back);
    recs_.push_back(std::move(r));
    return Node{static_cast<int>(recs_.size()) - 1};
  }

  std::vector<Rec> recs_;
};

// ---------------------------------------------------------------------------
// Finite-difference oracle.
// ---------------------------------------------------------------------------

// One named, shaped slab of trainable parameters. `grad` is filled by
// whatever evaluation function the caller wires up.
struct ParamBlock {
  std::string name;
  int rows = 0, cols = 1;
  Vector value;
  Vector grad;

  static ParamBlock make(std::string name, int rows, int cols) {
    ParamBlock b;
    b.name = std::move(name);
    b.rows = rows;
    b.cols = cols;
    b.value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    b.grad.assign(b.value.size(), 0.0);
    return b;
  }
};

// Central-difference check of whatever gradients `fn` leaves in the blocks.
// `fn` must evaluate the scalar loss from the current block values and store
// the analytic gradient of every block in block->grad. Returns
//   max_i |analytic_i - numeric_i| / max(1e-8, |analytic_i| + |numeric_i|).
inline double finite_difference_check(std::span<ParamBlock* const> blocks,
                                      const std::function<double()>& fn,
                                      double step = 1e-5) {
  fn();
  std::vector<Vector> analytic;
  analytic.reserve(blocks.size());
  for (ParamBlock* b : blocks) analytic.push_back(b->grad);

  double max_err = 0.0;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    ParamBlock* b = blocks[bi];
    for (std::size_t j = 0; j < b->value.size(); ++j) {
      const double saved = b->value[j];
      b->value[j] = saved + step;
      const double lp = fn();
      b->value[j] = saved - step;
      const double lm = fn();
      b->value[j] = saved;
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic[bi][j];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  fn();  // restore gradients for the unperturbed point
  return max_err;
}

}  // namespace mamex::num
