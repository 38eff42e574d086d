// SPDX-License-Identifier: Apache-2.0
//
// Minimal n-dimensional tensor with reverse-mode automatic differentiation.
// Single-threaded, deterministic: every op accumulates in a fixed order, so
// identical inputs give bit-identical values and gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "kmae/common.hpp"

namespace kmae {

template <class T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward;

  void accumulate(const T* g, size_t n) {
    if (grad.empty()) grad.assign(value.size(), T(0));
    for (size_t i = 0; i < n; ++i) grad[i] += g[i];
  }
};

// Value-semantic handle onto a shared node. Copies alias the same storage,
// which is what parameter stores and graph edges want.
template <class T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(numel(n->shape)), T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(std::vector<int> shape, T v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<T> data,
                     bool requires_grad = false) {
    if (static_cast<long long>(data.size()) != numel(shape))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rows() const { return node_->shape.at(0); }
  int cols() const { return node_->shape.at(1); }
  long long size() const { return static_cast<long long>(node_->value.size()); }

  std::span<const T> value() const { return node_->value; }
  std::span<T> value() { return node_->value; }
  T item() const {
    if (node_->value.size() != 1)
      throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mutable() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

// Builds a result node wired to its parents; the backward closure is only
// attached when some parent actually tracks gradients.
template <class T>
Tensor<T> make_op(std::vector<int> shape, std::vector<T> value,
                  std::vector<NodePtr<T>> parents,
                  std::function<void(TensorNode<T>&)> backward) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool track = false;
  for (const auto& p : parents)
    if (p->requires_grad) track = true;
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.value().begin(), a.value().end());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode<T>& n) {
        if (pa->requires_grad) pa->accumulate(n.grad.data(), n.grad.size());
        if (pb->requires_grad) pb->accumulate(n.grad.data(), n.grad.size());
      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.value().begin(), a.value().end());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode<T>& n) {
        if (pa->requires_grad) pa->accumulate(n.grad.data(), n.grad.size());
        if (pb->requires_grad) {
          if (pb->grad.empty()) pb->grad.assign(pb->value.size(), T(0));
          for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
        }
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.value().begin(), a.value().end());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode<T>& n) {
        if (pa->requires_grad) {
          if (pa->grad.empty()) pa->grad.assign(pa->value.size(), T(0));
          for (size_t i = 0; i < n.grad.size(); ++i)
            pa->grad[i] += n.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
          if (pb->grad.empty()) pb->grad.assign(pb->value.size(), T(0));
          for (size_t i = 0; i < n.grad.size(); ++i)
            pb->grad[i] += n.grad[i] * pa->value[i];
        }
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.value().begin(), a.value().end());
  for (auto& v : out) v *= c;
  auto pa = a.node();
  return detail::make_op<T>(a.shape(), std::move(out), {pa},
                            [pa, c](TensorNode<T>& n) {
                              if (!pa->requires_grad) return;
                              if (pa->grad.empty())
                                pa->grad.assign(pa->value.size(), T(0));
                              for (size_t i = 0; i < n.grad.size(); ++i)
                                pa->grad[i] += n.grad[i] * c;
                            });
}

// x * s where s is a learnable scalar tensor of shape [1]
template <class T>
Tensor<T> scale_by_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1)
    throw DimensionError("scale_by_scalar: scale must be a scalar, got " +
                         shape_str(s.shape()));
  T c = s.value()[0];
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) v *= c;
  auto px = x.node(), ps = s.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px, ps}, [px, ps](TensorNode<T>& n) {
        T c2 = ps->value[0];
        if (px->requires_grad) {
          if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
          for (size_t i = 0; i < n.grad.size(); ++i)
            px->grad[i] += n.grad[i] * c2;
        }
        if (ps->requires_grad) {
          if (ps->grad.empty()) ps->grad.assign(1, T(0));
          T acc = 0;
          for (size_t i = 0; i < n.grad.size(); ++i)
            acc += n.grad[i] * px->value[i];
          ps->grad[0] += acc;
        }
      });
}

// x + b where b is a learnable scalar tensor of shape [1]
template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.size() != 1)
    throw DimensionError("add_scalar: bias must be a scalar, got " +
                         shape_str(b.shape()));
  T c = b.value()[0];
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) v += c;
  auto px = x.node(), pb = b.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px, pb}, [px, pb](TensorNode<T>& n) {
        if (px->requires_grad) px->accumulate(n.grad.data(), n.grad.size());
        if (pb->requires_grad) {
          if (pb->grad.empty()) pb->grad.assign(1, T(0));
          T acc = 0;
          for (T g : n.grad) acc += g;
          pb->grad[0] += acc;
        }
      });
}

// ---------------------------------------------------------------------------
// matmul and row/column structure
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]; i-k-j order so the inner loop is contiguous
template <class T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
template <class T>
void gemm_acc_nt(const T* dc, const T* b, T* da, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* dcrow = dc + static_cast<size_t>(i) * n;
    T* darow = da + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T* brow = b + static_cast<size_t>(p) * n;
      T acc = 0;
      for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
      darow[p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
template <class T>
void gemm_acc_tn(const T* a, const T* dc, T* db, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    const T* dcrow = dc + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      T* dbrow = db + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(static_cast<size_t>(m) * n, T(0));
  detail::gemm_acc(a.value().data(), b.value().data(), out.data(), m, k, n);
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      {m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](TensorNode<T>& nd) {
        if (pa->requires_grad) {
          if (pa->grad.empty()) pa->grad.assign(pa->value.size(), T(0));
          detail::gemm_acc_nt(nd.grad.data(), pb->value.data(), pa->grad.data(),
                              m, k, n);
        }
        if (pb->requires_grad) {
          if (pb->grad.empty()) pb->grad.assign(pb->value.size(), T(0));
          detail::gemm_acc_tn(pa->value.data(), nd.grad.data(), pb->grad.data(),
                              m, k, n);
        }
      });
}

// x[s,d] + row vector v[d] broadcast over rows
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.shape().size() != 2 || v.size() != x.cols())
    throw DimensionError("add_rowvec: " + shape_str(x.shape()) + " + " +
                         shape_str(v.shape()));
  const int s = x.rows(), d = x.cols();
  std::vector<T> out(x.value().begin(), x.value().end());
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += v.value()[j];
  auto px = x.node(), pv = v.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px, pv}, [px, pv, s, d](TensorNode<T>& n) {
        if (px->requires_grad) px->accumulate(n.grad.data(), n.grad.size());
        if (pv->requires_grad) {
          if (pv->grad.empty()) pv->grad.assign(pv->value.size(), T(0));
          for (int i = 0; i < s; ++i)
            for (int j = 0; j < d; ++j)
              pv->grad[j] += n.grad[static_cast<size_t>(i) * d + j];
        }
      });
}

// scale each row i of x[s,d] by the constant col[i]
template <class T>
Tensor<T> mul_rows(const Tensor<T>& x, const std::vector<T>& col) {
  if (x.shape().size() != 2 || static_cast<int>(col.size()) != x.rows())
    throw DimensionError("mul_rows: column length " +
                         std::to_string(col.size()) + " vs " +
                         shape_str(x.shape()));
  const int s = x.rows(), d = x.cols();
  std::vector<T> out(x.value().begin(), x.value().end());
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] *= col[i];
  auto px = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px}, [px, col, s, d](TensorNode<T>& n) {
        if (!px->requires_grad) return;
        if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < d; ++j)
            px->grad[static_cast<size_t>(i) * d + j] +=
                n.grad[static_cast<size_t>(i) * d + j] * col[i];
      });
}

// v[d] tiled into [s,d]
template <class T>
Tensor<T> repeat_row(const Tensor<T>& v, int s) {
  const int d = static_cast<int>(v.size());
  std::vector<T> out(static_cast<size_t>(s) * d);
  for (int i = 0; i < s; ++i)
    std::copy(v.value().begin(), v.value().end(), out.begin() + static_cast<size_t>(i) * d);
  auto pv = v.node();
  return detail::make_op<T>(
      {s, d}, std::move(out), {pv}, [pv, s, d](TensorNode<T>& n) {
        if (!pv->requires_grad) return;
        if (pv->grad.empty()) pv->grad.assign(pv->value.size(), T(0));
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < d; ++j)
            pv->grad[j] += n.grad[static_cast<size_t>(i) * d + j];
      });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
  if (x.shape().size() != 2)
    throw DimensionError("gather_rows: need 2-d tensor, got " +
                         shape_str(x.shape()));
  const int d = x.cols();
  std::vector<T> out(idx.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.value().data() + static_cast<size_t>(idx[i]) * d, d,
                out.data() + i * d);
  auto px = x.node();
  return detail::make_op<T>(
      {static_cast<int>(idx.size()), d}, std::move(out), {px},
      [px, idx, d](TensorNode<T>& n) {
        if (!px->requires_grad) return;
        if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
        for (size_t i = 0; i < idx.size(); ++i)
          for (int j = 0; j < d; ++j)
            px->grad[static_cast<size_t>(idx[i]) * d + j] += n.grad[i * d + j];
      });
}

// copy of base with base[idx[i]] replaced by rows[i]
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& base, const std::vector<int>& idx,
                       const Tensor<T>& rows) {
  if (base.shape().size() != 2 || rows.shape().size() != 2 ||
      base.cols() != rows.cols() ||
      rows.rows() != static_cast<int>(idx.size()))
    throw DimensionError("scatter_rows: " + shape_str(base.shape()) + " <- " +
                         shape_str(rows.shape()));
  const int d = base.cols();
  std::vector<T> out(base.value().begin(), base.value().end());
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(rows.value().data() + i * d, d,
                out.data() + static_cast<size_t>(idx[i]) * d);
  auto pb = base.node(), pr = rows.node();
  return detail::make_op<T>(
      base.shape(), std::move(out), {pb, pr},
      [pb, pr, idx, d](TensorNode<T>& n) {
        if (pr->requires_grad) {
          if (pr->grad.empty()) pr->grad.assign(pr->value.size(), T(0));
          for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j)
              pr->grad[i * d + j] += n.grad[static_cast<size_t>(idx[i]) * d + j];
        }
        if (pb->requires_grad) {
          if (pb->grad.empty()) pb->grad.assign(pb->value.size(), T(0));
          std::vector<uint8_t> replaced(pb->value.size() / d, 0);
          for (int i : idx) replaced[static_cast<size_t>(i)] = 1;
          const size_t s = pb->value.size() / d;
          for (size_t r = 0; r < s; ++r) {
            if (replaced[r]) continue;
            for (int j = 0; j < d; ++j) pb->grad[r * d + j] += n.grad[r * d + j];
          }
        }
      });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
  if (x.shape().size() != 2 || c0 < 0 || c1 > x.cols() || c0 >= c1)
    throw DimensionError("slice_cols: [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") of " + shape_str(x.shape()));
  const int s = x.rows(), d = x.cols(), w = c1 - c0;
  std::vector<T> out(static_cast<size_t>(s) * w);
  for (int i = 0; i < s; ++i)
    std::copy_n(x.value().data() + static_cast<size_t>(i) * d + c0, w,
                out.data() + static_cast<size_t>(i) * w);
  auto px = x.node();
  return detail::make_op<T>(
      {s, w}, std::move(out), {px}, [px, s, d, c0, w](TensorNode<T>& n) {
        if (!px->requires_grad) return;
        if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < w; ++j)
            px->grad[static_cast<size_t>(i) * d + c0 + j] +=
                n.grad[static_cast<size_t>(i) * w + j];
      });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: empty input");
  const int s = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.rows() != s)
      throw DimensionError("concat_cols: row mismatch " +
                           shape_str(p.shape()));
    total += p.cols();
  }
  std::vector<T> out(static_cast<size_t>(s) * total);
  std::vector<detail::NodePtr<T>> nodes;
  std::vector<int> widths;
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < s; ++i)
      std::copy_n(p.value().data() + static_cast<size_t>(i) * w, w,
                  out.data() + static_cast<size_t>(i) * total + off);
    off += w;
    nodes.push_back(p.node());
    widths.push_back(w);
  }
  return detail::make_op<T>(
      {s, total}, std::move(out), nodes,
      [nodes, widths, s, total](TensorNode<T>& n) {
        int o = 0;
        for (size_t p = 0; p < nodes.size(); ++p) {
          const int w = widths[p];
          if (nodes[p]->requires_grad) {
            auto& g = nodes[p]->grad;
            if (g.empty()) g.assign(nodes[p]->value.size(), T(0));
            for (int i = 0; i < s; ++i)
              for (int j = 0; j < w; ++j)
                g[static_cast<size_t>(i) * w + j] +=
                    n.grad[static_cast<size_t>(i) * total + o + j];
          }
          o += w;
        }
      });
}

// out[j] = x[map[j]]; map need not be surjective. Backward scatter-adds.
template <class T>
Tensor<T> gather_flat(const Tensor<T>& x,
                      const std::shared_ptr<const std::vector<int>>& map,
                      std::vector<int> out_shape) {
  if (numel(out_shape) != static_cast<long long>(map->size()))
    throw DimensionError("gather_flat: map length " +
                         std::to_string(map->size()) + " vs shape " +
                         shape_str(out_shape));
  std::vector<T> out(map->size());
  for (size_t j = 0; j < map->size(); ++j) out[j] = x.value()[(*map)[j]];
  auto px = x.node();
  return detail::make_op<T>(
      std::move(out_shape), std::move(out), {px}, [px, map](TensorNode<T>& n) {
        if (!px->requires_grad) return;
        if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
        for (size_t j = 0; j < map->size(); ++j)
          px->grad[(*map)[j]] += n.grad[j];
      });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
  std::vector<T> out(x.value().begin(), x.value().end());
  auto px = x.node();
  return detail::make_op<T>(std::move(shape), std::move(out), {px},
                            [px](TensorNode<T>& n) {
                              if (px->requires_grad)
                                px->accumulate(n.grad.data(), n.grad.size());
                            });
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

// rows of a 2-d tensor normalized to a probability distribution, computed
// with per-row max subtraction
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.shape().size() != 2)
    throw DimensionError("softmax_rows: need 2-d tensor, got " +
                         shape_str(x.shape()));
  const int m = x.rows(), n = x.cols();
  std::vector<T> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const T* row = x.value().data() + static_cast<size_t>(i) * n;
    T* orow = out.data() + static_cast<size_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= sum;
  }
  auto px = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px}, [px, m, n](TensorNode<T>& nd) {
        if (!px->requires_grad) return;
        if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
        for (int i = 0; i < m; ++i) {
          const T* y = nd.value.data() + static_cast<size_t>(i) * n;
          const T* gy = nd.grad.data() + static_cast<size_t>(i) * n;
          T dot = 0;
          for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
          T* gx = px->grad.data() + static_cast<size_t>(i) * n;
          for (int j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
        }
      });
}

// last-axis standardization of x[s,d] followed by gain * xhat + bias
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  if (x.shape().size() != 2 || gain.size() != x.cols() ||
      bias.size() != x.cols())
    throw DimensionError("layer_norm: " + shape_str(x.shape()) + " gain " +
                         shape_str(gain.shape()) + " bias " +
                         shape_str(bias.shape()));
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  const int s = x.rows(), d = x.cols();
  std::vector<T> out(static_cast<size_t>(s) * d);
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(s) * d);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(s));
  for (int i = 0; i < s; ++i) {
    const T* row = x.value().data() + static_cast<size_t>(i) * d;
    T mean = 0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    const T istd = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = istd;
    for (int j = 0; j < d; ++j) {
      T h = (row[j] - mean) * istd;
      (*xhat)[static_cast<size_t>(i) * d + j] = h;
      out[static_cast<size_t>(i) * d + j] = gain.value()[j] * h + bias.value()[j];
    }
  }
  auto px = x.node(), pg = gain.node(), pb = bias.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, xhat, inv_std, s, d](TensorNode<T>& nd) {
        for (int i = 0; i < s; ++i) {
          const T* gy = nd.grad.data() + static_cast<size_t>(i) * d;
          const T* h = xhat->data() + static_cast<size_t>(i) * d;
          const T istd = (*inv_std)[static_cast<size_t>(i)];
          if (pg->requires_grad) {
            if (pg->grad.empty()) pg->grad.assign(pg->value.size(), T(0));
            for (int j = 0; j < d; ++j) pg->grad[j] += gy[j] * h[j];
          }
          if (pb->requires_grad) {
            if (pb->grad.empty()) pb->grad.assign(pb->value.size(), T(0));
            for (int j = 0; j < d; ++j) pb->grad[j] += gy[j];
          }
          if (px->requires_grad) {
            if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
            // dxhat = gy * gain; dx = istd * (dxhat - mean(dxhat) - h * mean(dxhat*h))
            T mean_dh = 0, mean_dhh = 0;
            for (int j = 0; j < d; ++j) {
              T dh = gy[j] * pg->value[j];
              mean_dh += dh;
              mean_dhh += dh * h[j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dhh /= static_cast<T>(d);
            T* gx = px->grad.data() + static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) {
              T dh = gy[j] * pg->value[j];
              gx[j] += istd * (dh - mean_dh - h[j] * mean_dhh);
            }
          }
        }
      });
}

// exact Gaussian-CDF gelu: x * Phi(x)
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(0.7071067811865475244);
  const T inv_sqrt2pi = T(0.3989422804014326779);
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) {
    T phi = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    v = v * phi;
  }
  auto px = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px},
      [px, inv_sqrt2, inv_sqrt2pi](TensorNode<T>& n) {
        if (!px->requires_grad) return;
        if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
        for (size_t i = 0; i < n.grad.size(); ++i) {
          T v = px->value[i];
          T phi = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
          T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
          px->grad[i] += n.grad[i] * (phi + v * pdf);
        }
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  auto px = x.node();
  return detail::make_op<T>(x.shape(), std::move(out), {px},
                            [px](TensorNode<T>& n) {
                              if (!px->requires_grad) return;
                              if (px->grad.empty())
                                px->grad.assign(px->value.size(), T(0));
                              for (size_t i = 0; i < n.grad.size(); ++i)
                                if (px->value[i] > T(0))
                                  px->grad[i] += n.grad[i];
                            });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) {
    if (v >= T(0)) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  auto px = x.node();
  return detail::make_op<T>(x.shape(), std::move(out), {px},
                            [px](TensorNode<T>& n) {
                              if (!px->requires_grad) return;
                              if (px->grad.empty())
                                px->grad.assign(px->value.size(), T(0));
                              for (size_t i = 0; i < n.grad.size(); ++i) {
                                T y = n.value[i];
                                px->grad[i] += n.grad[i] * y * (T(1) - y);
                              }
                            });
}

// sqrt(a^2 + b^2 + eps), the smooth magnitude of a complex pair
template <class T>
Tensor<T> hypot_eps(const Tensor<T>& a, const Tensor<T>& b, T eps) {
  detail::require_same_shape(a, b, "hypot_eps");
  std::vector<T> out(a.value().size());
  for (size_t i = 0; i < out.size(); ++i) {
    T ar = a.value()[i], br = b.value()[i];
    out[i] = std::sqrt(ar * ar + br * br + eps);
  }
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode<T>& n) {
        if (pa->requires_grad && pa->grad.empty())
          pa->grad.assign(pa->value.size(), T(0));
        if (pb->requires_grad && pb->grad.empty())
          pb->grad.assign(pb->value.size(), T(0));
        for (size_t i = 0; i < n.grad.size(); ++i) {
          T inv = n.grad[i] / n.value[i];
          if (pa->requires_grad) pa->grad[i] += inv * pa->value[i];
          if (pb->requires_grad) pb->grad[i] += inv * pb->value[i];
        }
      });
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.value()) s += v;
  auto px = x.node();
  return detail::make_op<T>({1}, {s}, {px}, [px](TensorNode<T>& n) {
    if (!px->requires_grad) return;
    if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
    for (auto& g : px->grad) g += n.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// mean squared error against a constant target, optionally weighted; with a
// weight map the normalizer is the weight sum
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred, target, "mse_loss");
  Tensor<T> d = sub(pred, target);
  return mean_all(mul(d, d));
}

template <class T>
Tensor<T> weighted_mse_loss(const Tensor<T>& pred, const Tensor<T>& target,
                            const Tensor<T>& weight) {
  detail::require_same_shape(pred, target, "weighted_mse_loss");
  detail::require_same_shape(pred, weight, "weighted_mse_loss");
  T wsum = 0;
  for (T w : weight.value()) wsum += w;
  if (wsum <= T(0)) throw DataError("weighted_mse_loss: zero weight mass");
  Tensor<T> d = sub(pred, target);
  return scale(sum_all(mul(weight, mul(d, d))), T(1) / wsum);
}

// mean Huber loss against a constant target
template <class T>
Tensor<T> huber_loss(const Tensor<T>& pred, const Tensor<T>& target, T delta) {
  detail::require_same_shape(pred, target, "huber_loss");
  const size_t n = pred.value().size();
  T acc = 0;
  for (size_t i = 0; i < n; ++i) {
    T r = pred.value()[i] - target.value()[i];
    T a = std::abs(r);
    acc += a <= delta ? T(0.5) * r * r : delta * (a - T(0.5) * delta);
  }
  auto pp = pred.node(), pt = target.node();
  return detail::make_op<T>(
      {1}, {acc / static_cast<T>(n)}, {pp, pt},
      [pp, pt, delta, n](TensorNode<T>& nd) {
        if (!pp->requires_grad) return;
        if (pp->grad.empty()) pp->grad.assign(pp->value.size(), T(0));
        const T g = nd.grad[0] / static_cast<T>(n);
        for (size_t i = 0; i < n; ++i) {
          T r = pp->value[i] - pt->value[i];
          pp->grad[i] += g * std::clamp(r, -delta, delta);
        }
      });
}

// numerically stable mean binary cross-entropy on logits; targets constant
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::require_same_shape(logits, targets, "bce_with_logits");
  const size_t n = logits.value().size();
  T acc = 0;
  for (size_t i = 0; i < n; ++i) {
    T z = logits.value()[i], y = targets.value()[i];
    acc += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  auto pl = logits.node(), pt = targets.node();
  return detail::make_op<T>(
      {1}, {acc / static_cast<T>(n)}, {pl, pt}, [pl, pt, n](TensorNode<T>& nd) {
        if (!pl->requires_grad) return;
        if (pl->grad.empty()) pl->grad.assign(pl->value.size(), T(0));
        const T g = nd.grad[0] / static_cast<T>(n);
        for (size_t i = 0; i < n; ++i) {
          T z = pl->value[i];
          T p = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                          : std::exp(z) / (T(1) + std::exp(z));
          pl->grad[i] += g * (p - pt->value[i]);
        }
      });
}

// mean cross-entropy over rows of logits[n,c] with integer labels
template <class T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits,
                                    const std::vector<int>& labels) {
  if (logits.shape().size() != 2 ||
      static_cast<int>(labels.size()) != logits.rows())
    throw DimensionError("cross_entropy_with_logits: " +
                         shape_str(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  const int m = logits.rows(), c = logits.cols();
  T acc = 0;
  for (int i = 0; i < m; ++i) {
    const T* row = logits.value().data() + static_cast<size_t>(i) * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    acc += std::log(sum) + mx - row[labels[static_cast<size_t>(i)]];
  }
  auto pl = logits.node();
  return detail::make_op<T>(
      {1}, {acc / static_cast<T>(m)}, {pl}, [pl, labels, m, c](TensorNode<T>& nd) {
        if (!pl->requires_grad) return;
        if (pl->grad.empty()) pl->grad.assign(pl->value.size(), T(0));
        const T g = nd.grad[0] / static_cast<T>(m);
        for (int i = 0; i < m; ++i) {
          const T* row = pl->value.data() + static_cast<size_t>(i) * c;
          T mx = row[0];
          for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
          T sum = 0;
          for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
          T* gx = pl->grad.data() + static_cast<size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            T p = std::exp(row[j] - mx) / sum;
            gx[j] += g * (p - (j == labels[static_cast<size_t>(i)] ? T(1) : T(0)));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// convolution (CNN baseline)
// ---------------------------------------------------------------------------

// x[Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout], zero padding, square stride
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int pad) {
  if (x.shape().size() != 3 || w.shape().size() != 4 ||
      w.dim(1) != x.dim(0) || b.size() != w.dim(0))
    throw DimensionError("conv2d: x " + shape_str(x.shape()) + " w " +
                         shape_str(w.shape()) + " b " + shape_str(b.shape()));
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<T> out(static_cast<size_t>(cout) * oh * ow);
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  for (int co = 0; co < cout; ++co) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T acc = b.value()[co];
        for (int ci = 0; ci < cin; ++ci) {
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += xv[(static_cast<size_t>(ci) * h + iy) * wd + ix] *
                     wv[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
            }
          }
        }
        out[(static_cast<size_t>(co) * oh + oy) * ow + ox] = acc;
      }
    }
  }
  auto px = x.node(), pw = w.node(), pb = b.node();
  return detail::make_op<T>(
      {cout, oh, ow}, std::move(out), {px, pw, pb},
      [px, pw, pb, cin, h, wd, cout, kh, kw, oh, ow, stride,
       pad](TensorNode<T>& nd) {
        if (px->requires_grad && px->grad.empty())
          px->grad.assign(px->value.size(), T(0));
        if (pw->requires_grad && pw->grad.empty())
          pw->grad.assign(pw->value.size(), T(0));
        if (pb->requires_grad && pb->grad.empty())
          pb->grad.assign(pb->value.size(), T(0));
        for (int co = 0; co < cout; ++co) {
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              const T g = nd.grad[(static_cast<size_t>(co) * oh + oy) * ow + ox];
              if (pb->requires_grad) pb->grad[co] += g;
              for (int ci = 0; ci < cin; ++ci) {
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= wd) continue;
                    const size_t xi = (static_cast<size_t>(ci) * h + iy) * wd + ix;
                    const size_t wi =
                        ((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx;
                    if (px->requires_grad) px->grad[xi] += g * pw->value[wi];
                    if (pw->requires_grad) pw->grad[wi] += g * px->value[xi];
                  }
                }
              }
            }
          }
        }
      });
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.shape().size() != 3)
    throw DimensionError("global_avg_pool: need [C,H,W], got " +
                         shape_str(x.shape()));
  const int c = x.dim(0);
  const int hw = x.dim(1) * x.dim(2);
  std::vector<T> out(static_cast<size_t>(c));
  for (int i = 0; i < c; ++i) {
    T acc = 0;
    const T* p = x.value().data() + static_cast<size_t>(i) * hw;
    for (int j = 0; j < hw; ++j) acc += p[j];
    out[static_cast<size_t>(i)] = acc / static_cast<T>(hw);
  }
  auto px = x.node();
  return detail::make_op<T>(
      {c}, std::move(out), {px}, [px, c, hw](TensorNode<T>& n) {
        if (!px->requires_grad) return;
        if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
        for (int i = 0; i < c; ++i) {
          const T g = n.grad[static_cast<size_t>(i)] / static_cast<T>(hw);
          T* p = px->grad.data() + static_cast<size_t>(i) * hw;
          for (int j = 0; j < hw; ++j) p[j] += g;
        }
      });
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

// Populates gradients on every requires_grad tensor reachable from loss.
// Accumulation is additive; call zero_grad between steps.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got " +
                        shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // iterative post-order topological sort
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      TensorNode<T>* p = node->parents[child].get();
      ++child;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto* root = loss.node().get();
  if (root->grad.empty()) root->grad.assign(1, T(0));
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.value())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace kmae
