// SPDX-License-Identifier: Apache-2.0
//
// Transformer building blocks on top of the autograd tensor: parameter
// store, truncated-normal init, attention and the pre-norm block.
#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "kmae/rng.hpp"
#include "kmae/tensor.hpp"

namespace kmae {

// Named parameters in a stable creation order. The order defines both the
// optimizer slot layout and the checkpoint array layout.
template <class T>
class ParamStore {
 public:
  Tensor<T> create(const std::string& name, std::vector<int> shape) {
    if (index_.count(name))
      throw ContractError("parameter already exists: " + name);
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
    index_[name] = names_.size();
    names_.push_back(name);
    params_.push_back(t);
    return t;
  }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& tensors() { return params_; }
  const std::vector<Tensor<T>>& tensors() const { return params_; }
  size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long long total_values() const {
    long long n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Initializers. Projections get truncated normal(0, 0.02), biases zeros,
// layer-norm gains ones; all deterministic from the stream passed in.
template <class T>
void init_truncated_normal(Tensor<T>& t, Rng& rng, double std_dev = 0.02) {
  for (auto& v : t.value()) v = static_cast<T>(rng.truncated_normal(std_dev));
}

template <class T>
void init_ones(Tensor<T>& t) {
  for (auto& v : t.value()) v = T(1);
}

template <class T>
struct LinearParams {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]
};

template <class T>
LinearParams<T> make_linear(ParamStore<T>& ps, const std::string& prefix,
                            int in, int out, Rng& rng) {
  LinearParams<T> lp{ps.create(prefix + ".w", {in, out}),
                     ps.create(prefix + ".b", {out})};
  init_truncated_normal(lp.w, rng);
  return lp;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
  return add_rowvec(matmul(x, p.w), p.b);
}

template <class T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <class T>
LayerNormParams<T> make_layer_norm(ParamStore<T>& ps, const std::string& prefix,
                                   int dim) {
  LayerNormParams<T> p{ps.create(prefix + ".g", {dim}),
                       ps.create(prefix + ".b", {dim})};
  init_ones(p.gain);
  return p;
}

template <class T>
struct AttentionParams {
  LinearParams<T> q, k, v, out;
};

template <class T>
AttentionParams<T> make_attention(ParamStore<T>& ps, const std::string& prefix,
                                  int dim, Rng& rng) {
  return AttentionParams<T>{make_linear(ps, prefix + ".q", dim, dim, rng),
                            make_linear(ps, prefix + ".k", dim, dim, rng),
                            make_linear(ps, prefix + ".v", dim, dim, rng),
                            make_linear(ps, prefix + ".o", dim, dim, rng)};
}

// plain 2-d transpose as an op (used for k^T in attention)
template <class T>
Tensor<T> transpose_copy(const Tensor<T>& x) {
  if (x.shape().size() != 2)
    throw DimensionError("transpose_copy: need 2-d tensor, got " +
                         shape_str(x.shape()));
  const int m = x.rows(), n = x.cols();
  std::vector<T> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = x.value()[static_cast<size_t>(i) * n + j];
  auto px = x.node();
  return detail::make_op<T>(
      {n, m}, std::move(out), {px}, [px, m, n](TensorNode<T>& nd) {
        if (!px->requires_grad) return;
        if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            px->grad[static_cast<size_t>(i) * n + j] +=
                nd.grad[static_cast<size_t>(j) * m + i];
      });
}

// Scaled dot-product attention over x[s,d], per-head scale 1/sqrt(d/heads),
// heads concatenated then output-projected.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                               int heads) {
  const int d = x.cols();
  if (heads <= 0 || d % heads != 0)
    throw ConfigError("multi_head_attention: dim " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  const int dh = d / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> q = linear(x, p.q);
  Tensor<T> k = linear(x, p.k);
  Tensor<T> v = linear(x, p.v);
  std::vector<Tensor<T>> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor<T> scores = scale(matmul(qh, transpose_copy(kh)), scl);
    Tensor<T> attn = softmax_rows(scores);
    head_outs.push_back(matmul(attn, vh));
  }
  return linear(concat_cols(head_outs), p.out);
}

// Pre-norm transformer block: x += attn(ln1(x)); x += mlp(ln2(x)).
// MLP hidden width is 4 * dim with gelu.
template <class T>
struct TransformerBlock {
  LayerNormParams<T> ln1, ln2;
  AttentionParams<T> attn;
  LinearParams<T> fc1, fc2;
  int heads = 1;

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = add(x, multi_head_attention(layer_norm(x, ln1.gain, ln1.bias,
                                                         T(1e-5)),
                                              attn, heads));
    Tensor<T> m = linear(gelu(linear(layer_norm(h, ln2.gain, ln2.bias, T(1e-5)),
                                     fc1)),
                         fc2);
    return add(h, m);
  }
};

template <class T>
std::vector<std::vector<T>> snapshot_values(const ParamStore<T>& ps) {
  std::vector<std::vector<T>> out;
  out.reserve(ps.size());
  for (const auto& p : ps.tensors())
    out.emplace_back(p.value().begin(), p.value().end());
  return out;
}

template <class T>
void restore_values(ParamStore<T>& ps, const std::vector<std::vector<T>>& snap) {
  if (snap.size() != ps.size())
    throw ContractError("restore_values: snapshot/store size mismatch");
  for (size_t i = 0; i < snap.size(); ++i) {
    auto vals = ps.tensors()[i].value();
    if (vals.size() != snap[i].size())
      throw ContractError("restore_values: parameter shape drift");
    std::copy(snap[i].begin(), snap[i].end(), vals.begin());
  }
}

template <class T>
TransformerBlock<T> make_transformer_block(ParamStore<T>& ps,
                                           const std::string& prefix, int dim,
                                           int heads, Rng& rng) {
  TransformerBlock<T> b;
  b.ln1 = make_layer_norm(ps, prefix + ".ln1", dim);
  b.attn = make_attention(ps, prefix + ".attn", dim, rng);
  b.ln2 = make_layer_norm(ps, prefix + ".ln2", dim);
  b.fc1 = make_linear(ps, prefix + ".mlp.fc1", dim, 4 * dim, rng);
  b.fc2 = make_linear(ps, prefix + ".mlp.fc2", 4 * dim, dim, rng);
  b.heads = heads;
  return b;
}

}  // namespace kmae
