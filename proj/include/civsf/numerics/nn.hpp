#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "civsf/errors.hpp"
#include "civsf/numerics/autograd.hpp"
#include "civsf/numerics/ops.hpp"
#include "civsf/numerics/rng.hpp"

namespace civsf {

// Named parameter table. Registration order is the canonical order used by
// checkpoints and optimizers.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) {
      throw ContractError("parameter registered twice: " + name);
    }
    Var<T> v(std::move(init), true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, v);
    return v;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Var<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw RangeError("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Var<T>>>& entries() const {
    return entries_;
  }

  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.numel();
    return n;
  }

  std::vector<std::pair<std::string, Var<T>>> with_prefix(
      const std::string& prefix) const {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (const auto& e : entries_)
      if (e.first.rfind(prefix, 0) == 0) out.push_back(e);
    return out;
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

  void set_trainable(const std::string& prefix, bool on) {
    for (auto& [name, v] : entries_)
      if (name.rfind(prefix, 0) == 0) v.set_requires_grad(on);
  }

  void set_all_trainable(bool on) {
    for (auto& [_, v] : entries_) v.set_requires_grad(on);
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace init {

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> xavier(std::size_t fan_in, std::size_t fan_out, RngStream rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t({fan_in, fan_out});
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-a, a));
  return t;
}

template <typename T>
Tensor<T> normal(Shape shape, double sd, RngStream rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal(0.0, sd));
  return t;
}

}  // namespace init

template <typename T>
struct Linear {
  Var<T> weight;
  Var<T> bias;  // undefined when the layer has no bias

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in,
         std::size_t out, const RngStream& rng, bool with_bias = true) {
    weight = store.add(name + ".weight",
                       init::xavier<T>(in, out, rng.sub(name + ".weight")));
    if (with_bias) bias = store.add(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add_bias(y, bias) : y;
  }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim) {
    gamma = store.add(name + ".gamma", Tensor<T>({dim}, T(1)));
    beta = store.add(name + ".beta", Tensor<T>({dim}));
  }

  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta); }
};

// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
// The key projection has no bias: softmax is invariant to it, so it would be
// a parameter with an identically zero gradient.
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  Linear<T> q, k, v, o, fc1, fc2;
  std::size_t heads = 1;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& store, const std::string& name,
                   std::size_t dim, std::size_t heads_, std::size_t ffn_mult,
                   const RngStream& rng)
      : heads(heads_) {
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError("hidden " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(heads));
    }
    ln1 = LayerNorm<T>(store, name + ".ln1", dim);
    q = Linear<T>(store, name + ".q", dim, dim, rng);
    k = Linear<T>(store, name + ".k", dim, dim, rng, false);
    v = Linear<T>(store, name + ".v", dim, dim, rng);
    o = Linear<T>(store, name + ".o", dim, dim, rng);
    ln2 = LayerNorm<T>(store, name + ".ln2", dim);
    fc1 = Linear<T>(store, name + ".fc1", dim, dim * ffn_mult, rng);
    fc2 = Linear<T>(store, name + ".fc2", dim * ffn_mult, dim, rng);
  }

  Var<T> operator()(const Var<T>& x, std::size_t groups, std::size_t seq,
                    bool causal) const {
    auto h = ln1(x);
    auto a = attention(q(h), k(h), v(h), groups, seq, heads, causal);
    auto x1 = add(x, o(a));
    auto m = fc2(gelu(fc1(ln2(x1))));
    return add(x1, m);
  }
};

// Unidirectional LSTM layer; forget-gate bias starts at 1.
template <typename T>
struct Lstm {
  Var<T> w_ih, w_hh, bias;

  Lstm() = default;
  Lstm(ParamStore<T>& store, const std::string& name, std::size_t in,
       std::size_t hidden, const RngStream& rng) {
    w_ih = store.add(name + ".w_ih",
                     init::xavier<T>(in, 4 * hidden, rng.sub(name + ".w_ih")));
    w_hh = store.add(name + ".w_hh", init::xavier<T>(hidden, 4 * hidden,
                                                     rng.sub(name + ".w_hh")));
    Tensor<T> b({4 * hidden});
    for (std::size_t c = hidden; c < 2 * hidden; ++c) b[c] = T(1);
    bias = store.add(name + ".bias", std::move(b));
  }

  std::size_t hidden() const { return w_hh.shape()[0]; }

  Var<T> operator()(const Var<T>& x, std::size_t batch, std::size_t steps) const {
    return lstm(x, w_ih, w_hh, bias, batch, steps);
  }
};

}  // namespace civsf
