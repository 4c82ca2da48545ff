#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "civsf/errors.hpp"
#include "civsf/numerics/autograd.hpp"

namespace civsf {

enum class OptimizerKind { Sgd, Adam, AdamW };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::AdamW: return "adamw";
  }
  return "?";
}

struct OptimizerOptions {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Optimizer over a fixed list of named parameters. First/second moments are
// kept per parameter with matching shapes.
template <typename T>
class Optimizer {
 public:
  struct Slot {
    std::string name;
    Var<T> param;
    Tensor<T> m;
    Tensor<T> v;
  };

  Optimizer(OptimizerOptions opts,
            const std::vector<std::pair<std::string, Var<T>>>& params)
      : opts_(opts) {
    slots_.reserve(params.size());
    for (const auto& [name, p] : params) {
      slots_.push_back({name, p, Tensor<T>(p.shape()), Tensor<T>(p.shape())});
    }
  }

  // Applies one update from the gradients currently stored on the
  // parameters. Throws NumericError naming the first parameter whose
  // gradient is not finite; no parameter is modified in that case.
  void step() {
    for (const auto& s : slots_) {
      const auto& g = s.param.grad();
      if (g.numel() != s.param.numel()) continue;
      if (!g.all_finite()) {
        throw NumericError("non-finite gradient for parameter " + s.name);
      }
    }
    ++steps_;
    const double b1t = 1.0 - std::pow(opts_.beta1, static_cast<double>(steps_));
    const double b2t = 1.0 - std::pow(opts_.beta2, static_cast<double>(steps_));
    for (auto& s : slots_) {
      auto& p = s.param.mutable_value();
      const auto& g = s.param.grad();
      if (g.numel() != p.numel()) continue;
      const std::size_t n = p.numel();
      switch (opts_.kind) {
        case OptimizerKind::Sgd:
          for (std::size_t i = 0; i < n; ++i) {
            p[i] -= static_cast<T>(opts_.lr) *
                    (g[i] + static_cast<T>(opts_.weight_decay) * p[i]);
          }
          break;
        case OptimizerKind::Adam:
        case OptimizerKind::AdamW: {
          const bool decoupled = opts_.kind == OptimizerKind::AdamW;
          const T lr = static_cast<T>(opts_.lr);
          const T wd = static_cast<T>(opts_.weight_decay);
          const T b1 = static_cast<T>(opts_.beta1);
          const T b2 = static_cast<T>(opts_.beta2);
          const T c1 = static_cast<T>(b1t), c2 = static_cast<T>(b2t);
          const T eps = static_cast<T>(opts_.eps);
          for (std::size_t i = 0; i < n; ++i) {
            T gi = g[i];
            if (!decoupled) gi += wd * p[i];
            s.m[i] = b1 * s.m[i] + (T(1) - b1) * gi;
            s.v[i] = b2 * s.v[i] + (T(1) - b2) * gi * gi;
            const T mhat = s.m[i] / c1;
            const T vhat = s.v[i] / c2;
            if (decoupled) p[i] -= lr * wd * p[i];
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
          }
          break;
        }
      }
    }
  }

  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  const OptimizerOptions& options() const { return opts_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  OptimizerOptions opts_;
  std::vector<Slot> slots_;
  std::int64_t steps_ = 0;
};

}  // namespace civsf
