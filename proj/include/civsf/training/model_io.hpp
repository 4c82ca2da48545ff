#pragma once

#include <memory>
#include <string>
#include <vector>

#include "civsf/errors.hpp"
#include "civsf/harness/checkpoint.hpp"
#include "civsf/model/model.hpp"

namespace civsf {

inline void write_model_config(Checkpoint& ck, const ModelConfig& c) {
  ck.set("model.image_size", std::to_string(c.image_size));
  ck.set("model.patch", std::to_string(c.patch));
  ck.set("model.hidden", std::to_string(c.hidden));
  ck.set("model.vit_depth", std::to_string(c.vit_depth));
  ck.set("model.vit_heads", std::to_string(c.vit_heads));
  ck.set("model.fusion_depth", std::to_string(c.fusion_depth));
  ck.set("model.fusion_heads", std::to_string(c.fusion_heads));
  ck.set("model.ffn_mult", std::to_string(c.ffn_mult));
  ck.set("model.init", "linear xavier-uniform, lstm forget bias 1");
}

inline ModelConfig read_model_config(const Checkpoint& ck) {
  auto num = [&](const char* key) -> std::size_t {
    const auto& v = ck.get(key);
    try {
      return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
      throw DataError(std::string("checkpoint metadata ") + key + " is not a number: " + v);
    }
  };
  ModelConfig c;
  c.image_size = num("model.image_size");
  c.patch = num("model.patch");
  c.hidden = num("model.hidden");
  c.vit_depth = num("model.vit_depth");
  c.vit_heads = num("model.vit_heads");
  c.fusion_depth = num("model.fusion_depth");
  c.fusion_heads = num("model.fusion_heads");
  c.ffn_mult = num("model.ffn_mult");
  return c;
}

// Metadata plus every registered parameter, in registration order.
template <typename T>
Checkpoint model_checkpoint(const Model<T>& m) {
  Checkpoint ck;
  ck.set("framework", to_string(m.kind()));
  ck.set("model_seed", std::to_string(m.seed()));
  write_model_config(ck, m.config());
  for (const auto& [name, p] : m.params().entries())
    ck.tensors.emplace_back(name, p.value().template cast<float>());
  return ck;
}

// Copies checkpoint tensors into an existing model of the same framework.
template <typename T>
void load_parameters(Model<T>& m, const Checkpoint& ck) {
  const auto kind = parse_framework(ck.get("framework"));
  if (kind != m.kind()) {
    throw CompatibilityError("checkpoint holds a " + to_string(kind) + " model, expected " +
                             to_string(m.kind()));
  }
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("opt.", 0) == 0) continue;
    if (!m.params().contains(name)) {
      throw CompatibilityError("checkpoint parameter '" + name + "' does not exist in a " +
                               to_string(kind) + " model");
    }
  }
  for (const auto& [name, p] : m.params().entries()) {
    const Tensor<float>* t = ck.find(name);
    if (!t) throw DataError("checkpoint lacks parameter '" + name + "'");
    if (t->shape() != p.value().shape()) {
      throw ShapeError("checkpoint parameter '" + name + "' has shape " + shape_str(t->shape()) +
                       ", model expects " + shape_str(p.value().shape()));
    }
    auto dst = p;
    dst.mutable_value() = t->template cast<T>();
  }
}

template <typename T = float>
std::unique_ptr<Model<T>> model_from_checkpoint(const Checkpoint& ck) {
  const auto kind = parse_framework(ck.get("framework"));
  std::uint64_t seed = 0;
  try {
    seed = std::stoull(ck.get_or("model_seed", "0"));
  } catch (const std::exception&) {
    throw DataError("checkpoint model_seed is not a number");
  }
  auto m = std::make_unique<Model<T>>(read_model_config(ck), kind, seed);
  load_parameters(*m, ck);
  return m;
}

// Forecasting heads pair only with forecasting-pretrained encoders.
inline void require_forecasting(FrameworkKind kind, const std::string& head) {
  if (!is_forecasting(kind)) {
    throw CompatibilityError("head '" + head + "' needs a forecasting (sm-vsf or ci-vsf) " +
                             "checkpoint, got " + to_string(kind));
  }
}

}  // namespace civsf
