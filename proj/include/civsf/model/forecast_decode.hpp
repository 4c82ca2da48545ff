#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "civsf/errors.hpp"
#include "civsf/model/encoders.hpp"
#include "civsf/model/fusion.hpp"
#include "civsf/numerics/nn.hpp"
#include "civsf/numerics/ops.hpp"

namespace civsf {

// Forecast of the image at `target_doy` from the embedding at step `source`.
struct ForecastSpec {
  std::size_t source = 0;
  int target_doy = 0;
  int delta = 0;
};

// Step i forecasts step i+1; the last step forecasts the image at k_doy.
inline std::vector<ForecastSpec> next_step_targets(const std::vector<int>& doys,
                                                   int k_doy) {
  if (doys.size() < 2) throw ConfigError("forecasting needs at least 2 context images");
  if (k_doy <= doys.back()) {
    throw DomainError("forecast target DOY " + std::to_string(k_doy) +
                      " is not after the last context DOY " +
                      std::to_string(doys.back()));
  }
  std::vector<ForecastSpec> out;
  for (std::size_t i = 0; i + 1 < doys.size(); ++i)
    out.push_back({i, doys[i + 1], doys[i + 1] - doys[i]});
  out.push_back({doys.size() - 1, k_doy, k_doy - doys.back()});
  return out;
}

// Morphs source-step token embeddings into target-step embeddings.
template <typename T>
struct Forecaster {
  Linear<T> fc1, fc2, fc3;

  Forecaster() = default;
  Forecaster(ParamStore<T>& store, const ModelConfig& cfg, const RngStream& rng) {
    const std::size_t D = cfg.hidden;
    fc1 = Linear<T>(store, "forecast.fc1", D, 2 * D, rng);
    fc2 = Linear<T>(store, "forecast.fc2", 2 * D, 2 * D, rng);
    fc3 = Linear<T>(store, "forecast.fc3", 2 * D, D, rng);
  }

  // src: [steps*kept x D]; weather/doy/delta: [steps x D] (weather may be
  // undefined). The four addends are summed, then passed through the MLP.
  Var<T> operator()(const Var<T>& src, const Var<T>& weather, const Var<T>& doy,
                    const Var<T>& delta, std::size_t kept) const {
    if (doy.rows() != delta.rows()) throw ShapeError("forecaster: addend rows differ");
    auto per_step = add(doy, delta);
    if (weather.defined()) per_step = add(weather, per_step);
    auto x = add(src, repeat_rows(per_step, kept));
    return fc3(tanh(fc2(tanh(fc1(x)))));
  }
};

// Shared per-patch MLP decoder.
template <typename T>
struct PatchDecoder {
  Linear<T> fc1, fc2;

  PatchDecoder() = default;
  PatchDecoder(ParamStore<T>& store, const ModelConfig& cfg, const RngStream& rng) {
    fc1 = Linear<T>(store, "dec.fc1", cfg.hidden, 2 * cfg.hidden, rng);
    fc2 = Linear<T>(store, "dec.fc2", 2 * cfg.hidden, cfg.patch_dim(), rng);
  }

  // Repopulates embeddings into their grid slots (-1 = zero vector) and
  // decodes every slot: [slots.size() x 6*p*p].
  Var<T> operator()(const Var<T>& emb, const std::vector<std::int64_t>& slots) const {
    return fc2(gelu(fc1(gather_rows(emb, slots))));
  }
};

// Full image series from an embedding series: [series*steps x 6*H*W].
template <typename T>
Var<T> decode_series(const PatchDecoder<T>& dec, const Var<T>& emb,
                     const TokenLayout& layout, const ModelConfig& cfg) {
  if (emb.rows() != layout.tokens()) {
    throw ShapeError("decode_series: " + shape_str(emb.shape()) + " vs " +
                     std::to_string(layout.tokens()) + " tokens");
  }
  return unpatchify(dec(emb, layout.slots()), cfg.image_size, cfg.patch);
}

// One image per series from target embeddings laid out like step `t` of the
// source layout: [series x 6*H*W].
template <typename T>
Var<T> decode_forecast(const PatchDecoder<T>& dec, const Var<T>& target_emb,
                       const TokenLayout& layout, std::size_t t,
                       const ModelConfig& cfg) {
  auto slots = layout.step_slots(t);
  // Rows of target_emb are (series, kept rank); remap from token rows.
  for (std::size_t b = 0; b < layout.series(); ++b)
    for (std::size_t g = 0; g < layout.patches(); ++g) {
      auto& s = slots[b * layout.patches() + g];
      if (s < 0) continue;
      const auto base = static_cast<std::int64_t>((b * layout.steps() + t) * layout.kept());
      s = static_cast<std::int64_t>(b * layout.kept()) + (s - base);
    }
  return unpatchify(dec(target_emb, slots), cfg.image_size, cfg.patch);
}

}  // namespace civsf
