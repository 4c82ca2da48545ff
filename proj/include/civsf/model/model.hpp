#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "civsf/data/datamodel.hpp"
#include "civsf/errors.hpp"
#include "civsf/masking.hpp"
#include "civsf/model/encoders.hpp"
#include "civsf/model/forecast_decode.hpp"
#include "civsf/model/fusion.hpp"
#include "civsf/numerics/nn.hpp"
#include "civsf/numerics/ops.hpp"

namespace civsf {

enum class FrameworkKind { SmMr, MmMr, SmVsf, CiVsf };

inline std::string to_string(FrameworkKind k) {
  switch (k) {
    case FrameworkKind::SmMr: return "sm-mr";
    case FrameworkKind::MmMr: return "mm-mr";
    case FrameworkKind::SmVsf: return "sm-vsf";
    case FrameworkKind::CiVsf: return "ci-vsf";
  }
  return "?";
}

inline FrameworkKind parse_framework(const std::string& s) {
  if (s == "sm-mr") return FrameworkKind::SmMr;
  if (s == "mm-mr") return FrameworkKind::MmMr;
  if (s == "sm-vsf") return FrameworkKind::SmVsf;
  if (s == "ci-vsf") return FrameworkKind::CiVsf;
  throw ConfigError("unknown framework '" + s +
                    "' (expected sm-mr, mm-mr, sm-vsf or ci-vsf)");
}

inline bool uses_weather(FrameworkKind k) {
  return k == FrameworkKind::MmMr || k == FrameworkKind::CiVsf;
}
inline bool is_forecasting(FrameworkKind k) {
  return k == FrameworkKind::SmVsf || k == FrameworkKind::CiVsf;
}

inline constexpr std::array<FrameworkKind, 4> kAllFrameworks{
    FrameworkKind::SmMr, FrameworkKind::MmMr, FrameworkKind::SmVsf,
    FrameworkKind::CiVsf};

// One image series drawn from a sample: input image indices, an optional
// later target image, and an optional weather mask.
struct SeriesRef {
  const Sample* sample = nullptr;
  std::vector<std::size_t> images;
  std::optional<std::size_t> target;
  const WeatherMask* weather_mask = nullptr;
};

// Network-ready tensors for a batch of equally long series.
template <typename T>
struct SeriesBatch {
  std::size_t series = 0;
  std::size_t steps = 0;
  Var<T> images;                        // [series*steps x 6*H*W], normalized
  std::vector<std::vector<int>> doys;   // [series][steps]
  Var<T> weather;                       // [series*days x 6] or undefined
  std::size_t days = 0;
  std::vector<int> start_doy;
  std::vector<int> target_doy;          // forecasting batches only
  Tensor<T> targets;                    // [series x 6*H*W], forecasting only
};

// Weather is read only when `with_weather`; its span runs from each
// sample's first day to the latest DOY the batch needs.
template <typename T>
SeriesBatch<T> make_batch(const std::vector<SeriesRef>& refs, bool with_weather) {
  if (refs.empty()) throw ShapeError("empty batch");
  SeriesBatch<T> b;
  b.series = refs.size();
  b.steps = refs.front().images.size();
  const std::size_t side = refs.front().sample->side();
  const std::size_t dim = kBands * side * side;
  const bool forecast = refs.front().target.has_value();
  Tensor<T> imgs({b.series * b.steps, dim});
  if (forecast) b.targets = Tensor<T>({b.series, dim});
  int last_needed = 0;
  for (std::size_t s = 0; s < refs.size(); ++s) {
    const auto& r = refs[s];
    if (r.images.size() != b.steps || r.sample->side() != side ||
        r.target.has_value() != forecast) {
      throw ShapeError("batch series differ in length, geometry or kind");
    }
    std::vector<int> doys;
    for (std::size_t t = 0; t < b.steps; ++t) {
      const auto img = r.sample->spectral.image(r.images[t]);
      T* dst = imgs.data() + (s * b.steps + t) * dim;
      for (std::size_t i = 0; i < dim; ++i)
        dst[i] = static_cast<T>((img[i] - kImageOffset) / kImageScale);
      doys.push_back(r.sample->doys[r.images[t]]);
    }
    int needed = doys.back() - r.sample->weather.start_doy + 1;
    if (forecast) {
      const auto img = r.sample->spectral.image(*r.target);
      T* dst = b.targets.data() + s * dim;
      for (std::size_t i = 0; i < dim; ++i)
        dst[i] = static_cast<T>((img[i] - kImageOffset) / kImageScale);
      const int tdoy = r.sample->doys[*r.target];
      if (tdoy <= doys.back()) throw DomainError("forecast target precedes its context");
      b.target_doy.push_back(tdoy);
      needed = tdoy - r.sample->weather.start_doy + 1;
    }
    last_needed = std::max(last_needed, needed);
    b.doys.push_back(std::move(doys));
    b.start_doy.push_back(r.sample->weather.start_doy);
  }
  b.images = constant(std::move(imgs));
  if (with_weather) {
    b.days = static_cast<std::size_t>(std::max(1, last_needed));
    Tensor<T> w({b.series * b.days, kWeatherInputs});
    for (std::size_t s = 0; s < refs.size(); ++s)
      fill_weather_input<T>(refs[s].sample->weather, refs[s].weather_mask, b.days,
                            w.data() + s * b.days * kWeatherInputs);
    b.weather = constant(std::move(w));
  }
  return b;
}

enum class MaskSite { Pixels, Embeddings };

// Normalized truth of the 5 weather channels, [days x 5] per series.
template <typename T>
Tensor<T> weather_truth(const WeatherSeries& w, std::size_t days) {
  Tensor<T> out({days, kWeatherChannels});
  for (std::size_t d = 0; d < days && d < w.days; ++d)
    for (std::size_t c = 0; c < kWeatherChannels; ++c)
      out.at(d, c) = static_cast<T>((w.at(d, c) - kWeatherOffset[c]) / kWeatherScale[c]);
  return out;
}

enum class LossScope { Full, Unmasked };

// All networks of one pretraining framework. Parameters that a framework
// never uses are not registered, so its checkpoint cannot carry them.
template <typename T>
class Model {
 public:
  struct Encoded {
    TokenLayout layout;
    Var<T> spatial;   // ViT tokens, layout order
    Var<T> states;    // weather states [series*days x D], or undefined
    Var<T> weather;   // matched weather per step [series*steps x D], or undefined
    Var<T> emb;       // causal embedding series, layout order
  };

  Model(const ModelConfig& cfg, FrameworkKind kind, std::uint64_t seed)
      : cfg_(cfg), kind_(kind), seed_(seed) {
    cfg_.validate();
    const RngStream rng(seed, "model");
    vit = VitEncoder<T>(store_, cfg_, rng);
    dec = PatchDecoder<T>(store_, cfg_, rng);
    doy = DoyEmbedder<T>(store_, cfg_, rng);
    seq = SequenceEncoder<T>(store_, cfg_, rng);
    if (uses_weather(kind_)) {
      wenc = WeatherEncoder<T>(store_, cfg_, rng);
      weather_head = Linear<T>(store_, "wrec.linear", cfg_.hidden, kWeatherChannels, rng);
      fused_weather_head =
          Linear<T>(store_, "mmrec.linear", cfg_.hidden, kWeatherChannels, rng);
    }
    if (is_forecasting(kind_)) {
      delta = DeltaEmbedder<T>(store_, cfg_, rng);
      forecaster = Forecaster<T>(store_, cfg_, rng);
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  FrameworkKind kind() const { return kind_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  bool has_weather() const { return uses_weather(kind_); }
  bool has_forecaster() const { return is_forecasting(kind_); }

  // Fresh decoder weights drawn from `seed` (fine-tuning heads).
  void reinit_decoder(std::uint64_t seed) {
    ParamStore<T> scratch;
    PatchDecoder<T> fresh(scratch, cfg_, RngStream(seed, "decoder-reinit"));
    for (const auto& [name, p] : scratch.entries()) {
      auto dst = store_.get(name);
      dst.mutable_value() = p.value();
    }
  }

  // ViT tokens for the kept patches of `layout`. With MaskSite::Pixels only
  // kept patches enter the ViT; with MaskSite::Embeddings every patch is
  // encoded and the masked embeddings are dropped afterwards.
  Var<T> spatial_tokens(const Var<T>& images, const TokenLayout& layout,
                        MaskSite site) const {
    const auto patches = patchify(images, cfg_.image_size, cfg_.patch);
    if (site == MaskSite::Pixels || layout.kept() == layout.patches()) {
      return vit(patches, layout.patch_rows(), layout.patch_ids(), layout.kept());
    }
    const std::size_t n = images.rows(), G = layout.patches();
    std::vector<std::int64_t> rows(n * G), ids(n * G);
    for (std::size_t i = 0; i < n * G; ++i) {
      rows[i] = static_cast<std::int64_t>(i);
      ids[i] = static_cast<std::int64_t>(i % G);
    }
    return gather_rows(vit(patches, rows, ids, G), layout.patch_rows());
  }

  Var<T> weather_states(const SeriesBatch<T>& b) const {
    if (!has_weather()) return {};
    if (!b.weather.defined()) throw ContractError("batch carries no weather");
    return wenc(b.weather, b.series, b.days);
  }

  Encoded encode(const SeriesBatch<T>& b, const TokenLayout& layout,
                 MaskSite site) const {
    if (layout.series() != b.series || layout.steps() != b.steps) {
      throw ShapeError("layout does not match the batch");
    }
    Encoded e;
    e.layout = layout;
    e.spatial = spatial_tokens(b.images, layout, site);
    e.states = weather_states(b);
    if (e.states.defined()) e.weather = temporal_match(e.states, b.doys, b.start_doy, b.days);
    std::vector<int> flat;
    for (const auto& d : b.doys) flat.insert(flat.end(), d.begin(), d.end());
    const auto fused = fuse_add(e.spatial, e.weather, doy(flat), layout.kept());
    e.emb = seq(fused, layout);
    return e;
  }

  // Forecast tokens for every step of every series: step i targets step
  // i+1, the last step targets the batch target. Layout order.
  Var<T> forecast_tokens(const Encoded& e, const SeriesBatch<T>& b) const {
    if (!has_forecaster()) throw ContractError("framework has no forecaster");
    if (b.target_doy.size() != b.series) throw ContractError("batch has no targets");
    std::vector<std::vector<int>> tdoys(b.series);
    std::vector<int> flat_t, deltas;
    for (std::size_t s = 0; s < b.series; ++s) {
      for (const auto& spec : next_step_targets(b.doys[s], b.target_doy[s])) {
        tdoys[s].push_back(spec.target_doy);
        flat_t.push_back(spec.target_doy);
        deltas.push_back(spec.delta);
      }
    }
    Var<T> w;
    if (e.states.defined()) w = temporal_match(e.states, tdoys, b.start_doy, b.days);
    return forecaster(e.emb, w, doy(flat_t), delta(deltas), e.layout.kept());
  }

  // Forecast tokens for the last step only, [series*kept x D].
  Var<T> forecast_last(const Encoded& e, const SeriesBatch<T>& b) const {
    if (!has_forecaster()) throw ContractError("framework has no forecaster");
    const std::size_t U = e.layout.kept(), C = b.steps;
    std::vector<std::int64_t> rows;
    std::vector<std::vector<int>> tdoys(b.series);
    std::vector<int> flat_t, deltas;
    for (std::size_t s = 0; s < b.series; ++s) {
      for (std::size_t u = 0; u < U; ++u)
        rows.push_back(static_cast<std::int64_t>((s * C + C - 1) * U + u));
      tdoys[s].push_back(b.target_doy[s]);
      flat_t.push_back(b.target_doy[s]);
      deltas.push_back(b.target_doy[s] - b.doys[s].back());
    }
    Var<T> w;
    if (e.states.defined()) w = temporal_match(e.states, tdoys, b.start_doy, b.days);
    return forecaster(gather_rows(e.emb, rows), w, doy(flat_t), delta(deltas), U);
  }

  // Decoded patches for all token slots of `layout`, [series*steps*G x P].
  Var<T> decode_patches(const Var<T>& tokens, const TokenLayout& layout) const {
    return dec(tokens, layout.slots());
  }

  // Target patch matrix for forecasts: step i+1 of each series for i <
  // steps-1, then the batch target.
  Var<T> forecast_targets(const SeriesBatch<T>& b) const {
    const std::size_t C = b.steps;
    std::vector<std::int64_t> rows;
    for (std::size_t s = 0; s < b.series; ++s) {
      for (std::size_t i = 0; i + 1 < C; ++i)
        rows.push_back(static_cast<std::int64_t>(s * C + i + 1));
      rows.push_back(static_cast<std::int64_t>(b.series * C + s));
    }
    auto all = concat_rows<T>({b.images, constant(b.targets)});
    return patchify(gather_rows(all, rows), cfg_.image_size, cfg_.patch);
  }

  // MSE in patch space; Unmasked restricts it to populated slots.
  Var<T> patch_loss(const Var<T>& pred, const Var<T>& truth,
                    const TokenLayout& layout, LossScope scope) const {
    if (scope == LossScope::Full) return mse(pred, truth);
    std::vector<std::int64_t> rows;
    const auto& slots = layout.slots();
    for (std::size_t i = 0; i < slots.size(); ++i)
      if (slots[i] >= 0) rows.push_back(static_cast<std::int64_t>(i));
    return mse(gather_rows(pred, rows), gather_rows(truth, rows));
  }

  // Phase 1a: masked reconstruction of each image from its kept pixels.
  Var<T> loss_image_mr(const SeriesBatch<T>& b, const TokenLayout& layout,
                       LossScope scope) const {
    auto tokens = spatial_tokens(b.images, layout, MaskSite::Pixels);
    auto pred = decode_patches(tokens, layout);
    auto truth = patchify(b.images, cfg_.image_size, cfg_.patch);
    return patch_loss(pred, truth, layout, scope);
  }

  // Phase 1b: masked weather reconstruction over all days.
  Var<T> loss_weather_mr(const Var<T>& input, const Tensor<T>& truth,
                         std::size_t series, std::size_t days) const {
    if (!has_weather()) throw ContractError("framework has no weather encoder");
    auto states = wenc(input, series, days);
    return mse(weather_head(states), constant(truth));
  }

  // Phase 1c: series reconstruction with masked embeddings. Multimodal
  // frameworks also reconstruct the weather at every image day from the
  // patch-pooled causal embeddings.
  Var<T> loss_series_mr(const SeriesBatch<T>& b, const TokenLayout& layout,
                        LossScope scope,
                        const Tensor<T>* weather_at_images = nullptr) const {
    auto e = encode(b, layout, MaskSite::Embeddings);
    auto pred = decode_patches(e.emb, layout);
    auto truth = patchify(b.images, cfg_.image_size, cfg_.patch);
    auto loss = patch_loss(pred, truth, layout, scope);
    if (has_weather() && weather_at_images) {
      auto pooled = mean_groups(e.emb, layout.kept());
      loss = add(loss, mse(fused_weather_head(pooled), constant(*weather_at_images)));
    }
    return loss;
  }

  // Phase 2: variable-step forecasting, next-step and K-step losses.
  Var<T> loss_forecast(const SeriesBatch<T>& b, const TokenLayout& layout,
                       LossScope scope, T next_weight = T(1),
                       T k_weight = T(1)) const {
    auto e = encode(b, layout, MaskSite::Embeddings);
    auto pred = decode_patches(forecast_tokens(e, b), layout);
    auto truth = forecast_targets(b);
    const std::size_t C = b.steps, G = layout.patches();
    if (next_weight == k_weight) {
      return scale(patch_loss(pred, truth, layout, scope), next_weight);
    }
    // Split rows into next-step and K-step parts, weighted per target count.
    std::vector<std::int64_t> next_rows, k_rows;
    const auto& slots = layout.slots();
    for (std::size_t s = 0; s < b.series; ++s)
      for (std::size_t i = 0; i < C; ++i)
        for (std::size_t g = 0; g < G; ++g) {
          const std::size_t r = (s * C + i) * G + g;
          if (scope == LossScope::Unmasked && slots[r] < 0) continue;
          (i + 1 < C ? next_rows : k_rows).push_back(static_cast<std::int64_t>(r));
        }
    auto lk = mse(gather_rows(pred, k_rows), gather_rows(truth, k_rows));
    auto total = scale(lk, k_weight / static_cast<T>(C));
    if (!next_rows.empty()) {
      auto ln = mse(gather_rows(pred, next_rows), gather_rows(truth, next_rows));
      total = add(total, scale(ln, next_weight * static_cast<T>(C - 1) / static_cast<T>(C)));
    }
    return total;
  }

  VitEncoder<T> vit;
  PatchDecoder<T> dec;
  DoyEmbedder<T> doy;
  SequenceEncoder<T> seq;
  WeatherEncoder<T> wenc;
  Linear<T> weather_head;
  Linear<T> fused_weather_head;
  DeltaEmbedder<T> delta;
  Forecaster<T> forecaster;

 private:
  ModelConfig cfg_;
  FrameworkKind kind_;
  std::uint64_t seed_;
  ParamStore<T> store_;
};

// Parameter prefixes that make up the frozen encoder during fine-tuning.
inline bool is_decoder_param(const std::string& name) { return name.rfind("dec.", 0) == 0; }

}  // namespace civsf
