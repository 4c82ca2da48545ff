#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "civsf/errors.hpp"
#include "civsf/masking.hpp"
#include "civsf/model/encoders.hpp"
#include "civsf/numerics/nn.hpp"
#include "civsf/numerics/ops.hpp"

namespace civsf {

// Token bookkeeping for a batch of `series` image series of `steps` images
// each, one mask plan per series. Token rows are ordered (series, step,
// rank among the step's kept patches).
class TokenLayout {
 public:
  TokenLayout() = default;
  TokenLayout(const std::vector<MaskPlan>& plans, std::size_t patches)
      : series_(plans.size()), G_(patches) {
    if (plans.empty()) throw ShapeError("token layout needs at least one series");
    steps_ = plans.front().timestamps();
    for (const auto& p : plans) {
      if (p.timestamps() != steps_ || p.locations() != G_) {
        throw ShapeError("mask plan " + std::to_string(p.timestamps()) + "x" +
                         std::to_string(p.locations()) + " does not match " +
                         std::to_string(steps_) + "x" + std::to_string(G_));
      }
    }
    kept_ = plans.front().kept_per_timestamp();
    per_loc_ = plans.front().kept_per_location();
    slot_.assign(series_ * steps_ * G_, -1);
    std::int64_t row = 0;
    for (std::size_t b = 0; b < series_; ++b)
      for (std::size_t t = 0; t < steps_; ++t) {
        const auto kept = unmasked_patches(plans[b], t);
        if (kept.size() != kept_) {
          throw ContractError("mask plan rows have unequal kept counts");
        }
        for (std::size_t g : kept) slot_[(b * steps_ + t) * G_ + g] = row++;
      }
    for (std::size_t b = 0; b < series_; ++b)
      for (std::size_t g = 0; g < G_; ++g) {
        const auto ts = location_series(plans[b], g);
        if (ts.size() != per_loc_) {
          throw ContractError("location series have unequal lengths");
        }
        for (std::size_t t : ts) by_location_.push_back(slot_[(b * steps_ + t) * G_ + g]);
      }
  }

  // Same layout with nothing masked.
  static TokenLayout full(std::size_t series, std::size_t steps, std::size_t patches) {
    return TokenLayout(std::vector<MaskPlan>(series, MaskPlan(steps, patches, 0.0)),
                       patches);
  }

  std::size_t series() const { return series_; }
  std::size_t steps() const { return steps_; }
  std::size_t patches() const { return G_; }
  std::size_t kept() const { return kept_; }
  std::size_t per_location() const { return per_loc_; }
  std::size_t tokens() const { return series_ * steps_ * kept_; }

  // Token row of (b, t, g), or -1 when masked. Indexed (b*steps + t)*G + g.
  const std::vector<std::int64_t>& slots() const { return slot_; }

  // Rows of the full patch matrix holding kept patches, in token order.
  std::vector<std::int64_t> patch_rows() const {
    std::vector<std::int64_t> rows(tokens());
    for (std::size_t i = 0; i < slot_.size(); ++i)
      if (slot_[i] >= 0) rows[static_cast<std::size_t>(slot_[i])] = static_cast<std::int64_t>(i);
    return rows;
  }

  // Grid index of every token.
  std::vector<std::int64_t> patch_ids() const {
    auto rows = patch_rows();
    for (auto& r : rows) r %= static_cast<std::int64_t>(G_);
    return rows;
  }

  // Token rows regrouped (series, location, ascending step).
  const std::vector<std::int64_t>& location_major() const { return by_location_; }

  std::vector<std::int64_t> location_major_inverse() const {
    return invert_index(by_location_);
  }

  // Slots of one step of every series, [series*G], for decoding a single
  // image per series.
  std::vector<std::int64_t> step_slots(std::size_t t) const {
    std::vector<std::int64_t> out;
    out.reserve(series_ * G_);
    for (std::size_t b = 0; b < series_; ++b)
      for (std::size_t g = 0; g < G_; ++g) out.push_back(slot_[(b * steps_ + t) * G_ + g]);
    return out;
  }

 private:
  std::size_t series_ = 0, steps_ = 0, G_ = 0, kept_ = 0, per_loc_ = 0;
  std::vector<std::int64_t> slot_;
  std::vector<std::int64_t> by_location_;
};

// token = spatial + weather[t] + doy[t], per-step vectors broadcast over the
// step's kept patches. `weather` may be undefined (single-modality runs).
template <typename T>
Var<T> fuse_add(const Var<T>& spatial, const Var<T>& weather, const Var<T>& doy,
                std::size_t kept) {
  if (kept == 0 || spatial.rows() != doy.rows() * kept ||
      (weather.defined() && weather.rows() != doy.rows())) {
    throw ShapeError("fuse_add: " + shape_str(spatial.shape()) + " tokens vs " +
                     shape_str(doy.shape()) + " steps with " +
                     std::to_string(kept) + " kept patches");
  }
  auto per_step = weather.defined() ? add(weather, doy) : doy;
  return add(spatial, repeat_rows(per_step, kept));
}

// Forward-only temporal transformer run independently at every spatial
// location over that location's kept steps.
template <typename T>
struct SequenceEncoder {
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> norm;

  SequenceEncoder() = default;
  SequenceEncoder(ParamStore<T>& store, const ModelConfig& cfg, const RngStream& rng) {
    for (std::size_t i = 0; i < cfg.fusion_depth; ++i) {
      blocks.emplace_back(store, "fusion.block" + std::to_string(i), cfg.hidden,
                          cfg.fusion_heads, cfg.ffn_mult, rng);
    }
    norm = LayerNorm<T>(store, "fusion.norm", cfg.hidden);
  }

  // fused: [tokens x D] in layout order. Returns the causal embedding series
  // in the same order.
  Var<T> operator()(const Var<T>& fused, const TokenLayout& layout) const {
    if (fused.rows() != layout.tokens()) {
      throw ShapeError("sequence encoder: " + shape_str(fused.shape()) + " vs " +
                       std::to_string(layout.tokens()) + " tokens");
    }
    auto x = gather_rows(fused, layout.location_major());
    const std::size_t groups = layout.series() * layout.patches();
    for (const auto& b : blocks) x = b(x, groups, layout.per_location(), true);
    x = norm(x);
    return gather_rows(x, layout.location_major_inverse());
  }
};

}  // namespace civsf
