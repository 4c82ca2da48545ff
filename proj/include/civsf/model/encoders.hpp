#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "civsf/data/datamodel.hpp"
#include "civsf/errors.hpp"
#include "civsf/masking.hpp"
#include "civsf/numerics/nn.hpp"
#include "civsf/numerics/ops.hpp"

namespace civsf {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::size_t hidden = 64;
  std::size_t vit_depth = 2;
  std::size_t vit_heads = 4;
  std::size_t fusion_depth = 2;
  std::size_t fusion_heads = 4;
  std::size_t ffn_mult = 2;

  std::size_t grid_side() const { return image_size / patch; }
  std::size_t patches() const { return grid_side() * grid_side(); }
  std::size_t patch_dim() const { return kBands * patch * patch; }
  std::size_t image_dim() const { return kBands * image_size * image_size; }

  void validate() const {
    if (patch == 0 || image_size == 0 || image_size % patch != 0) {
      throw ConfigError("image size " + std::to_string(image_size) +
                        " not divisible by patch size " + std::to_string(patch));
    }
    if (hidden == 0 || vit_heads == 0 || fusion_heads == 0 ||
        hidden % vit_heads != 0 || hidden % fusion_heads != 0) {
      throw ConfigError("hidden " + std::to_string(hidden) +
                        " not divisible by the head counts");
    }
    if (ffn_mult == 0) throw ConfigError("ffn_mult must be >= 1");
  }
};

// Reflectances enter the network as (x - offset) / scale.
inline constexpr double kImageOffset = 0.3;
inline constexpr double kImageScale = 0.2;

// Weather channels enter as (x - offset) / scale; a sixth input channel
// flags masked days.
inline constexpr std::array<double, kWeatherChannels> kWeatherOffset{5, 5, 0, 0, 0};
inline constexpr std::array<double, kWeatherChannels> kWeatherScale{15, 15, 5, 5, 5};
inline constexpr std::size_t kWeatherInputs = kWeatherChannels + 1;

// ---------------------------------------------------------------------------
// Patch geometry
// ---------------------------------------------------------------------------

// Flat source index for every element of the patch matrix of `images`
// band-major images: row i*G + g holds patch g of image i, laid out
// (band, dy, dx). Patches are numbered row-major over the grid.
inline std::vector<std::int64_t> patchify_index(std::size_t images,
                                                std::size_t side,
                                                std::size_t p) {
  if (p == 0 || side % p != 0) {
    throw ConfigError("image side " + std::to_string(side) +
                      " not divisible by patch size " + std::to_string(p));
  }
  const std::size_t gs = side / p, G = gs * gs, P = kBands * p * p;
  std::vector<std::int64_t> idx(images * G * P);
  std::size_t o = 0;
  for (std::size_t i = 0; i < images; ++i)
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t gy = g / gs, gx = g % gs;
      for (std::size_t b = 0; b < kBands; ++b)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            idx[o++] = static_cast<std::int64_t>(
                ((i * kBands + b) * side + gy * p + dy) * side + gx * p + dx);
    }
  return idx;
}

inline std::vector<std::int64_t> invert_index(const std::vector<std::int64_t>& idx) {
  std::vector<std::int64_t> inv(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    inv[static_cast<std::size_t>(idx[i])] = static_cast<std::int64_t>(i);
  return inv;
}

// [images x 6*H*W] -> [images*G x 6*p*p]
template <typename T>
Var<T> patchify(const Var<T>& images, std::size_t side, std::size_t p) {
  const std::size_t n = images.rows();
  if (images.cols() != kBands * side * side) {
    throw ShapeError("patchify: " + shape_str(images.shape()) +
                     " is not a stack of 6-band " + std::to_string(side) +
                     "-pixel images");
  }
  const std::size_t G = (side / p) * (side / p);
  return permute_elems(images, patchify_index(n, side, p), {n * G, kBands * p * p});
}

// [images*G x 6*p*p] -> [images x 6*H*W]
template <typename T>
Var<T> unpatchify(const Var<T>& patches, std::size_t side, std::size_t p) {
  const std::size_t G = (side / p) * (side / p);
  if (patches.cols() != kBands * p * p || patches.rows() % G != 0) {
    throw ShapeError("unpatchify: " + shape_str(patches.shape()));
  }
  const std::size_t n = patches.rows() / G;
  return permute_elems(patches, invert_index(patchify_index(n, side, p)),
                       {n, kBands * side * side});
}

template <typename T>
Tensor<T> normalize_image(std::span<const float> img) {
  Tensor<T> out({1, img.size()});
  for (std::size_t i = 0; i < img.size(); ++i)
    out[i] = static_cast<T>((img[i] - kImageOffset) / kImageScale);
  return out;
}

inline double denormalize_pixel(double v) { return v * kImageScale + kImageOffset; }

// ---------------------------------------------------------------------------
// Satellite encoder
// ---------------------------------------------------------------------------

// Shared ViT applied to every image. `rows` selects which patch rows of the
// patch matrix are embedded; each image contributes `per_image` consecutive
// selections, and `slots` gives the grid index of each selection for the
// positional table.
template <typename T>
struct VitEncoder {
  Linear<T> embed;
  Var<T> pos;  // [G x D], learned
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> norm;

  VitEncoder() = default;
  VitEncoder(ParamStore<T>& store, const ModelConfig& cfg, const RngStream& rng) {
    embed = Linear<T>(store, "vit.embed", cfg.patch_dim(), cfg.hidden, rng);
    pos = store.add("vit.pos", init::normal<T>({cfg.patches(), cfg.hidden}, 0.02,
                                               rng.sub("vit.pos")));
    for (std::size_t i = 0; i < cfg.vit_depth; ++i) {
      blocks.emplace_back(store, "vit.block" + std::to_string(i), cfg.hidden,
                          cfg.vit_heads, cfg.ffn_mult, rng);
    }
    norm = LayerNorm<T>(store, "vit.norm", cfg.hidden);
  }

  // patches: [N*G x P]; rows/slots: N*per_image entries. Returns
  // [N*per_image x D] with attention inside each image only.
  Var<T> operator()(const Var<T>& patches, const std::vector<std::int64_t>& rows,
                    const std::vector<std::int64_t>& slots,
                    std::size_t per_image) const {
    if (rows.size() != slots.size() || per_image == 0 ||
        rows.size() % per_image != 0) {
      throw ShapeError("vit: selection does not form whole images");
    }
    auto x = embed(gather_rows(patches, rows));
    x = add(x, gather_rows(pos, slots));
    const std::size_t images = rows.size() / per_image;
    for (const auto& b : blocks) x = b(x, images, per_image, false);
    return norm(x);
  }
};

// ---------------------------------------------------------------------------
// Weather encoder
// ---------------------------------------------------------------------------

// Normalized weather rows for `days` days from the series start, masked days
// zero-filled with the indicator set. Days beyond the series are zero.
template <typename T>
void fill_weather_input(const WeatherSeries& w, const WeatherMask* mask,
                        std::size_t days, T* out) {
  for (std::size_t d = 0; d < days; ++d) {
    T* row = out + d * kWeatherInputs;
    if (d >= w.days) {
      std::fill(row, row + kWeatherInputs, T(0));
      continue;
    }
    const bool masked = mask && d < mask->days.size() && mask->masked(d);
    for (std::size_t c = 0; c < kWeatherChannels; ++c) {
      row[c] = masked ? T(0)
                      : static_cast<T>((w.at(d, c) - kWeatherOffset[c]) /
                                       kWeatherScale[c]);
    }
    row[kWeatherChannels] = masked ? T(1) : T(0);
  }
}

template <typename T>
struct WeatherEncoder {
  Lstm<T> lstm;

  WeatherEncoder() = default;
  WeatherEncoder(ParamStore<T>& store, const ModelConfig& cfg, const RngStream& rng)
      : lstm(store, "wenc.lstm", kWeatherInputs, cfg.hidden, rng) {}

  // x: [batch*days x 6] -> hidden states [batch*days x D]
  Var<T> operator()(const Var<T>& x, std::size_t batch, std::size_t days) const {
    return lstm(x, batch, days);
  }
};

// Row indices selecting, for every (series b, image t), the weather state at
// that image's day: b*days + (doy - start_doy).
inline std::vector<std::int64_t> temporal_match_index(
    const std::vector<std::vector<int>>& doys, const std::vector<int>& start_doy,
    std::size_t days) {
  std::vector<std::int64_t> idx;
  for (std::size_t b = 0; b < doys.size(); ++b)
    for (int d : doys[b]) {
      const int off = d - start_doy[b];
      if (off < 0 || static_cast<std::size_t>(off) >= days) {
        throw RangeError("DOY " + std::to_string(d) + " outside weather span [" +
                         std::to_string(start_doy[b]) + ", " +
                         std::to_string(start_doy[b] + static_cast<int>(days) - 1) +
                         "]");
      }
      idx.push_back(static_cast<std::int64_t>(b * days + static_cast<std::size_t>(off)));
    }
  return idx;
}

template <typename T>
Var<T> temporal_match(const Var<T>& states, const std::vector<std::vector<int>>& doys,
                      const std::vector<int>& start_doy, std::size_t days) {
  return gather_rows(states, temporal_match_index(doys, start_doy, days));
}

// ---------------------------------------------------------------------------
// Time embeddings
// ---------------------------------------------------------------------------

template <typename T>
struct DoyEmbedder {
  Linear<T> layer;

  DoyEmbedder() = default;
  DoyEmbedder(ParamStore<T>& store, const ModelConfig& cfg, const RngStream& rng)
      : layer(store, "doy.linear", 1, cfg.hidden, rng) {}

  Var<T> operator()(const std::vector<int>& doys) const {
    Tensor<T> x({doys.size(), 1});
    for (std::size_t i = 0; i < doys.size(); ++i) {
      if (doys[i] < 1 || doys[i] > kDaysPerYear) {
        throw DomainError("DOY " + std::to_string(doys[i]) + " outside [1, 365]");
      }
      x[i] = static_cast<T>(doys[i]) / static_cast<T>(kDaysPerYear);
    }
    return tanh(layer(constant(std::move(x))));
  }
};

template <typename T>
struct DeltaEmbedder {
  Linear<T> layer;

  DeltaEmbedder() = default;
  DeltaEmbedder(ParamStore<T>& store, const ModelConfig& cfg, const RngStream& rng)
      : layer(store, "delta.linear", 1, cfg.hidden, rng) {}

  Var<T> operator()(const std::vector<int>& deltas) const {
    Tensor<T> x({deltas.size(), 1});
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      if (deltas[i] < 0) {
        throw DomainError("negative day delta " + std::to_string(deltas[i]));
      }
      x[i] = static_cast<T>(deltas[i]) / static_cast<T>(kDaysPerYear);
    }
    return layer(constant(std::move(x)));
  }
};

}  // namespace civsf
