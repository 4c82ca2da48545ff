#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "civsf/errors.hpp"
#include "civsf/numerics/rng.hpp"

namespace civsf {

inline constexpr std::size_t kBands = 6;
inline constexpr std::size_t kWeatherChannels = 5;
inline constexpr int kDaysPerYear = 365;

inline constexpr std::array<std::string_view, kBands> kBandNames{
    "B2", "B3", "B4", "B8", "B9", "B12"};
inline constexpr std::array<std::string_view, kWeatherChannels> kWeatherNames{
    "temperature_2m_min", "temperature_2m_max", "total_precipitation_sum",
    "u_component_of_wind_10m", "v_component_of_wind_10m"};

enum WeatherChannel : std::size_t { kTmin = 0, kTmax, kPrecip, kWindU, kWindV };

// T images of `bands` x side x side reflectances, row-major per image.
struct SpectralSeries {
  std::size_t count = 0;
  std::size_t bands = kBands;
  std::size_t side = 0;
  std::vector<float> values;

  std::size_t image_size() const { return bands * side * side; }
  std::span<float> image(std::size_t t) {
    return {values.data() + t * image_size(), image_size()};
  }
  std::span<const float> image(std::size_t t) const {
    return {values.data() + t * image_size(), image_size()};
  }
  float& at(std::size_t t, std::size_t band, std::size_t y, std::size_t x) {
    return values[((t * bands + band) * side + y) * side + x];
  }
  float at(std::size_t t, std::size_t band, std::size_t y, std::size_t x) const {
    return values[((t * bands + band) * side + y) * side + x];
  }
};

// Daily weather, one row of `channels` values per day starting at start_doy.
struct WeatherSeries {
  std::uint16_t start_doy = 1;
  std::size_t days = 0;
  std::size_t channels = kWeatherChannels;
  std::vector<float> values;

  float at(std::size_t day, std::size_t ch) const {
    return values[day * channels + ch];
  }
  float& at(std::size_t day, std::size_t ch) {
    return values[day * channels + ch];
  }
  int last_doy() const { return static_cast<int>(start_doy + days) - 1; }
};

struct Sample {
  SpectralSeries spectral;
  WeatherSeries weather;
  std::vector<std::uint16_t> doys;
  std::optional<std::vector<float>> soil;
  std::optional<std::vector<std::uint8_t>> crops;

  std::size_t length() const { return spectral.count; }
  std::size_t side() const { return spectral.side; }
};

// Every violated invariant of `s`; empty when the sample is valid.
inline std::vector<std::string> validate(const Sample& s,
                                         std::size_t patch_size = 8) {
  std::vector<std::string> v;
  const auto& sp = s.spectral;
  if (sp.count < 1) v.push_back("image series is empty");
  if (sp.bands != kBands) {
    v.push_back("band count " + std::to_string(sp.bands) + " ≠ " +
                std::to_string(kBands));
  }
  if (sp.values.size() != sp.count * sp.bands * sp.side * sp.side) {
    v.push_back("image block holds " + std::to_string(sp.values.size()) +
                " values, expected " +
                std::to_string(sp.count * sp.bands * sp.side * sp.side));
  }
  if (sp.side == 0 || patch_size == 0 || sp.side % patch_size != 0) {
    v.push_back("image side " + std::to_string(sp.side) +
                " not divisible by patch size " + std::to_string(patch_size));
  }
  for (float x : sp.values) {
    if (!std::isfinite(x)) {
      v.push_back("image contains non-finite values");
      break;
    }
  }
  if (s.doys.size() != sp.count) {
    v.push_back("DOY series length " + std::to_string(s.doys.size()) +
                " ≠ image count " + std::to_string(sp.count));
  }
  for (std::size_t i = 1; i < s.doys.size(); ++i) {
    if (s.doys[i] <= s.doys[i - 1]) {
      v.push_back("DOY series not strictly increasing");
      break;
    }
  }
  for (auto d : s.doys) {
    if (d < 1 || d > kDaysPerYear) {
      v.push_back("DOY " + std::to_string(d) + " outside [1, 365]");
      break;
    }
  }
  const auto& w = s.weather;
  if (w.channels != kWeatherChannels) {
    v.push_back("weather channel count " + std::to_string(w.channels) + " ≠ " +
                std::to_string(kWeatherChannels));
  }
  if (w.values.size() != w.days * w.channels) {
    v.push_back("weather block size does not match its extents");
  }
  if (w.start_doy < 1 || w.start_doy > kDaysPerYear) {
    v.push_back("weather start DOY " + std::to_string(w.start_doy) +
                " outside [1, 365]");
  }
  if (!s.doys.empty()) {
    const int lo = *std::min_element(s.doys.begin(), s.doys.end());
    const int hi = *std::max_element(s.doys.begin(), s.doys.end());
    if (lo < w.start_doy || hi > w.last_doy()) {
      v.push_back("weather span [" + std::to_string(w.start_doy) + ", " +
                  std::to_string(w.last_doy()) + "] does not cover image DOYs [" +
                  std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
  }
  for (float x : w.values) {
    if (!std::isfinite(x)) {
      v.push_back("weather contains non-finite values");
      break;
    }
  }
  if (s.soil) {
    if (s.soil->size() != sp.count) {
      v.push_back("soil series length " + std::to_string(s.soil->size()) +
                  " ≠ image count " + std::to_string(sp.count));
    }
    for (float x : *s.soil) {
      if (!(x >= 0.0f && x <= 1.0f)) {
        v.push_back("soil moisture outside [0, 1]");
        break;
      }
    }
  }
  if (s.crops && s.crops->size() != sp.side * sp.side) {
    v.push_back("crop grid holds " + std::to_string(s.crops->size()) +
                " labels, expected " + std::to_string(sp.side * sp.side));
  }
  return v;
}

// C consecutive context images and one later target image.
struct TrainingInstance {
  std::vector<std::size_t> context;
  std::size_t target = 0;
  int gap = 0;  // DOY(target) - DOY(last context)
};

inline constexpr int kUnboundedGap = std::numeric_limits<int>::max();

// Indices of images after `last` whose gap from it falls in [gap_min, gap_max].
inline std::vector<std::size_t> eligible_targets(const Sample& s,
                                                 std::size_t last, int gap_min,
                                                 int gap_max) {
  std::vector<std::size_t> out;
  for (std::size_t j = last + 1; j < s.doys.size(); ++j) {
    const int gap = static_cast<int>(s.doys[j]) - static_cast<int>(s.doys[last]);
    if (gap >= gap_min && gap <= gap_max) out.push_back(j);
  }
  return out;
}

// One instance per sliding context window of length C; its target is drawn
// uniformly among the eligible later images. Windows without an eligible
// target are skipped.
inline std::vector<TrainingInstance> build_instances(const Sample& s,
                                                     std::size_t C, int gap_min,
                                                     int gap_max,
                                                     std::uint64_t seed) {
  if (C == 0) throw ConfigError("context length must be >= 1");
  if (gap_min < 1) throw ConfigError("gap_min must be >= 1");
  std::vector<TrainingInstance> out;
  const std::size_t T = s.doys.size();
  if (T < C + 1) return out;
  RngStream rng(seed, "instances");
  for (std::size_t start = 0; start + C < T; ++start) {
    const std::size_t last = start + C - 1;
    const auto targets = eligible_targets(s, last, gap_min, gap_max);
    if (targets.empty()) continue;
    TrainingInstance inst;
    inst.context.resize(C);
    for (std::size_t i = 0; i < C; ++i) inst.context[i] = start + i;
    inst.target = targets[rng.below(targets.size())];
    inst.gap = static_cast<int>(s.doys[inst.target]) -
               static_cast<int>(s.doys[last]);
    out.push_back(std::move(inst));
  }
  return out;
}

struct Split {
  std::vector<std::size_t> train, val, test;
};

// Partition of sample (location) indices; instances of one location never
// straddle two sets.
inline Split split(std::size_t n, std::array<double, 3> fractions,
                   std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9 || fractions[0] < 0 || fractions[1] < 0 ||
      fractions[2] < 0) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  if (n < 3) {
    throw ConfigError("cannot split " + std::to_string(n) +
                      " samples into 3 sets");
  }
  const auto n_train = static_cast<std::size_t>(std::lround(n * fractions[0]));
  const auto n_val = static_cast<std::size_t>(std::lround(n * fractions[1]));
  if (n_train + n_val > n) throw ConfigError("split sizes exceed sample count");
  RngStream rng(seed, "split");
  const auto perm = rng.permutation(n);
  Split s;
  s.train.assign(perm.begin(), perm.begin() + n_train);
  s.val.assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
  s.test.assign(perm.begin() + n_train + n_val, perm.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

}  // namespace civsf
