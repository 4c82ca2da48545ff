#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "civsf/errors.hpp"
#include "civsf/numerics/rng.hpp"

namespace civsf {

// T x G boolean matrix (true = masked) with constant row sums r*G and
// constant column sums r*T.
class MaskPlan {
 public:
  MaskPlan() = default;
  MaskPlan(std::size_t T, std::size_t G, double ratio)
      : T_(T), G_(G), ratio_(ratio), cells_(T * G, 0) {}

  std::size_t timestamps() const { return T_; }
  std::size_t locations() const { return G_; }
  double ratio() const { return ratio_; }

  bool masked(std::size_t t, std::size_t g) const { return cells_[t * G_ + g] != 0; }
  void set(std::size_t t, std::size_t g, bool on) { cells_[t * G_ + g] = on ? 1 : 0; }

  std::size_t row_sum(std::size_t t) const {
    std::size_t n = 0;
    for (std::size_t g = 0; g < G_; ++g) n += masked(t, g);
    return n;
  }
  std::size_t col_sum(std::size_t g) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < T_; ++t) n += masked(t, g);
    return n;
  }

  // Unmasked patches per timestamp, (1 - r) * G.
  std::size_t kept_per_timestamp() const { return G_ - (T_ ? row_sum(0) : 0); }
  // Unmasked timestamps per location, (1 - r) * T.
  std::size_t kept_per_location() const { return T_ - (G_ ? col_sum(0) : 0); }

  friend bool operator==(const MaskPlan&, const MaskPlan&) = default;

 private:
  std::size_t T_ = 0;
  std::size_t G_ = 0;
  double ratio_ = 0.0;
  std::vector<std::uint8_t> cells_;
};

namespace detail {

inline std::size_t exact_count(double ratio, std::size_t n, bool& ok) {
  const double prod = ratio * static_cast<double>(n);
  const double r = std::round(prod);
  ok = std::abs(prod - r) <= 1e-9 * std::max(1.0, prod);
  return static_cast<std::size_t>(r);
}

}  // namespace detail

// Spatiotemporally uniform mask. Column j is masked at rows
// (j*M + i) mod T for i in [0, M), M = r*T; concatenated over columns this
// walks 0..G*M-1 mod T, so every row receives r*G masks. Rows and columns are
// then relabelled by independent seeded permutations, which preserves both
// sums.
inline MaskPlan build_uniform_mask(std::size_t T, std::size_t G, double ratio,
                                   std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ConfigError("mask ratio " + std::to_string(ratio) +
                      " outside [0, 1)");
  }
  if (T == 0 || G == 0) throw ConfigError("mask plan needs T >= 1 and G >= 1");
  bool ok_g = false, ok_t = false;
  detail::exact_count(ratio, G, ok_g);
  const std::size_t M = detail::exact_count(ratio, T, ok_t);
  if (!ok_g || !ok_t) {
    std::ostringstream os;
    os << "mask ratio " << ratio << " gives non-integer counts: r*G = "
       << ratio * static_cast<double>(G)
       << ", r*T = " << ratio * static_cast<double>(T);
    throw ConfigError(os.str());
  }
  RngStream rng(seed, "mask");
  const auto row_perm = rng.sub("rows").permutation(T);
  const auto col_perm = rng.sub("cols").permutation(G);
  MaskPlan plan(T, G, ratio);
  for (std::size_t j = 0; j < G; ++j)
    for (std::size_t i = 0; i < M; ++i)
      plan.set(row_perm[(j * M + i) % T], col_perm[j], true);
  return plan;
}

// Unmasked patch indices of timestamp t, ascending.
inline std::vector<std::size_t> unmasked_patches(const MaskPlan& plan,
                                                 std::size_t t) {
  std::vector<std::size_t> out;
  for (std::size_t g = 0; g < plan.locations(); ++g)
    if (!plan.masked(t, g)) out.push_back(g);
  return out;
}

// Timestamps at which location g is unmasked, ascending.
inline std::vector<std::size_t> location_series(const MaskPlan& plan,
                                                std::size_t g) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < plan.timestamps(); ++t)
    if (!plan.masked(t, g)) out.push_back(t);
  return out;
}

struct WeatherMask {
  std::vector<std::uint8_t> days;  // 1 = masked
  double ratio = 0.0;

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (auto d : days) n += d;
    return n;
  }
  bool masked(std::size_t day) const { return days[day] != 0; }
};

inline WeatherMask build_weather_mask(std::size_t L, double ratio,
                                      std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ConfigError("weather mask ratio " + std::to_string(ratio) +
                      " outside [0, 1)");
  }
  WeatherMask m;
  m.ratio = ratio;
  m.days.assign(L, 0);
  const auto count =
      static_cast<std::size_t>(std::lround(ratio * static_cast<double>(L)));
  RngStream rng(seed, "weather-mask");
  const auto perm = rng.permutation(L);
  for (std::size_t i = 0; i < count; ++i) m.days[perm[i]] = 1;
  return m;
}

// Text rendering used by the inspect-mask subcommand: one line per
// timestamp ('#' masked, '.' kept) followed by both sum vectors.
inline std::string render_mask(const MaskPlan& plan) {
  std::ostringstream os;
  os << "mask plan T=" << plan.timestamps() << " G=" << plan.locations()
     << " r=" << plan.ratio() << "\n";
  for (std::size_t t = 0; t < plan.timestamps(); ++t) {
    os << "t" << t << (t < 10 ? "  " : " ");
    for (std::size_t g = 0; g < plan.locations(); ++g)
      os << (plan.masked(t, g) ? '#' : '.');
    os << "  masked=" << plan.row_sum(t) << "\n";
  }
  os << "row sums:";
  for (std::size_t t = 0; t < plan.timestamps(); ++t) os << ' ' << plan.row_sum(t);
  os << "\ncolumn sums:";
  for (std::size_t g = 0; g < plan.locations(); ++g) os << ' ' << plan.col_sum(g);
  os << "\n";
  return os.str();
}

}  // namespace civsf
