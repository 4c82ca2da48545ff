#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "civsf/errors.hpp"

namespace civsf {

namespace detail {
inline void check_pair(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a) + " predictions vs " +
                     std::to_string(b) + " targets");
  }
  if (a == 0) throw DomainError(std::string(what) + " of an empty input");
}
}  // namespace detail

inline double mae(std::span<const double> pred, std::span<const double> truth) {
  detail::check_pair(pred.size(), truth.size(), "mae");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

inline double mse(std::span<const double> pred, std::span<const double> truth) {
  detail::check_pair(pred.size(), truth.size(), "mse");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

// Unweighted mean of per-class F1 over classes present in either labeling.
inline double macro_f1(std::span<const int> pred, std::span<const int> truth,
                       std::size_t classes) {
  detail::check_pair(pred.size(), truth.size(), "macro_f1");
  std::vector<std::size_t> tp(classes), fp(classes), fn(classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], t = truth[i];
    if (p < 0 || t < 0 || static_cast<std::size_t>(p) >= classes ||
        static_cast<std::size_t>(t) >= classes) {
      throw DomainError("label outside [0, " + std::to_string(classes) + ")");
    }
    if (p == t) {
      ++tp[static_cast<std::size_t>(p)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(t)];
    }
  }
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    ++present;
    sum += 2.0 * static_cast<double>(tp[c]) /
           static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
  }
  return sum / static_cast<double>(present);
}

// Forecast horizon buckets, half-open: [0,25) [25,50) [50,100) [100,inf).
inline constexpr std::array<std::string_view, 4> kHorizonBuckets{
    "0 - 25 days", "25 - 50 days", "50 - 100 days", "More than 100 days"};

inline std::size_t bucket_index(int delta_days) {
  if (delta_days < 0) {
    throw DomainError("negative forecast horizon " + std::to_string(delta_days));
  }
  if (delta_days < 25) return 0;
  if (delta_days < 50) return 1;
  if (delta_days < 100) return 2;
  return 3;
}

inline std::string bucketize(int delta_days) {
  return std::string(kHorizonBuckets[bucket_index(delta_days)]);
}

}  // namespace civsf
