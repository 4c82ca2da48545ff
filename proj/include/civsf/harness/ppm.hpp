#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "civsf/data/datamodel.hpp"
#include "civsf/errors.hpp"

namespace civsf {

// B4, B3, B2 as red, green, blue.
inline constexpr std::array<std::size_t, 3> kTrueColor{3, 2, 1};

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB
};

// Linear-interpolated percentile of `v` (copied), q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw DomainError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// 8-bit composite of three bands of a band-major 6-band image, each band
// stretched between its 2nd and 98th percentile. A flat band maps to 128.
inline RgbImage composite(std::span<const float> image, std::size_t side,
                          std::array<std::size_t, 3> bands = kTrueColor) {
  const std::size_t n = side * side;
  if (image.size() != kBands * n) {
    throw ShapeError("composite: " + std::to_string(image.size()) +
                     " values is not a 6-band image of side " + std::to_string(side));
  }
  for (auto b : bands)
    if (b >= kBands) throw ConfigError("band index " + std::to_string(b) + " outside [0, 6)");
  RgbImage out{side, side, std::vector<std::uint8_t>(3 * n)};
  for (std::size_t c = 0; c < 3; ++c) {
    const auto band = image.subspan(bands[c] * n, n);
    std::vector<double> vals(band.begin(), band.end());
    const double lo = percentile(vals, 2.0), hi = percentile(vals, 98.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint8_t q = 128;
      if (hi > lo) {
        const double t = std::clamp((band[i] - lo) / (hi - lo), 0.0, 1.0);
        q = static_cast<std::uint8_t>(std::lround(255.0 * t));
      }
      out.pixels[3 * i + c] = q;
    }
  }
  return out;
}

// Binary PPM (P6). `comment` lines are written as '#' lines in the header.
inline void write_ppm(const RgbImage& img, const std::filesystem::path& path,
                      const std::vector<std::string>& comments = {}) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw OutputError("cannot write " + path.string());
  out << "P6\n";
  for (const auto& c : comments) out << "# " << c << "\n";
  out << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw OutputError("short write to " + path.string());
}

inline void write_ppm(std::span<const float> image, std::size_t side,
                      const std::filesystem::path& path,
                      std::array<std::size_t, 3> bands = kTrueColor,
                      const std::vector<std::string>& comments = {}) {
  write_ppm(composite(image, side, bands), path, comments);
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw FormatError("not a binary PPM", 0);
  auto next_number = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
    std::size_t v = 0;
    if (!(in >> v)) throw FormatError("bad PPM header", static_cast<std::uint64_t>(in.tellg()));
    return v;
  };
  RgbImage img;
  img.width = next_number();
  img.height = next_number();
  if (next_number() != 255) throw FormatError("PPM maxval must be 255", 0);
  in.get();
  img.pixels.resize(3 * img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw FormatError("truncated PPM raster", static_cast<std::uint64_t>(in.gcount()));
  return img;
}

}  // namespace civsf
