#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "civsf/data/datamodel.hpp"
#include "civsf/errors.hpp"

namespace civsf {

// Dataset container layout (little-endian, no padding):
//   "CIVSFDS1" | u32 sample count
//   per sample: u16 T | u16 H | u16 L | u16 start_doy | u8 flags
//               f32 images[T*6*H*H] | u16 doy[T] | f32 weather[L*5]
//               [f32 soil[T]] (flags bit0) | [u8 crops[H*H]] (flags bit1)
inline constexpr std::string_view kContainerMagic = "CIVSFDS1";

namespace bytes {

template <typename V>
void put(std::vector<std::uint8_t>& out, V v) {
  static_assert(std::is_trivially_copyable_v<V>);
  std::uint8_t buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(buf, buf + sizeof(V));
  }
  out.insert(out.end(), buf, buf + sizeof(V));
}

// Bounds-checked little-endian reader over a byte buffer.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  template <typename V>
  V get(const char* what) {
    need(sizeof(V), what);
    std::uint8_t buf[sizeof(V)];
    std::memcpy(buf, data_.data() + pos_, sizeof(V));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(buf, buf + sizeof(V));
    }
    V v;
    std::memcpy(&v, buf, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  template <typename V>
  void get_array(std::vector<V>& out, std::size_t count, const char* what) {
    if (count > remaining() / sizeof(V)) {
      throw FormatError(std::string("truncated record or extent overflow in ") + what +
                            ": " +
                            std::to_string(count) + " elements exceed the " +
                            std::to_string(remaining()) + " remaining bytes",
                        pos_);
    }
    out.resize(count);
    for (auto& v : out) v = get<V>(what);
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* what) const {
    if (n > remaining()) {
      throw FormatError(std::string("truncated record while reading ") + what,
                        pos_);
    }
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<std::uint8_t>& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
  if (!out) throw DataError("short write to " + path.string());
}

}  // namespace bytes

inline std::vector<std::uint8_t> encode_container(
    const std::vector<Sample>& samples) {
  std::vector<std::uint8_t> out(kContainerMagic.begin(), kContainerMagic.end());
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.spectral.bands != kBands || s.weather.channels != kWeatherChannels ||
        s.spectral.count > 0xFFFF || s.spectral.side > 0xFFFF ||
        s.weather.days > 0xFFFF || s.doys.size() != s.spectral.count) {
      throw DomainError("sample " + std::to_string(i) +
                        " cannot be encoded: extents invalid");
    }
    bytes::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.spectral.count));
    bytes::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.spectral.side));
    bytes::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.weather.days));
    bytes::put<std::uint16_t>(out, s.weather.start_doy);
    const std::uint8_t flags = (s.soil ? 1u : 0u) | (s.crops ? 2u : 0u);
    bytes::put<std::uint8_t>(out, flags);
    for (float v : s.spectral.values) bytes::put<float>(out, v);
    for (auto d : s.doys) bytes::put<std::uint16_t>(out, d);
    for (float v : s.weather.values) bytes::put<float>(out, v);
    if (s.soil) {
      if (s.soil->size() != s.spectral.count) {
        throw DomainError("sample " + std::to_string(i) + ": soil length");
      }
      for (float v : *s.soil) bytes::put<float>(out, v);
    }
    if (s.crops) {
      if (s.crops->size() != s.spectral.side * s.spectral.side) {
        throw DomainError("sample " + std::to_string(i) + ": crop grid size");
      }
      out.insert(out.end(), s.crops->begin(), s.crops->end());
    }
  }
  return out;
}

inline std::vector<Sample> decode_container(std::span<const std::uint8_t> data) {
  bytes::Reader r(data);
  if (data.size() < kContainerMagic.size() ||
      std::memcmp(data.data(), kContainerMagic.data(), kContainerMagic.size()) !=
          0) {
    throw FormatError("bad magic, expected CIVSFDS1", 0);
  }
  r.take(kContainerMagic.size(), "magic");
  const auto count = r.get<std::uint32_t>("sample count");
  // Smallest possible record is the 9-byte header.
  if (count > r.remaining() / 9) {
    throw FormatError("extent overflow: sample count " + std::to_string(count),
                      r.pos() - 4);
  }
  std::vector<Sample> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    const std::size_t header_at = r.pos();
    const auto T = r.get<std::uint16_t>("T");
    const auto H = r.get<std::uint16_t>("H");
    const auto L = r.get<std::uint16_t>("L");
    s.weather.start_doy = r.get<std::uint16_t>("start_doy");
    const auto flags = r.get<std::uint8_t>("flags");
    if (flags & ~3u) {
      throw FormatError("unknown flag bits " + std::to_string(flags), header_at + 8);
    }
    s.spectral.count = T;
    s.spectral.side = H;
    s.spectral.bands = kBands;
    r.get_array(s.spectral.values, std::size_t{T} * kBands * H * H, "images");
    r.get_array(s.doys, T, "doy");
    s.weather.days = L;
    s.weather.channels = kWeatherChannels;
    r.get_array(s.weather.values, std::size_t{L} * kWeatherChannels, "weather");
    if (flags & 1u) {
      std::vector<float> soil;
      r.get_array(soil, T, "soil");
      s.soil = std::move(soil);
    }
    if (flags & 2u) {
      auto raw = r.take(std::size_t{H} * H, "crops");
      s.crops = std::vector<std::uint8_t>(raw.begin(), raw.end());
    }
    out.push_back(std::move(s));
  }
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes after last sample", r.pos());
  }
  return out;
}

// Returns the number of bytes written.
inline std::size_t save_container(const std::vector<Sample>& samples,
                                  const std::filesystem::path& path) {
  const auto data = encode_container(samples);
  bytes::write_file(path, data);
  return data.size();
}

inline std::vector<Sample> load_container(const std::filesystem::path& path) {
  const auto data = bytes::read_file(path);
  return decode_container(data);
}

}  // namespace civsf
