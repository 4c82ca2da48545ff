#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "civsf/data/container.hpp"
#include "civsf/errors.hpp"
#include "civsf/numerics/tensor.hpp"

namespace civsf {

// Layout:
//   "CIVSFCK1"
//   u32 metadata bytes, metadata text ("key:value\n" lines)
//   u32 tensor count
//   per tensor: u32 name bytes, name, u8 dtype (0 = f32), u8 rank,
//               rank x u32 extents, u64 byte offset into the data block
//   data block: raw little-endian f32 values, tensors back to back
inline constexpr std::string_view kCheckpointMagic = "CIVSFCK1";

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  bool has(const std::string& key) const {
    for (const auto& [k, _] : meta)
      if (k == key) return true;
    return false;
  }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    throw DataError("checkpoint metadata lacks key '" + key + "'");
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }

  void set(const std::string& key, const std::string& value) {
    if (key.find_first_of(":\n") != std::string::npos ||
        value.find('\n') != std::string::npos) {
      throw ContractError("metadata entry '" + key + "' is not a single key:value line");
    }
    for (auto& [k, v] : meta)
      if (k == key) {
        v = value;
        return;
      }
    meta.emplace_back(key, value);
  }

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(out, u);
}

class CkReader {
 public:
  explicit CkReader(std::span<const std::uint8_t> d) : d_(d) {}

  std::uint64_t uint(std::size_t bytes, const char* what) {
    need(bytes, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i) v |= std::uint64_t{d_[pos_ + i]} << (8 * i);
    pos_ += bytes;
    return v;
  }

  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(d_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t size() const { return d_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > d_.size()) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
  }

  std::span<const std::uint8_t> d_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  std::string meta;
  for (const auto& [k, v] : ck.meta) meta += k + ":" + v + "\n";
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u8(out, 0);
    detail::put_u8(out, static_cast<std::uint8_t>(t.shape().size()));
    for (auto e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    detail::put_u64(out, offset);
    offset += 4 * t.numel();
  }
  for (const auto& [_, t] : ck.tensors)
    for (float f : t.vec()) detail::put_f32(out, f);
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> data) {
  detail::CkReader r(data);
  if (r.text(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw FormatError("not a checkpoint (bad magic)", 0);
  }
  Checkpoint ck;
  const std::string meta = r.text(r.uint(4, "metadata length"), "metadata");
  std::size_t start = 0;
  while (start < meta.size()) {
    const auto end = meta.find('\n', start);
    if (end == std::string::npos) {
      throw FormatError("checkpoint metadata not newline-terminated", 12 + start);
    }
    const std::string line = meta.substr(start, end - start);
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
      throw FormatError("bad metadata line '" + line + "'", 12 + start);
    }
    ck.meta.emplace_back(line.substr(0, colon), line.substr(colon + 1));
    start = end + 1;
  }
  const auto count = r.uint(4, "tensor count");
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  std::uint64_t expected = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.text(r.uint(4, "name length"), "tensor name");
    if (r.uint(1, "dtype") != 0) {
      throw FormatError("tensor '" + e.name + "' has unknown dtype", r.pos() - 1);
    }
    const auto rank = r.uint(1, "rank");
    std::uint64_t n = 1;
    for (std::uint64_t k = 0; k < rank; ++k) {
      e.shape.push_back(r.uint(4, "extent"));
      n *= e.shape.back();
    }
    e.offset = r.uint(8, "offset");
    if (e.offset != expected) {
      throw FormatError("tensor '" + e.name + "' offset " + std::to_string(e.offset) +
                            " breaks the packed layout",
                        r.pos() - 8);
    }
    expected += 4 * n;
    entries.push_back(std::move(e));
  }
  const std::size_t base = r.pos();
  if (base + expected != r.size()) {
    throw FormatError("checkpoint data block is " + std::to_string(r.size() - base) +
                          " bytes, expected " + std::to_string(expected),
                      base);
  }
  for (auto& e : entries) {
    Tensor<float> t(e.shape);
    const std::uint8_t* src = data.data() + base + e.offset;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= std::uint32_t{src[4 * i + b]} << (8 * b);
      std::memcpy(&t[i], &u, 4);
    }
    ck.tensors.emplace_back(std::move(e.name), std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  bytes::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto data = bytes::read_file(path);
  return decode_checkpoint(data);
}

}  // namespace civsf
