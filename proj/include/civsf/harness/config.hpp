#pragma once

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "civsf/errors.hpp"
#include "civsf/numerics/rng.hpp"

namespace civsf {

enum class KeyType { Int, Uint, Real, Text, Choice };

struct KeySpec {
  const char* name;
  KeyType type;
  const char* fallback;
  const char* choices = "";  // '|'-separated, Choice only
  const char* help = "";
};

// Every recognised key with its default.
inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> keys{
      {"seed", KeyType::Uint, "0", "", "run seed"},
      {"framework", KeyType::Choice, "ci-vsf", "sm-mr|mm-mr|sm-vsf|ci-vsf"},
      {"out", KeyType::Text, "out", "", "output directory"},
      {"data", KeyType::Text, "", "", "dataset container (default <out>/data.civsf)"},
      {"checkpoint", KeyType::Text, "", "", "checkpoint path (default <out>/<framework>.ckpt)"},
      {"resume", KeyType::Text, "", "", "checkpoint to resume pretraining from"},

      {"samples", KeyType::Uint, "200"},
      {"image_size", KeyType::Uint, "32"},
      {"field_size", KeyType::Uint, "8"},
      {"crop_classes", KeyType::Uint, "5"},
      {"sampling", KeyType::Choice, "irregular", "irregular|biweekly"},
      {"climate", KeyType::Choice, "global", "global|warm"},
      {"sensor_noise", KeyType::Real, "0.01"},
      {"image_gap_min", KeyType::Int, "3", "", "days between images, min"},
      {"image_gap_max", KeyType::Int, "15", "", "days between images, max"},

      {"patch", KeyType::Uint, "8"},
      {"hidden", KeyType::Uint, "64"},
      {"vit_depth", KeyType::Uint, "2"},
      {"vit_heads", KeyType::Uint, "4"},
      {"fusion_depth", KeyType::Uint, "2"},
      {"fusion_heads", KeyType::Uint, "4"},
      {"ffn_mult", KeyType::Uint, "2"},

      {"context", KeyType::Uint, "6"},
      {"mask_ratio", KeyType::Real, "0.5"},
      {"weather_mask_ratio", KeyType::Real, "0.5"},
      {"gap_min", KeyType::Int, "1", "", "forecast horizon, min days"},
      {"gap_max", KeyType::Int, "150", "", "forecast horizon, max days"},
      {"epochs", KeyType::Uint, "80"},
      {"phase2_epochs", KeyType::Uint, "30"},
      {"batch", KeyType::Uint, "16"},
      {"lr", KeyType::Real, "0.001", "", "phase 1 learning rate"},
      {"phase2_lr", KeyType::Real, "0.0001", "", "forecasting phase learning rate"},
      {"loss_scope", KeyType::Choice, "full", "full|unmasked"},
      {"next_weight", KeyType::Real, "1"},
      {"k_weight", KeyType::Real, "1"},
      {"mask_resample", KeyType::Choice, "epoch", "epoch|fixed"},
      {"checkpoint_every", KeyType::Uint, "0", "", "epochs between checkpoints, 0 = phase ends"},
      {"split_train", KeyType::Real, "0.6"},
      {"split_val", KeyType::Real, "0.2"},

      {"head", KeyType::Choice, "future-image", "sm-forecast|sm-estimate|crop|missing|future-image"},
      {"head_epochs", KeyType::Uint, "0", "", "0 = head default"},
      {"head_lr", KeyType::Real, "0.001"},
      {"head_batch", KeyType::Uint, "16"},
      {"head_train", KeyType::Uint, "600", "", "fine-tuning instances"},
      {"head_test", KeyType::Uint, "300", "", "evaluation instances"},
      {"corruption", KeyType::Real, "0.5", "", "missing-image block fraction"},
      {"crop_samples", KeyType::Uint, "120", "", "locations in the crop dataset"},

      {"mask_steps", KeyType::Uint, "4", "", "inspect-mask T"},
      {"mask_patches", KeyType::Uint, "16", "", "inspect-mask G"},
      {"gradcheck_threshold", KeyType::Real, "1e-4"},
      {"gradcheck_eps", KeyType::Real, "1e-3"},
      {"gradcheck_seeds", KeyType::Uint, "1"},
      {"sample", KeyType::Uint, "0", "", "forecast: index into the test split"},
  };
  return keys;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_schema()) values_[k.name] = k.fallback;
  }

  static const KeySpec& spec(const std::string& key) {
    for (const auto& k : config_schema())
      if (key == k.name) return k;
    throw ConfigError("unknown config key '" + key + "'");
  }

  void set(const std::string& key, const std::string& value) {
    check(spec(key), value);
    values_[key] = value;
  }

  // "key=value" lines; '#' starts a comment.
  void parse(const std::string& text, const std::string& source = "<text>") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value");
      }
      try {
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    parse(ss.str(), path.string());
  }

  const std::string& str(const std::string& key) const {
    spec(key);
    return values_.at(key);
  }
  std::int64_t integer(const std::string& key) const { return std::stoll(str(key)); }
  std::uint64_t uint(const std::string& key) const { return std::stoull(str(key)); }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(uint(key)); }
  double real(const std::string& key) const { return std::strtod(str(key).c_str(), nullptr); }

  // Sorted "key=value" lines of the effective configuration.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  std::uint64_t hash() const { return fnv1a64(canonical()); }

  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static void check(const KeySpec& k, const std::string& v) {
    auto bad = [&](const std::string& why) {
      return ConfigError("config key '" + std::string(k.name) + "': '" + v + "' " + why);
    };
    switch (k.type) {
      case KeyType::Int:
      case KeyType::Uint: {
        if (v.empty()) throw bad("is not an integer");
        char* end = nullptr;
        errno = 0;
        const long long x = std::strtoll(v.c_str(), &end, 10);
        if (*end != '\0' || errno == ERANGE) throw bad("is not an integer");
        if (k.type == KeyType::Uint && x < 0) throw bad("must be >= 0");
        break;
      }
      case KeyType::Real: {
        if (v.empty()) throw bad("is not a number");
        char* end = nullptr;
        const double x = std::strtod(v.c_str(), &end);
        if (*end != '\0' || !std::isfinite(x)) throw bad("is not a finite number");
        break;
      }
      case KeyType::Choice: {
        std::string opts = k.choices;
        std::istringstream in(opts);
        std::string o;
        while (std::getline(in, o, '|'))
          if (o == v) return;
        throw bad("is not one of " + opts);
      }
      case KeyType::Text:
        if (v.find('\n') != std::string::npos) throw bad("spans lines");
        break;
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace civsf
