#pragma once

#include <exception>
#include <filesystem>
#include <string>

#include "civsf/errors.hpp"
#include "civsf/harness/config.hpp"
#include "civsf/model/model.hpp"
#include "civsf/synthworld.hpp"
#include "civsf/training/heads.hpp"
#include "civsf/training/pretrain.hpp"

namespace civsf {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const CompatibilityError*>(&e) ||
      dynamic_cast<const DependencyError*>(&e))
    return kExitConfig;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e) || dynamic_cast<const RangeError*>(&e) ||
      dynamic_cast<const DomainError*>(&e))
    return kExitData;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const OutputError*>(&e))
    return kExitNumeric;
  return kExitFailure;
}

// ---------------------------------------------------------------------------
// Config -> library option structs
// ---------------------------------------------------------------------------

inline WorldConfig world_settings(const Config& c) {
  WorldConfig w;
  w.image_size = c.size("image_size");
  w.field_size = c.size("field_size");
  w.crop_classes = c.size("crop_classes");
  w.sampling = c.str("sampling") == "biweekly" ? Sampling::Biweekly : Sampling::Irregular;
  w.climate = c.str("climate") == "warm" ? ClimateRange::Warm : ClimateRange::Global;
  w.constants.sensor_noise = c.real("sensor_noise");
  w.gap_min_days = static_cast<int>(c.integer("image_gap_min"));
  w.gap_max_days = static_cast<int>(c.integer("image_gap_max"));
  if (w.gap_min_days < 1 || w.gap_max_days < w.gap_min_days) {
    throw ConfigError("image gap range [" + std::to_string(w.gap_min_days) + ", " +
                      std::to_string(w.gap_max_days) + "] is empty or non-positive");
  }
  return w;
}

// Biweekly world for the crop head; shares geometry and noise with the main one.
inline WorldConfig crop_world_settings(const Config& c) {
  auto w = world_settings(c);
  w.sampling = Sampling::Biweekly;
  return w;
}

inline ModelConfig model_settings(const Config& c) {
  ModelConfig m;
  m.image_size = c.size("image_size");
  m.patch = c.size("patch");
  m.hidden = c.size("hidden");
  m.vit_depth = c.size("vit_depth");
  m.vit_heads = c.size("vit_heads");
  m.fusion_depth = c.size("fusion_depth");
  m.fusion_heads = c.size("fusion_heads");
  m.ffn_mult = c.size("ffn_mult");
  m.validate();
  return m;
}

inline PretrainOptions pretrain_settings(const Config& c) {
  PretrainOptions o;
  o.model = model_settings(c);
  o.context = c.size("context");
  o.mask_ratio = c.real("mask_ratio");
  o.weather_mask_ratio = c.real("weather_mask_ratio");
  o.gap_min = static_cast<int>(c.integer("gap_min"));
  o.gap_max = static_cast<int>(c.integer("gap_max"));
  o.epochs = c.size("epochs");
  o.phase2_epochs = c.size("phase2_epochs");
  o.batch = c.size("batch");
  o.lr = c.real("lr");
  o.phase2_lr = c.real("phase2_lr");
  o.loss_scope = c.str("loss_scope") == "unmasked" ? LossScope::Unmasked : LossScope::Full;
  o.next_weight = c.real("next_weight");
  o.k_weight = c.real("k_weight");
  o.resample_masks = c.str("mask_resample") == "epoch";
  o.seed = c.uint("seed");
  if (o.gap_min < 1 || o.gap_max < o.gap_min) {
    throw ConfigError("forecast gap range [" + std::to_string(o.gap_min) + ", " +
                      std::to_string(o.gap_max) + "] is empty or non-positive");
  }
  if (o.lr <= 0 || o.phase2_lr <= 0) throw ConfigError("learning rates must be positive");
  return o;
}

inline HeadOptions head_settings(const Config& c) {
  HeadOptions h;
  h.epochs = c.size("head_epochs");
  h.lr = c.real("head_lr");
  h.batch = c.size("head_batch");
  h.train_instances = c.size("head_train");
  h.test_instances = c.size("head_test");
  h.context = c.size("context");
  h.gap_min = static_cast<int>(c.integer("gap_min"));
  h.gap_max = static_cast<int>(c.integer("gap_max"));
  h.corruption = c.real("corruption");
  h.seed = derive_seed(c.uint("seed"), 31);
  if (h.batch == 0) throw ConfigError("head_batch must be >= 1");
  return h;
}

inline Split split_settings(const Config& c, std::size_t n) {
  const double tr = c.real("split_train"), va = c.real("split_val");
  return split(n, {tr, va, 1.0 - tr - va}, derive_seed(c.uint("seed"), 17));
}

// ---------------------------------------------------------------------------
// Default artifact paths under `out`
// ---------------------------------------------------------------------------

inline std::filesystem::path data_path(const Config& c) {
  const auto& d = c.str("data");
  return d.empty() ? std::filesystem::path(c.str("out")) / "data.civsf" : std::filesystem::path(d);
}

inline std::filesystem::path crop_data_path(const Config& c) {
  auto p = data_path(c);
  p.replace_extension(".crop.civsf");
  return p;
}

inline std::filesystem::path checkpoint_path(const Config& c) {
  const auto& k = c.str("checkpoint");
  return k.empty() ? std::filesystem::path(c.str("out")) / (c.str("framework") + ".ckpt")
                   : std::filesystem::path(k);
}

// "# config_hash=... seed=..." stamp for text artifacts.
inline std::string provenance_line(const Config& c) {
  return "config_hash=" + c.hash_hex() + " seed=" + c.str("seed");
}

inline void stamp_config(Checkpoint& ck, const Config& c) {
  ck.set("config_hash", c.hash_hex());
  ck.set("seed", c.str("seed"));
  for (const auto& [k, v] : c.values()) ck.set("config." + k, v);
}

}  // namespace civsf
