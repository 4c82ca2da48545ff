#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "civsf/data/container.hpp"
#include "civsf/data/datamodel.hpp"
#include "civsf/errors.hpp"
#include "civsf/numerics/rng.hpp"

namespace civsf {

// Seasonal weather generator parameters for one location.
struct ClimateParams {
  double temp_mean = 10.0;       // annual mean of daily mean temperature, C
  double temp_amplitude = 10.0;  // seasonal half-range, C (>= 0)
  double temp_peak_doy = 200.0;  // warmest day of year
  double temp_spread = 4.0;      // half of the diurnal range, C
  double temp_ar = 0.9;          // AR(1) coefficient of the temperature anomaly
  double temp_noise = 3.0;       // innovation sd of the anomaly
  double precip_rate = -1.5;     // offset of the latent precipitation process, mm
  double precip_ar = 0.6;
  double precip_noise = 6.0;
  double wind_u_mean = 0.0;
  double wind_v_mean = 0.0;
  double wind_ar = 0.8;
  double wind_noise = 1.5;
};

inline std::vector<std::string> check(const ClimateParams& p) {
  std::vector<std::string> v;
  if (p.temp_amplitude < 0) v.push_back("temperature amplitude < 0");
  if (p.temp_spread < 0) v.push_back("temperature spread < 0");
  for (double ar : {p.temp_ar, p.precip_ar, p.wind_ar})
    if (!(ar > -1.0 && ar < 1.0)) v.push_back("AR coefficient outside (-1, 1)");
  return v;
}

// Daily series of (tmin, tmax, precipitation, u wind, v wind).
inline WeatherSeries gen_weather(const ClimateParams& p, std::size_t days,
                                 std::uint64_t seed,
                                 std::uint16_t start_doy = 1) {
  if (auto bad = check(p); !bad.empty()) throw ConfigError(bad.front());
  RngStream rng(seed, "weather");
  WeatherSeries w;
  w.start_doy = start_doy;
  w.days = days;
  w.values.assign(days * kWeatherChannels, 0.0f);
  double t_anom = 0, p_lat = 0, u_anom = 0, v_anom = 0;
  for (std::size_t d = 0; d < days; ++d) {
    const double doy = static_cast<double>(start_doy + d);
    const double seasonal =
        p.temp_mean + p.temp_amplitude * std::cos(2.0 * std::numbers::pi *
                                                  (doy - p.temp_peak_doy) /
                                                  kDaysPerYear);
    t_anom = p.temp_ar * t_anom + p.temp_noise * rng.normal();
    const double spread =
        std::max(0.0, p.temp_spread + 0.3 * p.temp_noise * rng.normal());
    const double tavg = seasonal + t_anom;
    p_lat = p.precip_ar * p_lat + p.precip_noise * rng.normal();
    u_anom = p.wind_ar * u_anom + p.wind_noise * rng.normal();
    v_anom = p.wind_ar * v_anom + p.wind_noise * rng.normal();
    w.at(d, kTmin) = static_cast<float>(tavg - spread);
    w.at(d, kTmax) = static_cast<float>(tavg + spread);
    w.at(d, kPrecip) = static_cast<float>(std::max(0.0, p.precip_rate + p_lat));
    w.at(d, kWindU) = static_cast<float>(p.wind_u_mean + u_anom);
    w.at(d, kWindV) = static_cast<float>(p.wind_v_mean + v_anom);
  }
  return w;
}

// Latent land-surface state of one pixel.
struct LatentState {
  double veg = 0.0;   // vegetation fraction in [0, 1]
  double soil = 0.3;  // soil moisture in [0, 1]
  double snow = 0.0;  // snow water equivalent, mm, >= 0
};

// Growth window and rate of one crop class; planting < harvest.
struct CropPhenology {
  double growth_rate = 0.0;
  int plant_doy = 1;
  int harvest_doy = 365;
  double initial_veg = 0.0;
};

struct WorldConstants {
  double soil_decay = 0.05;       // k_s, per day
  double soil_inflow = 0.02;      // k_p, per mm
  double base_temp = 5.0;         // T_base, C
  double melt = 0.1;              // mm per degree-day
  double sensor_noise = 0.01;     // sigma, reflectance units
  double snow_saturation = 5.0;   // mm of snow for full cover
  double harvest_loss = 0.9;      // fraction of vegetation removed at harvest
  double wilt_point = 0.1;        // soil moisture below which vegetation decays
  double wilt_decay = 0.02;       // daily relative vegetation loss when wilting
  double frost_temp = -2.0;       // tmin below which vegetation is damaged
  double frost_decay = 0.05;
};

struct DayWeather {
  double tmin = 0, tmax = 0, precip = 0;
  double tavg() const { return 0.5 * (tmin + tmax); }
};

inline DayWeather weather_day(const WeatherSeries& w, std::size_t d) {
  return {w.at(d, kTmin), w.at(d, kTmax), w.at(d, kPrecip)};
}

// One daily update. Soil is a leaky bucket, vegetation grows with growing
// degree days scaled by soil moisture inside the crop window, snow
// accumulates on cold wet days and melts with positive degree days.
inline LatentState step_state(const LatentState& s, const DayWeather& w,
                              const CropPhenology& crop, double vigor, int doy,
                              const WorldConstants& k) {
  LatentState n;
  n.soil = std::clamp((1.0 - k.soil_decay) * s.soil + k.soil_inflow * w.precip,
                      0.0, 1.0);
  const double tavg = w.tavg();
  const double gdd = std::max(0.0, tavg - k.base_temp);
  double v = s.veg;
  if (doy >= crop.plant_doy && doy < crop.harvest_doy) {
    v += vigor * crop.growth_rate * gdd * n.soil * (1.0 - v);
  }
  if (doy == crop.harvest_doy) v -= k.harvest_loss * v;
  if (n.soil < k.wilt_point) v -= k.wilt_decay * v;
  if (w.tmin < k.frost_temp) v -= k.frost_decay * v;
  n.veg = std::clamp(v, 0.0, 1.0);
  n.snow = s.snow + (tavg < 0.0 ? w.precip : 0.0) - k.melt * std::max(0.0, tavg);
  n.snow = std::max(0.0, n.snow);
  return n;
}

// Reflectance signatures in band order (B2, B3, B4, B8, B9, B12).
struct Signatures {
  std::array<double, kBands> dry_soil{0.12, 0.16, 0.20, 0.28, 0.30, 0.36};
  std::array<double, kBands> wet_soil{0.06, 0.08, 0.10, 0.16, 0.17, 0.14};
  std::array<double, kBands> vegetation{0.03, 0.08, 0.04, 0.48, 0.42, 0.12};
  std::array<double, kBands> snow{0.92, 0.90, 0.87, 0.76, 0.60, 0.08};
};

// Mixing weights (soil, vegetation, snow): snow covers the canopy first.
inline std::array<double, 3> mixing_weights(const LatentState& s,
                                            const WorldConstants& k) {
  const double wn = std::min(1.0, s.snow / k.snow_saturation);
  const double wv = s.veg * (1.0 - wn);
  return {1.0 - wv - wn, wv, wn};
}

inline std::array<double, kBands> pixel_reflectance(const LatentState& s,
                                                    const WorldConstants& k,
                                                    const Signatures& sig) {
  const auto w = mixing_weights(s, k);
  std::array<double, kBands> out{};
  for (std::size_t b = 0; b < kBands; ++b) {
    const double soil = (1.0 - s.soil) * sig.dry_soil[b] + s.soil * sig.wet_soil[b];
    out[b] = w[0] * soil + w[1] * sig.vegetation[b] + w[2] * sig.snow[b];
  }
  return out;
}

// Renders a side x side grid of states into a 6-band image (band-major).
inline std::vector<float> render_image(const std::vector<LatentState>& grid,
                                       std::size_t side, const WorldConstants& k,
                                       const Signatures& sig, RngStream& rng) {
  std::vector<float> img(kBands * side * side);
  for (std::size_t p = 0; p < side * side; ++p) {
    const auto refl = pixel_reflectance(grid[p], k, sig);
    for (std::size_t b = 0; b < kBands; ++b) {
      const double noise = k.sensor_noise > 0 ? k.sensor_noise * rng.normal() : 0.0;
      img[b * side * side + p] = static_cast<float>(refl[b] + noise);
    }
  }
  return img;
}

enum class Sampling { Irregular, Biweekly };
enum class ClimateRange { Global, Warm };

struct WorldConfig {
  std::size_t image_size = 32;
  std::size_t field_size = 8;
  std::size_t crop_classes = 5;
  Sampling sampling = Sampling::Irregular;
  int gap_min_days = 3;
  int gap_max_days = 15;
  int first_doy_max = 15;
  int biweekly_start = 121;
  int biweekly_step = 14;
  std::size_t biweekly_count = 10;
  ClimateRange climate = ClimateRange::Global;
  WorldConstants constants;
  Signatures signatures;
};

// Default phenology per crop class: bare/urban, spring crop, summer crop,
// perennial grass, orchard.
inline std::vector<CropPhenology> default_phenology(std::size_t classes) {
  const std::vector<CropPhenology> base{
      {0.0, 1, 365, 0.02},   {0.030, 80, 200, 0.0}, {0.040, 130, 260, 0.0},
      {0.008, 1, 365, 0.30}, {0.025, 1, 300, 0.40},
  };
  std::vector<CropPhenology> out;
  for (std::size_t c = 0; c < classes; ++c) {
    auto p = base[c % base.size()];
    if (c >= base.size()) p.plant_doy += static_cast<int>(7 * (c / base.size()));
    out.push_back(p);
  }
  return out;
}

inline ClimateParams sample_climate(ClimateRange range, RngStream& rng) {
  ClimateParams p;
  p.temp_mean = range == ClimateRange::Warm ? rng.uniform(12.0, 20.0)
                                            : rng.uniform(-2.0, 18.0);
  p.temp_amplitude = rng.uniform(6.0, 14.0);
  p.temp_peak_doy = rng.uniform(190.0, 210.0);
  p.temp_spread = rng.uniform(3.0, 6.0);
  p.temp_noise = rng.uniform(2.0, 4.0);
  p.precip_rate = rng.uniform(-4.0, 0.0);
  p.precip_noise = rng.uniform(4.0, 8.0);
  p.wind_u_mean = rng.uniform(-3.0, 3.0);
  p.wind_v_mean = rng.uniform(-3.0, 3.0);
  return p;
}

inline std::vector<std::uint16_t> sample_doys(const WorldConfig& cfg,
                                              RngStream& rng) {
  std::vector<std::uint16_t> doys;
  if (cfg.sampling == Sampling::Biweekly) {
    for (std::size_t i = 0; i < cfg.biweekly_count; ++i) {
      const int d = cfg.biweekly_start + static_cast<int>(i) * cfg.biweekly_step;
      if (d > kDaysPerYear) throw ConfigError("biweekly schedule exceeds the year");
      doys.push_back(static_cast<std::uint16_t>(d));
    }
    return doys;
  }
  int d = static_cast<int>(rng.range(1, cfg.first_doy_max));
  while (d <= kDaysPerYear) {
    doys.push_back(static_cast<std::uint16_t>(d));
    d += static_cast<int>(rng.range(cfg.gap_min_days, cfg.gap_max_days));
  }
  return doys;
}

// Field layout: square fields of field_size pixels, one class each.
inline std::vector<std::uint8_t> sample_fields(const WorldConfig& cfg,
                                               RngStream& rng) {
  const std::size_t side = cfg.image_size;
  const std::size_t fs = std::max<std::size_t>(1, cfg.field_size);
  const std::size_t nf = (side + fs - 1) / fs;
  std::vector<std::uint8_t> field_class(nf * nf);
  for (auto& c : field_class) c = static_cast<std::uint8_t>(rng.below(cfg.crop_classes));
  std::vector<std::uint8_t> grid(side * side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x)
      grid[y * side + x] = field_class[(y / fs) * nf + x / fs];
  return grid;
}

// Fixed per-location surface layout: crop class and growth vigor per pixel.
struct SurfaceLayout {
  std::size_t side = 0;
  std::vector<std::uint8_t> crops;
  std::vector<double> vigor;
};

inline SurfaceLayout sample_layout(const WorldConfig& cfg, RngStream& field_rng,
                                   RngStream& pixel_rng) {
  SurfaceLayout l;
  l.side = cfg.image_size;
  l.crops = sample_fields(cfg, field_rng);
  l.vigor.resize(l.side * l.side);
  for (auto& v : l.vigor) v = pixel_rng.uniform(0.8, 1.2);
  return l;
}

struct Observation {
  SpectralSeries spectral;
  std::vector<float> soil;
};

// Runs the daily dynamics from DOY 1 and renders an image at every DOY in
// `doys` (ascending). The image at DOY d depends on weather days <= d only.
inline Observation simulate(const WorldConfig& cfg, const SurfaceLayout& layout,
                            const WeatherSeries& weather,
                            const std::vector<std::uint16_t>& doys,
                            std::uint64_t noise_seed) {
  if (weather.start_doy != 1 || (!doys.empty() && doys.back() > weather.days)) {
    throw RangeError("weather series does not cover the image DOYs");
  }
  const auto phen = default_phenology(cfg.crop_classes);
  const std::size_t side = layout.side, npix = side * side;
  std::vector<LatentState> grid(npix);
  for (std::size_t p = 0; p < npix; ++p) grid[p].veg = phen[layout.crops[p]].initial_veg;

  RngStream noise(noise_seed, "noise");
  Observation obs;
  obs.spectral.count = doys.size();
  obs.spectral.side = side;
  obs.spectral.values.reserve(doys.size() * kBands * npix);
  std::size_t next = 0;
  for (int doy = 1; next < doys.size(); ++doy) {
    const auto w = weather_day(weather, static_cast<std::size_t>(doy - 1));
    for (std::size_t p = 0; p < npix; ++p)
      grid[p] = step_state(grid[p], w, phen[layout.crops[p]], layout.vigor[p], doy,
                           cfg.constants);
    if (doy == doys[next]) {
      const auto img = render_image(grid, side, cfg.constants, cfg.signatures, noise);
      obs.spectral.values.insert(obs.spectral.values.end(), img.begin(), img.end());
      obs.soil.push_back(static_cast<float>(grid[0].soil));
      ++next;
    }
  }
  return obs;
}

// One location: sampled climate, weather, image schedule, and field layout.
inline Sample gen_location(const WorldConfig& cfg, std::uint64_t seed) {
  if (cfg.image_size == 0 || cfg.crop_classes == 0 || cfg.crop_classes > 255) {
    throw ConfigError("invalid world geometry");
  }
  RngStream rng(seed, "location");
  auto climate_rng = rng.sub("climate");
  auto doy_rng = rng.sub("doys");
  auto field_rng = rng.sub("fields");
  auto pixel_rng = rng.sub("pixels");

  const ClimateParams climate = sample_climate(cfg.climate, climate_rng);
  Sample s;
  s.weather = gen_weather(climate, kDaysPerYear, rng.sub("weather").next_u64(), 1);
  s.doys = sample_doys(cfg, doy_rng);
  const auto layout = sample_layout(cfg, field_rng, pixel_rng);
  auto obs = simulate(cfg, layout, s.weather, s.doys, rng.sub("noise").next_u64());
  s.spectral = std::move(obs.spectral);
  s.soil = std::move(obs.soil);
  s.crops = layout.crops;
  return s;
}

inline std::vector<Sample> gen_dataset(std::size_t n, const WorldConfig& cfg,
                                       std::uint64_t seed) {
  if (n < 1) throw ConfigError("dataset needs at least one sample");
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_location(cfg, derive_seed(seed, i)));
  return out;
}

// Plain-text listing of every world constant, written next to a container.
inline std::string world_sidecar(const WorldConfig& cfg, std::uint64_t seed,
                                 std::size_t n) {
  std::ostringstream os;
  const auto& k = cfg.constants;
  os << "seed: " << seed << "\n"
     << "samples: " << n << "\n"
     << "image_size: " << cfg.image_size << "\n"
     << "field_size: " << cfg.field_size << "\n"
     << "crop_classes: " << cfg.crop_classes << "\n"
     << "sampling: " << (cfg.sampling == Sampling::Biweekly ? "biweekly" : "irregular") << "\n"
     << "gap_days: " << cfg.gap_min_days << "-" << cfg.gap_max_days << "\n"
     << "climate: " << (cfg.climate == ClimateRange::Warm ? "warm" : "global") << "\n"
     << "soil_decay: " << k.soil_decay << "\n"
     << "soil_inflow: " << k.soil_inflow << "\n"
     << "base_temp: " << k.base_temp << "\n"
     << "melt: " << k.melt << "\n"
     << "sensor_noise: " << k.sensor_noise << "\n"
     << "snow_saturation: " << k.snow_saturation << "\n"
     << "harvest_loss: " << k.harvest_loss << "\n"
     << "wilt_point: " << k.wilt_point << "\n"
     << "wilt_decay: " << k.wilt_decay << "\n"
     << "frost_temp: " << k.frost_temp << "\n"
     << "frost_decay: " << k.frost_decay << "\n";
  const auto phen = default_phenology(cfg.crop_classes);
  for (std::size_t c = 0; c < phen.size(); ++c) {
    os << "crop_" << c << ": rate=" << phen[c].growth_rate
       << " plant=" << phen[c].plant_doy << " harvest=" << phen[c].harvest_doy
       << " initial_veg=" << phen[c].initial_veg << "\n";
  }
  return os.str();
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& container) {
  auto p = container;
  p += ".world.txt";
  return p;
}

// Writes the container and its constants sidecar; returns container bytes.
inline std::size_t write_dataset(const std::vector<Sample>& samples,
                                 const WorldConfig& cfg, std::uint64_t seed,
                                 const std::filesystem::path& path,
                                 const std::string& extra_header = {}) {
  const auto n = save_container(samples, path);
  const std::string text = extra_header + world_sidecar(cfg, seed, samples.size());
  bytes::write_file(sidecar_path(path),
                    std::vector<std::uint8_t>(text.begin(), text.end()));
  return n;
}

}  // namespace civsf
