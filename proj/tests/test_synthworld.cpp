#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "civsf/data/datamodel.hpp"
#include "civsf/synthworld.hpp"

using namespace civsf;

TEST(Weather, ZeroNoiseZeroAmplitudeIsConstant) {
  ClimateParams p;
  p.temp_amplitude = 0;
  p.temp_noise = 0;
  const auto w = gen_weather(p, 50, 3);
  for (std::size_t d = 0; d < 50; ++d) {
    EXPECT_FLOAT_EQ(w.at(d, kTmin), w.at(0, kTmin));
    EXPECT_FLOAT_EQ(w.at(d, kTmax), w.at(0, kTmax));
  }
}

TEST(Weather, TminBelowTmaxAndPrecipNonNegative) {
  RngStream rng(1, "climates");
  std::size_t days = 0;
  for (int loc = 0; loc < 300; ++loc) {
    const auto p = sample_climate(ClimateRange::Global, rng);
    const auto w = gen_weather(p, 365, loc);
    for (std::size_t d = 0; d < 365; ++d, ++days) {
      ASSERT_LE(w.at(d, kTmin), w.at(d, kTmax));
      ASSERT_GE(w.at(d, kPrecip), 0.0f);
    }
  }
  EXPECT_GE(days, 100000u);
}

TEST(Weather, SeededAndValidated) {
  ClimateParams p;
  EXPECT_EQ(gen_weather(p, 30, 8).values, gen_weather(p, 30, 8).values);
  EXPECT_NE(gen_weather(p, 30, 8).values, gen_weather(p, 30, 9).values);
  p.temp_ar = 1.0;
  EXPECT_THROW(gen_weather(p, 30, 8), ConfigError);
}

TEST(Dynamics, DrySoilDecaysGeometrically) {
  WorldConstants k;
  LatentState s{0.0, 0.8, 0.0};
  const CropPhenology crop{};
  for (int d = 1; d <= 100; ++d) {
    const double before = s.soil;
    s = step_state(s, {10, 20, 0}, crop, 1.0, d, k);
    EXPECT_NEAR(s.soil, before * (1 - k.soil_decay), 1e-15);
  }
  EXPECT_LT(s.soil, 0.8 * std::pow(0.95, 99));
}

TEST(Dynamics, ColdPrecipitationAccumulatesSnow) {
  WorldConstants k;
  LatentState s{};
  for (int d = 1; d <= 10; ++d) {
    const double before = s.snow;
    s = step_state(s, {-8, -2, 3}, CropPhenology{}, 1.0, d, k);
    EXPECT_GT(s.snow, before);
  }
}

// Second, deliberately plain implementation of the same daily rules.
namespace oracle {

struct Pixel {
  double v, s, n;
};

Pixel step(Pixel p, double tmin, double tmax, double P, double rate, int plant,
           int harvest, double vigor, int doy) {
  const double ks = 0.05, kp = 0.02, tb = 5.0, melt = 0.1;
  Pixel q;
  double s = (1 - ks) * p.s + kp * P;
  if (s < 0) s = 0;
  if (s > 1) s = 1;
  q.s = s;
  const double tavg = (tmin + tmax) / 2;
  double g = tavg - tb;
  if (g < 0) g = 0;
  double v = p.v;
  if (doy >= plant && doy < harvest) v = v + vigor * rate * g * s * (1 - v);
  if (doy == harvest) v = v * (1 - 0.9);
  if (s < 0.1) v = v * (1 - 0.02);
  if (tmin < -2) v = v * (1 - 0.05);
  if (v < 0) v = 0;
  if (v > 1) v = 1;
  q.v = v;
  double n = p.n;
  if (tavg < 0) n += P;
  n -= melt * (tavg > 0 ? tavg : 0);
  q.n = n < 0 ? 0 : n;
  return q;
}

}  // namespace oracle

TEST(Dynamics, YearMatchesScalarOracle) {
  RngStream rng(5, "oracle");
  for (int trial = 0; trial < 20; ++trial) {
    const auto climate = sample_climate(ClimateRange::Global, rng);
    const auto w = gen_weather(climate, 365, trial);
    const auto phen = default_phenology(5)[trial % 5];
    const double vigor = rng.uniform(0.8, 1.2);
    LatentState s{phen.initial_veg, 0.3, 0.0};
    oracle::Pixel o{phen.initial_veg, 0.3, 0.0};
    for (int d = 1; d <= 365; ++d) {
      const double tmin = w.at(d - 1, kTmin), tmax = w.at(d - 1, kTmax),
                   P = w.at(d - 1, kPrecip);
      s = step_state(s, {tmin, tmax, P}, phen, vigor, d, WorldConstants{});
      o = oracle::step(o, tmin, tmax, P, phen.growth_rate, phen.plant_doy,
                       phen.harvest_doy, vigor, d);
      ASSERT_NEAR(s.veg, o.v, 1e-6);
      ASSERT_NEAR(s.soil, o.s, 1e-6);
      ASSERT_NEAR(s.snow, o.n, 1e-6);
    }
  }
}

TEST(Dynamics, RangesHoldForRandomParameterizations) {
  RngStream rng(6, "ranges");
  for (int trial = 0; trial < 10000; ++trial) {
    WorldConstants k;
    k.soil_decay = rng.uniform(0.0, 1.0);
    k.soil_inflow = rng.uniform(0.0, 0.2);
    k.melt = rng.uniform(0.0, 1.0);
    CropPhenology crop{rng.uniform(0.0, 0.5), static_cast<int>(rng.range(1, 200)), 0, 0};
    crop.harvest_doy = crop.plant_doy + static_cast<int>(rng.range(1, 150));
    LatentState s{rng.uniform(), rng.uniform(), rng.uniform(0.0, 50.0)};
    for (int d = 1; d <= 40; ++d) {
      const double t = rng.normal(5.0, 15.0);
      s = step_state(s, {t - 3, t + 3, std::max(0.0, rng.normal(0.0, 20.0))}, crop,
                     rng.uniform(0.5, 2.0), d * 9, k);
      ASSERT_GE(s.veg, 0.0);
      ASSERT_LE(s.veg, 1.0);
      ASSERT_GE(s.soil, 0.0);
      ASSERT_LE(s.soil, 1.0);
      ASSERT_GE(s.snow, 0.0);
    }
  }
}

TEST(Render, BareDrySoilIsPureSignature) {
  WorldConfig cfg;
  cfg.constants.sensor_noise = 0;
  std::vector<LatentState> grid(16, LatentState{0, 0, 0});
  RngStream rng(1, "r");
  const auto img = render_image(grid, 4, cfg.constants, cfg.signatures, rng);
  for (std::size_t b = 0; b < kBands; ++b)
    for (std::size_t p = 0; p < 16; ++p)
      EXPECT_FLOAT_EQ(img[b * 16 + p], static_cast<float>(cfg.signatures.dry_soil[b]));
}

TEST(Render, VegetationRaisesNearInfrared) {
  WorldConfig cfg;
  cfg.constants.sensor_noise = 0;
  std::vector<LatentState> grid{{1, 0.4, 0}, {0, 0.4, 0}};
  RngStream rng(1, "r");
  const auto img = render_image(grid, 1, cfg.constants, cfg.signatures, rng);
  const auto bare = render_image({grid[1]}, 1, cfg.constants, cfg.signatures, rng);
  EXPECT_GT(img[3], bare[3]);  // B8
}

TEST(Render, SnowBrightnessDeltaMatchesSignatures) {
  WorldConfig cfg;
  cfg.constants.sensor_noise = 0;
  const auto& sig = cfg.signatures;
  RngStream rng(1, "r");
  const auto snow = render_image({{0.7, 0, 1000}}, 1, cfg.constants, sig, rng);
  const auto soil = render_image({{0, 0, 0}}, 1, cfg.constants, sig, rng);
  double delta = 0, expected = 0;
  for (std::size_t b = 0; b < kBands; ++b) {
    delta += (snow[b] - soil[b]) / kBands;
    expected += (sig.snow[b] - sig.dry_soil[b]) / kBands;
  }
  EXPECT_NEAR(delta, expected, 1e-6);
  EXPECT_GT(delta, 0);
}

TEST(Location, ValidAndSeeded) {
  WorldConfig cfg;
  const auto a = gen_location(cfg, 4);
  const auto b = gen_location(cfg, 4);
  EXPECT_TRUE(validate(a).empty());
  EXPECT_EQ(encode_container({a}), encode_container({b}));
}

TEST(Location, ImageCountVariesWithinBounds) {
  WorldConfig cfg;
  std::set<std::size_t> counts;
  for (std::uint64_t s = 0; s < 12; ++s) {
    const auto smp = gen_location(cfg, s);
    const std::size_t T = smp.length();
    EXPECT_GE(T, static_cast<std::size_t>(350 / cfg.gap_max_days));
    EXPECT_LE(T, static_cast<std::size_t>(365 / cfg.gap_min_days + 1));
    for (std::size_t i = 1; i < T; ++i) {
      const int gap = smp.doys[i] - smp.doys[i - 1];
      EXPECT_GE(gap, cfg.gap_min_days);
      EXPECT_LE(gap, cfg.gap_max_days);
    }
    counts.insert(T);
  }
  EXPECT_GT(counts.size(), 1u);
}

TEST(Location, BiweeklyCropSchedule) {
  WorldConfig cfg;
  cfg.sampling = Sampling::Biweekly;
  cfg.climate = ClimateRange::Warm;
  const auto s = gen_location(cfg, 2);
  ASSERT_EQ(s.length(), 10u);
  EXPECT_EQ(s.doys.front(), 121);
  EXPECT_EQ(s.doys[1], 135);
  EXPECT_TRUE(s.crops.has_value());
}

TEST(Location, SoilSeriesIsBucketStateAtImageDoys) {
  WorldConfig cfg;
  const auto s = gen_location(cfg, 9);
  double soil = 0.3;
  std::size_t next = 0;
  for (int d = 1; d <= 365 && next < s.length(); ++d) {
    soil = std::clamp(0.95 * soil + 0.02 * s.weather.at(d - 1, kPrecip), 0.0, 1.0);
    if (d == s.doys[next]) {
      EXPECT_FLOAT_EQ((*s.soil)[next], static_cast<float>(soil));
      ++next;
    }
  }
}

TEST(Location, ImagesDependOnlyOnPastWeather) {
  WorldConfig cfg;
  cfg.constants.sensor_noise = 0;
  RngStream f(1, "f"), p(1, "p");
  const auto layout = sample_layout(cfg, f, p);
  ClimateParams climate;
  climate.temp_mean = 15;
  climate.temp_amplitude = 5;
  auto w1 = gen_weather(climate, 365, 1);
  std::vector<std::uint16_t> doys{20, 60, 90, 120, 200};
  for (std::size_t cut : {30u, 100u}) {
    auto w2 = w1;
    for (std::size_t d = cut; d < 365; ++d)
      for (std::size_t c = 0; c < kWeatherChannels; ++c) w2.at(d, c) += 7.0f;
    const auto a = simulate(cfg, layout, w1, doys, 3);
    const auto b = simulate(cfg, layout, w2, doys, 3);
    for (std::size_t t = 0; t < doys.size(); ++t) {
      const auto ia = a.spectral.image(t), ib = b.spectral.image(t);
      const bool same = std::equal(ia.begin(), ia.end(), ib.begin());
      if (doys[t] <= cut) EXPECT_TRUE(same) << "doy " << doys[t];
      else EXPECT_FALSE(same) << "doy " << doys[t];
    }
  }
}

TEST(Dataset, SidecarListsConstants) {
  WorldConfig cfg;
  const auto text = world_sidecar(cfg, 7, 3);
  for (const char* key : {"soil_decay: 0.05", "soil_inflow: 0.02", "base_temp: 5",
                          "melt: 0.1", "sensor_noise: 0.01", "crop_4:"})
    EXPECT_NE(text.find(key), std::string::npos) << key;
}
