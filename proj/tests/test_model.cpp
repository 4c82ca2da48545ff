#include <gtest/gtest.h>

#include <cstring>
#include <set>

#include "civsf/model/model.hpp"
#include "civsf/synthworld.hpp"

using namespace civsf;

namespace {

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) { return bitwise_equal(a, b); }

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch = 4;
  c.hidden = 16;
  c.vit_heads = 2;
  c.fusion_heads = 2;
  return c;
}

std::vector<Sample> small_world(std::size_t n, std::size_t side, std::uint64_t seed) {
  WorldConfig w;
  w.image_size = side;
  w.field_size = side / 2;
  return gen_dataset(n, w, seed);
}

std::vector<SeriesRef> first_windows(const std::vector<Sample>& s, std::size_t C,
                                     bool target) {
  std::vector<SeriesRef> refs;
  for (const auto& smp : s) {
    SeriesRef r;
    r.sample = &smp;
    for (std::size_t t = 0; t < C; ++t) r.images.push_back(t);
    if (target) r.target = C + 3;
    refs.push_back(r);
  }
  return refs;
}

std::vector<MaskPlan> plans(std::size_t n, std::size_t C, std::size_t G, double r,
                            std::uint64_t seed) {
  std::vector<MaskPlan> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(build_uniform_mask(C, G, r, seed + i));
  return out;
}

}  // namespace

// ---------------------------------------------------------------- encoders

TEST(Patchify, DeskGeometry) {
  Tensor<float> img({1, kBands * 32 * 32});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(i);
  auto p = patchify(constant(img), 32, 8);
  EXPECT_EQ(p.shape(), (Shape{16, 384}));
  EXPECT_TRUE(bitwise_equal(unpatchify(p, 32, 8).value(), img));
  // Patch 5 is grid cell (1, 1); its first element is band 0, pixel (8, 8).
  EXPECT_EQ(p.value().at(5, 0), static_cast<float>(8 * 32 + 8));
  EXPECT_EQ(p.value().at(5, 64), static_cast<float>(32 * 32 + 8 * 32 + 8));
}

TEST(Patchify, ConstantImageGivesEqualPatches) {
  auto p = patchify(constant(Tensor<float>({2, kBands * 16 * 16}, 0.7f)), 16, 8);
  for (std::size_t r = 1; r < p.rows(); ++r)
    for (std::size_t c = 0; c < p.cols(); ++c) EXPECT_EQ(p.value().at(r, c), p.value().at(0, c));
}

TEST(Patchify, IndivisibleSideIsConfigError) {
  EXPECT_THROW(patchify(constant(Tensor<float>({1, kBands * 30 * 30})), 30, 8), ConfigError);
  ModelConfig c;
  c.image_size = 30;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Vit, SharedWeightsAcrossTimestamps) {
  auto cfg = small_config();
  Model<float> m(cfg, FrameworkKind::SmMr, 1);
  Tensor<float> imgs({2, cfg.image_dim()});
  RngStream rng(2, "img");
  for (std::size_t i = 0; i < cfg.image_dim(); ++i)
    imgs[i] = imgs[cfg.image_dim() + i] = static_cast<float>(rng.normal());
  const auto layout = TokenLayout::full(1, 2, cfg.patches());
  auto out = m.spatial_tokens(constant(imgs), layout, MaskSite::Pixels).value();
  ASSERT_EQ(out.rows(), 32u);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_EQ(out.at(r, c), out.at(r + 16, c));
}

TEST(Vit, FigureThreePlanKeepsEightPerTimestamp) {
  auto cfg = small_config();
  Model<float> m(cfg, FrameworkKind::SmMr, 1);
  const auto plan = build_uniform_mask(4, 16, 0.5, 1);
  TokenLayout layout({plan}, 16);
  auto out = m.spatial_tokens(constant(Tensor<float>({4, cfg.image_dim()}, 0.1f)), layout,
                              MaskSite::Pixels);
  EXPECT_EQ(out.rows(), 32u);
  EXPECT_EQ(layout.kept(), 8u);
}

TEST(Vit, MaskedPixelsAreNeverRead) {
  auto cfg = small_config();
  Model<float> m(cfg, FrameworkKind::CiVsf, 3);
  const auto plan = build_uniform_mask(2, 16, 0.5, 4);
  TokenLayout layout({plan}, 16);
  RngStream rng(5, "img");
  Tensor<float> a({2, cfg.image_dim()});
  for (auto& v : a.vec()) v = static_cast<float>(rng.normal());
  Tensor<float> b = a;
  const auto idx = patchify_index(2, cfg.image_size, cfg.patch);
  const std::size_t P = cfg.patch_dim();
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t g = 0; g < 16; ++g)
      if (plan.masked(t, g))
        for (std::size_t k = 0; k < P; ++k) b[idx[(t * 16 + g) * P + k]] = 99.0f + k;
  for (auto site : {MaskSite::Pixels, MaskSite::Embeddings}) {
    auto oa = m.spatial_tokens(constant(a), layout, site).value();
    auto ob = m.spatial_tokens(constant(b), layout, site).value();
    if (site == MaskSite::Pixels) {
      EXPECT_TRUE(same_bits(oa, ob));
    }
  }
}

TEST(WeatherEncoder, Unidirectional) {
  auto cfg = small_config();
  Model<float> m(cfg, FrameworkKind::CiVsf, 7);
  RngStream rng(8, "w");
  Tensor<float> x({30, kWeatherInputs});
  for (auto& v : x.vec()) v = static_cast<float>(rng.normal());
  auto base = m.wenc(constant(x), 1, 30).value();
  for (std::size_t c = 0; c < kWeatherInputs; ++c) x.at(20, c) += 3.0f;
  auto pert = m.wenc(constant(x), 1, 30).value();
  for (std::size_t d = 0; d < 20; ++d)
    for (std::size_t c = 0; c < cfg.hidden; ++c)
      EXPECT_EQ(std::memcmp(&base.at(d, c), &pert.at(d, c), sizeof(float)), 0);
  EXPECT_NE(base.at(20, 0), pert.at(20, 0));
  EXPECT_EQ(m.wenc(constant(Tensor<float>({1, kWeatherInputs})), 1, 1).rows(), 1u);
}

TEST(WeatherEncoder, IndicatorChannel) {
  WeatherSeries w;
  w.days = 10;
  w.values.assign(50, 1.0f);
  Tensor<float> none({10, kWeatherInputs});
  fill_weather_input<float>(w, nullptr, 10, none.data());
  const auto empty = build_weather_mask(10, 0.0, 1);
  Tensor<float> zero({10, kWeatherInputs});
  fill_weather_input<float>(w, &empty, 10, zero.data());
  for (std::size_t d = 0; d < 10; ++d) {
    EXPECT_EQ(none.at(d, kWeatherChannels), 0.0f);
    EXPECT_EQ(zero.at(d, kWeatherChannels), 0.0f);
  }
  const auto half = build_weather_mask(10, 0.5, 1);
  Tensor<float> masked({10, kWeatherInputs});
  fill_weather_input<float>(w, &half, 10, masked.data());
  for (std::size_t d = 0; d < 10; ++d) {
    EXPECT_EQ(masked.at(d, kWeatherChannels), half.masked(d) ? 1.0f : 0.0f);
    if (half.masked(d)) {
      EXPECT_EQ(masked.at(d, kPrecip), 0.0f);
    }
  }
}

TEST(TemporalMatch, ConsecutiveDaysAreVerbatim) {
  RngStream rng(1, "tm");
  Tensor<float> st({40, 3});
  for (auto& v : st.vec()) v = static_cast<float>(rng.normal());
  auto out = temporal_match(constant(st), {{5, 6, 7, 8}}, {5}, 40).value();
  ASSERT_EQ(out.rows(), 4u);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.at(r, c), st.at(r, c));
}

TEST(TemporalMatch, MatchesIndexOracle) {
  RngStream rng(2, "tm");
  Tensor<float> st({2 * 365, 4});
  for (auto& v : st.vec()) v = static_cast<float>(rng.normal());
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<int>> doys(2);
    const std::size_t T = 1 + rng.below(10);
    for (auto& d : doys) {
      std::set<int> pick;
      while (pick.size() < T) pick.insert(static_cast<int>(rng.range(1, 365)));
      d.assign(pick.begin(), pick.end());
    }
    auto out = temporal_match(constant(st), doys, {1, 1}, 365).value();
    ASSERT_EQ(out.rows(), 2 * T);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < 4; ++c)
          ASSERT_EQ(out.at(b * T + t, c), st.at(b * 365 + doys[b][t] - 1, c));
  }
  EXPECT_THROW(temporal_match(constant(st), {{400}}, {1}, 365), RangeError);
  try {
    temporal_match(constant(st), {{3}}, {10}, 365);
    FAIL();
  } catch (const RangeError& e) {
    EXPECT_NE(std::string(e.what()).find("DOY 3"), std::string::npos);
  }
}

TEST(TimeEmbeddings, DoyRangeAndDeltaBias) {
  auto cfg = small_config();
  Model<double> m(cfg, FrameworkKind::CiVsf, 9);
  auto e = m.doy({1, 100, 365}).value();
  for (double v : e.vec()) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  auto d0 = m.delta({0}).value();
  const auto& bias = m.params().get("delta.linear.bias").value();
  for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_EQ(d0[c], bias[c]);
  EXPECT_THROW(m.doy({0}), DomainError);
  EXPECT_THROW(m.delta({-1}), DomainError);
}

TEST(TimeEmbeddings, DistinctDeltasDiffer) {
  auto cfg = small_config();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Model<float> m(cfg, FrameworkKind::SmVsf, seed);
    auto e = m.delta({10, 60}).value();
    bool differ = false;
    for (std::size_t c = 0; c < cfg.hidden; ++c) differ = differ || e.at(0, c) != e.at(1, c);
    EXPECT_TRUE(differ) << seed;
  }
}

TEST(Registry, ParameterSetsPerFramework) {
  auto cfg = small_config();
  Model<float> smmr(cfg, FrameworkKind::SmMr, 1), ci(cfg, FrameworkKind::CiVsf, 1);
  EXPECT_FALSE(smmr.params().contains("forecast.fc1.weight"));
  EXPECT_FALSE(smmr.params().contains("wenc.lstm.w_ih"));
  EXPECT_TRUE(ci.params().contains("forecast.fc1.weight"));
  EXPECT_TRUE(ci.params().contains("delta.linear.weight"));
  Model<float> smvsf(cfg, FrameworkKind::SmVsf, 1), mm(cfg, FrameworkKind::MmMr, 1);
  EXPECT_TRUE(smvsf.params().contains("forecast.fc1.weight"));
  EXPECT_FALSE(smvsf.params().contains("wenc.lstm.w_ih"));
  EXPECT_FALSE(mm.params().contains("forecast.fc1.weight"));
  // One shared ViT and decoder, whatever the series length.
  EXPECT_EQ(ci.params().with_prefix("vit.").size(), smmr.params().with_prefix("vit.").size());
  EXPECT_EQ(ci.params().with_prefix("dec.").size(), 4u);
}

// ------------------------------------------------------------------ fusion

TEST(Fusion, ZeroAddendsLeaveSpatialTokens) {
  RngStream rng(1, "f");
  Tensor<float> sp({6, 4});
  for (auto& v : sp.vec()) v = static_cast<float>(rng.normal());
  auto out = fuse_add(constant(sp), constant(Tensor<float>({3, 4})),
                      constant(Tensor<float>({3, 4})), 2);
  EXPECT_TRUE(same_bits(out.value(), sp));
}

TEST(Fusion, BroadcastDifferenceConstantOverPatches) {
  RngStream rng(2, "f");
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> sp({12, 5}), w({3, 5}), d({3, 5});
    for (auto* t : {&sp, &w, &d})
      for (auto& v : t->vec()) v = rng.normal();
    auto out = fuse_add(constant(sp), constant(w), constant(d), 4).value();
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t u = 0; u < 4; ++u)
        for (std::size_t c = 0; c < 5; ++c) {
          EXPECT_NEAR(out.at(t * 4 + u, c) - sp.at(t * 4 + u, c), w.at(t, c) + d.at(t, c), 1e-12);
        }
    // Swapping the per-step addends gives the same tokens.
    auto swapped = fuse_add(constant(sp), constant(d), constant(w), 4).value();
    EXPECT_TRUE(bitwise_equal(out, swapped));
  }
  EXPECT_THROW(fuse_add(constant(Tensor<double>({5, 5})), Var<double>(),
                        constant(Tensor<double>({3, 5})), 2),
               ShapeError);
}

TEST(Fusion, LaterStepsDoNotLeakIntoEarlierEmbeddings) {
  auto cfg = small_config();
  const auto world = small_world(2, cfg.image_size, 11);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model<float> m(cfg, FrameworkKind::CiVsf, seed);
    auto refs = first_windows(world, 4, false);
    const auto layout = TokenLayout(plans(2, 4, 16, 0.5, seed), 16);
    auto base_batch = make_batch<float>(refs, true);
    auto base = m.encode(base_batch, layout, MaskSite::Embeddings).emb.value();
    auto b2 = base_batch;
    Tensor<float> imgs = b2.images.value();
    for (std::size_t i = 0; i < cfg.image_dim(); ++i) imgs.at(3, i) += 1.0f;  // series 0, step 3
    b2.images = constant(imgs);
    // Weather after step 2 changes too.
    Tensor<float> w = b2.weather.value();
    for (std::size_t d = static_cast<std::size_t>(b2.doys[0][2] - b2.start_doy[0]) + 1;
         d < b2.days; ++d)
      w.at(d, kTmax) += 1.0f;
    b2.weather = constant(w);
    auto pert = m.encode(b2, layout, MaskSite::Embeddings).emb.value();
    const std::size_t U = layout.kept();
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t u = 0; u < U; ++u)
        for (std::size_t c = 0; c < cfg.hidden; ++c)
          ASSERT_EQ(std::memcmp(&base.at(t * U + u, c), &pert.at(t * U + u, c), 4), 0);
  }
}

TEST(Fusion, SingleStepSeries) {
  auto cfg = small_config();
  const auto world = small_world(1, cfg.image_size, 3);
  Model<float> m(cfg, FrameworkKind::MmMr, 1);
  auto batch = make_batch<float>(first_windows(world, 1, false), true);
  auto e = m.encode(batch, TokenLayout::full(1, 1, 16), MaskSite::Embeddings);
  EXPECT_EQ(e.emb.rows(), 16u);
  EXPECT_TRUE(e.emb.value().all_finite());
}

TEST(Fusion, LocationsShareWeightsAndDoNotMix) {
  auto cfg = small_config();
  ParamStore<double> store;
  SequenceEncoder<double> enc(store, cfg, RngStream(4, "s"));
  const auto layout = TokenLayout::full(1, 3, 4);
  RngStream rng(5, "tok");
  Tensor<double> tok({12, cfg.hidden});
  for (auto& v : tok.vec()) v = rng.normal();
  // Locations 0 and 2 see identical sequences.
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < cfg.hidden; ++c) tok.at(t * 4 + 2, c) = tok.at(t * 4 + 0, c);
  auto out = enc(constant(tok), layout).value();
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_EQ(out.at(t * 4 + 2, c), out.at(t * 4, c));
  // Relabelling locations permutes the output the same way.
  const std::vector<std::size_t> perm{3, 0, 1, 2};
  Tensor<double> ptok(tok.shape());
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t g = 0; g < 4; ++g)
      for (std::size_t c = 0; c < cfg.hidden; ++c) ptok.at(t * 4 + perm[g], c) = tok.at(t * 4 + g, c);
  auto pout = enc(constant(ptok), layout).value();
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t g = 0; g < 4; ++g)
      for (std::size_t c = 0; c < cfg.hidden; ++c)
        EXPECT_EQ(pout.at(t * 4 + perm[g], c), out.at(t * 4 + g, c));
}

// ---------------------------------------------------------- forecast/decode

TEST(ForecastSpecs, NextStepThenK) {
  const std::vector<int> doys{10, 20, 35, 40, 52, 70};
  const auto specs = next_step_targets(doys, 140);
  ASSERT_EQ(specs.size(), 6u);
  EXPECT_EQ(specs.front().source, 0u);
  EXPECT_EQ(specs.front().target_doy, 20);
  EXPECT_EQ(specs.back().source, 5u);
  EXPECT_EQ(specs.back().target_doy, 140);
  EXPECT_EQ(specs.back().delta, 70);
  for (std::size_t i = 0; i + 1 < doys.size(); ++i) EXPECT_EQ(specs[i].delta, doys[i + 1] - doys[i]);
  EXPECT_EQ(next_step_targets({1, 5}, 9).size(), 2u);
  EXPECT_THROW(next_step_targets(doys, 70), DomainError);
  EXPECT_THROW(next_step_targets({5}, 9), ConfigError);
}

TEST(Forecaster, SingleModalityIgnoresWeatherAndVariesWithDelta) {
  auto cfg = small_config();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ParamStore<double> store;
    RngStream rng(seed, "fc");
    Forecaster<double> f(store, cfg, rng);
    Tensor<double> src({4, cfg.hidden}), doy({2, cfg.hidden}), d1({2, cfg.hidden}),
        d2({2, cfg.hidden}), w({2, cfg.hidden});
    for (auto* t : {&src, &doy, &d1, &d2, &w})
      for (auto& v : t->vec()) v = rng.normal();
    auto a = f(constant(src), Var<double>(), constant(doy), constant(d1), 2).value();
    auto b = f(constant(src), Var<double>(), constant(doy), constant(d2), 2).value();
    EXPECT_FALSE(bitwise_equal(a, b));
    auto c = f(constant(src), constant(w), constant(doy), constant(d1), 2).value();
    auto c2 = f(constant(src), constant(doy), constant(w), constant(d1), 2).value();
    for (std::size_t i = 0; i < c.numel(); ++i) EXPECT_NEAR(c[i], c2[i], 1e-12);
    EXPECT_FALSE(bitwise_equal(a, c));
  }
}

TEST(Decoder, MaskedSlotsDecodeToOneConstantPatch) {
  auto cfg = small_config();
  Model<float> m(cfg, FrameworkKind::SmMr, 2);
  const auto plan = build_uniform_mask(2, 16, 0.5, 3);
  const TokenLayout layout({plan}, 16);
  RngStream rng(4, "e");
  Tensor<float> emb({layout.tokens(), cfg.hidden});
  for (auto& v : emb.vec()) v = static_cast<float>(rng.normal());
  auto patches = m.decode_patches(constant(emb), layout).value();
  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < layout.slots().size(); ++i)
    if (layout.slots()[i] < 0) masked.push_back(i);
  ASSERT_EQ(masked.size(), 16u);
  for (std::size_t i : masked)
    for (std::size_t c = 0; c < cfg.patch_dim(); ++c)
      EXPECT_EQ(patches.at(i, c), patches.at(masked[0], c));
  auto imgs = decode_series(m.dec, constant(emb), layout, cfg);
  EXPECT_EQ(imgs.shape(), (Shape{2, cfg.image_dim()}));
  const auto full = TokenLayout::full(1, 2, 16);
  for (auto s : full.slots()) EXPECT_GE(s, 0);
}

TEST(Decoder, DeskForecastShape) {
  ModelConfig cfg;
  Model<float> m(cfg, FrameworkKind::SmVsf, 1);
  const auto layout = TokenLayout::full(1, 1, cfg.patches());
  auto img = decode_forecast(m.dec, constant(Tensor<float>({16, cfg.hidden})), layout, 0, cfg);
  EXPECT_EQ(img.shape(), (Shape{1, 6u * 32 * 32}));
}

TEST(Forecast, InvariantToMaskedSourcePixels) {
  auto cfg = small_config();
  const auto world = small_world(2, cfg.image_size, 5);
  Model<float> m(cfg, FrameworkKind::CiVsf, 6);
  auto batch = make_batch<float>(first_windows(world, 4, true), true);
  const TokenLayout layout(plans(2, 4, 16, 0.5, 7), 16);
  auto run = [&](const SeriesBatch<float>& b) {
    auto e = m.encode(b, layout, MaskSite::Pixels);
    return m.decode_patches(m.forecast_tokens(e, b), layout).value();
  };
  auto base = run(batch);
  auto again = run(batch);
  EXPECT_TRUE(bitwise_equal(base, again));
  auto b2 = batch;
  Tensor<float> imgs = b2.images.value();
  const auto idx = patchify_index(8, cfg.image_size, cfg.patch);
  for (std::size_t i = 0; i < layout.slots().size(); ++i)
    if (layout.slots()[i] < 0)
      for (std::size_t k = 0; k < cfg.patch_dim(); ++k) imgs[idx[i * cfg.patch_dim() + k]] = -7.0f;
  b2.images = constant(imgs);
  EXPECT_TRUE(bitwise_equal(base, run(b2)));
}

TEST(Forecast, TargetImageNeverFeedsItsPrediction) {
  auto cfg = small_config();
  const auto world = small_world(2, cfg.image_size, 8);
  Model<double> m(cfg, FrameworkKind::CiVsf, 9);
  auto batch = make_batch<double>(first_windows(world, 4, true), true);
  batch.images.set_requires_grad(true);
  const TokenLayout layout(plans(2, 4, 16, 0.5, 1), 16);
  auto e = m.encode(batch, layout, MaskSite::Embeddings);
  auto pred = m.decode_patches(m.forecast_tokens(e, batch), layout);
  // Prediction of step 2 from step 1 of series 1: rows (1*4 + 1)*16 + g.
  std::vector<std::int64_t> rows;
  for (std::size_t g = 0; g < 16; ++g) rows.push_back((1 * 4 + 1) * 16 + g);
  batch.images.zero_grad();
  backward(sum(gather_rows(pred, rows)));
  const auto& g = batch.images.grad();
  for (std::size_t i = 0; i < cfg.image_dim(); ++i) {
    ASSERT_EQ(g.at(1 * 4 + 2, i), 0.0);
    ASSERT_EQ(g.at(1 * 4 + 3, i), 0.0);
  }
  double seen = 0;
  for (std::size_t i = 0; i < cfg.image_dim(); ++i) seen += std::abs(g.at(1 * 4 + 1, i));
  EXPECT_GT(seen, 0.0);
}
