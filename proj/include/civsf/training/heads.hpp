#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "civsf/data/datamodel.hpp"
#include "civsf/errors.hpp"
#include "civsf/harness/metrics.hpp"
#include "civsf/harness/report.hpp"
#include "civsf/model/model.hpp"
#include "civsf/numerics/nn.hpp"
#include "civsf/numerics/optim.hpp"
#include "civsf/numerics/rng.hpp"
#include "civsf/training/model_io.hpp"

namespace civsf {

enum class HeadKind { SoilForecast, SoilEstimate, CropMap, MissingImage, FutureImage };

inline std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::SoilForecast: return "sm-forecast";
    case HeadKind::SoilEstimate: return "sm-estimate";
    case HeadKind::CropMap: return "crop";
    case HeadKind::MissingImage: return "missing";
    case HeadKind::FutureImage: return "future-image";
  }
  return "?";
}

inline HeadKind parse_head(const std::string& s) {
  for (auto h : {HeadKind::SoilForecast, HeadKind::SoilEstimate, HeadKind::CropMap,
                 HeadKind::MissingImage, HeadKind::FutureImage})
    if (to_string(h) == s) return h;
  throw ConfigError("unknown head '" + s +
                    "' (expected sm-forecast, sm-estimate, crop, missing or future-image)");
}

inline std::size_t default_head_epochs(HeadKind h) {
  switch (h) {
    case HeadKind::SoilForecast: return 50;
    case HeadKind::SoilEstimate: return 70;
    case HeadKind::CropMap: return 40;
    case HeadKind::MissingImage: return 30;
    case HeadKind::FutureImage: return 10;
  }
  return 0;
}

inline bool needs_forecasting(HeadKind h) {
  return h == HeadKind::SoilForecast || h == HeadKind::FutureImage;
}

inline std::string display_name(FrameworkKind k) {
  switch (k) {
    case FrameworkKind::SmMr: return "SM-MR";
    case FrameworkKind::MmMr: return "MM-MR";
    case FrameworkKind::SmVsf: return "SM-VSF";
    case FrameworkKind::CiVsf: return "CI-VSF";
  }
  return "?";
}

struct HeadOptions {
  std::size_t epochs = 0;  // 0 = head default
  double lr = 1e-3;
  std::size_t batch = 16;
  std::size_t train_instances = 600;  // 0 = all
  std::size_t test_instances = 300;
  std::size_t context = 6;
  int gap_min = 1;
  int gap_max = 150;
  double corruption = 0.5;
  std::uint64_t seed = 0;
};

struct HeadMetric {
  std::string metric;
  std::string key;
  double value = 0;
  std::size_t count = 0;
};

struct HeadResult {
  HeadKind head = HeadKind::FutureImage;
  FrameworkKind framework = FrameworkKind::CiVsf;
  std::vector<double> train_loss;  // [0] = before any update
  std::vector<HeadMetric> metrics;

  double value(const std::string& metric, const std::string& key) const {
    for (const auto& m : metrics)
      if (m.metric == metric && m.key == key) return m.value;
    throw RangeError("no metric (" + metric + ", " + key + ")");
  }

  const HeadMetric* find(const std::string& metric, const std::string& key) const {
    for (const auto& m : metrics)
      if (m.metric == metric && m.key == key) return &m;
    return nullptr;
  }

  void add_to(ReportTable& t) const {
    for (const auto& m : metrics) {
      const int prec = m.metric.find("MSE") != std::string::npos ? 2 : 4;
      t.add(display_name(framework), m.metric, m.key, m.value, prec);
    }
  }
};

// Soil moisture enters and leaves the heads as (x - offset) / scale.
inline constexpr double kSoilOffset = 0.3;
inline constexpr double kSoilScale = 0.1;

// Reflectance errors are reported in Sentinel-2 digital numbers (x 10^4).
inline constexpr double kDnPerReflectance = 1e4;

// ---------------------------------------------------------------------------
// Instance selection and feature extraction
// ---------------------------------------------------------------------------

struct InstanceRef {
  std::size_t sample = 0;
  TrainingInstance inst;
};

// All windows of the given samples (one target each), shuffled, first `n`.
inline std::vector<InstanceRef> pick_instances(const std::vector<Sample>& data,
                                               const std::vector<std::size_t>& samples,
                                               std::size_t C, int gap_min, int gap_max,
                                               std::size_t n, std::uint64_t seed) {
  std::vector<InstanceRef> all;
  for (std::size_t i : samples)
    for (auto& inst : build_instances(data[i], C, gap_min, gap_max, derive_seed(seed, i)))
      all.push_back({i, std::move(inst)});
  RngStream rng(seed, "pick-instances");
  rng.shuffle(all);
  if (n > 0 && all.size() > n) all.resize(n);
  return all;
}

// Runs `fn` over consecutive chunks of [0, n).
inline void for_chunks(std::size_t n, std::size_t batch,
                       const std::function<void(std::size_t, std::size_t)>& fn) {
  for (std::size_t s = 0; s < n; s += batch) fn(s, std::min(n, s + batch));
}

template <typename T>
SeriesBatch<T> instance_batch(const Model<T>& m, const std::vector<Sample>& data,
                              const std::vector<InstanceRef>& refs, std::size_t lo,
                              std::size_t hi, bool with_target) {
  std::vector<SeriesRef> series;
  for (std::size_t i = lo; i < hi; ++i) {
    SeriesRef r;
    r.sample = &data[refs[i].sample];
    r.images = refs[i].inst.context;
    if (with_target) r.target = refs[i].inst.target;
    series.push_back(std::move(r));
  }
  return make_batch<T>(series, m.has_weather());
}

// Copies rows [row0, row0 + count) of `src` into `dst` at row `at`.
template <typename T>
void copy_rows(const Tensor<T>& src, std::size_t row0, std::size_t count, Tensor<T>& dst,
               std::size_t at) {
  const std::size_t cols = src.cols();
  std::copy(src.data() + row0 * cols, src.data() + (row0 + count) * cols,
            dst.data() + at * cols);
}

// Freezes every model parameter for the lifetime of the guard.
template <typename T>
class FrozenModel {
 public:
  explicit FrozenModel(Model<T>& m) : m_(m) { m_.params().set_all_trainable(false); }
  ~FrozenModel() { m_.params().set_all_trainable(true); }
  FrozenModel(const FrozenModel&) = delete;
  FrozenModel& operator=(const FrozenModel&) = delete;

 private:
  Model<T>& m_;
};

// Generic epoch loop. loss_fn(indices) returns the batch loss; epoch 0
// evaluates without updating. Returns the mean loss per epoch.
template <typename T>
std::vector<double> train_head(std::size_t n, std::size_t epochs, std::size_t batch,
                               std::uint64_t seed, Optimizer<T>& opt,
                               const std::vector<std::pair<std::string, Var<T>>>& params,
                               const std::function<Var<T>(const std::vector<std::size_t>&)>& loss_fn) {
  if (n == 0) throw DataError("fine-tuning set is empty");
  std::vector<double> out;
  for (std::size_t e = 0; e <= epochs; ++e) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (e > 0) RngStream(derive_seed(seed, 300, e), "head-order").shuffle(order);
    double total = 0;
    for_chunks(n, batch, [&](std::size_t lo, std::size_t hi) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                   order.begin() + static_cast<std::ptrdiff_t>(hi));
      auto loss = loss_fn(idx);
      const double v = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(v)) {
        throw NumericError("fine-tuning diverged at epoch " + std::to_string(e));
      }
      total += v * static_cast<double>(idx.size());
      if (e == 0) return;
      for (auto& [_, p] : params) {
        auto q = p;
        q.zero_grad();
      }
      backward(loss);
      opt.step();
    });
    out.push_back(total / static_cast<double>(n));
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Var<T>>> trainable(const ParamStore<T>& store) {
  std::vector<std::pair<std::string, Var<T>>> out;
  for (const auto& e : store.entries())
    if (e.second.requires_grad()) out.push_back(e);
  return out;
}

// ---------------------------------------------------------------------------
// Soil moisture forecasting
// ---------------------------------------------------------------------------

template <typename T>
struct SoilForecastHead {
  ParamStore<T> store;
  Lstm<T> lstm;
  Linear<T> fc1, fc2, out;

  SoilForecastHead(std::size_t D, std::uint64_t seed) {
    const RngStream rng(seed, "soil-forecast-head");
    lstm = Lstm<T>(store, "soil.lstm", 1, D, rng);
    fc1 = Linear<T>(store, "soil.fc1", D, D, rng);
    fc2 = Linear<T>(store, "soil.fc2", D, std::max<std::size_t>(1, D / 2), rng);
    out = Linear<T>(store, "soil.out", std::max<std::size_t>(1, D / 2), 1, rng);
  }

  // pooled [B*C x D], addend [B x D], soil [B*C x 1] -> [B x 1]
  Var<T> operator()(const Var<T>& pooled, const Var<T>& addend, const Var<T>& soil,
                    std::size_t B, std::size_t C) const {
    auto z = add(pooled, lstm(soil, B, C));
    std::vector<std::int64_t> last;
    for (std::size_t b = 0; b < B; ++b) last.push_back(static_cast<std::int64_t>(b * C + C - 1));
    auto x = add(gather_rows(z, last), addend);
    return out(relu(fc2(relu(fc1(x)))));
  }
};

struct SoilForecastFeatures {
  Tensor<float> pooled;  // [N*C x D]
  Tensor<float> addend;  // [N x D] weather (if any) + doy + delta at the target
  Tensor<float> soil;    // [N*C x 1], normalized
  std::vector<float> target;  // normalized
  std::vector<int> gaps;
};

template <typename T>
SoilForecastFeatures soil_forecast_features(const Model<T>& m, const std::vector<Sample>& data,
                                            const std::vector<InstanceRef>& refs,
                                            std::size_t C, std::size_t batch) {
  const std::size_t D = m.config().hidden, G = m.config().patches();
  SoilForecastFeatures f;
  f.pooled = Tensor<float>({refs.size() * C, D});
  f.addend = Tensor<float>({refs.size(), D});
  f.soil = Tensor<float>({refs.size() * C, 1});
  for_chunks(refs.size(), batch, [&](std::size_t lo, std::size_t hi) {
    const auto b = instance_batch(m, data, refs, lo, hi, true);
    const auto layout = TokenLayout::full(b.series, C, G);
    const auto e = m.encode(b, layout, MaskSite::Pixels);
    copy_rows(mean_groups(e.emb, G).value().template cast<float>(), 0, b.series * C, f.pooled,
              lo * C);
    std::vector<std::vector<int>> tdoys;
    std::vector<int> flat, deltas;
    for (std::size_t s = 0; s < b.series; ++s) {
      tdoys.push_back({b.target_doy[s]});
      flat.push_back(b.target_doy[s]);
      deltas.push_back(b.target_doy[s] - b.doys[s].back());
    }
    auto add_on = add(m.doy(flat), m.delta(deltas));
    if (e.states.defined()) add_on = add(add_on, temporal_match(e.states, tdoys, b.start_doy, b.days));
    copy_rows(add_on.value().template cast<float>(), 0, b.series, f.addend, lo);
  });
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& s = data[refs[i].sample];
    if (!s.soil) throw DataError("sample " + std::to_string(refs[i].sample) + " has no soil series");
    for (std::size_t t = 0; t < C; ++t)
      f.soil[i * C + t] = static_cast<float>(((*s.soil)[refs[i].inst.context[t]] - kSoilOffset) / kSoilScale);
    f.target.push_back(static_cast<float>(((*s.soil)[refs[i].inst.target] - kSoilOffset) / kSoilScale));
    f.gaps.push_back(refs[i].inst.gap);
  }
  return f;
}

namespace detail {
template <typename T>
Var<T> rows_of(const Tensor<float>& src, const std::vector<std::size_t>& idx, std::size_t per) {
  const std::size_t cols = src.cols();
  Tensor<T> out({idx.size() * per, cols});
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t r = 0; r < per; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out.at(k * per + r, c) = static_cast<T>(src.at(idx[k] * per + r, c));
  return constant(std::move(out));
}

template <typename T>
Var<T> column_of(const std::vector<float>& v, const std::vector<std::size_t>& idx) {
  Tensor<T> out({idx.size(), 1});
  for (std::size_t k = 0; k < idx.size(); ++k) out[k] = static_cast<T>(v[idx[k]]);
  return constant(std::move(out));
}

// "All" plus one entry per horizon bucket that has instances.
inline void bucket_metrics(HeadResult& r, const std::string& metric,
                           const std::vector<double>& err, const std::vector<int>& gaps) {
  std::array<double, 4> sum{};
  std::array<std::size_t, 4> cnt{};
  double all = 0;
  for (std::size_t i = 0; i < err.size(); ++i) {
    const auto b = bucket_index(gaps[i]);
    sum[b] += err[i];
    ++cnt[b];
    all += err[i];
  }
  for (std::size_t b = 0; b < 4; ++b)
    if (cnt[b] > 0)
      r.metrics.push_back({metric, std::string(kHorizonBuckets[b]),
                           sum[b] / static_cast<double>(cnt[b]), cnt[b]});
  if (!err.empty())
    r.metrics.push_back({metric, "All", all / static_cast<double>(err.size()), err.size()});
}
}  // namespace detail

template <typename T>
HeadResult finetune_soil_forecast(Model<T>& m, const std::vector<Sample>& data,
                                  const std::vector<std::size_t>& train,
                                  const std::vector<std::size_t>& test, const HeadOptions& o) {
  require_forecasting(m.kind(), to_string(HeadKind::SoilForecast));
  FrozenModel<T> frozen(m);
  const std::size_t C = o.context, D = m.config().hidden;
  const auto tr = pick_instances(data, train, C, o.gap_min, o.gap_max, o.train_instances,
                                 derive_seed(o.seed, 1));
  const auto te = pick_instances(data, test, C, o.gap_min, o.gap_max, o.test_instances,
                                 derive_seed(o.seed, 2));
  const auto ftr = soil_forecast_features(m, data, tr, C, o.batch);
  const auto fte = soil_forecast_features(m, data, te, C, o.batch);

  SoilForecastHead<T> head(D, derive_seed(o.seed, 3));
  OptimizerOptions oo;
  oo.kind = OptimizerKind::AdamW;
  oo.lr = o.lr;
  oo.weight_decay = 0.01;
  const auto params = trainable(head.store);
  Optimizer<T> opt(oo, params);
  auto forward = [&](const SoilForecastFeatures& f, const std::vector<std::size_t>& idx) {
    return head(detail::rows_of<T>(f.pooled, idx, C), detail::rows_of<T>(f.addend, idx, 1),
                detail::rows_of<T>(f.soil, idx, C), idx.size(), C);
  };
  HeadResult r;
  r.head = HeadKind::SoilForecast;
  r.framework = m.kind();
  r.train_loss = train_head<T>(
      tr.size(), o.epochs ? o.epochs : default_head_epochs(r.head), o.batch, o.seed, opt, params,
      [&](const std::vector<std::size_t>& idx) {
        return mae(forward(ftr, idx), detail::column_of<T>(ftr.target, idx));
      });
  std::vector<double> err;
  for_chunks(te.size(), o.batch, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> idx;
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    const auto pred = forward(fte, idx).value();
    for (std::size_t k = 0; k < idx.size(); ++k)
      err.push_back(std::abs(static_cast<double>(pred[k]) - fte.target[idx[k]]) * kSoilScale);
  });
  detail::bucket_metrics(r, "soil forecast MAE", err, fte.gaps);
  return r;
}

// ---------------------------------------------------------------------------
// Soil moisture estimation
// ---------------------------------------------------------------------------

inline constexpr std::size_t kRegions = 6;
inline std::size_t region_of(std::size_t sample) { return sample % kRegions; }
inline std::string region_label(std::size_t r) { return "region " + std::to_string(r); }

template <typename T>
struct SoilEstimateHead {
  ParamStore<T> store;
  Linear<T> fc1, out;

  SoilEstimateHead(std::size_t D, std::uint64_t seed) {
    const RngStream rng(seed, "soil-estimate-head");
    fc1 = Linear<T>(store, "est.fc1", D, D, rng);
    out = Linear<T>(store, "est.out", D, 1, rng);
  }

  // One scalar per timestamp embedding: [N x D] -> [N x 1].
  Var<T> operator()(const Var<T>& pooled) const { return out(relu(fc1(pooled))); }
};

struct SoilEstimateFeatures {
  Tensor<float> pooled;        // [N*C x D]
  std::vector<float> target;   // [N*C], normalized
  std::vector<std::size_t> region;  // per instance
};

template <typename T>
SoilEstimateFeatures soil_estimate_features(const Model<T>& m, const std::vector<Sample>& data,
                                            const std::vector<InstanceRef>& refs,
                                            std::size_t C, std::size_t batch) {
  const std::size_t D = m.config().hidden, G = m.config().patches();
  SoilEstimateFeatures f;
  f.pooled = Tensor<float>({refs.size() * C, D});
  for_chunks(refs.size(), batch, [&](std::size_t lo, std::size_t hi) {
    const auto b = instance_batch(m, data, refs, lo, hi, false);
    const auto e = m.encode(b, TokenLayout::full(b.series, C, G), MaskSite::Pixels);
    copy_rows(mean_groups(e.emb, G).value().template cast<float>(), 0, b.series * C, f.pooled,
              lo * C);
  });
  for (const auto& ref : refs) {
    const auto& s = data[ref.sample];
    if (!s.soil) throw DataError("sample " + std::to_string(ref.sample) + " has no soil series");
    for (std::size_t t = 0; t < C; ++t)
      f.target.push_back(static_cast<float>(((*s.soil)[ref.inst.context[t]] - kSoilOffset) / kSoilScale));
    f.region.push_back(region_of(ref.sample));
  }
  return f;
}

namespace detail {
// Trains a fresh estimate head on the instances in `use` and returns its
// absolute errors (soil units) for every timestamp of the `eval` instances.
template <typename T>
std::vector<double> estimate_run(const SoilEstimateFeatures& ftr, const std::vector<std::size_t>& use,
                                 const SoilEstimateFeatures& fte, const std::vector<std::size_t>& eval,
                                 std::size_t C, std::size_t D, const HeadOptions& o,
                                 std::uint64_t seed, std::vector<double>* losses) {
  SoilEstimateHead<T> head(D, seed);
  OptimizerOptions oo;
  oo.kind = OptimizerKind::AdamW;
  oo.lr = o.lr;
  oo.weight_decay = 0.01;
  const auto params = trainable(head.store);
  Optimizer<T> opt(oo, params);
  auto expand = [&](const std::vector<float>& v, const std::vector<std::size_t>& idx) {
    Tensor<T> out({idx.size() * C, 1});
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t t = 0; t < C; ++t) out[k * C + t] = static_cast<T>(v[idx[k] * C + t]);
    return constant(std::move(out));
  };
  auto l = train_head<T>(use.size(), o.epochs ? o.epochs : default_head_epochs(HeadKind::SoilEstimate),
                         o.batch, seed, opt, params, [&](const std::vector<std::size_t>& idx) {
                           std::vector<std::size_t> g;
                           for (auto i : idx) g.push_back(use[i]);
                           return mae(head(rows_of<T>(ftr.pooled, g, C)), expand(ftr.target, g));
                         });
  if (losses) *losses = l;
  std::vector<double> err;
  for_chunks(eval.size(), o.batch, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> g(eval.begin() + static_cast<std::ptrdiff_t>(lo),
                               eval.begin() + static_cast<std::ptrdiff_t>(hi));
    const auto pred = head(rows_of<T>(fte.pooled, g, C)).value();
    for (std::size_t k = 0; k < g.size(); ++k)
      for (std::size_t t = 0; t < C; ++t)
        err.push_back(std::abs(static_cast<double>(pred[k * C + t]) - fte.target[g[k] * C + t]) *
                      kSoilScale);
  });
  return err;
}
}  // namespace detail

// In-region: train on all regions, report overall and per-region MAE.
// Cross-region: for each region, train without it and test on it.
template <typename T>
HeadResult finetune_soil_estimate(Model<T>& m, const std::vector<Sample>& data,
                                  const std::vector<std::size_t>& train,
                                  const std::vector<std::size_t>& test, const HeadOptions& o,
                                  bool cross_region = true) {
  FrozenModel<T> frozen(m);
  const std::size_t C = o.context, D = m.config().hidden;
  const auto tr = pick_instances(data, train, C, o.gap_min, o.gap_max, o.train_instances,
                                 derive_seed(o.seed, 1));
  const auto te = pick_instances(data, test, C, o.gap_min, o.gap_max, o.test_instances,
                                 derive_seed(o.seed, 2));
  const auto ftr = soil_estimate_features(m, data, tr, C, o.batch);
  const auto fte = soil_estimate_features(m, data, te, C, o.batch);
  HeadResult r;
  r.head = HeadKind::SoilEstimate;
  r.framework = m.kind();

  std::vector<std::size_t> all_tr(tr.size()), all_te(te.size());
  for (std::size_t i = 0; i < tr.size(); ++i) all_tr[i] = i;
  for (std::size_t i = 0; i < te.size(); ++i) all_te[i] = i;
  const auto err = detail::estimate_run<T>(ftr, all_tr, fte, all_te, C, D, o,
                                           derive_seed(o.seed, 3), &r.train_loss);
  std::array<double, kRegions> sum{};
  std::array<std::size_t, kRegions> cnt{};
  double total = 0;
  for (std::size_t i = 0; i < err.size(); ++i) {
    const auto reg = fte.region[i / C];
    sum[reg] += err[i];
    ++cnt[reg];
    total += err[i];
  }
  r.metrics.push_back({"soil estimate MAE", "All", total / static_cast<double>(err.size()), err.size()});
  for (std::size_t g = 0; g < kRegions; ++g)
    if (cnt[g]) r.metrics.push_back({"soil estimate MAE", region_label(g), sum[g] / cnt[g], cnt[g]});

  if (!cross_region) return r;
  for (std::size_t g = 0; g < kRegions; ++g) {
    std::vector<std::size_t> use, eval;
    for (std::size_t i = 0; i < tr.size(); ++i)
      if (ftr.region[i] != g) use.push_back(i);
    for (std::size_t i = 0; i < te.size(); ++i)
      if (fte.region[i] == g) eval.push_back(i);
    if (use.empty() || eval.empty()) continue;
    const auto e = detail::estimate_run<T>(ftr, use, fte, eval, C, D, o,
                                           derive_seed(o.seed, 10 + g), nullptr);
    double s = 0;
    for (double v : e) s += v;
    r.metrics.push_back({"soil estimate MAE (held-out region)", region_label(g),
                         s / static_cast<double>(e.size()), e.size()});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Crop mapping
// ---------------------------------------------------------------------------

namespace detail {
// Row gather for a 3x3 neighbourhood offset (dy, dx) on B maps of R x R
// pixels stored row-major per map; -1 outside the map.
inline std::vector<std::int64_t> shift_index(std::size_t B, std::size_t R, int dy, int dx) {
  std::vector<std::int64_t> idx;
  idx.reserve(B * R * R);
  const int r = static_cast<int>(R);
  for (std::size_t b = 0; b < B; ++b)
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) {
        const int sy = y + dy, sx = x + dx;
        idx.push_back(sy < 0 || sx < 0 || sy >= r || sx >= r
                          ? -1
                          : static_cast<std::int64_t>((b * R + static_cast<std::size_t>(sy)) * R +
                                                      static_cast<std::size_t>(sx)));
      }
  return idx;
}

// Nearest-neighbour x2 upsampling of B maps of R x R rows.
inline std::vector<std::int64_t> upsample_index(std::size_t B, std::size_t R) {
  std::vector<std::int64_t> idx;
  idx.reserve(B * 4 * R * R);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < 2 * R; ++y)
      for (std::size_t x = 0; x < 2 * R; ++x)
        idx.push_back(static_cast<std::int64_t>((b * R + y / 2) * R + x / 2));
  return idx;
}

// [B*R*R x f*f*K] -> [B*(fR)*(fR) x K], sub-pixel (dy, dx) from column block.
inline std::vector<std::int64_t> pixel_shuffle_index(std::size_t B, std::size_t R, std::size_t f,
                                                     std::size_t K) {
  const std::size_t out_side = R * f;
  std::vector<std::int64_t> idx;
  idx.reserve(B * out_side * out_side * K);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < out_side; ++y)
      for (std::size_t x = 0; x < out_side; ++x)
        for (std::size_t c = 0; c < K; ++c)
          idx.push_back(static_cast<std::int64_t>(((b * R + y / f) * R + x / f) * (f * f * K) +
                                                  ((y % f) * f + x % f) * K + c));
  return idx;
}
}  // namespace detail

template <typename T>
struct Conv3x3 {
  Var<T> weight;  // [9*in x out], blocks ordered (dy, dx) row-major
  Var<T> bias;
  std::size_t in = 0;

  Conv3x3() = default;
  Conv3x3(ParamStore<T>& store, const std::string& name, std::size_t in_ch, std::size_t out_ch,
          const RngStream& rng)
      : in(in_ch) {
    weight = store.add(name + ".weight", init::xavier<T>(9 * in_ch, out_ch, rng.sub(name + ".weight")));
    bias = store.add(name + ".bias", Tensor<T>({out_ch}));
  }

  // x: [B*R*R x in] -> [B*R*R x out], zero padding.
  Var<T> operator()(const Var<T>& x, std::size_t B, std::size_t R) const {
    Var<T> acc;
    std::size_t k = 0;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx, ++k) {
        auto term = matmul(gather_rows(x, detail::shift_index(B, R, dy, dx)),
                           slice_rows(weight, k * in, in));
        acc = acc.defined() ? add(acc, term) : term;
      }
    return add_bias(acc, bias);
  }
};

// Timestamp attention over the embedding series, then two (x2 upsample,
// 3x3 conv, ReLU) stages and a per-pixel linear layer whose outputs are
// shuffled into the remaining sub-pixel factor.
template <typename T>
struct CropHead {
  ParamStore<T> store;
  Linear<T> score;
  Conv3x3<T> conv1, conv2;
  Linear<T> out;
  std::size_t grid = 0, factor = 0, classes = 0;

  CropHead(const ModelConfig& cfg, std::size_t n_classes, std::uint64_t seed)
      : grid(cfg.grid_side()), classes(n_classes) {
    if (cfg.image_size % (4 * grid) != 0) {
      throw ConfigError("crop head needs image size divisible by 4 x grid side");
    }
    factor = cfg.image_size / (4 * grid);
    const RngStream rng(seed, "crop-head");
    const std::size_t D = cfg.hidden, c1 = std::max<std::size_t>(4, D / 2),
                      c2 = std::max<std::size_t>(4, D / 2);
    score = Linear<T>(store, "crop.score", D, 1, rng);
    conv1 = Conv3x3<T>(store, "crop.conv1", D, c1, rng);
    conv2 = Conv3x3<T>(store, "crop.conv2", c1, c2, rng);
    out = Linear<T>(store, "crop.out", c2, factor * factor * classes, rng);
  }

  // Softmax weights over timestamps per location: emb location-major
  // [B*G*T x D] -> [B*G x T].
  Var<T> timestamp_weights(const Var<T>& emb_by_location, std::size_t steps) const {
    return softmax_rows(reshape(score(emb_by_location), {emb_by_location.rows() / steps, steps}));
  }

  // emb_by_location: [B*G*T x D] -> logits [B*H*W x classes]
  Var<T> operator()(const Var<T>& emb_by_location, std::size_t B, std::size_t steps) const {
    auto w = timestamp_weights(emb_by_location, steps);
    auto x = group_weighted_sum(w, emb_by_location);  // [B*G x D]
    std::size_t R = grid;
    x = relu(conv1(gather_rows(x, detail::upsample_index(B, R)), B, 2 * R));
    R *= 2;
    x = relu(conv2(gather_rows(x, detail::upsample_index(B, R)), B, 2 * R));
    R *= 2;
    auto logits = out(x);
    const std::size_t side = R * factor;
    return permute_elems(logits, detail::pixel_shuffle_index(B, R, factor, classes),
                         {B * side * side, classes});
  }
};

// Location-major embeddings of whole image series, [N*G*T x D].
template <typename T>
Tensor<float> series_features(const Model<T>& m, const std::vector<Sample>& data,
                              const std::vector<std::size_t>& samples, std::size_t steps,
                              std::size_t batch) {
  const std::size_t D = m.config().hidden, G = m.config().patches();
  Tensor<float> out({samples.size() * G * steps, D});
  for_chunks(samples.size(), batch, [&](std::size_t lo, std::size_t hi) {
    std::vector<SeriesRef> refs;
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& s = data[samples[i]];
      if (s.doys.size() < steps) {
        throw DataError("sample " + std::to_string(samples[i]) + " has " +
                        std::to_string(s.doys.size()) + " images, crop head needs " +
                        std::to_string(steps));
      }
      SeriesRef r;
      r.sample = &s;
      for (std::size_t t = 0; t < steps; ++t) r.images.push_back(t);
      refs.push_back(std::move(r));
    }
    const auto b = make_batch<T>(refs, m.has_weather());
    const auto layout = TokenLayout::full(b.series, steps, G);
    const auto e = m.encode(b, layout, MaskSite::Pixels);
    copy_rows(gather_rows(e.emb, layout.location_major()).value().template cast<float>(), 0,
              b.series * G * steps, out, lo * G * steps);
  });
  return out;
}

// `steps` images per series; every sample must carry a crop grid.
template <typename T>
HeadResult finetune_crop(Model<T>& m, const std::vector<Sample>& data,
                         const std::vector<std::size_t>& train,
                         const std::vector<std::size_t>& test, std::size_t steps,
                         std::size_t classes, const HeadOptions& o) {
  FrozenModel<T> frozen(m);
  const std::size_t G = m.config().patches(), H = m.config().image_size;
  for (auto* set : {&train, &test})
    for (std::size_t i : *set)
      if (!data[i].crops) throw DataError("sample " + std::to_string(i) + " has no crop grid");
  const auto ftr = series_features(m, data, train, steps, o.batch);
  const auto fte = series_features(m, data, test, steps, o.batch);
  CropHead<T> head(m.config(), classes, derive_seed(o.seed, 3));
  OptimizerOptions oo;
  oo.kind = OptimizerKind::Adam;
  oo.lr = o.lr;
  const auto params = trainable(head.store);
  Optimizer<T> opt(oo, params);
  auto labels = [&](const std::vector<std::size_t>& set, const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    for (auto k : idx)
      for (auto c : *data[set[k]].crops) out.push_back(static_cast<int>(c));
    return out;
  };
  HeadResult r;
  r.head = HeadKind::CropMap;
  r.framework = m.kind();
  r.train_loss = train_head<T>(train.size(), o.epochs ? o.epochs : default_head_epochs(r.head),
                               o.batch, o.seed, opt, params,
                               [&](const std::vector<std::size_t>& idx) {
                                 auto logits = head(detail::rows_of<T>(ftr, idx, G * steps),
                                                    idx.size(), steps);
                                 return cross_entropy(logits, labels(train, idx));
                               });
  std::vector<int> pred, truth;
  for_chunks(test.size(), o.batch, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> idx;
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    const auto logits = head(detail::rows_of<T>(fte, idx, G * steps), idx.size(), steps).value();
    for (std::size_t p = 0; p < idx.size() * H * H; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (logits.at(p, c) > logits.at(p, best)) best = c;
      pred.push_back(static_cast<int>(best));
    }
    const auto t = labels(test, idx);
    truth.insert(truth.end(), t.begin(), t.end());
  });
  r.metrics.push_back({"crop macro-F1", "Average", macro_f1(pred, truth, classes), pred.size()});
  return r;
}

// ---------------------------------------------------------------------------
// Missing image prediction
// ---------------------------------------------------------------------------

struct Block {
  std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
  std::size_t pixels() const { return h * w; }
};

// Axis-aligned rectangle covering `fraction` of a side x side image, to
// within one image row or column, at a random position.
inline Block corruption_block(std::size_t side, double fraction, RngStream& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ConfigError("corruption fraction " + std::to_string(fraction) + " outside [0, 1]");
  }
  Block b;
  if (fraction == 0.0) return b;
  const double area = fraction * static_cast<double>(side * side);
  b.w = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(std::sqrt(area))), 1, side);
  b.h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(area / static_cast<double>(b.w))),
                                1, side);
  b.y0 = rng.below(side - b.h + 1);
  b.x0 = rng.below(side - b.w + 1);
  return b;
}

// Two corrupted timestamps per series, each with its own block.
struct Corruption {
  std::array<std::size_t, 2> steps{};
  std::array<Block, 2> blocks{};
};

inline Corruption make_corruption(std::size_t C, std::size_t side, double fraction,
                                  std::uint64_t seed) {
  if (C < 2) throw ConfigError("missing-image task needs context >= 2");
  RngStream rng(seed, "corruption");
  const auto perm = rng.permutation(C);
  Corruption c;
  c.steps = {std::min(perm[0], perm[1]), std::max(perm[0], perm[1])};
  for (auto& b : c.blocks) b = corruption_block(side, fraction, rng);
  return c;
}

template <typename T>
HeadResult finetune_missing(Model<T>& m, const std::vector<Sample>& data,
                            const std::vector<std::size_t>& train,
                            const std::vector<std::size_t>& test, const HeadOptions& o) {
  FrozenModel<T> frozen(m);
  const auto& cfg = m.config();
  const std::size_t C = o.context, G = cfg.patches(), D = cfg.hidden, H = cfg.image_size;
  const std::size_t dim = cfg.image_dim();
  const auto tr = pick_instances(data, train, C, o.gap_min, o.gap_max, o.train_instances,
                                 derive_seed(o.seed, 1));
  const auto te = pick_instances(data, test, C, o.gap_min, o.gap_max, o.test_instances,
                                 derive_seed(o.seed, 2));
  // Embedding rows (instance, corrupted k, patch g) and matching truth patches.
  struct Set {
    Tensor<float> emb;    // [N*2*G x D]
    Tensor<float> truth;  // [N*2*G x P], normalized
  };
  auto build = [&](const std::vector<InstanceRef>& refs, std::uint64_t salt) {
    Set s{Tensor<float>({refs.size() * 2 * G, D}), Tensor<float>({refs.size() * 2 * G, cfg.patch_dim()})};
    for_chunks(refs.size(), o.batch, [&](std::size_t lo, std::size_t hi) {
      auto b = instance_batch(m, data, refs, lo, hi, false);
      Tensor<T> imgs = b.images.value();
      Tensor<T> clean({(hi - lo) * 2, dim});
      std::vector<std::int64_t> emb_rows;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto cor = make_corruption(C, H, o.corruption,
                                         derive_seed(o.seed, salt, refs[i].sample,
                                                     refs[i].inst.context.front()));
        for (std::size_t k = 0; k < 2; ++k) {
          const std::size_t row = (i - lo) * C + cor.steps[k];
          std::copy(imgs.data() + row * dim, imgs.data() + (row + 1) * dim,
                    clean.data() + ((i - lo) * 2 + k) * dim);
          const auto& blk = cor.blocks[k];
          const T zero = static_cast<T>((0.0 - kImageOffset) / kImageScale);
          for (std::size_t band = 0; band < kBands; ++band)
            for (std::size_t y = blk.y0; y < blk.y0 + blk.h; ++y)
              for (std::size_t x = blk.x0; x < blk.x0 + blk.w; ++x)
                imgs[row * dim + (band * H + y) * H + x] = zero;
          for (std::size_t g = 0; g < G; ++g)
            emb_rows.push_back(static_cast<std::int64_t>(row * G + g));
        }
      }
      b.images = constant(std::move(imgs));
      const auto e = m.encode(b, TokenLayout::full(b.series, C, G), MaskSite::Pixels);
      copy_rows(gather_rows(e.emb, emb_rows).value().template cast<float>(), 0, emb_rows.size(),
                s.emb, lo * 2 * G);
      copy_rows(patchify(constant(clean), H, cfg.patch).value().template cast<float>(), 0,
                emb_rows.size(), s.truth, lo * 2 * G);
    });
    return s;
  };
  const auto str = build(tr, 11), ste = build(te, 12);

  m.reinit_decoder(derive_seed(o.seed, 3));
  m.params().set_trainable("dec.", true);
  OptimizerOptions oo;
  oo.kind = OptimizerKind::Adam;
  oo.lr = o.lr;
  const auto params = trainable(m.params());
  Optimizer<T> opt(oo, params);
  HeadResult r;
  r.head = HeadKind::MissingImage;
  r.framework = m.kind();
  auto slots = [&](std::size_t n) {
    std::vector<std::int64_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::int64_t>(i);
    return v;
  };
  r.train_loss = train_head<T>(tr.size(), o.epochs ? o.epochs : default_head_epochs(r.head), o.batch,
                               o.seed, opt, params, [&](const std::vector<std::size_t>& idx) {
                                 auto pred = m.dec(detail::rows_of<T>(str.emb, idx, 2 * G),
                                                   slots(idx.size() * 2 * G));
                                 return mse(pred, detail::rows_of<T>(str.truth, idx, 2 * G));
                               });
  std::vector<double> p, t;
  const double dn = kImageScale * kDnPerReflectance;
  for_chunks(te.size(), o.batch, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> idx;
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    const auto pred = m.dec(detail::rows_of<T>(ste.emb, idx, 2 * G), slots(idx.size() * 2 * G)).value();
    for (std::size_t k = 0; k < pred.numel(); ++k) {
      p.push_back(static_cast<double>(pred[k]) * dn);
      t.push_back(static_cast<double>(ste.truth[lo * 2 * G * cfg.patch_dim() + k]) * dn);
    }
  });
  const auto level = std::to_string(static_cast<int>(std::lround(o.corruption * 100))) + "%";
  r.metrics.push_back({"missing image MSE", level, mse(p, t), te.size()});
  m.params().set_trainable("dec.", false);
  return r;
}

// ---------------------------------------------------------------------------
// Future image forecasting
// ---------------------------------------------------------------------------

template <typename T>
HeadResult finetune_future_image(Model<T>& m, const std::vector<Sample>& data,
                                 const std::vector<std::size_t>& train,
                                 const std::vector<std::size_t>& test, const HeadOptions& o) {
  require_forecasting(m.kind(), to_string(HeadKind::FutureImage));
  FrozenModel<T> frozen(m);
  const auto& cfg = m.config();
  const std::size_t C = o.context, G = cfg.patches(), D = cfg.hidden, H = cfg.image_size;
  const auto tr = pick_instances(data, train, C, o.gap_min, o.gap_max, o.train_instances,
                                 derive_seed(o.seed, 1));
  const auto te = pick_instances(data, test, C, o.gap_min, o.gap_max, o.test_instances,
                                 derive_seed(o.seed, 2));
  struct Set {
    Tensor<float> tokens;  // [N*G x D]
    Tensor<float> truth;   // [N*G x P], normalized
    std::vector<int> gaps;
  };
  auto build = [&](const std::vector<InstanceRef>& refs) {
    Set s{Tensor<float>({refs.size() * G, D}), Tensor<float>({refs.size() * G, cfg.patch_dim()}), {}};
    for_chunks(refs.size(), o.batch, [&](std::size_t lo, std::size_t hi) {
      const auto b = instance_batch(m, data, refs, lo, hi, true);
      const auto e = m.encode(b, TokenLayout::full(b.series, C, G), MaskSite::Pixels);
      copy_rows(m.forecast_last(e, b).value().template cast<float>(), 0, b.series * G, s.tokens,
                lo * G);
      copy_rows(patchify(constant(b.targets), H, cfg.patch).value().template cast<float>(), 0,
                b.series * G, s.truth, lo * G);
    });
    for (const auto& r : refs) s.gaps.push_back(r.inst.gap);
    return s;
  };
  const auto str = build(tr), ste = build(te);

  m.reinit_decoder(derive_seed(o.seed, 3));
  m.params().set_trainable("dec.", true);
  OptimizerOptions oo;
  oo.kind = OptimizerKind::Adam;
  oo.lr = o.lr;
  const auto params = trainable(m.params());
  Optimizer<T> opt(oo, params);
  auto slots = [&](std::size_t n) {
    std::vector<std::int64_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::int64_t>(i);
    return v;
  };
  HeadResult r;
  r.head = HeadKind::FutureImage;
  r.framework = m.kind();
  r.train_loss = train_head<T>(tr.size(), o.epochs ? o.epochs : default_head_epochs(r.head), o.batch,
                               o.seed, opt, params, [&](const std::vector<std::size_t>& idx) {
                                 auto pred = m.dec(detail::rows_of<T>(str.tokens, idx, G),
                                                   slots(idx.size() * G));
                                 return mse(pred, detail::rows_of<T>(str.truth, idx, G));
                               });
  const double dn = kImageScale * kDnPerReflectance;
  const std::size_t P = cfg.patch_dim();
  std::vector<double> err;
  for_chunks(te.size(), o.batch, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> idx;
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    const auto pred = m.dec(detail::rows_of<T>(ste.tokens, idx, G), slots(idx.size() * G)).value();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      double s = 0;
      for (std::size_t j = 0; j < G * P; ++j) {
        const double d = (static_cast<double>(pred[k * G * P + j]) -
                          ste.truth[(lo + k) * G * P + j]) * dn;
        s += d * d;
      }
      err.push_back(s / static_cast<double>(G * P));
    }
  });
  detail::bucket_metrics(r, "future image MSE", err, ste.gaps);
  m.params().set_trainable("dec.", false);
  return r;
}

}  // namespace civsf
