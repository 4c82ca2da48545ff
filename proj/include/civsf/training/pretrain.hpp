#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "civsf/data/datamodel.hpp"
#include "civsf/errors.hpp"
#include "civsf/harness/checkpoint.hpp"
#include "civsf/masking.hpp"
#include "civsf/model/model.hpp"
#include "civsf/numerics/optim.hpp"
#include "civsf/numerics/rng.hpp"
#include "civsf/training/model_io.hpp"

namespace civsf {

enum class Phase : std::size_t { ImageMr = 0, WeatherMr = 1, SeriesMr = 2, Forecast = 3 };

inline constexpr std::array<Phase, 4> kPhases{Phase::ImageMr, Phase::WeatherMr,
                                              Phase::SeriesMr, Phase::Forecast};

inline std::string phase_name(Phase p) {
  static const char* names[] = {"1a", "1b", "1c", "2"};
  return names[static_cast<std::size_t>(p)];
}

// Epochs per phase (1a, 1b, 1c, 2).
struct PhasePlan {
  std::array<std::size_t, 4> epochs{};

  std::size_t operator[](Phase p) const { return epochs[static_cast<std::size_t>(p)]; }
  std::size_t total() const { return epochs[0] + epochs[1] + epochs[2] + epochs[3]; }

  std::string str() const {
    return std::to_string(epochs[0]) + "," + std::to_string(epochs[1]) + "," +
           std::to_string(epochs[2]) + "," + std::to_string(epochs[3]);
  }
};

// Forecasting frameworks spend the last `phase2` epochs in phase 2. Of the
// rest, multimodal frameworks give a fifth to weather reconstruction; the
// remainder splits 2:3 between image and series reconstruction.
inline PhasePlan make_phase_plan(FrameworkKind kind, std::size_t total, std::size_t phase2) {
  PhasePlan p;
  const std::size_t p2 = is_forecasting(kind) ? phase2 : 0;
  if (p2 > total) {
    throw ConfigError("phase2_epochs " + std::to_string(phase2) + " exceeds epochs " +
                      std::to_string(total));
  }
  const std::size_t p1 = total - p2;
  const std::size_t p1b = uses_weather(kind) ? p1 / 5 : 0;
  const std::size_t rest = p1 - p1b;
  p.epochs = {rest * 2 / 5, p1b, rest - rest * 2 / 5, p2};
  return p;
}

struct PretrainOptions {
  ModelConfig model;
  std::size_t context = 6;
  double mask_ratio = 0.5;
  double weather_mask_ratio = 0.5;
  int gap_min = 1;
  int gap_max = 150;
  std::size_t epochs = 80;
  std::size_t phase2_epochs = 30;
  std::size_t batch = 16;
  double lr = 1e-3;
  double phase2_lr = 1e-4;  // forecasting refines an already pretrained encoder
  LossScope loss_scope = LossScope::Full;
  double next_weight = 1.0;
  double k_weight = 1.0;
  bool resample_masks = true;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  Phase phase = Phase::ImageMr;
  std::size_t epoch = 0;  // 0 = loss of the untouched model, before any update
  double loss = 0.0;
  double seconds = 0.0;
  std::vector<int> gaps;  // phase 2: forecast horizon of every instance
};

inline std::string csv_header() { return "epoch,phase,framework,loss,seconds"; }

inline std::string csv_row(const EpochRecord& r, FrameworkKind kind) {
  std::ostringstream os;
  os << r.epoch << "," << phase_name(r.phase) << "," << to_string(kind) << ","
     << std::setprecision(9) << r.loss << "," << std::setprecision(4) << r.seconds;
  return os.str();
}

// Parameter prefixes updated in each phase.
inline std::vector<std::string> phase_prefixes(Phase p) {
  switch (p) {
    case Phase::ImageMr: return {"vit.", "dec."};
    case Phase::WeatherMr: return {"wenc.", "wrec."};
    case Phase::SeriesMr: return {"vit.", "dec.", "doy.", "fusion.", "wenc.", "mmrec."};
    case Phase::Forecast:
      return {"vit.", "dec.", "doy.", "fusion.", "wenc.", "delta.", "forecast."};
  }
  return {};
}

// Runs the phases of one framework over the training samples. Every random
// choice (instances, masks, order) is derived from (seed, phase, epoch,
// sample), so a run resumed from a saved state continues bitwise
// identically.
template <typename T = float>
class Pretrainer {
 public:
  // Return false to stop after the reported epoch.
  using Callback = std::function<bool(const EpochRecord&)>;

  Pretrainer(Model<T>& model, const std::vector<Sample>& data,
             std::vector<std::size_t> train, PretrainOptions opts)
      : model_(model), data_(data), train_(std::move(train)), opts_(opts) {
    plan_ = make_phase_plan(model.kind(), opts_.epochs, opts_.phase2_epochs);
    if (opts_.batch == 0) throw ConfigError("batch must be >= 1");
    if (train_.empty()) throw ConfigError("no training samples");
    if (opts_.context < 2 && is_forecasting(model.kind())) {
      throw ConfigError("forecasting needs context >= 2");
    }
    build_uniform_mask(opts_.context, opts_.model.patches(), opts_.mask_ratio, 0);
    for (std::size_t i : train_) {
      if (i >= data_.size()) throw RangeError("training index " + std::to_string(i));
    }
  }

  const PhasePlan& plan() const { return plan_; }
  bool finished() const { return phase_ >= 4; }

  // Runs remaining epochs; returns the records produced by this call.
  std::vector<EpochRecord> run(const Callback& on_epoch = {}) {
    std::vector<EpochRecord> out;
    while (phase_ < 4) {
      const Phase ph = kPhases[phase_];
      const std::size_t n = plan_[ph];
      if (n == 0) {
        ++phase_;
        continue;
      }
      require_dependencies(ph);
      enter_phase(ph);
      bool keep_going = true;
      while (epoch_ <= n && keep_going) {
        auto rec = run_epoch(ph, epoch_);
        out.push_back(rec);
        ++epoch_;
        if (on_epoch) keep_going = on_epoch(rec);
      }
      if (epoch_ > n) {
        done_[phase_] = true;
        ++phase_;
        epoch_ = 0;
        opt_.reset();
      }
      if (!keep_going) break;
    }
    model_.params().set_all_trainable(true);
    return out;
  }

  // Model parameters, schedule position and optimizer moments.
  Checkpoint state() const {
    Checkpoint ck = model_checkpoint(model_);
    ck.set("phase_epochs", plan_.str());
    std::string done;
    for (std::size_t i = 0; i < 4; ++i)
      if (done_[i]) done += (done.empty() ? "" : ",") + phase_name(kPhases[i]);
    ck.set("phases_done", done);
    ck.set("position", std::to_string(phase_) + "," + std::to_string(epoch_));
    if (opt_) {
      ck.set("opt.steps", std::to_string(opt_->steps()));
      for (const auto& s : opt_->slots()) {
        ck.tensors.emplace_back("opt.m." + s.name, s.m.template cast<float>());
        ck.tensors.emplace_back("opt.v." + s.name, s.v.template cast<float>());
      }
    }
    return ck;
  }

  void restore(const Checkpoint& ck) {
    load_parameters(model_, ck);
    if (ck.get("phase_epochs") != plan_.str()) {
      throw ConfigError("checkpoint schedule " + ck.get("phase_epochs") +
                        " differs from the configured " + plan_.str());
    }
    done_ = {};
    std::istringstream done(ck.get("phases_done"));
    std::string name;
    while (std::getline(done, name, ','))
      for (std::size_t i = 0; i < 4; ++i)
        if (phase_name(kPhases[i]) == name) done_[i] = true;
    const auto& pos = ck.get("position");
    const auto comma = pos.find(',');
    phase_ = std::stoul(pos.substr(0, comma));
    epoch_ = std::stoul(pos.substr(comma + 1));
    opt_.reset();
    if (phase_ < 4 && epoch_ > 0) {
      enter_phase(kPhases[phase_]);
      opt_->set_steps(std::stoll(ck.get_or("opt.steps", "0")));
      for (auto& s : opt_->slots()) {
        const auto* m = ck.find("opt.m." + s.name);
        const auto* v = ck.find("opt.v." + s.name);
        if (!m || !v) throw DataError("checkpoint lacks optimizer state for " + s.name);
        s.m = m->template cast<T>();
        s.v = v->template cast<T>();
      }
    }
  }

  struct Item {
    std::size_t sample = 0;
    TrainingInstance inst;
    MaskPlan plan;
    WeatherMask wmask;
  };

  std::vector<Item> epoch_items(Phase ph, std::size_t epoch) const {
    const auto pi = static_cast<std::uint64_t>(ph);
    std::vector<Item> items;
    for (std::size_t i : train_) {
      const Sample& s = data_[i];
      Item it;
      it.sample = i;
      const std::uint64_t mask_epoch = opts_.resample_masks ? epoch : 0;
      if (ph == Phase::WeatherMr) {
        it.wmask = build_weather_mask(s.weather.days, opts_.weather_mask_ratio,
                                      derive_seed(opts_.seed, 200 + pi, mask_epoch, i));
        items.push_back(std::move(it));
        continue;
      }
      const auto seed = derive_seed(opts_.seed, pi, epoch, i);
      auto insts = build_instances(s, opts_.context, opts_.gap_min, opts_.gap_max, seed);
      if (insts.empty()) continue;
      RngStream pick(seed, "pick");
      it.inst = insts[pick.below(insts.size())];
      it.plan = build_uniform_mask(opts_.context, opts_.model.patches(), opts_.mask_ratio,
                                   derive_seed(opts_.seed, 100 + pi, mask_epoch, i));
      if (ph == Phase::SeriesMr && model_.has_weather()) {
        it.wmask = build_weather_mask(s.weather.days, opts_.weather_mask_ratio,
                                      derive_seed(opts_.seed, 200 + pi, mask_epoch, i));
      }
      items.push_back(std::move(it));
    }
    if (items.empty()) {
      throw DataError("no training sample has " + std::to_string(opts_.context + 1) +
                      " images with a target gap in [" + std::to_string(opts_.gap_min) + ", " +
                      std::to_string(opts_.gap_max) + "]");
    }
    RngStream order(derive_seed(opts_.seed, pi, epoch), "order");
    order.shuffle(items);
    return items;
  }

  // Loss of one batch for `ph`; exposed for invariance tests.
  Var<T> batch_loss(Phase ph, const std::vector<const Item*>& items) const {
    const bool weather = model_.has_weather();
    if (ph == Phase::WeatherMr) {
      std::size_t days = 0;
      for (const auto* it : items) days = std::max(days, data_[it->sample].weather.days);
      Tensor<T> in({items.size() * days, kWeatherInputs});
      Tensor<T> truth({items.size() * days, kWeatherChannels});
      for (std::size_t b = 0; b < items.size(); ++b) {
        const auto& w = data_[items[b]->sample].weather;
        fill_weather_input<T>(w, &items[b]->wmask, days, in.data() + b * days * kWeatherInputs);
        const auto t = weather_truth<T>(w, days);
        std::copy(t.vec().begin(), t.vec().end(),
                  truth.vec().begin() + static_cast<std::ptrdiff_t>(b * days * kWeatherChannels));
      }
      return model_.loss_weather_mr(constant(std::move(in)), truth, items.size(), days);
    }
    std::vector<SeriesRef> refs;
    std::vector<MaskPlan> plans;
    for (const auto* it : items) {
      SeriesRef r;
      r.sample = &data_[it->sample];
      r.images = it->inst.context;
      if (ph == Phase::Forecast) r.target = it->inst.target;
      if (ph == Phase::SeriesMr && weather) r.weather_mask = &it->wmask;
      refs.push_back(std::move(r));
      plans.push_back(it->plan);
    }
    const TokenLayout layout(plans, opts_.model.patches());
    const bool with_weather = weather && ph != Phase::ImageMr;
    const auto b = make_batch<T>(refs, with_weather);
    switch (ph) {
      case Phase::ImageMr: return model_.loss_image_mr(b, layout, opts_.loss_scope);
      case Phase::SeriesMr: {
        if (!weather) return model_.loss_series_mr(b, layout, opts_.loss_scope);
        Tensor<T> truth({b.series * b.steps, kWeatherChannels});
        for (std::size_t s = 0; s < b.series; ++s) {
          const auto& w = refs[s].sample->weather;
          for (std::size_t t = 0; t < b.steps; ++t) {
            const auto d = static_cast<std::size_t>(b.doys[s][t] - w.start_doy);
            for (std::size_t c = 0; c < kWeatherChannels; ++c)
              truth.at(s * b.steps + t, c) =
                  static_cast<T>((w.at(d, c) - kWeatherOffset[c]) / kWeatherScale[c]);
          }
        }
        return model_.loss_series_mr(b, layout, opts_.loss_scope, &truth);
      }
      case Phase::Forecast:
        return model_.loss_forecast(b, layout, opts_.loss_scope, static_cast<T>(opts_.next_weight),
                                    static_cast<T>(opts_.k_weight));
      case Phase::WeatherMr: break;
    }
    throw ContractError("unreachable phase");
  }

 private:
  void require_dependencies(Phase ph) const {
    auto need = [&](Phase dep) {
      if (plan_[dep] > 0 && !done_[static_cast<std::size_t>(dep)]) {
        throw DependencyError("phase " + phase_name(ph) + " needs phase " + phase_name(dep) +
                              " to have run first");
      }
    };
    if (ph == Phase::SeriesMr) {
      need(Phase::ImageMr);
      need(Phase::WeatherMr);
    }
    if (ph == Phase::Forecast) {
      need(Phase::ImageMr);
      need(Phase::WeatherMr);
      need(Phase::SeriesMr);
    }
  }

  void enter_phase(Phase ph) {
    auto& store = model_.params();
    store.set_all_trainable(false);
    for (const auto& prefix : phase_prefixes(ph)) store.set_trainable(prefix, true);
    if (!opt_) {
      std::vector<std::pair<std::string, Var<T>>> params;
      for (const auto& e : store.entries())
        if (e.second.requires_grad()) params.push_back(e);
      OptimizerOptions o;
      o.kind = OptimizerKind::Adam;
      o.lr = ph == Phase::Forecast ? opts_.phase2_lr : opts_.lr;
      opt_ = std::make_unique<Optimizer<T>>(o, params);
    }
  }

  EpochRecord run_epoch(Phase ph, std::size_t epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto items = epoch_items(ph, epoch);
    EpochRecord rec;
    rec.phase = ph;
    rec.epoch = epoch;
    double total = 0;
    auto& store = model_.params();
    std::vector<bool> flags;
    if (epoch == 0) {
      for (const auto& e : store.entries()) flags.push_back(e.second.requires_grad());
      store.set_all_trainable(false);
    }
    for (std::size_t start = 0; start < items.size(); start += opts_.batch) {
      std::vector<const Item*> chunk;
      for (std::size_t i = start; i < std::min(items.size(), start + opts_.batch); ++i) {
        chunk.push_back(&items[i]);
        if (ph == Phase::Forecast) rec.gaps.push_back(items[i].inst.gap);
      }
      auto loss = batch_loss(ph, chunk);
      const double v = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(v)) {
        throw NumericError("phase " + phase_name(ph) + " diverged at epoch " +
                           std::to_string(epoch) + " (loss " + std::to_string(v) + ")");
      }
      total += v * static_cast<double>(chunk.size());
      if (epoch == 0) continue;
      store.zero_grad();
      backward(loss);
      try {
        opt_->step();
      } catch (const NumericError& e) {
        throw NumericError("phase " + phase_name(ph) + " epoch " + std::to_string(epoch) +
                           ": " + e.what());
      }
    }
    if (epoch == 0) {
      std::size_t i = 0;
      for (auto& e : store.entries()) {
        auto v = e.second;
        v.set_requires_grad(flags[i++]);
      }
    }
    rec.loss = total / static_cast<double>(items.size());
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  Model<T>& model_;
  const std::vector<Sample>& data_;
  std::vector<std::size_t> train_;
  PretrainOptions opts_;
  PhasePlan plan_;
  std::size_t phase_ = 0;
  std::size_t epoch_ = 0;
  std::array<bool, 4> done_{};
  std::unique_ptr<Optimizer<T>> opt_;
};

// Fresh model of `kind` trained through its full schedule.
template <typename T = float>
struct PretrainResult {
  std::unique_ptr<Model<T>> model;
  std::vector<EpochRecord> log;
  PhasePlan plan;
};

template <typename T = float>
PretrainResult<T> run_framework(FrameworkKind kind, const std::vector<Sample>& data,
                                const std::vector<std::size_t>& train,
                                const PretrainOptions& opts,
                                const typename Pretrainer<T>::Callback& on_epoch = {}) {
  PretrainResult<T> r;
  r.model = std::make_unique<Model<T>>(opts.model, kind, derive_seed(opts.seed, 7));
  Pretrainer<T> trainer(*r.model, data, train, opts);
  r.plan = trainer.plan();
  r.log = trainer.run(on_epoch);
  return r;
}

}  // namespace civsf
