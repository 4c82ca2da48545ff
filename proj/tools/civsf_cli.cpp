#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "civsf/harness/checkpoint.hpp"
#include "civsf/harness/cli.hpp"
#include "civsf/harness/metrics.hpp"
#include "civsf/harness/ppm.hpp"
#include "civsf/harness/report.hpp"
#include "civsf/masking.hpp"
#include "civsf/training/model_gradcheck.hpp"

using namespace civsf;
namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::string framework;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

// Config file, then --set pairs, then the dedicated flags.
Config effective_config(const Flags& f) {
  Config c;
  if (!f.config.empty()) c.load_file(f.config);
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!f.framework.empty()) c.set("framework", f.framework);
  if (f.seed) c.set("seed", std::to_string(*f.seed));
  if (!f.out.empty()) c.set("out", f.out);
  return c;
}

std::vector<Sample> load_data(const fs::path& path) {
  if (!fs::exists(path)) {
    throw DataError("dataset " + path.string() + " not found (run gen-data first)");
  }
  return load_container(path);
}

std::unique_ptr<Model<float>> load_model(const Config& c) {
  const auto path = checkpoint_path(c);
  if (!fs::exists(path)) throw DataError("checkpoint " + path.string() + " not found");
  return model_from_checkpoint<float>(load_checkpoint(path));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw OutputError("cannot write " + path.string());
}

fs::path out_file(const Config& c, const std::string& name) {
  return fs::path(c.str("out")) / name;
}

int cmd_gen_data(const Config& c) {
  const auto world = world_settings(c);
  const auto header = "# " + provenance_line(c) + "\n";
  const auto seed = c.uint("seed");
  const auto data = gen_dataset(c.size("samples"), world, seed);
  const auto bytes = write_dataset(data, world, seed, data_path(c), header);
  std::cout << "wrote " << data.size() << " samples (" << bytes << " bytes) to "
            << data_path(c).string() << "\n";
  const auto crop_world = crop_world_settings(c);
  const auto crops = gen_dataset(c.size("crop_samples"), crop_world, derive_seed(seed, 1));
  const auto crop_bytes = write_dataset(crops, crop_world, derive_seed(seed, 1), crop_data_path(c), header);
  std::cout << "wrote " << crops.size() << " biweekly samples (" << crop_bytes << " bytes) to "
            << crop_data_path(c).string() << "\n";
  return kExitOk;
}

int cmd_pretrain(const Config& c) {
  const auto kind = parse_framework(c.str("framework"));
  const auto data = load_data(data_path(c));
  const auto parts = split_settings(c, data.size());
  const auto opts = pretrain_settings(c);

  std::unique_ptr<Model<float>> model;
  std::optional<Checkpoint> resume;
  if (!c.str("resume").empty()) {
    resume = load_checkpoint(c.str("resume"));
    model = model_from_checkpoint<float>(*resume);
    if (model->kind() != kind) {
      throw CompatibilityError("resume checkpoint holds " + to_string(model->kind()) +
                               ", configured framework is " + to_string(kind));
    }
  } else {
    model = std::make_unique<Model<float>>(opts.model, kind, derive_seed(opts.seed, 7));
  }
  Pretrainer<float> trainer(*model, data, parts.train, opts);
  if (resume) trainer.restore(*resume);

  const auto log_path = out_file(c, c.str("framework") + ".pretrain.csv");
  fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw OutputError("cannot write " + log_path.string());
  if (!resume) log << "# " << provenance_line(c) << " schedule=" << trainer.plan().str() << "\n"
                   << csv_header() << "\n";

  const auto ck_path = checkpoint_path(c);
  auto save = [&] {
    auto ck = trainer.state();
    stamp_config(ck, c);
    save_checkpoint(ck, ck_path);
  };
  const std::size_t every = c.size("checkpoint_every");
  std::size_t since = 0;
  std::cerr << "pretraining " << to_string(kind) << " on " << parts.train.size()
            << " samples, schedule " << trainer.plan().str() << "\n";
  trainer.run([&](const EpochRecord& r) {
    log << csv_row(r, kind) << "\n" << std::flush;
    std::cerr << "  " << phase_name(r.phase) << " epoch " << r.epoch << " loss " << r.loss << "\n";
    if (r.epoch > 0 && every > 0 && ++since >= every) {
      save();
      since = 0;
    }
    if (r.epoch == trainer.plan()[r.phase]) save();
    return true;
  });
  save();
  std::cout << "checkpoint " << ck_path.string() << "\nlog " << log_path.string() << "\n";
  return kExitOk;
}

HeadResult run_head(Model<float>& m, HeadKind head, const Config& c) {
  const auto h = head_settings(c);
  if (head == HeadKind::CropMap) {
    const auto data = load_data(crop_data_path(c));
    const auto parts = split_settings(c, data.size());
    const auto steps = crop_world_settings(c).biweekly_count;
    return finetune_crop(m, data, parts.train, parts.test, steps, c.size("crop_classes"), h);
  }
  const auto data = load_data(data_path(c));
  const auto parts = split_settings(c, data.size());
  switch (head) {
    case HeadKind::SoilForecast: return finetune_soil_forecast(m, data, parts.train, parts.test, h);
    case HeadKind::SoilEstimate: return finetune_soil_estimate(m, data, parts.train, parts.test, h);
    case HeadKind::MissingImage: return finetune_missing(m, data, parts.train, parts.test, h);
    case HeadKind::FutureImage: return finetune_future_image(m, data, parts.train, parts.test, h);
    case HeadKind::CropMap: break;
  }
  throw ContractError("unreachable head");
}

void write_report(const Config& c, const ReportTable& t, const std::string& stem) {
  write_text(out_file(c, stem + ".txt"), t.to_text());
  write_text(out_file(c, stem + ".csv"), t.to_csv());
}

int cmd_finetune(const Config& c) {
  auto model = load_model(c);
  const auto head = parse_head(c.str("head"));
  const auto r = run_head(*model, head, c);
  const auto stem = to_string(model->kind()) + "." + to_string(head);

  std::string losses = "# " + provenance_line(c) + "\nepoch,loss\n";
  for (std::size_t e = 0; e < r.train_loss.size(); ++e)
    losses += std::to_string(e) + "," + std::to_string(r.train_loss[e]) + "\n";
  write_text(out_file(c, stem + ".finetune.csv"), losses);

  ReportTable t("fine-tuning " + to_string(head) + " on " + to_string(model->kind()));
  t.add_note(provenance_line(c));
  r.add_to(t);
  write_report(c, t, stem);
  std::cout << t.to_text();
  return kExitOk;
}

int cmd_evaluate(const Config& c) {
  auto model = load_model(c);
  ReportTable t("desk-scale evaluation of " + to_string(model->kind()));
  t.add_note(provenance_line(c));
  for (auto head : {HeadKind::SoilForecast, HeadKind::SoilEstimate, HeadKind::CropMap,
                    HeadKind::MissingImage, HeadKind::FutureImage}) {
    if (needs_forecasting(head) && !model->has_forecaster()) continue;
    std::cerr << "  head " << to_string(head) << "\n";
    run_head(*model, head, c).add_to(t);
  }
  const auto stem = to_string(model->kind()) + ".report";
  write_report(c, t, stem);
  const auto ref = render_reference_tables();
  write_text(out_file(c, "reference.txt"), ref.to_text());
  std::cout << t.to_text() << "\n" << ref.to_text();
  return kExitOk;
}

int cmd_forecast(const Config& c) {
  auto model = load_model(c);
  require_forecasting(model->kind(), "forecast");
  const auto data = load_data(data_path(c));
  const auto parts = split_settings(c, data.size());
  if (parts.test.empty()) throw DataError("test split is empty");
  const auto idx = parts.test[c.size("sample") % parts.test.size()];
  const auto& s = data[idx];
  const auto opts = pretrain_settings(c);
  const auto insts = build_instances(s, opts.context, opts.gap_min, opts.gap_max,
                                     derive_seed(opts.seed, 41, idx));
  if (insts.empty()) throw DataError("sample " + std::to_string(idx) + " has no forecast window");
  const auto& inst = insts.front();

  SeriesRef ref;
  ref.sample = &s;
  ref.images = inst.context;
  ref.target = inst.target;
  const auto b = make_batch<float>({ref}, model->has_weather());
  const auto& cfg = model->config();
  const auto e = model->encode(b, TokenLayout::full(1, b.steps, cfg.patches()), MaskSite::Pixels);
  std::vector<std::int64_t> slots(cfg.patches());
  for (std::size_t g = 0; g < slots.size(); ++g) slots[g] = static_cast<std::int64_t>(g);
  const auto img = unpatchify(model->dec(model->forecast_last(e, b), slots), cfg.image_size, cfg.patch)
                       .value();
  std::vector<float> pred(img.numel());
  for (std::size_t i = 0; i < pred.size(); ++i)
    pred[i] = static_cast<float>(img[i] * kImageScale + kImageOffset);

  const auto stamp = provenance_line(c);
  const auto dir = out_file(c, "forecast_" + std::to_string(idx));
  for (std::size_t k = 0; k < inst.context.size(); ++k) {
    const auto t = inst.context[k];
    write_ppm(s.spectral.image(t), s.side(), dir / ("context_" + std::to_string(k) + ".ppm"),
              kTrueColor, {stamp, "doy=" + std::to_string(s.doys[t])});
  }
  const auto truth = s.spectral.image(inst.target);
  write_ppm(truth, s.side(), dir / "target.ppm", kTrueColor,
            {stamp, "doy=" + std::to_string(s.doys[inst.target])});
  write_ppm(pred, s.side(), dir / "forecast.ppm", kTrueColor,
            {stamp, "doy=" + std::to_string(s.doys[inst.target]), "gap=" + std::to_string(inst.gap)});
  std::vector<double> p(pred.begin(), pred.end()), t(truth.begin(), truth.end());
  for (auto& v : p) v *= kDnPerReflectance;
  for (auto& v : t) v *= kDnPerReflectance;
  std::cout << "sample " << idx << " gap " << inst.gap << " days (" << bucketize(inst.gap)
            << "), MSE " << mse(p, t) << " DN^2\nimages in " << dir.string() << "\n";
  return kExitOk;
}

int cmd_inspect_mask(const Config& c) {
  const auto plan = build_uniform_mask(c.size("mask_steps"), c.size("mask_patches"),
                                       c.real("mask_ratio"), c.uint("seed"));
  std::cout << render_mask(plan);
  return kExitOk;
}

int cmd_gradcheck(const Config& c) {
  const auto kind = parse_framework(c.str("framework"));
  ModelGradcheckOptions o;
  o.eps = c.real("gradcheck_eps");
  const double threshold = c.real("gradcheck_threshold");
  double worst = 0;
  for (std::size_t i = 0; i < c.size("gradcheck_seeds"); ++i) {
    const auto r = model_gradcheck(kind, derive_seed(c.uint("seed"), i), o);
    std::cout << "seed " << i << ": max relative error " << r.max_rel_error << " at "
              << r.worst_name << "[" << r.worst_index << "] over " << r.checked
              << " coordinates\n";
    worst = std::max(worst, r.max_rel_error);
  }
  const bool ok = worst <= threshold;
  std::cout << (ok ? "PASS" : "FAIL") << " max relative error " << worst << " (threshold "
            << threshold << ")\n";
  return ok ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causally informed variable-step forecasting toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags flags;
  app.add_option("--config", flags.config, "key=value config file");
  app.add_option("--framework", flags.framework, "sm-mr | mm-mr | sm-vsf | ci-vsf");
  app.add_option("--seed", flags.seed, "run seed");
  app.add_option("--out", flags.out, "output directory");
  app.add_option("--set", flags.sets, "override any config key (key=value)");

  using Handler = int (*)(const Config&);
  const std::vector<std::tuple<const char*, const char*, Handler>> commands{
      {"gen-data", "write the synthetic dataset containers", cmd_gen_data},
      {"pretrain", "run the pretraining schedule of --framework", cmd_pretrain},
      {"finetune", "fine-tune the configured head on a checkpoint", cmd_finetune},
      {"evaluate", "run every compatible head and write report tables", cmd_evaluate},
      {"forecast", "forecast one test image and write PPM panels", cmd_forecast},
      {"inspect-mask", "print a uniform mask plan and its sums", cmd_inspect_mask},
      {"gradcheck", "finite-difference check of the full model", cmd_gradcheck},
  };
  Handler chosen = nullptr;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->callback([&chosen, fn = fn] { chosen = fn; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    return chosen(effective_config(flags));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  }
}
