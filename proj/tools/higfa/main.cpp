#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "higfa/allocator.hpp"
#include "higfa/config.hpp"
#include "higfa/error.hpp"
#include "higfa/harness.hpp"
#include "higfa/selftest.hpp"

namespace fs = std::filesystem;
using namespace higfa;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr std::uint64_t kDefaultSeed = 7;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
};

void log(const Common& c, const std::string& msg) {
  if (!c.quiet) std::cerr << "[higfa] " << msg << '\n';
}

std::uint64_t seed_of(const Common& c) {
  if (!c.seed) log(c, "--seed not given, using default " + std::to_string(kDefaultSeed));
  return c.seed.value_or(kDefaultSeed);
}

config::CliConfig load(const Common& c, std::uint64_t seed) {
  auto logger = [&](const std::string& m) { log(c, m); };
  config::CliConfig cfg;
  if (c.config.empty()) {
    log(c, "no --config given, using defaults for every key");
    cfg = config::parse_config("", {});
  } else {
    cfg = config::load_config(c.config, logger);
  }
  cfg.apply_seed(seed);
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f << text;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string loss_csv(const std::vector<double>& loss) {
  std::string s = "epoch,loss\n";
  for (std::size_t i = 0; i < loss.size(); ++i) s += std::to_string(i) + ',' + fmt(loss[i]) + '\n';
  return s;
}

void add_common(CLI::App* sub, Common& c, bool needs_out, bool needs_config = true) {
  if (needs_config) sub->add_option("--config", c.config, "Configuration file ([section] key = value)");
  sub->add_option("--seed", c.seed, "Seed for every random choice of the stage");
  if (needs_out) sub->add_option("--out", c.out, "Output directory")->required();
  sub->add_flag("-q,--quiet", c.quiet, "Suppress progress logging");
}

int cmd_gen_dataset(const Common& c) {
  const auto seed = seed_of(c);
  auto cfg = load(c, seed);
  const auto d = synthbench::generate_benchmark(cfg.experiment.benchmark);
  synthbench::save_dataset(d, c.out);
  log(c, "wrote " + std::to_string(d.size()) + " images to " + c.out);
  return 0;
}

int cmd_train_classifier(const Common& c, const std::string& data) {
  const auto seed = seed_of(c);
  auto cfg = load(c, seed);
  const auto d = synthbench::load_dataset(data);
  auto res = harness::train_guidance_classifier(d, cfg.experiment.training, seed, cfg.experiment.few_shot_k);
  fs::create_directories(c.out);
  res.model.save(fs::path(c.out) / "classifier.bin");
  write_text(fs::path(c.out) / "classifier_loss.csv", loss_csv(res.loss));
  nlohmann::ordered_json m;
  m["validation_accuracy"] = res.heldout_accuracy;
  m["epochs"] = res.loss.size();
  write_text(fs::path(c.out) / "classifier_metrics.json", m.dump(2) + "\n");
  log(c, "guidance classifier validation accuracy " + fmt(res.heldout_accuracy));
  return 0;
}

int cmd_train_denoiser(const Common& c, const std::string& data) {
  const auto seed = seed_of(c);
  auto cfg = load(c, seed);
  const auto d = synthbench::load_dataset(data);
  auto res = harness::train_conditional_denoiser(d, cfg.experiment.training, seed, cfg.experiment.few_shot_k);
  fs::create_directories(c.out);
  res.model.save(fs::path(c.out) / "denoiser.bin");
  write_text(fs::path(c.out) / "denoiser_loss.csv", loss_csv(res.loss));
  log(c, "denoiser final epoch loss " + fmt(res.loss.empty() ? 0.0 : res.loss.back()));
  return 0;
}

int cmd_augment(const Common& c, const std::string& data, const std::string& models_dir,
                const std::optional<std::string>& mode_name) {
  const auto seed = seed_of(c);
  auto cfg = load(c, seed);
  const harness::Mode mode = mode_name ? harness::parse_mode(*mode_name) : cfg.augment_mode;
  const auto d = synthbench::load_dataset(data);
  harness::ModelBundle bundle;
  if (models_dir.empty()) {
    log(c, "no --models given, training denoiser and guidance classifier");
    bundle = harness::train_models(d, cfg.experiment.training, seed, cfg.experiment.few_shot_k);
  } else {
    bundle.schedule = harness::training_schedule(cfg.experiment.training);
    bundle.decoder = models::Decoder::identity();
    bundle.denoiser = models::Denoiser::load(fs::path(models_dir) / "denoiser.bin");
    bundle.classifier = models::Classifier::load(fs::path(models_dir) / "classifier.bin");
  }
  const auto real = harness::real_train_items(d, cfg.experiment.few_shot_k);
  const auto aug =
      harness::augment_dataset(real, bundle, cfg.experiment.guidance, mode, seed, cfg.experiment.augment);

  const fs::path out(c.out);
  nlohmann::ordered_json manifest;
  manifest["mode"] = harness::mode_name(mode);
  manifest["seed"] = seed;
  auto items = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < aug.samples.size(); ++i) {
    const auto& s = aug.samples[i];
    const std::string img = "images/" + std::to_string(s.label) + "/" + s.id + ".pgm";
    const std::string con = "contours/" + s.id + ".pgm";
    const std::string prov = "contours/" + s.id + ".json";
    const std::string tr = "traces/" + s.id + ".csv";
    fs::create_directories((out / img).parent_path());
    fs::create_directories(out / "contours");
    fs::create_directories(out / "traces");
    write_pgm(out / img, s.image);
    write_pgm(out / con, aug.contours[i].to_image());
    write_text(out / prov, contour::provenance_json(aug.contours[i]) + "\n");
    aug.traces[i].write_csv(out / tr);
    items.push_back({{"id", s.id},
                     {"label", s.label},
                     {"image", img},
                     {"contour", con},
                     {"provenance", prov},
                     {"trace", tr},
                     {"cumulative_s_cls", aug.traces[i].cumulative_s_cls()}});
  }
  manifest["items"] = std::move(items);
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  log(c, "wrote " + std::to_string(aug.samples.size()) + " samples to " + c.out);
  return 0;
}

void write_report(const harness::ExperimentReport& report, const fs::path& dir, const Common& c,
                  int warmup_steps, const std::string& trace_variant) {
  fs::create_directories(dir);
  write_text(dir / "report.json", report.to_json());
  write_text(dir / "cells.csv", report.cells_csv());
  std::vector<guidance::GuidanceTrace> traces;
  if (auto it = report.traces.find(trace_variant); it != report.traces.end()) traces = it->second;
  harness::PlotOptions po;
  po.warmup_steps = warmup_steps;
  harness::emit_plots(report, traces, dir / "plots", po);
  for (const auto& [stage, secs] : report.stage_seconds) log(c, "stage " + stage + ": " + fmt(secs) + " s");
  for (const auto& a : report.medians) {
    log(c, a.variant + " @ ratio " + fmt(a.ratio) + ": median " + (a.median ? fmt(*a.median) : "n/a") + " over " +
               std::to_string(a.count) + " seeds");
  }
}

int cmd_eval(const Common& c) {
  const auto seed = seed_of(c);
  auto cfg = load(c, seed);
  auto ex = cfg.experiment;
  ex.variants.clear();
  for (auto m : cfg.modes) ex.variants.push_back({m, {}, {}, {}});
  auto report = harness::run_experiment(ex, nullptr, [&](const std::string& m) { log(c, m); });
  write_report(report, c.out, c, ex.guidance.warmup_steps, "higfa");
  return 0;
}

int cmd_ablate(const Common& c) {
  const auto seed = seed_of(c);
  auto cfg = load(c, seed);
  harness::ExperimentCache cache;
  auto progress = [&](const std::string& m) { log(c, m); };
  const fs::path out(c.out);

  auto scls = cfg.experiment;
  scls.variants.clear();
  for (bool adaptive : {true, false}) {
    for (double s : cfg.s_cls_sweep) scls.variants.push_back({harness::Mode::higfa, s, {}, adaptive});
  }
  log(c, "s_cls sweep");
  write_report(harness::run_experiment(scls, &cache, progress), out / "scls", c, scls.guidance.warmup_steps,
               "higfa[s_cls=" + fmt(scls.guidance.s_cls) + ",adaptive=1]");

  auto warm = cfg.experiment;
  warm.variants.clear();
  for (int w : cfg.warmup_sweep) warm.variants.push_back({harness::Mode::higfa, {}, w, {}});
  log(c, "warm-up sweep");
  write_report(harness::run_experiment(warm, &cache, progress), out / "warmup", c, warm.guidance.warmup_steps,
               "higfa[warmup=" + std::to_string(warm.guidance.warmup_steps) + "]");

  auto ratio = cfg.experiment;
  ratio.ratios = cfg.ratio_sweep;
  ratio.variants = {{harness::Mode::none, {}, {}, {}}, {harness::Mode::higfa, {}, {}, {}}};
  log(c, "ratio sweep");
  write_report(harness::run_experiment(ratio, &cache, progress), out / "ratio", c, ratio.guidance.warmup_steps,
               "higfa");
  return 0;
}

int cmd_trace_plot(const Common& c, const std::vector<std::string>& inputs, int warmup) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      for (const auto& e : fs::directory_iterator(in)) {
        if (e.path().extension() == ".csv") files.push_back(e.path());
      }
    } else {
      files.push_back(in);
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<guidance::GuidanceTrace> traces;
  for (const auto& f : files) traces.push_back(guidance::GuidanceTrace::read_csv(f));
  harness::ExperimentReport empty;
  empty.notes.push_back("trace-only plot");
  harness::PlotOptions po;
  po.warmup_steps = warmup;
  const auto written = harness::emit_plots(empty, traces, c.out, po);
  log(c, "read " + std::to_string(traces.size()) + " traces, wrote " + std::to_string(written.size()) + " files");
  return 0;
}

int cmd_selftest(const Common& c) {
  const auto results = run_selftest(seed_of(c));
  bool ok = true;
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name;
    if (!r.pass) std::cout << ": " << r.detail;
    std::cout << '\n';
    ok = ok && r.pass;
  }
  return ok ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Hierarchically guided diffusion augmentation on a synthetic fine-grained benchmark"};
  app.require_subcommand(1);

  Common c;
  std::string data, models_dir;
  std::optional<std::string> mode;
  std::vector<std::string> trace_inputs;
  int warmup = 20;

  auto* gen = app.add_subcommand("gen-dataset", "Render the synthetic benchmark to PGM files");
  add_common(gen, c, true);
  auto* tden = app.add_subcommand("train-denoiser", "Train the conditional denoiser");
  add_common(tden, c, true);
  tden->add_option("--data", data, "Dataset directory written by gen-dataset")->required();
  auto* tcls = app.add_subcommand("train-classifier", "Train the guidance classifier");
  add_common(tcls, c, true);
  tcls->add_option("--data", data, "Dataset directory written by gen-dataset")->required();
  auto* aug = app.add_subcommand("augment", "Generate synthetic training images");
  add_common(aug, c, true);
  aug->add_option("--data", data, "Dataset directory written by gen-dataset")->required();
  aug->add_option("--models", models_dir, "Directory with denoiser.bin and classifier.bin");
  aug->add_option("--mode", mode, "none, text_only, text_contour or higfa");
  auto* eval = app.add_subcommand("eval", "Compare guidance modes over seeds");
  add_common(eval, c, true);
  auto* abl = app.add_subcommand("ablate", "s_cls, warm-up and ratio sweeps");
  add_common(abl, c, true);
  auto* tplot = app.add_subcommand("trace-plot", "Plot guidance traces from CSV files");
  add_common(tplot, c, true, false);
  tplot->add_option("traces", trace_inputs, "Trace CSV files or directories")->required();
  tplot->add_option("--warmup", warmup, "Warm-up length to mark");
  auto* self = app.add_subcommand("selftest", "Check invariants and print PASS/FAIL per property");
  add_common(self, c, false, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_dataset(c);
    if (tden->parsed()) return cmd_train_denoiser(c, data);
    if (tcls->parsed()) return cmd_train_classifier(c, data);
    if (aug->parsed()) return cmd_augment(c, data, models_dir, mode);
    if (eval->parsed()) return cmd_eval(c);
    if (abl->parsed()) return cmd_ablate(c);
    if (tplot->parsed()) return cmd_trace_plot(c, trace_inputs, warmup);
    if (self->parsed()) return cmd_selftest(c);
  } catch (const std::exception& e) {
    std::cerr << "higfa: error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
