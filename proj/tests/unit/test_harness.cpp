#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "higfa/error.hpp"
#include "higfa/harness.hpp"
#include "support.hpp"

using namespace higfa;
using namespace higfa::harness;

namespace {

ExperimentConfig tiny_experiment() {
  ExperimentConfig cfg;
  cfg.benchmark.classes = 2;
  cfg.benchmark.per_class = 8;
  cfg.training.inference_steps = 6;
  cfg.training.denoiser_epochs = 2;
  cfg.training.denoiser_hidden = 16;
  cfg.training.pair_augment = 1;
  cfg.training.classifier_epochs = 3;
  cfg.training.downstream_epochs = 3;
  cfg.guidance.warmup_steps = 3;
  cfg.augment.per_image = 2;
  cfg.ratios = {0.0, 0.5};
  cfg.seeds = {1};
  cfg.variants = {{Mode::none, {}, {}, {}}, {Mode::text_contour, {}, {}, {}}, {Mode::higfa, {}, {}, {}}};
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("higfa_harness_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("mode names round-trip") {
  for (Mode m : {Mode::none, Mode::text_only, Mode::text_contour, Mode::higfa}) CHECK(parse_mode(mode_name(m)) == m);
  CHECK_THROWS_AS(parse_mode("cfg"), Error);
}

TEST_CASE("mode guidance switches off the right channels") {
  const guidance::GuidanceConfig base;
  CHECK(mode_guidance(Mode::text_only, base).s_ctl == 0.0);
  CHECK(mode_guidance(Mode::text_only, base).s_cls == 0.0);
  CHECK(mode_guidance(Mode::text_contour, base).s_ctl == base.s_ctl);
  CHECK(mode_guidance(Mode::text_contour, base).s_cls == 0.0);
  CHECK(mode_guidance(Mode::higfa, base).s_cls == base.s_cls);
}

TEST_CASE("variants that sample identically share a key") {
  const guidance::GuidanceConfig base;
  const Variant tc{Mode::text_contour, {}, {}, {}};
  const Variant zero{Mode::higfa, 0.0, {}, {}};
  const Variant five{Mode::higfa, 5.0, {}, {}};
  const Variant fixed{Mode::higfa, 5.0, {}, false};
  CHECK(tc.key(base) == zero.key(base));
  CHECK(five.key(base) == Variant{}.key(base));
  CHECK(fixed.key(base) != five.key(base));
  CHECK(fixed.guidance(base).adaptive == false);
}

TEST_CASE("experiment config validation") {
  auto cfg = tiny_experiment();
  cfg.ratios = {1.5};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_experiment();
  cfg.seeds.clear();
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_experiment();
  cfg.variants.clear();
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("few-shot selection keeps k images per class") {
  const auto d = synthbench::generate_benchmark(4, 16, 6.0, 3);
  const auto items = real_train_items(d, 2);
  CHECK(items.size() == 8);
  for (int c = 0; c < 4; ++c) {
    CHECK(std::count_if(items.begin(), items.end(), [&](const auto& it) { return it.label == c; }) == 2);
  }
  CHECK(real_train_items(d, std::nullopt).size() == d.train.size());
}

TEST_CASE("augmentation gives one trace per sample with matching order") {
  const auto cfg = tiny_experiment();
  ExperimentCache cache;
  const auto state = cache.seed_state(cfg, 1);
  const auto real = real_train_items(state->dataset, std::nullopt);
  const auto aug = augment_dataset(real, state->models, cfg.guidance, Mode::higfa, 9, cfg.augment);
  REQUIRE(aug.samples.size() == real.size() * 2);
  CHECK(aug.traces.size() == aug.samples.size());
  CHECK(aug.contours.size() == aug.samples.size());
  std::set<std::string> ids;
  for (std::size_t i = 0; i < aug.samples.size(); ++i) {
    ids.insert(aug.samples[i].id);
    CHECK(aug.samples[i].label == real[i / 2].label);
    CHECK(aug.samples[i].id == "syn-" + std::to_string(real[i / 2].index) + "-" + std::to_string(i % 2));
    CHECK(aug.traces[i].records.size() == 6);
  }
  CHECK(ids.size() == aug.samples.size());
  CHECK(augment_dataset(real, state->models, cfg.guidance, Mode::none, 9, cfg.augment).samples.empty());

  const auto again = augment_dataset(real, state->models, cfg.guidance, Mode::higfa, 9, cfg.augment);
  for (std::size_t i = 0; i < aug.samples.size(); ++i) CHECK(again.samples[i].image == aug.samples[i].image);
}

TEST_CASE("a warm-up-only run records warm-up rows only") {
  auto cfg = tiny_experiment();
  cfg.guidance.warmup_steps = cfg.training.inference_steps;
  ExperimentCache cache;
  const auto state = cache.seed_state(cfg, 1);
  const auto real = real_train_items(state->dataset, std::nullopt);
  const auto aug = augment_dataset(real, state->models, cfg.guidance, Mode::higfa, 2, cfg.augment);
  for (const auto& tr : aug.traces)
    for (const auto& r : tr.records) {
      CHECK(r.phase == guidance::Phase::warmup);
      CHECK(r.s_cls == 0.0);
    }
}

TEST_CASE("experiment reports are reproducible and complete") {
  const auto cfg = tiny_experiment();
  const auto a = run_experiment(cfg);
  const auto b = run_experiment(cfg);
  CHECK(a.cells_csv() == b.cells_csv());
  CHECK(a.to_json() == b.to_json());
  for (const auto& c : a.cells) {
    INFO(c.variant << " " << c.ratio);
    CHECK(c.error.empty());
    REQUIRE(c.accuracy.has_value());
    CHECK(*c.accuracy >= 0.0);
    CHECK(*c.accuracy <= 1.0);
    if (c.ratio == 0.0 || c.mode == Mode::none) CHECK(c.synthetic == 0);
  }
  CHECK(a.median("none", 0.5).has_value());
  CHECK(a.median("none", 0.5) == a.median("none", 0.0));
  CHECK(a.traces.count("higfa") == 1);
  CHECK(a.stage_seconds.count("total") == 1);

  auto threaded = cfg;
  threaded.seeds = {1, 2};
  threaded.jobs = 2;
  auto serial = threaded;
  serial.jobs = 1;
  CHECK(run_experiment(threaded).cells_csv() == run_experiment(serial).cells_csv());
}

TEST_CASE("cache reuses models and accuracies across experiments") {
  auto cfg = tiny_experiment();
  ExperimentCache cache;
  const auto first = run_experiment(cfg, &cache);
  cfg.variants.push_back({Mode::higfa, 0.0, {}, {}});
  const auto second = run_experiment(cfg, &cache);
  CHECK(second.median("higfa[s_cls=0]", 0.5) == first.median("text_contour", 0.5));
}

TEST_CASE("plots: ratio sweep rows and index") {
  const auto cfg = tiny_experiment();
  const auto report = run_experiment(cfg);
  const auto dir = fresh_dir("plots");
  std::vector<guidance::GuidanceTrace> traces = report.traces.at("higfa");
  const auto files = emit_plots(report, traces, dir, {3, 2});
  CHECK(std::filesystem::exists(dir / "scale_evolution_mean.svg"));
  CHECK(std::filesystem::exists(dir / "scale_evolution_1.svg"));
  CHECK_FALSE(std::filesystem::exists(dir / "scale_evolution_2.svg"));
  CHECK(line_count(slurp(dir / "ratio_sweep.csv")) == 1 + cfg.ratios.size() * cfg.variants.size());
  CHECK(line_count(slurp(dir / "scale_evolution.csv")) == 1 + traces.size() * 6);
  const auto index = nlohmann::json::parse(slurp(dir / "index.json"));
  CHECK(index["skipped"].empty());
  CHECK(index["files"].size() + 1 == files.size());
  CHECK(slurp(dir / "scale_evolution_mean.svg").find("<svg") != std::string::npos);
}

TEST_CASE("plots: an empty trace list skips the scale-evolution chart") {
  const auto report = run_experiment(tiny_experiment());
  const auto dir = fresh_dir("notrace");
  emit_plots(report, {}, dir);
  CHECK_FALSE(std::filesystem::exists(dir / "scale_evolution_mean.svg"));
  const auto index = nlohmann::json::parse(slurp(dir / "index.json"));
  REQUIRE(index["skipped"].size() == 1);
  CHECK(index["skipped"][0]["plot"] == "scale_evolution");
  CHECK(std::filesystem::exists(dir / "ratio_sweep.svg"));
  CHECK_THROWS_AS(emit_plots(ExperimentReport{}, {}, fresh_dir("empty")), Error);
}

TEST_CASE("average trace is the stepwise mean") {
  guidance::GuidanceTrace a, b;
  a.records = {{0, 999, guidance::Phase::warmup, 7.5, 1.0, 0.0, std::nullopt},
               {1, 500, guidance::Phase::dynamic, 4.0, 0.4, 2.0, 0.5}};
  b.records = {{0, 999, guidance::Phase::warmup, 7.5, 1.0, 0.0, std::nullopt},
               {1, 500, guidance::Phase::dynamic, 6.0, 0.8, 1.0, 0.7}};
  const std::vector<guidance::GuidanceTrace> both{a, b};
  const auto m = average_trace(both);
  REQUIRE(m.size() == 2);
  CHECK(m[1].s_cfg == doctest::Approx(5.0));
  CHECK(m[1].s_ctl == doctest::Approx(0.6));
  CHECK(m[1].s_cls == doctest::Approx(1.5));
  CHECK(*m[1].confidence == doctest::Approx(0.6));
  CHECK_FALSE(m[0].confidence.has_value());
  b.records.pop_back();
  const std::vector<guidance::GuidanceTrace> uneven{a, b};
  CHECK_THROWS_AS(average_trace(uneven), Error);
}

TEST_CASE("svg chart escapes labels and rejects ragged series") {
  const std::vector<Series> ok{{"a<b", {0, 1}, {1, 2}}};
  const std::string svg = svg_line_chart("t&t", "x", "y", ok, 0.5);
  CHECK(svg.find("a&lt;b") != std::string::npos);
  CHECK(svg.find("t&amp;t") != std::string::npos);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);
  const std::vector<Series> bad{{"a", {0, 1}, {1}}};
  CHECK_THROWS_AS(svg_line_chart("t", "x", "y", bad), Error);
}

}  // TEST_SUITE
