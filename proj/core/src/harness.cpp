#include "higfa/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>
#include <tuple>

#include "higfa/error.hpp"
#include "higfa/random.hpp"

namespace higfa::harness {

namespace {

namespace sb = synthbench;
using guidance::GuidanceConfig;
using guidance::GuidanceTrace;
using guidance::TraceRecord;
using clk = std::chrono::steady_clock;

// Stream tags for derive_seed.
constexpr std::uint64_t kTagClassifier = 0x11;
constexpr std::uint64_t kTagDenoiser = 0x12;
constexpr std::uint64_t kTagPairAugment = 0x13;
constexpr std::uint64_t kTagContour = 0x21;
constexpr std::uint64_t kTagSample = 0x22;
constexpr std::uint64_t kTagMix = 0x31;
constexpr std::uint64_t kTagDownstream = 0x32;
constexpr std::uint64_t kTagBenchmark = 0x41;

constexpr std::size_t kSampleChunk = 64;

double seconds_since(clk::time_point start) {
  return std::chrono::duration<double>(clk::now() - start).count();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fingerprint(const ExperimentConfig& cfg) {
  const auto& b = cfg.benchmark;
  const auto& t = cfg.training;
  std::ostringstream s;
  s << "b" << b.classes << ',' << b.per_class << ',' << fmt(b.noise) << ',' << b.jitter << ',' << b.styles << ','
    << b.max_shift << ',' << b.seed << ',' << fmt(b.train_fraction) << ',' << fmt(b.val_fraction) << "|t"
    << t.inference_steps << ',' << t.denoiser_epochs << ',' << t.denoiser_batch << ',' << fmt(t.denoiser_lr) << ','
    << fmt(t.cond_drop_prob) << ',' << t.pair_augment << ',' << t.denoiser_hidden << ',' << t.classifier_epochs << ','
    << t.classifier_batch << ',' << fmt(t.classifier_lr) << ',' << fmt(t.classifier_input_noise) << ','
    << t.classifier_shift << ',' << t.downstream_epochs << ',' << t.downstream_batch << ','
    << fmt(t.downstream_lr) << ',' << fmt(t.downstream_input_noise) << ',' << t.downstream_shift << ','
    << t.downstream_restarts << ',' << static_cast<int>(t.optimizer) << "|k" << (cfg.few_shot_k ? *cfg.few_shot_k : -1);
  return s.str();
}

std::string augment_fingerprint(const AugmentConfig& a) {
  const auto& c = a.contour;
  std::ostringstream s;
  s << "a" << a.per_image << ',' << static_cast<int>(a.rigidity) << ',' << c.canny_low << ',' << c.canny_high << ','
    << fmt(c.flip_probability) << ',' << fmt(c.max_rotation_deg) << ',' << c.grid << ',' << c.control_points << ','
    << (c.perturbation ? fmt(*c.perturbation) : "auto") << ',' << fmt(c.regularization) << ','
    << c.binarize_threshold << ',' << fmt(c.harris.sigma) << ',' << fmt(c.harris.k) << ','
    << fmt(c.harris.relative_threshold);
  return s.str();
}

std::string guidance_fingerprint(const GuidanceConfig& g) {
  return fmt(g.s_cfg) + ',' + fmt(g.s_ctl) + ',' + fmt(g.sigma) + ',' + fmt(g.confidence_floor) + ',' +
         fmt(g.confidence_ceiling);
}

models::ClassifierTrainOptions classifier_options(int epochs, std::size_t batch, double lr, double noise, int shift,
                                                  models::Optimizer opt, std::uint64_t seed) {
  models::ClassifierTrainOptions o;
  o.epochs = epochs;
  o.batch_size = batch;
  o.learning_rate = lr;
  o.input_noise = noise;
  o.shift_augment = shift;
  o.optimizer = opt;
  o.seed = seed;
  return o;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
  if (!f) throw Error("write failed: " + path.string());
}

std::string variant_name(const Variant& v) {
  std::string name = mode_name(v.mode);
  std::vector<std::string> parts;
  if (v.s_cls) parts.push_back("s_cls=" + fmt(*v.s_cls));
  if (v.warmup_steps) parts.push_back("warmup=" + std::to_string(*v.warmup_steps));
  if (v.adaptive) parts.push_back(std::string("adaptive=") + (*v.adaptive ? "1" : "0"));
  if (!parts.empty()) {
    name += '[';
    for (std::size_t i = 0; i < parts.size(); ++i) name += (i ? "," : "") + parts[i];
    name += ']';
  }
  return name;
}

}  // namespace

const char* mode_name(Mode m) noexcept {
  switch (m) {
    case Mode::none: return "none";
    case Mode::text_only: return "text_only";
    case Mode::text_contour: return "text_contour";
    case Mode::higfa: return "higfa";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  for (Mode m : {Mode::none, Mode::text_only, Mode::text_contour, Mode::higfa}) {
    if (name == mode_name(m)) return m;
  }
  throw Error("unknown mode '" + name + "' (expected none, text_only, text_contour or higfa)");
}

sb::BenchmarkSpec benchmark_for_seed(const sb::BenchmarkSpec& spec, std::uint64_t seed) {
  sb::BenchmarkSpec s = spec;
  s.seed = derive_seed(spec.seed, {kTagBenchmark, seed});
  return s;
}

std::vector<sb::LabeledImage> real_train_items(const sb::SyntheticDataset& d, std::optional<int> few_shot_k) {
  auto items = sb::split_items(d, sb::Split::train);
  if (!few_shot_k) return items;
  if (*few_shot_k < 1) throw Error("few_shot_k must be >= 1");
  std::vector<sb::LabeledImage> out;
  std::vector<int> taken(static_cast<std::size_t>(d.spec.classes), 0);
  for (auto& it : items) {
    if (taken[static_cast<std::size_t>(it.label)] < *few_shot_k) {
      ++taken[static_cast<std::size_t>(it.label)];
      out.push_back(std::move(it));
    }
  }
  return out;
}

diffusion::NoiseSchedule training_schedule(const TrainingConfig& cfg) {
  return diffusion::build_schedule(diffusion::kDefaultTrainSteps, diffusion::kDefaultBetaStart,
                                   diffusion::kDefaultBetaEnd, cfg.inference_steps);
}

TrainedClassifier train_guidance_classifier(const sb::SyntheticDataset& d, const TrainingConfig& cfg,
                                            std::uint64_t seed, std::optional<int> few_shot_k) {
  const auto items = real_train_items(d, few_shot_k);
  const auto val = sb::split_items(d, sb::Split::val);
  if (items.empty()) throw Error("train_guidance_classifier: no training images");
  const auto train_data = sb::to_labeled_data(items);
  const auto val_data = sb::to_labeled_data(val);
  auto opts = classifier_options(cfg.classifier_epochs, cfg.classifier_batch, cfg.classifier_lr,
                                 cfg.classifier_input_noise, cfg.classifier_shift, cfg.optimizer,
                                 derive_seed(seed, {kTagClassifier}));
  auto res = models::train_classifier(train_data, static_cast<std::size_t>(d.spec.classes), opts,
                                      val.empty() ? nullptr : &val_data);
  return {std::move(res.model), std::move(res.epoch_loss), res.heldout_accuracy.value_or(0.0)};
}

TrainedDenoiser train_conditional_denoiser(const sb::SyntheticDataset& d, const TrainingConfig& cfg,
                                           std::uint64_t seed, std::optional<int> few_shot_k) {
  const auto items = real_train_items(d, few_shot_k);
  if (items.empty()) throw Error("train_conditional_denoiser: no training images");
  if (cfg.pair_augment < 0) throw Error("train_conditional_denoiser: pair_augment must be >= 0");

  const std::size_t copies = static_cast<std::size_t>(cfg.pair_augment) + 1;
  const std::size_t rows = items.size() * copies;
  const std::size_t pixels = static_cast<std::size_t>(sb::kImageSize * sb::kImageSize);
  std::vector<GrayImage> imgs;
  imgs.reserve(rows);
  models::DenoiserData dd;
  dd.contours = nd::Tensor({rows, pixels});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (std::size_t k = 0; k < copies; ++k) {
      GrayImage img = items[i].image;
      if (k > 0) {
        Rng rng = make_rng(seed, {kTagPairAugment, items[i].index, k});
        const bool flip = unit(rng) < 0.5;
        const double angle = (2.0 * unit(rng) - 1.0) * contour::kMaxRotationDeg;
        img = contour::flip_rotate_image(img, flip, angle);
      }
      dd.contours.set_row(imgs.size(), guidance::edge_tensor(contour::canny(img)).values());
      dd.prompts.push_back(sb::coarse_of(items[i].label));
      dd.styles.push_back(items[i].style);
      imgs.push_back(std::move(img));
    }
  }
  dd.images = sb::image_rows(imgs);

  models::DenoiserConfig dc;
  dc.image_width = dc.image_height = static_cast<std::size_t>(sb::kImageSize);
  dc.hidden = cfg.denoiser_hidden;
  dc.prompts = static_cast<std::size_t>(d.coarse_count());
  dc.styles = static_cast<std::size_t>(d.spec.styles);
  models::TrainOptions opts;
  opts.epochs = cfg.denoiser_epochs;
  opts.batch_size = cfg.denoiser_batch;
  opts.learning_rate = cfg.denoiser_lr;
  opts.optimizer = cfg.optimizer;
  opts.seed = derive_seed(seed, {kTagDenoiser});
  auto res = models::train_denoiser(dd, training_schedule(cfg), dc, cfg.cond_drop_prob, opts);
  return {std::move(res.model), std::move(res.epoch_loss)};
}

ModelBundle train_models(const sb::SyntheticDataset& d, const TrainingConfig& cfg, std::uint64_t seed,
                         std::optional<int> few_shot_k) {
  ModelBundle b;
  b.schedule = training_schedule(cfg);
  b.decoder = models::Decoder::identity();
  auto cls = train_guidance_classifier(d, cfg, seed, few_shot_k);
  b.classifier = std::move(cls.model);
  b.classifier_loss = std::move(cls.loss);
  b.classifier_heldout_accuracy = cls.heldout_accuracy;
  auto den = train_conditional_denoiser(d, cfg, seed, few_shot_k);
  b.denoiser = std::move(den.model);
  b.denoiser_loss = std::move(den.loss);
  return b;
}

GuidanceConfig mode_guidance(Mode mode, const GuidanceConfig& base) {
  GuidanceConfig g = base;
  switch (mode) {
    case Mode::none:
    case Mode::higfa: break;
    case Mode::text_only:
      g.s_ctl = 0.0;
      g.s_cls = 0.0;
      break;
    case Mode::text_contour: g.s_cls = 0.0; break;
  }
  return g;
}

Augmentation augment_dataset(std::span<const sb::LabeledImage> real, const ModelBundle& models,
                             const GuidanceConfig& config, Mode mode, std::uint64_t seed,
                             const AugmentConfig& augment) {
  Augmentation out;
  if (mode == Mode::none) return out;
  if (augment.per_image < 1) throw Error("augment: per_image must be >= 1");
  const GuidanceConfig g = mode_guidance(mode, config);
  g.validate(models.schedule.inference_steps());

  std::vector<guidance::SampleRequest> requests;
  for (const auto& item : real) {
    for (int k = 0; k < augment.per_image; ++k) {
      const auto kk = static_cast<std::uint64_t>(k);
      Rng rng = make_rng(seed, {kTagContour, item.index, kk});
      auto em = contour::augment_contour(item.image, augment.rigidity, augment.contour, rng);
      guidance::SampleRequest r;
      r.cond = {sb::coarse_of(item.label), item.style};
      if (mode != Mode::text_only) r.contour = guidance::edge_tensor(em);
      r.target_class = item.label;
      r.seed = derive_seed(seed, {kTagSample, item.index, kk});
      requests.push_back(std::move(r));
      out.contours.push_back(std::move(em));
      out.samples.push_back({GrayImage{}, item.label, "syn-" + std::to_string(item.index) + "-" + std::to_string(k)});
    }
  }

  const models::Classifier* cls = g.classifier_active() ? &models.classifier : nullptr;
  for (std::size_t start = 0; start < requests.size(); start += kSampleChunk) {
    const std::size_t n = std::min(kSampleChunk, requests.size() - start);
    auto batch = guidance::higfa_sample_batch(models.denoiser, cls, models.decoder,
                                              std::span(requests).subspan(start, n), g, models.schedule);
    for (std::size_t r = 0; r < n; ++r) {
      out.samples[start + r].image = from_unit_range(batch.images.row(r).values(), sb::kImageSize, sb::kImageSize);
      out.traces.push_back(std::move(batch.traces[r]));
    }
  }
  return out;
}

GuidanceConfig Variant::guidance(const GuidanceConfig& base) const {
  GuidanceConfig g = base;
  if (s_cls) g.s_cls = *s_cls;
  if (warmup_steps) g.warmup_steps = *warmup_steps;
  if (adaptive) g.adaptive = *adaptive;
  return mode_guidance(mode, g);
}

std::string Variant::key(const GuidanceConfig& base) const {
  const GuidanceConfig g = guidance(base);
  if (mode == Mode::none) return "none";
  if (mode == Mode::text_only) return "text_only";
  // Without the classifier every confidence is 1, so warm-up length and
  // the adaptive flag leave the samples unchanged.
  if (!g.classifier_active()) return "text_contour";
  return std::string("higfa:s_cls=") + fmt(g.s_cls) + ":warmup=" + std::to_string(g.warmup_steps) +
         ":adaptive=" + (g.adaptive ? "1" : "0");
}

void ExperimentConfig::validate() const {
  benchmark.validate();
  if (variants.empty()) throw Error("experiment: no variants");
  if (ratios.empty()) throw Error("experiment: no ratios");
  if (seeds.empty()) throw Error("experiment: no seeds");
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error("experiment: ratio " + fmt(r) + " outside [0, 1]");
  }
  if (jobs < 1) throw Error("experiment: jobs must be >= 1");
  if (training.downstream_restarts < 1) throw Error("experiment: downstream_restarts must be >= 1");
  if (augment.per_image < 1) throw Error("experiment: per_image must be >= 1");
  if (few_shot_k && *few_shot_k < 1) throw Error("experiment: few_shot_k must be >= 1");
  for (const auto& v : variants) v.guidance(guidance).validate(static_cast<std::size_t>(training.inference_steps));
}

std::optional<double> ExperimentReport::median(const std::string& variant, double ratio) const {
  for (const auto& a : medians) {
    if (a.variant == variant && a.ratio == ratio) return a.median;
  }
  return std::nullopt;
}

std::string ExperimentReport::cells_csv() const {
  std::string s = "variant,mode,ratio,seed,accuracy,synthetic,error\n";
  for (const auto& c : cells) {
    s += c.variant + ',' + mode_name(c.mode) + ',' + fmt(c.ratio) + ',' + std::to_string(c.seed) + ',' +
         (c.accuracy ? fmt(*c.accuracy) : "") + ',' + std::to_string(c.synthetic) + ',' + c.error + '\n';
  }
  return s;
}

std::string ExperimentReport::to_json() const {
  nlohmann::ordered_json j;
  auto cells_j = nlohmann::ordered_json::array();
  for (const auto& c : cells) {
    nlohmann::ordered_json o;
    o["variant"] = c.variant;
    o["mode"] = mode_name(c.mode);
    o["ratio"] = c.ratio;
    o["seed"] = c.seed;
    o["accuracy"] = c.accuracy ? nlohmann::ordered_json(*c.accuracy) : nlohmann::ordered_json(nullptr);
    o["synthetic"] = c.synthetic;
    if (!c.error.empty()) o["error"] = c.error;
    cells_j.push_back(std::move(o));
  }
  auto med = nlohmann::ordered_json::array();
  for (const auto& a : medians) {
    nlohmann::ordered_json o;
    o["variant"] = a.variant;
    o["ratio"] = a.ratio;
    o["median"] = a.median ? nlohmann::ordered_json(*a.median) : nlohmann::ordered_json(nullptr);
    o["seeds"] = a.count;
    med.push_back(std::move(o));
  }
  auto tr = nlohmann::ordered_json::object();
  for (const auto& [key, traces] : traces) {
    double cum = 0.0;
    for (const auto& t : traces) cum += t.cumulative_s_cls();
    nlohmann::ordered_json o;
    o["samples"] = traces.size();
    o["mean_cumulative_s_cls"] = traces.empty() ? 0.0 : cum / static_cast<double>(traces.size());
    tr[key] = std::move(o);
  }
  j["cells"] = std::move(cells_j);
  j["medians"] = std::move(med);
  j["traces"] = std::move(tr);
  j["notes"] = notes;
  return j.dump(2) + "\n";
}

std::shared_ptr<const ExperimentCache::SeedState> ExperimentCache::seed_state(const ExperimentConfig& cfg,
                                                                              std::uint64_t seed) {
  const std::uint64_t key = derive_seed(seed, {std::hash<std::string>{}(fingerprint(cfg))});
  {
    std::lock_guard lock(mutex_);
    if (auto it = seeds_.find(key); it != seeds_.end()) return it->second;
  }
  auto state = std::make_shared<SeedState>();
  auto start = clk::now();
  state->dataset = sb::generate_benchmark(benchmark_for_seed(cfg.benchmark, seed));
  add_time("dataset", seconds_since(start));
  start = clk::now();
  state->models = train_models(state->dataset, cfg.training, seed, cfg.few_shot_k);
  add_time("train_models", seconds_since(start));
  std::lock_guard lock(mutex_);
  return seeds_.emplace(key, std::move(state)).first->second;
}

std::shared_ptr<const Augmentation> ExperimentCache::augmentation(const ExperimentConfig& cfg, std::uint64_t seed,
                                                                  const Variant& v) {
  const std::string key = fingerprint(cfg) + '|' + augment_fingerprint(cfg.augment) + '|' +
                          guidance_fingerprint(cfg.guidance) + '|' + std::to_string(seed) + '|' +
                          v.key(cfg.guidance);
  {
    std::lock_guard lock(mutex_);
    if (auto it = augmentations_.find(key); it != augmentations_.end()) return it->second;
  }
  auto state = seed_state(cfg, seed);
  const auto real = real_train_items(state->dataset, cfg.few_shot_k);
  const auto start = clk::now();
  auto aug = std::make_shared<Augmentation>(
      augment_dataset(real, state->models, v.guidance(cfg.guidance), v.mode, seed, cfg.augment));
  add_time("augment", seconds_since(start));
  std::lock_guard lock(mutex_);
  return augmentations_.emplace(key, std::move(aug)).first->second;
}

std::optional<double> ExperimentCache::accuracy(const std::string& key) const {
  std::lock_guard lock(mutex_);
  if (auto it = accuracies_.find(key); it != accuracies_.end()) return it->second;
  return std::nullopt;
}

void ExperimentCache::store_accuracy(const std::string& key, double acc) {
  std::lock_guard lock(mutex_);
  accuracies_[key] = acc;
}

std::map<std::string, double> ExperimentCache::stage_seconds() const {
  std::lock_guard lock(mutex_);
  return seconds_;
}

void ExperimentCache::add_time(const std::string& stage, double seconds) {
  std::lock_guard lock(mutex_);
  seconds_[stage] += seconds;
}

double downstream_accuracy(const sb::SyntheticDataset& d, const models::LabeledData& train, const TrainingConfig& cfg,
                           std::uint64_t seed) {
  if (cfg.downstream_restarts < 1) throw Error("downstream_restarts must be >= 1");
  const auto test = sb::to_labeled_data(sb::split_items(d, sb::Split::test));
  double sum = 0.0;
  for (int r = 0; r < cfg.downstream_restarts; ++r) {
    const std::uint64_t run_seed = r == 0 ? seed : derive_seed(seed, {static_cast<std::uint64_t>(r)});
    auto opts = classifier_options(cfg.downstream_epochs, cfg.downstream_batch, cfg.downstream_lr,
                                   cfg.downstream_input_noise, cfg.downstream_shift, cfg.optimizer, run_seed);
    sum += *models::train_classifier(train, static_cast<std::size_t>(d.spec.classes), opts, &test).heldout_accuracy;
  }
  return sum / cfg.downstream_restarts;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, ExperimentCache* cache, const ProgressFn& progress) {
  cfg.validate();
  ExperimentCache local;
  ExperimentCache& c = cache ? *cache : local;
  const auto before = c.stage_seconds();
  const std::string fp = fingerprint(cfg) + '|' + augment_fingerprint(cfg.augment) + '|' +
                         guidance_fingerprint(cfg.guidance);

  const std::size_t nv = cfg.variants.size(), nr = cfg.ratios.size(), ns = cfg.seeds.size();
  std::vector<Cell> cells(ns * nv * nr);
  std::vector<std::vector<GuidanceTrace>> first_traces(nv);
  std::mutex progress_mutex;
  auto report_progress = [&](const std::string& msg) {
    if (!progress) return;
    std::lock_guard lock(progress_mutex);
    progress(msg);
  };

  auto run_seed = [&](std::size_t si) {
    const std::uint64_t seed = cfg.seeds[si];
    auto cell_at = [&](std::size_t vi, std::size_t ri) -> Cell& { return cells[(si * nv + vi) * nr + ri]; };
    for (std::size_t vi = 0; vi < nv; ++vi) {
      for (std::size_t ri = 0; ri < nr; ++ri) {
        Cell& cell = cell_at(vi, ri);
        cell.variant = variant_name(cfg.variants[vi]);
        cell.mode = cfg.variants[vi].mode;
        cell.ratio = cfg.ratios[ri];
        cell.seed = seed;
      }
    }
    std::shared_ptr<const ExperimentCache::SeedState> state;
    try {
      state = c.seed_state(cfg, seed);
      report_progress("seed " + std::to_string(seed) + ": models trained (guidance classifier val accuracy " +
                      fmt(state->models.classifier_heldout_accuracy) + ")");
    } catch (const std::exception& e) {
      for (std::size_t vi = 0; vi < nv; ++vi)
        for (std::size_t ri = 0; ri < nr; ++ri) cell_at(vi, ri).error = std::string("train: ") + e.what();
      return;
    }
    const auto real = real_train_items(state->dataset, cfg.few_shot_k);
    for (std::size_t vi = 0; vi < nv; ++vi) {
      const Variant& v = cfg.variants[vi];
      std::shared_ptr<const Augmentation> aug;
      if (v.mode != Mode::none) {
        try {
          aug = c.augmentation(cfg, seed, v);
          if (si == 0) first_traces[vi] = aug->traces;
        } catch (const std::exception& e) {
          for (std::size_t ri = 0; ri < nr; ++ri) cell_at(vi, ri).error = std::string("augment: ") + e.what();
          continue;
        }
      }
      for (std::size_t ri = 0; ri < nr; ++ri) {
        Cell& cell = cell_at(vi, ri);
        const bool real_only = !aug || cell.ratio == 0.0;
        const std::string key = fp + '|' + std::to_string(seed) + '|' +
                                (real_only ? std::string("real") : v.key(cfg.guidance) + '|' + fmt(cell.ratio));
        try {
          std::optional<double> acc = c.accuracy(key);
          sb::MixedTrainSet set;
          if (real_only) {
            set = sb::mix(real, {}, 0.0, 0);
          } else {
            set = sb::mix(real, aug->samples, cell.ratio, derive_seed(seed, {kTagMix}));
          }
          cell.synthetic = set.synthetic_count();
          if (!acc) {
            acc = downstream_accuracy(state->dataset, sb::to_labeled_data(set), cfg.training,
                                      derive_seed(seed, {kTagDownstream}));
            c.store_accuracy(key, *acc);
          }
          cell.accuracy = acc;
          report_progress("seed " + std::to_string(seed) + " " + cell.variant + " ratio " + fmt(cell.ratio) +
                          ": accuracy " + fmt(*acc));
        } catch (const std::exception& e) {
          cell.error = std::string("downstream: ") + e.what();
        }
      }
    }
  };

  const auto start = clk::now();
  if (cfg.jobs <= 1 || ns <= 1) {
    for (std::size_t si = 0; si < ns; ++si) run_seed(si);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.jobs), ns);
    for (std::size_t w = 0; w < n; ++w) {
      workers.emplace_back([&] {
        for (std::size_t si = next++; si < ns; si = next++) run_seed(si);
      });
    }
    for (auto& t : workers) t.join();
  }

  ExperimentReport report;
  report.cells = std::move(cells);
  for (std::size_t vi = 0; vi < nv; ++vi) {
    for (std::size_t ri = 0; ri < nr; ++ri) {
      Aggregate a;
      a.variant = variant_name(cfg.variants[vi]);
      a.mode = cfg.variants[vi].mode;
      const GuidanceConfig g = cfg.variants[vi].guidance(cfg.guidance);
      a.s_cls = g.s_cls;
      a.warmup_steps = g.warmup_steps;
      a.adaptive = g.adaptive;
      a.ratio = cfg.ratios[ri];
      std::vector<double> accs;
      for (std::size_t si = 0; si < ns; ++si) {
        const Cell& cell = report.cells[(si * nv + vi) * nr + ri];
        if (cell.accuracy) accs.push_back(*cell.accuracy);
        else report.notes.push_back("cell " + cell.variant + " ratio " + fmt(cell.ratio) + " seed " +
                                    std::to_string(cell.seed) + " failed: " + cell.error);
      }
      a.count = accs.size();
      if (!accs.empty()) a.median = median_of(accs);
      report.medians.push_back(std::move(a));
    }
    if (cfg.variants[vi].mode != Mode::none) {
      report.traces.emplace(variant_name(cfg.variants[vi]), std::move(first_traces[vi]));
    }
  }
  const auto after = c.stage_seconds();
  for (const auto& [stage, secs] : after) {
    const auto it = before.find(stage);
    report.stage_seconds[stage] = secs - (it == before.end() ? 0.0 : it->second);
  }
  report.stage_seconds["total"] = seconds_since(start);
  return report;
}

std::vector<TraceRecord> average_trace(std::span<const GuidanceTrace> traces) {
  std::vector<TraceRecord> out;
  if (traces.empty()) return out;
  const std::size_t steps = traces.front().records.size();
  for (const auto& t : traces) {
    if (t.records.size() != steps) throw Error("average_trace: traces differ in length");
  }
  const double n = static_cast<double>(traces.size());
  for (std::size_t i = 0; i < steps; ++i) {
    TraceRecord r = traces.front().records[i];
    double cfg = 0.0, ctl = 0.0, cls = 0.0, conf = 0.0;
    std::size_t nconf = 0;
    for (const auto& t : traces) {
      const auto& x = t.records[i];
      cfg += x.s_cfg;
      ctl += x.s_ctl;
      cls += x.s_cls;
      if (x.confidence) {
        conf += *x.confidence;
        ++nconf;
      }
    }
    r.s_cfg = cfg / n;
    r.s_ctl = ctl / n;
    r.s_cls = cls / n;
    r.confidence = nconf ? std::optional<double>(conf / static_cast<double>(nconf)) : std::nullopt;
    out.push_back(r);
  }
  return out;
}

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           std::span<const Series> series, std::optional<double> marker_x) {
  constexpr double W = 640, H = 400, L = 64, R = 160, T = 40, B = 52;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw Error("svg_line_chart: series '" + s.label + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (marker_x) {
    x0 = std::min(x0, *marker_x);
    x1 = std::max(x1, *marker_x);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return T + (1.0 - (y - y0) / (y1 - y0)) * ph; };
  char buf[256];
  std::string s;
  std::snprintf(buf, sizeof buf,
                "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" "
                "version=\"1.1\" width=\"%g\" height=\"%g\" viewBox=\"0 0 %g %g\">\n",
                W, H, W, H);
  s += buf;
  s += "<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">", L);
  s += buf + xml_escape(title) + "</text>\n";
  std::snprintf(buf, sizeof buf,
                "<path d=\"M %.2f %.2f L %.2f %.2f L %.2f %.2f\" fill=\"none\" stroke=\"black\"/>\n", L, T, L, T + ph,
                L + pw, T + ph);
  s += buf;
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"11\" "
                  "text-anchor=\"middle\">%.3g</text>\n",
                  px(xv), T + ph + 16, xv);
    s += buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"11\" "
                  "text-anchor=\"end\">%.3g</text>\n",
                  L - 6, py(yv) + 4, yv);
    s += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">",
                L + pw / 2, H - 12);
  s += buf + xml_escape(x_label) + "</text>\n";
  std::snprintf(buf, sizeof buf,
                "<text x=\"16\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" "
                "transform=\"rotate(-90 16 %.2f)\">",
                T + ph / 2, T + ph / 2);
  s += buf + xml_escape(y_label) + "</text>\n";
  if (marker_x) {
    std::snprintf(buf, sizeof buf,
                  "<path d=\"M %.2f %.2f L %.2f %.2f\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
                  px(*marker_x), T, px(*marker_x), T + ph);
    s += buf;
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& sr = series[k];
    const char* color = kColors[k % std::size(kColors)];
    if (!sr.x.empty()) {
      std::string d;
      for (std::size_t i = 0; i < sr.x.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%s%.2f %.2f", i ? " L " : "M ", px(sr.x[i]), py(sr.y[i]));
        d += buf;
      }
      s += "<path d=\"" + d + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    }
    const double ly = T + 14 + 18 * static_cast<double>(k);
    std::snprintf(buf, sizeof buf, "<path d=\"M %.2f %.2f L %.2f %.2f\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                  L + pw + 12, ly - 4, L + pw + 32, ly - 4, color);
    s += buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"11\">",
                  L + pw + 38, ly);
    s += buf + xml_escape(sr.label) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

std::vector<std::filesystem::path> emit_plots(const ExperimentReport& report, std::span<const GuidanceTrace> traces,
                                              const std::filesystem::path& out_dir, const PlotOptions& opts) {
  if (report.cells.empty() && report.medians.empty() && traces.empty()) {
    throw Error("emit_plots: empty report");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::filesystem::path> written;
  nlohmann::ordered_json index;
  auto files = nlohmann::ordered_json::array();
  auto skipped = nlohmann::ordered_json::array();
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(out_dir / name, text);
    written.push_back(out_dir / name);
    files.push_back(name);
  };
  const double marker = static_cast<double>(opts.warmup_steps) - 0.5;

  // Scale evolution.
  if (traces.empty()) {
    skipped.push_back({{"plot", "scale_evolution"}, {"reason", "no traces"}});
  } else {
    std::string csv = "sample,step,t,phase,s_cfg,s_ctl,s_cls,confidence\n";
    for (std::size_t i = 0; i < traces.size(); ++i) {
      for (const auto& r : traces[i].records) {
        csv += std::to_string(i) + ',' + std::to_string(r.step) + ',' + std::to_string(r.t) + ',' +
               guidance::phase_name(r.phase) + ',' + fmt(r.s_cfg) + ',' + fmt(r.s_ctl) + ',' + fmt(r.s_cls) + ',' +
               (r.confidence ? fmt(*r.confidence) : "") + '\n';
      }
    }
    emit("scale_evolution.csv", csv);
    auto chart = [&](const std::vector<TraceRecord>& recs, const std::string& title) {
      std::vector<Series> ss(4);
      ss[0].label = "s_cfg";
      ss[1].label = "s_ctl";
      ss[2].label = "s_cls";
      ss[3].label = "confidence";
      for (const auto& r : recs) {
        const double x = static_cast<double>(r.step);
        ss[0].x.push_back(x), ss[0].y.push_back(r.s_cfg);
        ss[1].x.push_back(x), ss[1].y.push_back(r.s_ctl);
        ss[2].x.push_back(x), ss[2].y.push_back(r.s_cls);
        if (r.confidence) ss[3].x.push_back(x), ss[3].y.push_back(*r.confidence);
      }
      return svg_line_chart(title, "inference step", "scale", ss, marker);
    };
    const auto mean = average_trace(traces);
    std::string mcsv = "step,t,phase,s_cfg,s_ctl,s_cls,confidence,samples\n";
    for (const auto& r : mean) {
      mcsv += std::to_string(r.step) + ',' + std::to_string(r.t) + ',' + guidance::phase_name(r.phase) + ',' +
              fmt(r.s_cfg) + ',' + fmt(r.s_ctl) + ',' + fmt(r.s_cls) + ',' +
              (r.confidence ? fmt(*r.confidence) : "") + ',' + std::to_string(traces.size()) + '\n';
    }
    emit("scale_evolution_mean.csv", mcsv);
    emit("scale_evolution_mean.svg",
         chart(mean, "Mean guidance scales over " + std::to_string(traces.size()) + " samples"));
    for (std::size_t i = 0; i < std::min(opts.per_sample_charts, traces.size()); ++i) {
      emit("scale_evolution_" + std::to_string(i) + ".svg",
           chart(traces[i].records, "Guidance scales, sample " + std::to_string(i)));
    }
  }

  // Accuracy against s_cls, adaptive and fixed.
  struct SweepPoint {
    double s_cls;
    bool adaptive;
    double ratio;
    double acc;
    std::string variant;
  };
  std::vector<SweepPoint> sweep;
  for (const auto& a : report.medians) {
    if (!a.median || a.mode != Mode::higfa) continue;
    sweep.push_back({a.s_cls, a.adaptive, a.ratio, *a.median, a.variant});
  }
  if (sweep.empty()) {
    skipped.push_back({{"plot", "scls_sweep"}, {"reason", "no higfa variants"}});
  } else {
    std::sort(sweep.begin(), sweep.end(), [](const SweepPoint& a, const SweepPoint& b) {
      return std::tie(a.ratio, b.adaptive, a.s_cls) < std::tie(b.ratio, a.adaptive, b.s_cls);
    });
    std::string csv = "variant,s_cls,adaptive,ratio,median_accuracy\n";
    std::vector<Series> ss;
    for (const auto& p : sweep) {
      csv += p.variant + ',' + fmt(p.s_cls) + ',' + (p.adaptive ? "1" : "0") + ',' + fmt(p.ratio) + ',' +
             fmt(p.acc) + '\n';
      const std::string label = std::string(p.adaptive ? "adaptive" : "fixed") + " @ ratio " + fmt(p.ratio);
      auto it = std::find_if(ss.begin(), ss.end(), [&](const Series& s) { return s.label == label; });
      if (it == ss.end()) it = ss.insert(ss.end(), Series{label, {}, {}});
      it->x.push_back(p.s_cls);
      it->y.push_back(p.acc);
    }
    emit("scls_sweep.csv", csv);
    emit("scls_sweep.svg", svg_line_chart("Median accuracy against s_cls", "s_cls", "accuracy", ss));
  }

  // Accuracy against augmentation ratio.
  if (report.medians.empty()) {
    skipped.push_back({{"plot", "ratio_sweep"}, {"reason", "no medians"}});
  } else {
    std::string csv = "variant,ratio,median_accuracy,seeds\n";
    std::vector<Series> ss;
    for (const auto& a : report.medians) {
      csv += a.variant + ',' + fmt(a.ratio) + ',' + (a.median ? fmt(*a.median) : "") + ',' +
             std::to_string(a.count) + '\n';
      if (!a.median) continue;
      auto it = std::find_if(ss.begin(), ss.end(), [&](const Series& s) { return s.label == a.variant; });
      if (it == ss.end()) it = ss.insert(ss.end(), Series{a.variant, {}, {}});
      it->x.push_back(a.ratio);
      it->y.push_back(*a.median);
    }
    for (auto& s : ss) {
      std::vector<std::size_t> order(s.x.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
      Series sorted{s.label, {}, {}};
      for (auto i : order) sorted.x.push_back(s.x[i]), sorted.y.push_back(s.y[i]);
      s = std::move(sorted);
    }
    emit("ratio_sweep.csv", csv);
    emit("ratio_sweep.svg", svg_line_chart("Median accuracy against augmentation ratio", "synthetic ratio",
                                           "accuracy", ss));
  }

  index["files"] = std::move(files);
  index["skipped"] = std::move(skipped);
  write_text(out_dir / "index.json", index.dump(2) + "\n");
  written.push_back(out_dir / "index.json");
  return written;
}

}  // namespace higfa::harness
