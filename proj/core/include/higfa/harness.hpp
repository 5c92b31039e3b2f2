#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <optional>
#include <string>
#include <vector>

#include "higfa/contour.hpp"
#include "higfa/diffusion.hpp"
#include "higfa/guidance.hpp"
#include "higfa/models.hpp"
#include "higfa/synthbench.hpp"

namespace higfa::harness {

enum class Mode { none, text_only, text_contour, higfa };
const char* mode_name(Mode m) noexcept;
Mode parse_mode(const std::string& name);

struct TrainingConfig {
  int inference_steps = diffusion::kDefaultInferenceSteps;

  int denoiser_epochs = 500;
  std::size_t denoiser_batch = 64;
  double denoiser_lr = 1e-3;
  double cond_drop_prob = 0.1;
  /// Jointly flipped/rotated (image, contour) copies per training image.
  int pair_augment = 3;
  std::size_t denoiser_hidden = 256;

  int classifier_epochs = 400;
  std::size_t classifier_batch = 32;
  double classifier_lr = 1e-3;
  double classifier_input_noise = 0.1;
  int classifier_shift = 2;

  int downstream_epochs = 200;
  std::size_t downstream_batch = 32;
  double downstream_lr = 1e-3;
  double downstream_input_noise = 0.1;
  int downstream_shift = 0;
  /// Independently initialised downstream classifiers averaged per cell.
  int downstream_restarts = 5;

  models::Optimizer optimizer = models::Optimizer::adam;
};

struct AugmentConfig {
  int per_image = 2;
  contour::Rigidity rigidity = contour::Rigidity::rigid;
  contour::AugmentParams contour;
};

/// Everything trained for one seed.
struct ModelBundle {
  diffusion::NoiseSchedule schedule;
  models::Denoiser denoiser;
  models::Classifier classifier;
  models::Decoder decoder;
  double classifier_heldout_accuracy = 0.0;
  std::vector<double> denoiser_loss;
  std::vector<double> classifier_loss;
};

/// Benchmark drawn for one experiment seed.
synthbench::BenchmarkSpec benchmark_for_seed(const synthbench::BenchmarkSpec& spec, std::uint64_t seed);

/// Real images the models see: the train split, or k per class of it.
std::vector<synthbench::LabeledImage> real_train_items(const synthbench::SyntheticDataset& d,
                                                       std::optional<int> few_shot_k);

struct TrainedClassifier {
  models::Classifier model;
  std::vector<double> loss;
  double heldout_accuracy = 0.0;  // on the validation split
};

struct TrainedDenoiser {
  models::Denoiser model;
  std::vector<double> loss;
};

TrainedClassifier train_guidance_classifier(const synthbench::SyntheticDataset& d, const TrainingConfig& cfg,
                                            std::uint64_t seed, std::optional<int> few_shot_k = std::nullopt);

/// Trains on the real images plus pair_augment flipped/rotated copies of
/// each, every copy with the canny contour of its own pixels.
TrainedDenoiser train_conditional_denoiser(const synthbench::SyntheticDataset& d, const TrainingConfig& cfg,
                                           std::uint64_t seed, std::optional<int> few_shot_k = std::nullopt);

diffusion::NoiseSchedule training_schedule(const TrainingConfig& cfg);

ModelBundle train_models(const synthbench::SyntheticDataset& d, const TrainingConfig& cfg, std::uint64_t seed,
                         std::optional<int> few_shot_k = std::nullopt);

/// Guidance settings a mode runs with: text_only drops the contour and
/// classifier, text_contour drops the classifier.
guidance::GuidanceConfig mode_guidance(Mode mode, const guidance::GuidanceConfig& base);

struct Augmentation {
  std::vector<synthbench::SyntheticSample> samples;
  std::vector<guidance::GuidanceTrace> traces;  // traces[i] belongs to samples[i]
  std::vector<contour::EdgeMap> contours;
};

/// per_image samples for every real image, each from its own augmented
/// contour and sampling seed. Mode none yields nothing.
Augmentation augment_dataset(std::span<const synthbench::LabeledImage> real, const ModelBundle& models,
                             const guidance::GuidanceConfig& config, Mode mode, std::uint64_t seed,
                             const AugmentConfig& augment = {});

/// A guidance mode plus optional overrides of the base guidance config.
struct Variant {
  Mode mode = Mode::higfa;
  std::optional<double> s_cls;
  std::optional<int> warmup_steps;
  std::optional<bool> adaptive;

  guidance::GuidanceConfig guidance(const guidance::GuidanceConfig& base) const;
  /// Canonical name; variants that sample identically share it.
  std::string key(const guidance::GuidanceConfig& base) const;
};

struct ExperimentConfig {
  synthbench::BenchmarkSpec benchmark;
  guidance::GuidanceConfig guidance;
  TrainingConfig training;
  AugmentConfig augment;
  std::vector<double> ratios{0.4};
  std::vector<Variant> variants;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::optional<int> few_shot_k;
  int jobs = 1;

  void validate() const;
};

struct Cell {
  std::string variant;
  Mode mode = Mode::none;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::optional<double> accuracy;
  std::size_t synthetic = 0;
  std::string error;
};

struct Aggregate {
  std::string variant;
  Mode mode = Mode::none;
  /// Effective guidance of the variant.
  double s_cls = 0.0;
  int warmup_steps = 0;
  bool adaptive = true;
  double ratio = 0.0;
  std::optional<double> median;
  std::size_t count = 0;
};

struct ExperimentReport {
  std::vector<Cell> cells;
  std::vector<Aggregate> medians;
  /// Traces of the first seed per variant key.
  std::map<std::string, std::vector<guidance::GuidanceTrace>> traces;
  std::map<std::string, double> stage_seconds;
  std::vector<std::string> notes;

  std::optional<double> median(const std::string& variant, double ratio) const;
  std::string cells_csv() const;
  std::string to_json() const;
};

/// Models, augmentations and cell accuracies shared across experiments
/// that use the same benchmark and training settings.
class ExperimentCache {
 public:
  struct SeedState {
    synthbench::SyntheticDataset dataset;
    ModelBundle models;
  };

  std::shared_ptr<const SeedState> seed_state(const ExperimentConfig& cfg, std::uint64_t seed);
  std::shared_ptr<const Augmentation> augmentation(const ExperimentConfig& cfg, std::uint64_t seed,
                                                   const Variant& v);
  std::optional<double> accuracy(const std::string& key) const;
  void store_accuracy(const std::string& key, double acc);
  std::map<std::string, double> stage_seconds() const;

 private:
  void add_time(const std::string& stage, double seconds);

  mutable std::mutex mutex_;
  std::map<std::uint64_t, std::shared_ptr<const SeedState>> seeds_;
  std::map<std::string, std::shared_ptr<const Augmentation>> augmentations_;
  std::map<std::string, double> accuracies_;
  std::map<std::string, double> seconds_;
};

using ProgressFn = std::function<void(const std::string&)>;

/// seeds x variants x ratios; each cell mixes the real train split with the
/// variant's synthetic pool and scores a freshly initialised classifier on
/// the test split. A failed cell is recorded and the run continues.
ExperimentReport run_experiment(const ExperimentConfig& cfg, ExperimentCache* cache = nullptr,
                                const ProgressFn& progress = {});

/// Test-split accuracy of a downstream classifier trained on `train`, averaged
/// over downstream_restarts initialisations.
double downstream_accuracy(const synthbench::SyntheticDataset& d, const models::LabeledData& train,
                           const TrainingConfig& cfg, std::uint64_t seed);

struct PlotOptions {
  int warmup_steps = 20;
  std::size_t per_sample_charts = 4;
};

/// Writes scale-evolution, s_cls-sweep and ratio-sweep CSV + SVG files and
/// an index.json naming what was written or skipped.
std::vector<std::filesystem::path> emit_plots(const ExperimentReport& report,
                                              std::span<const guidance::GuidanceTrace> traces,
                                              const std::filesystem::path& out_dir, const PlotOptions& opts = {});

/// Mean trace over samples, step by step (confidence averaged where present).
std::vector<guidance::TraceRecord> average_trace(std::span<const guidance::GuidanceTrace> traces);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Minimal SVG 1.1 line chart; `marker_x` draws a dashed vertical line.
std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           std::span<const Series> series, std::optional<double> marker_x = std::nullopt);

}  // namespace higfa::harness
