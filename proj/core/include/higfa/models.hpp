#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "higfa/diffusion.hpp"
#include "higfa/ops.hpp"
#include "higfa/tensor.hpp"

namespace higfa::models {

using nd::Tape;
using nd::Tensor;
using nd::Var;

/// Text-prompt analog: a prompt id (or the null prompt) plus a style id (or
/// none). Prompt and style are looked up independently.
struct Conditioning {
  std::optional<int> class_id;
  std::optional<int> style_id;

  static Conditioning null() { return {}; }
  /// Same style, null prompt.
  Conditioning without_prompt() const { return {std::nullopt, style_id}; }
  bool is_null() const noexcept { return !class_id.has_value(); }
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Flat little-endian weight file: "HGFA", u32 version, then per tensor
/// (u32 name length, name bytes, u32 rank, u64 extents, f64 values).
void write_weights(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_weights(const std::filesystem::path& path);
inline constexpr std::uint32_t kWeightsVersion = 1;

// ---------------------------------------------------------------------------

struct DenoiserConfig {
  std::size_t image_width = 16;
  std::size_t image_height = 16;
  std::size_t hidden = 256;
  std::size_t time_dim = 32;
  std::size_t class_dim = 16;
  std::size_t style_dim = 8;
  std::size_t prompts = 2;
  std::size_t styles = 4;
  // Noise schedule the output parameterization is tied to.
  int train_steps = diffusion::kDefaultTrainSteps;
  double beta_start = diffusion::kDefaultBetaStart;
  double beta_end = diffusion::kDefaultBetaEnd;
  /// Assumed spread of clean images, used by the output preconditioning.
  double data_std = 0.5;

  std::size_t pixels() const noexcept { return image_width * image_height; }
};

/// Per-row inputs of a batched denoiser evaluation.
struct DenoiseBatch {
  Tensor x;                            // [B, pixels]
  std::vector<int> t;                  // B timesteps
  std::vector<Conditioning> cond;      // B conditionings
  std::optional<Tensor> contour;       // [B, pixels] 0/1 edge maps
  std::vector<double> contour_scale;   // B contour strengths (s_ctl)
};

/// Conditional noise predictor: an MLP trunk over [x_t | time embedding |
/// prompt embedding | style embedding] with a contour branch whose output
/// is added, times s_ctl, into the first hidden layer. With v = ab*sd^2 +
/// 1 - ab, the trunk output N enters as
///   eps = sqrt(1 - ab) / v * x_t + sqrt(ab) * sd / sqrt(v) * N,
/// which is x0-prediction at high noise and eps-prediction at low noise.
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& config, std::uint64_t seed);

  const DenoiserConfig& config() const noexcept { return config_; }

  /// eps prediction for a batch, recorded on `tape`. Parameters are tracked
  /// when `track` is set (training); their Vars are appended to `bound` in
  /// parameters() order when given.
  Var forward(Tape& tape, const DenoiseBatch& batch, bool track = false, std::vector<Var>* bound = nullptr) const;
  /// Convenience wrapper returning a plain tensor.
  Tensor predict(const DenoiseBatch& batch) const;

  /// The residual added to the first hidden layer, s_ctl * branch(contour),
  /// for a single [pixels] edge map.
  Tensor contour_residual(const Tensor& contour, double s_ctl) const;

  std::vector<std::pair<std::string, Tensor*>> parameters();
  std::vector<NamedTensor> named_tensors() const;
  static Denoiser from_tensors(std::span<const NamedTensor> tensors);
  void save(const std::filesystem::path& path) const;
  static Denoiser load(const std::filesystem::path& path);

 private:
  DenoiserConfig config_;
  Tensor w_in_, b_in_, prompt_table_, style_table_;
  Tensor w_h1_, b_h1_, w_h2_, b_h2_, w_out_, b_out_;
  Tensor w_ctl1_, b_ctl1_, w_ctl2_;
  Tensor w_skip_;
  std::vector<double> alpha_bars_;
};

/// Single-sample denoise. contour == nullptr or s_ctl == 0 skips the
/// contour branch entirely.
Tensor denoise(const Denoiser& d, const Tensor& x_t, int t, const Conditioning& cond, const Tensor* contour,
               double s_ctl);

/// Sinusoidal timestep embedding [sin(t f_i), cos(t f_i)].
Tensor time_embedding(std::span<const int> t, std::size_t dim);

// ---------------------------------------------------------------------------

struct ClassifierConfig {
  std::size_t pixels = 256;
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 128;
  std::size_t classes = 4;
};

/// MLP classifier with a softmax head.
class Classifier {
 public:
  Classifier() = default;
  Classifier(const ClassifierConfig& config, std::uint64_t seed);
  /// All weights zero, so every input maps to the uniform distribution.
  static Classifier zeros(const ClassifierConfig& config);

  const ClassifierConfig& config() const noexcept { return config_; }
  std::size_t classes() const noexcept { return config_.classes; }

  /// Log-probabilities [B, C] for images [B, pixels].
  Var log_probs(Tape& tape, const Var& images, bool track = false, std::vector<Var>* bound = nullptr) const;
  /// Probability vectors [B, C].
  Tensor probabilities(const Tensor& images) const;

  std::vector<std::pair<std::string, Tensor*>> parameters();
  std::vector<NamedTensor> named_tensors() const;
  static Classifier from_tensors(std::span<const NamedTensor> tensors);
  void save(const std::filesystem::path& path) const;
  static Classifier load(const std::filesystem::path& path);

 private:
  ClassifierConfig config_;
  Tensor w1_, b1_, w2_, b2_, w3_, b3_;
};

/// Probability vector over classes for one [pixels] (or [1, pixels]) image.
std::vector<double> classify(const Classifier& c, const Tensor& image);

// ---------------------------------------------------------------------------

enum class DecoderMode { identity, linear };

/// Maps the diffusion state space to images. Identity for pixel-space
/// diffusion; an affine map z W + b in linear mode.
class Decoder {
 public:
  Decoder() = default;
  static Decoder identity();
  static Decoder linear(Tensor weight, Tensor bias);
  /// Random near-identity linear decoder (latent == pixels), for exercising
  /// the decode path.
  static Decoder random_linear(std::size_t latent, std::size_t pixels, std::uint64_t seed, double spread = 0.1);
  /// PCA autoencoder fitted to rows of `images` [N, pixels]; encode() is
  /// the matching projection.
  static Decoder fit_pca(const Tensor& images, std::size_t latent);

  DecoderMode mode() const noexcept { return mode_; }
  Var decode(Tape& tape, const Var& z) const;
  Tensor decode(const Tensor& z) const;
  Tensor encode(const Tensor& images) const;

  std::vector<NamedTensor> named_tensors() const;
  static Decoder from_tensors(std::span<const NamedTensor> tensors);

 private:
  DecoderMode mode_ = DecoderMode::identity;
  Tensor weight_;  // [latent, pixels]
  Tensor bias_;    // [pixels]
};

// ---------------------------------------------------------------------------

enum class Optimizer { sgd, adam };

struct TrainOptions {
  int epochs = 10;
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  Optimizer optimizer = Optimizer::adam;
  std::uint64_t seed = 0;
};

/// Training data for the denoiser; rows aligned across fields.
struct DenoiserData {
  Tensor images;               // [N, pixels] in [-1, 1]
  std::vector<int> prompts;    // prompt ids
  std::vector<int> styles;     // style ids
  Tensor contours;             // [N, pixels] 0/1
};

struct DenoiserTrainResult {
  Denoiser model;
  std::vector<double> epoch_loss;
};

/// Epsilon-prediction training. Each row independently drops its prompt
/// (to null) and its contour (s_ctl = 0) with probability cond_drop_prob.
DenoiserTrainResult train_denoiser(const DenoiserData& data, const diffusion::NoiseSchedule& schedule,
                                   const DenoiserConfig& config, double cond_drop_prob, const TrainOptions& opts);

struct LabeledData {
  Tensor images;            // [N, pixels] in [-1, 1]
  std::vector<int> labels;
};

struct ClassifierTrainResult {
  Classifier model;
  std::vector<double> epoch_loss;
  std::optional<double> heldout_accuracy;
};

struct ClassifierTrainOptions : TrainOptions {
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 128;
  /// Std-dev of Gaussian noise added to inputs each step (0 disables).
  double input_noise = 0.0;
  double weight_decay = 0.0;
  /// Random integer translation of square images by up to this many
  /// pixels per step, zero-filled with -1 (0 disables).
  int shift_augment = 0;
};

/// Cross-entropy training. Throws unless at least two distinct labels are
/// present. Held-out accuracy is reported when `heldout` is given.
ClassifierTrainResult train_classifier(const LabeledData& train, std::size_t classes,
                                       const ClassifierTrainOptions& opts, const LabeledData* heldout = nullptr);

double accuracy(const Classifier& c, const LabeledData& data);

}  // namespace higfa::models
