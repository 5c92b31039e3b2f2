#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "higfa/contour.hpp"
#include "higfa/diffusion.hpp"
#include "higfa/models.hpp"

namespace higfa::guidance {

using nd::Tensor;

struct GuidanceConfig {
  double s_cfg = 7.5;
  double s_ctl = 1.0;
  double s_cls = 5.0;
  /// Warm-up length in inference steps.
  int warmup_steps = 20;
  double sigma = 1.0;
  double confidence_floor = 1e-6;
  double confidence_ceiling = 1.0 - 1e-6;
  /// false keeps every scale at its initial value after warm-up.
  bool adaptive = true;

  /// Throws Error describing the first violated bound.
  void validate(std::size_t inference_steps) const;
  bool classifier_active() const noexcept { return s_cls > 0.0; }
};

enum class Phase { warmup, dynamic };
const char* phase_name(Phase p) noexcept;

struct TraceRecord {
  std::size_t step = 0;
  int t = 0;
  Phase phase = Phase::warmup;
  double s_cfg = 0.0;
  double s_ctl = 0.0;
  double s_cls = 0.0;
  /// Classifier confidence on x0-hat; empty when the classifier was not run.
  std::optional<double> confidence;
};

struct GuidanceTrace {
  std::vector<TraceRecord> records;
  /// Confidence seeded at the last warm-up step, if computed.
  std::optional<double> seed_confidence;
  std::size_t classifier_evaluations = 0;

  /// step,t,phase,s_cfg,s_ctl,s_cls,confidence with 9 significant digits.
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
  /// Inverse of to_csv. seed_confidence and evaluation counts are not stored.
  static GuidanceTrace from_csv(const std::string& text);
  static GuidanceTrace read_csv(const std::filesystem::path& path);
  double cumulative_s_cls() const;
};

/// eps_uncond + s * (eps_cond - eps_uncond).
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s_cfg);

struct ScaleTriple {
  double s_cfg = 0.0;
  double s_ctl = 0.0;
  double s_cls = 0.0;
};

/// Confidence-driven scales: text and contour follow p_prev, the
/// classifier scale follows 1 - p_curr.
ScaleTriple dynamic_update(const GuidanceConfig& config, double p_prev, double p_curr);

struct ClassifierGradient {
  Tensor grad;                     // d log p(target | decode(x0_hat)) / d x_t, shape of x_t
  std::vector<double> confidence;  // clamped p per row
};

/// Batched gradient of log p(target | D(x0_hat(x_t, eps_base))) with eps_base
/// held constant. x_t and eps_base are [B, D]. Rows whose probability hits
/// the clamp get a zero gradient.
ClassifierGradient classifier_gradient(const Tensor& x_t, double alpha_bar, const Tensor& eps_base,
                                       std::span<const int> targets, const models::Classifier& classifier,
                                       const models::Decoder& decoder, double floor = 1e-6,
                                       double ceiling = 1.0 - 1e-6);

/// Single-sample classifier guidance: (eps_base - s_cls * sigma * g, p).
std::pair<Tensor, double> classifier_grad_term(const Tensor& x_t, int t, const Tensor& eps_base, int target_class,
                                               const models::Classifier& classifier,
                                               const models::Decoder& decoder, double s_cls, double sigma,
                                               const diffusion::NoiseSchedule& schedule,
                                               double floor = 1e-6, double ceiling = 1.0 - 1e-6);

/// One sample to draw.
struct SampleRequest {
  models::Conditioning cond;
  std::optional<Tensor> contour;  // [D] 0/1 edge map
  int target_class = 0;
  std::uint64_t seed = 0;
};

struct SampleBatch {
  Tensor images;  // [B, pixels], decoded and clamped to [-1, 1]
  std::vector<GuidanceTrace> traces;
};

/// Two-phase guided DDIM sampling for a batch of independent requests.
/// A null classifier, or s_cls == 0, disables classifier guidance: it is
/// never evaluated and the confidence is taken as 1.
SampleBatch higfa_sample_batch(const models::Denoiser& denoiser, const models::Classifier* classifier,
                               const models::Decoder& decoder, std::span<const SampleRequest> requests,
                               const GuidanceConfig& config, const diffusion::NoiseSchedule& schedule);

struct Sample {
  Tensor image;  // [pixels]
  GuidanceTrace trace;
};

Sample higfa_sample(const models::Denoiser& denoiser, const models::Classifier* classifier,
                    const models::Decoder& decoder, const models::Conditioning& text_cond,
                    const contour::EdgeMap* contour, int target_class, const GuidanceConfig& config,
                    const diffusion::NoiseSchedule& schedule, std::uint64_t seed);

/// Edge map as a flat [w*h] tensor of 0/1.
Tensor edge_tensor(const contour::EdgeMap& em);

}  // namespace higfa::guidance
