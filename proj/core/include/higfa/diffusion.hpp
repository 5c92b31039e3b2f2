#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "higfa/random.hpp"
#include "higfa/tensor.hpp"

namespace higfa::diffusion {

using nd::Tensor;

/// Linear-beta DDPM schedule plus the DDIM subsequence of training
/// timesteps visited at inference (descending).
struct NoiseSchedule {
  int train_steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<int> step_map;

  std::size_t inference_steps() const noexcept { return step_map.size(); }
  double alpha_bar(int t) const;
  /// alpha_bar of the timestep that follows step_index, or 1 after the last.
  double alpha_bar_after(std::size_t step_index) const;
};

inline constexpr int kDefaultTrainSteps = 1000;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;
inline constexpr int kDefaultInferenceSteps = 30;

NoiseSchedule build_schedule(int train_steps = kDefaultTrainSteps, double beta_start = kDefaultBetaStart,
                             double beta_end = kDefaultBetaEnd,
                             int inference_steps = kDefaultInferenceSteps);

/// sqrt(ab) * x0 + sqrt(1 - ab) * eps.
Tensor q_sample(const Tensor& x0, double alpha_bar, const Tensor& eps);
Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, int t, const Tensor& eps);

/// (x_t - sqrt(1 - ab) * eps_hat) / sqrt(ab). Throws when ab == 0.
Tensor predict_x0(const Tensor& x_t, double alpha_bar, const Tensor& eps_hat);
Tensor predict_x0(const NoiseSchedule& schedule, const Tensor& x_t, int t, const Tensor& eps_hat);

struct DiffusionState {
  Tensor x;
  int t = 0;
  std::size_t step_index = 0;
  Rng rng;

  bool finished(const NoiseSchedule& s) const noexcept { return step_index >= s.inference_steps(); }
};

/// Fresh state at step 0 with x drawn from N(0, I) using `seed`.
DiffusionState initial_state(const NoiseSchedule& schedule, const nd::Shape& shape, std::uint64_t seed);

/// One deterministic (eta = 0) DDIM update.
DiffusionState ddim_step(DiffusionState state, const Tensor& eps_hat, const NoiseSchedule& schedule);

}  // namespace higfa::diffusion
