#include "higfa/diffusion.hpp"

#include <cmath>
#include <string>

#include "higfa/error.hpp"

namespace higfa::diffusion {

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t >= train_steps) {
    throw Error("timestep " + std::to_string(t) + " outside [0, " + std::to_string(train_steps) + ")");
  }
  return alpha_bars[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha_bar_after(std::size_t step_index) const {
  if (step_index + 1 >= step_map.size()) return 1.0;
  return alpha_bar(step_map[step_index + 1]);
}

NoiseSchedule build_schedule(int train_steps, double beta_start, double beta_end, int inference_steps) {
  if (train_steps < 1) throw Error("train_steps must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw Error("beta bounds must satisfy 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) +
                ", " + std::to_string(beta_end));
  }
  if (inference_steps < 1 || inference_steps > train_steps) {
    throw Error("inference_steps must be in [1, train_steps], got " + std::to_string(inference_steps));
  }

  NoiseSchedule s;
  s.train_steps = train_steps;
  const auto n = static_cast<std::size_t>(train_steps);
  s.betas.resize(n);
  s.alphas.resize(n);
  s.alpha_bars.resize(n);
  double prod = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(n - 1);
    s.betas[t] = beta_start + frac * (beta_end - beta_start);
    s.alphas[t] = 1.0 - s.betas[t];
    prod *= s.alphas[t];
    s.alpha_bars[t] = prod;
  }

  // Evenly spaced from 0 to T-1 inclusive, visited in descending order.
  s.step_map.resize(static_cast<std::size_t>(inference_steps));
  const double stride =
      inference_steps == 1 ? 0.0 : static_cast<double>(train_steps - 1) / (inference_steps - 1);
  for (int i = 0; i < inference_steps; ++i) {
    const int k = inference_steps - 1 - i;
    s.step_map[static_cast<std::size_t>(i)] =
        inference_steps == 1 ? train_steps - 1 : static_cast<int>(std::lround(k * stride));
  }
  return s;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + nd::to_string(a.shape()) + " vs " +
                     nd::to_string(b.shape()));
  }
}

}  // namespace

Tensor q_sample(const Tensor& x0, double alpha_bar, const Tensor& eps) {
  require_same_shape(x0, eps, "q_sample");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw Error("alpha_bar outside [0, 1]");
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, int t, const Tensor& eps) {
  return q_sample(x0, schedule.alpha_bar(t), eps);
}

Tensor predict_x0(const Tensor& x_t, double alpha_bar, const Tensor& eps_hat) {
  require_same_shape(x_t, eps_hat, "predict_x0");
  if (!(alpha_bar > 0.0)) throw DomainError("predict_x0: alpha_bar must be positive (singular denominator)");
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - b * eps_hat[i]) / a;
  return out;
}

Tensor predict_x0(const NoiseSchedule& schedule, const Tensor& x_t, int t, const Tensor& eps_hat) {
  return predict_x0(x_t, schedule.alpha_bar(t), eps_hat);
}

DiffusionState initial_state(const NoiseSchedule& schedule, const nd::Shape& shape, std::uint64_t seed) {
  if (schedule.step_map.empty()) throw Error("schedule has no inference steps");
  DiffusionState st;
  st.rng = Rng(seed);
  st.x = Tensor::randn(shape, st.rng);
  st.t = schedule.step_map.front();
  st.step_index = 0;
  return st;
}

DiffusionState ddim_step(DiffusionState state, const Tensor& eps_hat, const NoiseSchedule& schedule) {
  if (state.finished(schedule)) {
    throw Error("ddim_step: already past the final step (" + std::to_string(schedule.inference_steps()) +
                " steps)");
  }
  if (state.t != schedule.step_map[state.step_index]) {
    throw Error("ddim_step: state timestep does not match the step map");
  }
  const Tensor x0 = predict_x0(schedule, state.x, state.t, eps_hat);
  const double ab_prev = schedule.alpha_bar_after(state.step_index);
  if (ab_prev == 1.0) {
    state.x = x0;
  } else {
    state.x = q_sample(x0, ab_prev, eps_hat);
  }
  ++state.step_index;
  state.t = state.finished(schedule) ? -1 : schedule.step_map[state.step_index];
  return state;
}

}  // namespace higfa::diffusion
