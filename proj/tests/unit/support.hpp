#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "higfa/ops.hpp"
#include "higfa/random.hpp"
#include "higfa/tensor.hpp"

namespace higfa::testing {

using nd::Shape;
using nd::Tape;
using nd::Tensor;
using nd::Var;

/// Builds a scalar loss from leaves on a tape.
using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline std::vector<Tensor> autodiff_grads(const LossFn& f, std::vector<Tensor> inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (auto& t : inputs) leaves.push_back(tape.leaf(Tensor(t).set_requires_grad()));
  tape.backward(f(tape, leaves));
  std::vector<Tensor> out;
  for (auto& v : leaves) out.push_back(*v.grad());
  return out;
}

inline double loss_value(const LossFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.constant(t));
  return f(tape, leaves).value().item();
}

/// Central differences of f with respect to every input element.
inline std::vector<Tensor> numeric_grads(const LossFn& f, const std::vector<Tensor>& inputs, double h = 1e-6) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor g(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      g[i] = (loss_value(f, plus) - loss_value(f, minus)) / (2 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// max |a - b| / max(1, |b|).
inline double relative_error(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
  }
  return worst;
}

inline std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

}  // namespace higfa::testing
