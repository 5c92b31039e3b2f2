#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "higfa/tensor.hpp"

namespace higfa::nd {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid only while
/// the owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool tracked() const;
  /// Gradient of the loss with respect to this value, available after
  /// Tape::backward for tracked values. Untracked values have none.
  std::optional<Tensor> grad() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of the operations of one forward pass.
///
/// Nodes are appended in evaluation order, so inputs always precede the
/// node that consumes them. A tape is built per forward pass, used for at
/// most one backward pass, then discarded.
class Tape {
 public:
  using Adjoint = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Record an input. It is gradient-tracked iff tensor.requires_grad().
  Var leaf(Tensor tensor);
  /// Record an input that is never tracked.
  Var constant(Tensor tensor);

  /// Reverse sweep from a scalar loss. Throws if the loss is not a scalar,
  /// is not on this tape, or if backward already ran.
  void backward(const Var& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool backward_done() const noexcept { return done_; }

  // --- for operation implementations ---

  /// Append an operation result. When no input is tracked the adjoint is
  /// dropped and the result is untracked.
  Var record(Tensor value, std::vector<std::size_t> inputs, Adjoint adjoint);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool tracks(std::size_t id) const { return nodes_.at(id).tracked; }
  /// Incoming gradient of node id (valid inside an adjoint).
  std::span<const double> grad_of(std::size_t id) const { return nodes_[id].grad; }
  /// Accumulation buffer for node id, zero-initialised on first access.
  std::span<double> grad_buffer(std::size_t id);

  std::optional<Tensor> grad(std::size_t id) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    Adjoint adjoint;
    bool tracked = false;
    bool leaf = false;
    std::vector<double> grad;
  };

  std::vector<Node> nodes_;
  bool done_ = false;
};

}  // namespace higfa::nd
