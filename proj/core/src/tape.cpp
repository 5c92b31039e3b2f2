#include "higfa/tape.hpp"

#include "higfa/error.hpp"

namespace higfa::nd {

const Tensor& Var::value() const {
  if (!tape_) throw Error("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::tracked() const { return tape_ && tape_->tracks(id_); }

std::optional<Tensor> Var::grad() const {
  if (!tape_) return std::nullopt;
  return tape_->grad(id_);
}

Var Tape::leaf(Tensor tensor) {
  if (done_) throw Error("cannot record on a tape after backward");
  const bool tracked = tensor.requires_grad();
  tensor.clear_grad();
  nodes_.push_back(Node{std::move(tensor), {}, {}, tracked, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor tensor) {
  tensor.set_requires_grad(false);
  return leaf(std::move(tensor));
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, Adjoint adjoint) {
  if (done_) throw Error("cannot record on a tape after backward");
  bool tracked = false;
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw Error("operation input is not on this tape");
    tracked = tracked || nodes_[id].tracked;
  }
  Node node{std::move(value), std::move(inputs), {}, tracked, false, {}};
  if (tracked) node.adjoint = std::move(adjoint);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw Error("backward: loss is not recorded on this tape");
  if (done_) throw Error("backward already ran on this tape; build a new tape per forward pass");
  const Node& root = nodes_[loss.id()];
  if (root.value.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(root.value.shape()));
  }
  done_ = true;
  if (!root.tracked) return;

  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.tracked || n.grad.empty() || !n.adjoint) continue;
    n.adjoint(*this, i);
  }
  for (auto& n : nodes_) {
    if (n.leaf && n.tracked) {
      if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
      n.value.set_grad(n.grad);
    }
  }
}

std::optional<Tensor> Tape::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (!done_ || !n.tracked) return std::nullopt;
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return Tensor(n.value.shape(), n.grad);
}

}  // namespace higfa::nd
