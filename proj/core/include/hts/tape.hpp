#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hts/tensor.hpp"

namespace hts {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

/// Records one forward pass for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and backward() is a single reverse sweep. Gradients from several consumers
/// of the same node are summed. A tape serves exactly one forward/backward
/// pass and is not thread-safe.
template <typename T>
class Tape {
 public:
  using value_type = T;
  /// Receives the output gradient and pushes contributions into the inputs
  /// through accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Var leaf(Tensor<T> value, bool requires_grad = true) {
    return push("leaf", std::move(value), {}, nullptr, requires_grad);
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an operation result. The node requires a gradient when any
  /// input does; `backward` is dropped otherwise.
  Var record(std::string op, Tensor<T> value, const std::vector<Var>& inputs, BackwardFn backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    return push(std::move(op), std::move(value), inputs, needs ? std::move(backward) : nullptr,
                needs);
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const std::string& op(Var v) const { return nodes_.at(v.id).op; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() target with respect to `v`; zeros when
  /// `v` does not influence it.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  void accumulate(Var v, const Tensor<T>& g);

  /// Adds into the gradient buffer of `v` (allocated on first use).
  Tensor<T>& grad_buffer(Var v);

  /// Reverse sweep from a scalar node, seeding d(loss)/d(loss) = 1.
  void backward(Var loss);

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<Var> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(std::string op, Tensor<T> value, std::vector<Var> inputs, BackwardFn backward,
           bool requires_grad) {
    nodes_.push_back(Node{std::move(op), std::move(value), Tensor<T>(), std::move(inputs),
                          std::move(backward), requires_grad});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

/// Test hook: scales the output gradient fed into every backward rule of op
/// kind `op` by `factor`. Used to prove that gradient checks catch a broken
/// rule. Pass std::nullopt to clear.
void set_backward_fault(std::optional<std::string> op, double factor = 1.5);
std::optional<std::pair<std::string, double>> backward_fault();

}  // namespace hts
