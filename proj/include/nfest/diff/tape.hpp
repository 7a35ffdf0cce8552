// Dynamic reverse-mode tape.
//
// Each forward pass builds a fresh Tape. Operations append nodes in
// evaluation order, so the node list is already topologically sorted and a
// single reverse sweep visits every node once.
#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "nfest/diff/tensor.hpp"

namespace nfest::diff {

class Tape;

using NodeId = std::size_t;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  NodeId id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Backward rule of one node. Reads tape.grad(self) and accumulates into the
/// gradients of the node's inputs.
using BackwardFn = std::function<void(Tape& tape, NodeId self)>;

class Tape {
 public:
  enum class Mode {
    kRecord,     // keep backward rules
    kInference,  // values only; backward() is rejected
  };

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter; backward accumulates into param.grad.
  Var param(Parameter& param);

  /// Appends an operation node. `inputs` are recorded for bookkeeping; the
  /// backward rule is dropped in inference mode.
  Var record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const std::vector<NodeId>& inputs(NodeId id) const {
    return nodes_.at(id).inputs;
  }

  /// Gradient buffer of a node during backward (allocated on first use).
  std::vector<double>& grad(NodeId id);
  bool has_grad(NodeId id) const { return !nodes_.at(id).grad.empty(); }

  /// Adds `g` into the gradient of node `id`.
  void accumulate(NodeId id, std::span<const double> g);

  bool recording() const noexcept { return mode_ == Mode::kRecord; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Populates gradients of every node reachable from `loss` (a one-element
  /// tensor) and accumulates leaf gradients into their bound parameters.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    std::vector<double> grad;
  };

  Mode mode_;
  std::vector<Node> nodes_;
};

}  // namespace nfest::diff
