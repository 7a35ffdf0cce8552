#include "nfest/diff/tape.hpp"

#include <algorithm>

namespace nfest::diff {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& param) {
  nodes_.push_back(Node{param.value, {}, nullptr, &param, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<NodeId> inputs,
                 BackwardFn backward) {
  if (mode_ == Mode::kInference) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, {}});
  } else {
    nodes_.push_back(Node{std::move(value), std::move(inputs),
                          std::move(backward), nullptr, {}});
  }
  return Var(this, nodes_.size() - 1);
}

std::vector<double>& Tape::grad(NodeId id) {
  auto& node = nodes_.at(id);
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

void Tape::accumulate(NodeId id, std::span<const double> g) {
  auto& dst = grad(id);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

void Tape::backward(Var loss) {
  if (mode_ == Mode::kInference) {
    throw std::logic_error("backward() on an inference-mode tape");
  }
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     to_string(loss.shape()));
  }
  for (auto& node : nodes_) node.grad.clear();
  grad(loss.id())[0] = 1.0;

  for (NodeId id = loss.id() + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (node.grad.empty()) continue;
    if (node.backward) {
      node.backward(*this, id);
    } else if (node.param != nullptr) {
      auto dst = node.param->grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
    }
  }
}

}  // namespace nfest::diff
