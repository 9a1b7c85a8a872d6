#include "handkin/autodiff.hpp"

#include <limits>

namespace handkin::ad {

namespace {
constexpr std::size_t kUnbound = std::numeric_limits<std::size_t>::max();
}

const Tensor& Var::value() const {
  if (!tape) throw ValidationError("use of a default-constructed Var");
  return tape->value(*this);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) {
    throw NumericalError("non-finite leaf value at node #" + std::to_string(nodes_.size()));
  }
  Node node;
  node.op = "leaf";
  node.value = std::move(value);
  node.requires_grad = requires_grad && grad_enabled_;
  node.leaf = true;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(const ParamStore& store, std::size_t index) {
  auto& ids = bound_[&store];
  if (ids.size() != store.size()) ids.resize(store.size(), kUnbound);
  if (ids.at(index) == kUnbound) ids[index] = leaf(store.at(index), true).id;
  return Var{this, ids[index]};
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> parents, Pullback pullback) {
  if (!value.all_finite()) {
    throw NumericalError(std::string("non-finite value produced by node #") + std::to_string(nodes_.size()) +
                         " (" + op + ")");
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape != this) throw ValidationError(std::string("operand of ") + op + " belongs to another tape");
    needs = needs || nodes_[p.id].requires_grad;
  }
  if (needs && grad_enabled_) {
    node.requires_grad = true;
    node.parents.reserve(parents.size());
    for (const Var& p : parents) node.parents.push_back(p.id);
    node.pullback = std::move(pullback);
  }
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.empty()) return Tensor(node.value.shape(), 0.0);
  return node.grad;
}

void Tape::touch(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) {
    node.grad = Tensor(node.value.shape(), 0.0);
    touched_.push_back(id);
  }
}

void Tape::backward(Var output) {
  if (value(output).size() != 1) {
    throw ShapeError("backward() without seed needs a scalar output, got " + to_string(value(output).shape()));
  }
  backward(output, Tensor(value(output).shape(), 1.0));
}

void Tape::backward(Var output, const Tensor& seed) {
  if (seed.shape() != value(output).shape()) {
    throw ShapeError("backward seed shape " + to_string(seed.shape()) + " does not match output " +
                     to_string(value(output).shape()));
  }
  // Interior gradients from an earlier sweep must not be propagated again.
  std::vector<std::size_t> kept;
  for (std::size_t id : touched_) {
    if (nodes_[id].leaf) {
      kept.push_back(id);
    } else {
      nodes_[id].grad = Tensor();
    }
  }
  touched_ = std::move(kept);

  if (!nodes_[output.id].requires_grad) return;
  touch(output.id);
  Tensor& g0 = nodes_[output.id].grad;
  for (std::size_t i = 0; i < seed.size(); ++i) g0[i] += seed[i];

  std::vector<Tensor*> parent_grads;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.leaf || !node.requires_grad || node.grad.empty()) continue;
    parent_grads.assign(node.parents.size(), nullptr);
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const std::size_t p = node.parents[k];
      if (nodes_[p].requires_grad) {
        touch(p);
        parent_grads[k] = &nodes_[p].grad;
      }
    }
    // nodes_ is a deque and touch() never adds nodes, so grad pointers stay valid.
    node.pullback(node.grad, parent_grads);
  }
}

void Tape::zero_grad() {
  for (std::size_t id : touched_) nodes_[id].grad = Tensor();
  touched_.clear();
}

std::vector<Tensor> Tape::param_grads(const ParamStore& store) const {
  std::vector<Tensor> out;
  out.reserve(store.size());
  const auto it = bound_.find(&store);
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (it != bound_.end() && i < it->second.size() && it->second[i] != kUnbound) {
      out.push_back(grad(Var{const_cast<Tape*>(this), it->second[i]}));
    } else {
      out.emplace_back(store.at(i).shape(), 0.0);
    }
  }
  return out;
}

}  // namespace handkin::ad
