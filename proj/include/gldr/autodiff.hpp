#pragma once

#include <algorithm>
#include <deque>
#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gldr/tensor.hpp"

namespace gldr {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.dims()),
        trainable(train) {}

  void zero_grad() {
    if (grad.dims() != value.dims()) grad = Tensor<T>(value.dims());
    grad.fill(T{0});
  }
};

using NodeId = std::size_t;

template <typename T>
class Graph;

template <typename T>
using BackwardFn = std::function<void(Graph<T>&, NodeId)>;

// One recorded operation. Leaves (inputs, parameters) have no inputs and no
// backward rule. Saved activations live in the backward closure.
template <typename T>
struct TapeEntry {
  std::string op;
  std::vector<NodeId> inputs;
  NodeId output = 0;
  Tensor<T> value;
  Tensor<T> grad;
  BackwardFn<T> backward;
  Parameter<T>* param = nullptr;
  bool requires_grad = false;
  bool leaf = false;
};

template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  NodeId id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& dims() const { return value().dims(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
};

// Reverse-mode tape. Nodes are appended in execution order, so every input
// id is smaller than the id of the node consuming it.
template <typename T>
class Graph {
 public:
  explicit Graph(bool record_backward = true)
      : record_backward_(record_backward) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_backward_; }

  Var<T> input(Tensor<T> value, bool requires_grad = false) {
    value.require_finite("graph input");
    TapeEntry<T> e;
    e.op = "input";
    e.value = std::move(value);
    e.requires_grad = requires_grad;
    e.leaf = true;
    return push(std::move(e));
  }

  // Registers a parameter as a leaf. Registering the same parameter twice
  // returns the same node so shared weights accumulate into one gradient.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end())
      return {this, it->second};
    p.value.require_finite("parameter " + p.name);
    TapeEntry<T> e;
    e.op = "param";
    e.value = p.value;
    e.param = &p;
    e.requires_grad = p.trainable;
    e.leaf = true;
    Var<T> v = push(std::move(e));
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  Var<T> record(std::string op, std::vector<NodeId> inputs, Tensor<T> value,
                BackwardFn<T> backward) {
    value.require_finite(op);
    TapeEntry<T> e;
    e.op = std::move(op);
    e.inputs = std::move(inputs);
    e.value = std::move(value);
    e.requires_grad = std::any_of(e.inputs.begin(), e.inputs.end(),
                                  [&](NodeId i) { return nodes_[i].requires_grad; });
    if (record_backward_ && e.requires_grad) e.backward = std::move(backward);
    return push(std::move(e));
  }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  const Tensor<T>& grad(NodeId id) const { return nodes_.at(id).grad; }
  const Tensor<T>& grad(Var<T> v) const { return grad(v.id); }
  const TapeEntry<T>& node(NodeId id) const { return nodes_.at(id); }
  const std::deque<TapeEntry<T>>& tape() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  bool wants_grad(NodeId id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node, allocated as zeros on first use.
  Tensor<T>& grad_buffer(NodeId id) {
    auto& n = nodes_[id];
    if (n.grad.dims() != n.value.dims() || n.grad.size() != n.value.size())
      n.grad = Tensor<T>(n.value.dims());
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (loss.graph != this) throw ConfigError("backward: foreign node");
    auto& root = nodes_.at(loss.id);
    if (root.value.size() != 1)
      throw ConfigError("backward: loss must be scalar, got dims " +
                        shape_string(root.value.dims()));
    grad_buffer(loss.id).fill(T{1});
    for (NodeId id = loss.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.leaf) {
        if (n.param) {
          if (n.param->grad.dims() != n.value.dims())
            n.param->grad = Tensor<T>(n.value.dims());
          auto dst = n.param->grad.data();
          auto src = n.grad.data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
        continue;
      }
      if (!n.backward)
        throw ConfigError("backward through unrecorded op '" + n.op + "'");
      n.backward(*this, id);
    }
  }

  // Elements held by non-leaf nodes, i.e. activations a backward pass keeps.
  std::size_t activation_elements() const {
    std::size_t total = 0;
    for (const auto& n : nodes_)
      if (!n.leaf) total += n.value.size();
    return total;
  }

 private:
  Var<T> push(TapeEntry<T> e) {
    e.output = nodes_.size();
    nodes_.push_back(std::move(e));
    return {this, nodes_.size() - 1};
  }

  bool record_backward_;
  std::deque<TapeEntry<T>> nodes_;  // stable references across push_back
  std::unordered_map<const Parameter<T>*, NodeId> param_nodes_;
};

}  // namespace gldr
