#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pmk/tensor.hpp"

namespace pmk {

// A trainable tensor together with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

template <typename T>
class Graph;

// Handle to a node recorded on a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  [[nodiscard]] const Tensor<T>& value() const { return graph->value(id); }
  [[nodiscard]] const Shape& shape() const { return graph->value(id).shape(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so every node's
// parents precede it and backward() is a single reverse sweep.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, nullptr, false); }

  Var<T> param(Parameter<T>& p) { return push(p.value, {}, nullptr, &p, true); }

  // Records the result of an operation. The node requires a gradient iff any
  // parent does; fn is dropped otherwise.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_[p].requires_grad;
    return push(std::move(value), std::move(parents), needs ? std::move(fn) : nullptr, nullptr, needs);
  }

  [[nodiscard]] const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  [[nodiscard]] bool has_grad(std::size_t id) const { return nodes_.at(id).grad_ready; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of a node, materialized as zeros on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.grad_ready) {
      n.grad = Tensor<T>(n.value.shape());
      n.grad_ready = true;
    }
    return n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable node. Parameter
  // gradients are added into Parameter::grad.
  void backward(Var<T> loss) {
    if (value(loss.id).size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got " + shape_str(value(loss.id).shape()));
    }
    if (!value(loss.id).all_finite()) throw NumericError("loss is not finite");
    grad(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad_ready || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        Tensor<T>& g = n.param->grad;
        if (g.shape() != n.value.shape()) g = Tensor<T>(n.value.shape());
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

  // Parent gradient buffer if that parent takes part in differentiation,
  // nullptr otherwise.
  Tensor<T>* parent_grad(std::size_t parent) {
    return nodes_[parent].requires_grad ? &grad(parent) : nullptr;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    bool grad_ready = false;
  };

  Var<T> push(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn fn, Parameter<T>* p, bool rg) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(Shape{0}), std::move(parents), std::move(fn), p, rg, false});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace pmk
