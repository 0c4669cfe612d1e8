#pragma once

#include <cassert>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "crackkw/tensor.hpp"

namespace crackkw {

/// A trainable tensor that outlives individual graphs. Gradients from every
/// graph it participates in accumulate into `grad` until `zero_grad()`.
struct Parameter {
  Tensor value;
  Tensor grad;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape(), 0.0) {}

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

class Graph;

/// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// The computation record: nodes are appended in execution order, so every
/// input id precedes its consumer and a reverse sweep is a valid topological
/// order for the backward pass.
class Graph {
 public:
  /// Receives the gradient of the node's output and scatters it into inputs.
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push("const", std::move(value), false, {}, nullptr, nullptr); }

  Var leaf(Tensor value, bool requires_grad = true) {
    return push("leaf", std::move(value), requires_grad, {}, nullptr, nullptr);
  }

  /// Leaf whose gradient is added to `p.grad` after backward().
  Var param(Parameter& p) { return push("param", p.value, true, {}, nullptr, &p); }

  /// Records the result of a primitive. The node requires grad iff any input does;
  /// otherwise the backward rule is dropped.
  Var record(std::string_view kind, Tensor value, std::vector<Var> inputs, BackwardFn fn) {
    bool rg = false;
    std::vector<std::uint32_t> ids;
    ids.reserve(inputs.size());
    for (const auto& v : inputs) {
      assert(v.graph == this);
      rg = rg || nodes_[v.id].requires_grad;
      ids.push_back(v.id);
    }
    return push(kind, std::move(value), rg, std::move(ids), rg ? std::move(fn) : BackwardFn{}, nullptr);
  }

  const Tensor& value(std::uint32_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }
  std::string_view kind(std::uint32_t id) const { return nodes_.at(id).kind; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<std::uint32_t>& inputs(std::uint32_t id) const { return nodes_.at(id).inputs; }

  /// Gradient buffer of a node for accumulation inside backward rules;
  /// nullptr when the node does not require grad.
  double* grad_data(std::uint32_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (!n.grad) n.grad.emplace(n.value.shape(), 0.0);
    return n.grad->storage().data();
  }
  double* grad_data(Var v) { return grad_data(v.id); }

  /// Gradient after backward(); absent for nodes the loss did not reach.
  const std::optional<Tensor>& grad(Var v) const { return nodes_.at(v.id).grad; }

  /// Reverse sweep from a scalar loss. Each node's rule runs exactly once.
  void backward(Var loss) {
    if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to another graph");
    if (value(loss.id).size() != 1) {
      throw ShapeError("backward requires a scalar loss, got " + shape_str(value(loss.id).shape()));
    }
    if (!nodes_[loss.id].requires_grad) return;
    for (auto& n : nodes_) n.grad.reset();
    grad_data(loss.id)[0] = 1.0;
    for (std::int64_t i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.grad) continue;
      if (n.backward) n.backward(*this, *n.grad);
      if (n.sink) {
        auto& g = n.sink->grad;
        if (g.shape() != n.value.shape()) g = Tensor(n.value.shape(), 0.0);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += (*n.grad)[k];
      }
    }
  }

 private:
  struct Node {
    std::string_view kind;
    Tensor value;
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    Parameter* sink = nullptr;
    std::optional<Tensor> grad;
  };

  Var push(std::string_view kind, Tensor value, bool rg, std::vector<std::uint32_t> inputs, BackwardFn fn,
           Parameter* sink) {
    nodes_.push_back(Node{kind, std::move(value), rg, std::move(inputs), std::move(fn), sink, std::nullopt});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  // A deque keeps node references valid while later nodes are appended, so
  // ops may hold `const Tensor&` to their inputs across record().
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline bool Var::requires_grad() const { return graph->requires_grad(id); }

}  // namespace crackkw
