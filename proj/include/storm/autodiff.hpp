#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "storm/tensor.hpp"

namespace storm::num {

// Named, ordered parameter tensors with same-shape gradient buffers.
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  Tensor& grad(std::size_t i) { return grads_[i]; }
  const Tensor& grad(std::size_t i) const { return grads_[i]; }

  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t index(const std::string& name) const;  // throws when absent

  void zero_grad();
  std::size_t scalar_count() const;
  double grad_norm() const;

  bool operator==(const ParamSet& other) const { return names_ == other.names_ && values_ == other.values_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
};

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// tape backwards is a valid topological order. With `record == false` the
// graph only evaluates values (inference).
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor& out_grad)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }

  Var constant(Tensor value);
  Var leaf(Tensor value);  // owns its value, requires grad
  // Binds an external parameter; gradients accumulate into params.grad(i).
  Var param(ParamSet& params, std::size_t i);
  // Read-only reference to an external tensor (no copy, no gradient). The
  // tensor must outlive the graph.
  Var view(const Tensor& value);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient of a node after backward(); empty when nothing reached it.
  const Tensor& grad(Var v) const;

  // Seeds d(root)/d(root) = 1 for a one-element root and propagates.
  void backward(Var root);

  // Used by op implementations.
  Var push(Tensor value, std::span<const Var> inputs, Backward backward);
  Var push(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }
  // True when recording and any input carries a gradient.
  bool needs_grad(std::span<const Var> inputs) const;
  bool needs_grad(std::initializer_list<Var> inputs) const {
    return needs_grad(std::span<const Var>(inputs.begin(), inputs.size()));
  }
  Tensor& grad_buffer(Var v);  // allocates zeros on first touch

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    const Tensor* external_value = nullptr;
    Tensor* external_grad = nullptr;
    bool requires_grad = false;
    Backward backward;
  };
  bool record_;
  std::vector<Node> nodes_;
};

// ---- Value-level operations -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor row_softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon);
Tensor gelu(const Tensor& x);
Tensor transpose(const Tensor& x);

// ---- Differentiable operations ----------------------------------------------

Var matmul(Graph& g, Var a, Var b);
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double factor);
Var add_row_bias(Graph& g, Var x, Var bias);
Var layer_norm(Graph& g, Var x, Var gain, Var bias, double epsilon);
Var gelu(Graph& g, Var x);
Var row_softmax(Graph& g, Var x);
Var concat_rows(Graph& g, std::span<const Var> parts);
Var slice_rows(Graph& g, Var x, std::size_t begin, std::size_t end);
// Rows of `table` selected by id (embedding lookup), gradient scatter-added.
Var gather_rows(Graph& g, Var table, std::span<const int> ids);
// Multi-head causal attention. Query row r sits at absolute position
// `query_offset + r` and attends keys [0, query_offset + r].
Var causal_attention(Graph& g, Var q, Var k, Var v, std::size_t heads, std::size_t query_offset);
// Sum of squares of all elements -> [1].
Var sum_squares(Graph& g, Var x);
// Sum over rows with target >= 0 of -log softmax(logits[row])[target] -> [1].
Var cross_entropy_sum(Graph& g, Var logits, std::span<const int> targets);

}  // namespace storm::num
