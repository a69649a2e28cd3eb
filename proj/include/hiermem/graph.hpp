#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hiermem/tensor.hpp"

namespace hiermem {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  /// Gradient of the last backward pass; all zeros when none reached this node.
  std::vector<double> grad() const;
};

/// Arguments handed to an op's backward closure.
class BackwardContext {
 public:
  BackwardContext(Graph& g, std::uint32_t node) : graph_(g), node_(node) {}

  const Tensor& output() const;
  std::span<const double> output_grad() const;
  std::size_t num_inputs() const;
  const Tensor& input(std::size_t i) const;
  bool needs_grad(std::size_t i) const;
  /// Accumulator for the gradient of input `i`; only valid when needs_grad(i).
  std::span<double> input_grad(std::size_t i);

 private:
  Graph& graph_;
  std::uint32_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Tape of operation records in topological order.
///
/// Nodes are appended as ops run, so every input precedes its consumer and
/// a reverse scan of the tape is a reverse topological order. A graph is not
/// thread-safe; distinct graphs share nothing.
class Graph {
 public:
  struct Node {
    std::string op;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    Tensor* bound = nullptr;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Non-differentiable input.
  Var constant(Tensor value);
  /// Differentiable leaf owned by the graph; read its gradient via Var::grad.
  Var leaf(Tensor value);
  /// Leaf bound to an external tensor. backward() adds into `param.grad()`.
  Var param(Tensor& param);

  /// Appends an op record. `backward` may be empty for non-differentiable ops.
  /// Throws NumericError when `value` holds a non-finite entry.
  Var record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn backward);

  /// Reverse-mode sweep from a scalar loss. Gradients of owned leaves are
  /// reset first; bound parameters accumulate.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::uint32_t id) const { return nodes_.at(id); }
  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Number of node visits performed by the last backward pass.
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  friend class BackwardContext;
  friend struct Var;
  Var push(Node node);

  std::deque<Node> nodes_;  // stable addresses: values outlive later pushes
  std::size_t last_visits_ = 0;
};

/// Free-function form of Graph::backward.
void backward(Var loss);

// Forward ops ----------------------------------------------------------------
//
// Binary elementwise ops require equal shapes, or one operand with a single
// element (scalar broadcast). Everything else needs an explicit reshape.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);

/// (M, K) x (K, N) -> (M, N).
Var matmul(Var a, Var b);
/// Rank-2 transpose.
Var transpose(Var a);
Var reshape(Var a, Shape shape);
/// (B, ...) -> (B, prod(...)).
Var flatten(Var a);
Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& parts, std::size_t axis);

/// x: (B, Cin, H, W); weight: (Cout, Cin, k, k); bias: (Cout). Zero padding.
Var conv2d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding);
/// Non-overlapping average pooling with a k x k window; H and W must divide by k.
Var avgpool2d(Var x, std::size_t k);

Var relu(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);

Var sum(Var a);
Var sum(Var a, std::size_t axis, bool keepdim = false);
Var mean(Var a);
Var mean(Var a, std::size_t axis, bool keepdim = false);
Var softmax(Var a, std::size_t axis);
Var log_softmax(Var a, std::size_t axis);
Var logsumexp(Var a, std::size_t axis, bool keepdim = false);
/// Mean over rows of -sum(onehot * log_softmax(logits)). Both (B, C).
Var cross_entropy(Var logits, Var onehot);

// Helpers built from the ops above.

/// (Q, D), (N, D) -> (Q, N) squared Euclidean distances.
Var sq_distances(Var a, Var b);
/// Repeats a (1, D) row r times: (r, D). Done as ones(r,1) x row.
Var repeat_rows(Var row, std::size_t r);
/// Rows of `a` selected by `index` via a constant one-hot matmul.
Var gather_rows(Var a, const std::vector<std::size_t>& index);

}  // namespace hiermem
