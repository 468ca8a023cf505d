#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "artaug/tensor.hpp"

namespace artaug {

/// The closed set of differentiable primitives.
enum class OpKind {
  kLeaf,
  kMatMul,             // [n,k] x [k,m]
  kAdd,                // same shape
  kSubtract,           // same shape
  kMultiply,           // same shape, or second operand a scalar
  kBroadcastRows,      // [d] or [1,d] -> [n,d]
  kSiLU,
  kMean,               // all elements -> [1]
  kSum,                // all elements -> [1]
  kSquaredError,       // sum((a-b)^2) -> [1]
  kConcat,             // [n,a] ++ [n,b] -> [n,a+b]
  kTimestepEmbedding,  // t [n] -> [n,dim] sinusoidal
};

std::string_view op_name(OpKind kind);

class Tape;

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Gradients produced by one backward pass, indexed by node id.
class GradientMap {
 public:
  GradientMap() = default;
  GradientMap(std::vector<std::optional<Tensor>> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  /// Gradient of the loss w.r.t. `v`; zeros when `v` was unreachable.
  Tensor get(Var v) const;
  bool reachable(Var v) const { return v.id < grads_.size() && grads_[v.id].has_value(); }

 private:
  std::vector<std::optional<Tensor>> grads_;
  std::vector<Shape> shapes_;
};

/// Computation record: values of every node in creation (topological) order.
/// Single-threaded; build one Tape per thread.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var parameter(Tensor value) { return leaf(std::move(value), true); }
  /// Leaf that reads `value` in place; it must outlive the tape's use.
  Var leaf_ref(const Tensor& value, bool requires_grad = false);

  /// Generic entry point; `aux` carries the row count for kBroadcastRows and
  /// the embedding width for kTimestepEmbedding.
  Var apply(OpKind kind, std::span<const Var> inputs, std::size_t aux = 0);

  Var matmul(Var a, Var b) { return apply2(OpKind::kMatMul, a, b); }
  Var add(Var a, Var b) { return apply2(OpKind::kAdd, a, b); }
  Var sub(Var a, Var b) { return apply2(OpKind::kSubtract, a, b); }
  Var mul(Var a, Var b) { return apply2(OpKind::kMultiply, a, b); }
  Var broadcast_rows(Var v, std::size_t rows) { return apply1(OpKind::kBroadcastRows, v, rows); }
  Var silu(Var x) { return apply1(OpKind::kSiLU, x); }
  Var mean(Var x) { return apply1(OpKind::kMean, x); }
  Var sum(Var x) { return apply1(OpKind::kSum, x); }
  Var squared_error(Var a, Var b) { return apply2(OpKind::kSquaredError, a, b); }
  Var concat(Var a, Var b) { return apply2(OpKind::kConcat, a, b); }
  Var timestep_embedding(Var t, std::size_t dim) { return apply1(OpKind::kTimestepEmbedding, t, dim); }

  const Tensor& value(Var v) const { return node_value(nodes_.at(v.id)); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-mode pass from a scalar node. A tape can be differentiated once;
  /// call reset() before recording again.
  GradientMap backward(Var loss);
  void reset();

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    std::size_t aux = 0;
    bool requires_grad = false;
    Tensor value;
    const Tensor* external = nullptr;
  };

  static const Tensor& node_value(const Node& n) { return n.external ? *n.external : n.value; }

  Var apply1(OpKind k, Var a, std::size_t aux = 0) {
    const Var in[1] = {a};
    return apply(k, in, aux);
  }
  Var apply2(OpKind k, Var a, Var b) {
    const Var in[2] = {a, b};
    return apply(k, in);
  }

  std::vector<Node> nodes_;
  bool differentiated_ = false;
};

/// Sinusoidal embedding of scalar timesteps in [0,1]; shared by the tape
/// primitive and inference code. Frequencies span 1..1000 on t*1000.
Tensor sinusoidal_embedding(std::span<const float> t, std::size_t dim);

/// Central finite-difference check. `f` is evaluated with perturbed copies of
/// `params`; `analytic` holds the gradient for each parameter tensor.
/// Returns max |analytic - numeric| / (|numeric| + 1e-8) over all coordinates.
/// Throws NumericalError when f is non-finite.
double finite_difference_check(const std::function<double(const std::vector<Tensor>&)>& f,
                               const std::vector<Tensor>& params, const std::vector<Tensor>& analytic,
                               double step = 1e-3);

/// Adam state for a fixed list of parameter tensors.
struct OptimizerState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  static OptimizerState for_params(const std::vector<Tensor*>& params, double learning_rate);
};

/// One Adam update in place. Throws NumericalError on a non-finite gradient.
void adam_step(OptimizerState& state, const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);

}  // namespace artaug
