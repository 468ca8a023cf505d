#include "artaug/autodiff.hpp"

#include <cmath>
#include <string>

#include "artaug/error.hpp"

namespace artaug {

namespace {

[[noreturn]] void shape_fail(OpKind kind, std::span<const Tensor* const> ins) {
  std::string msg = std::string(op_name(kind)) + ": incompatible shapes";
  for (const Tensor* t : ins) msg += " " + shape_str(t->shape());
  throw ShapeError(msg);
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

constexpr float kTimeScale = 1000.0f;

float embedding_frequency(std::size_t k, std::size_t half) {
  return std::exp(-std::log(10000.0f) * static_cast<float>(k) / static_cast<float>(half));
}

void accumulate(std::optional<Tensor>& slot, const Tensor& g) {
  if (!slot) {
    slot = g;
    return;
  }
  auto& dst = slot->values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

Tensor transpose(const Tensor& a) {
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t r = 0; r < a.dim(0); ++r)
    for (std::size_t c = 0; c < a.dim(1); ++c) t.at(c, r) = a.at(r, c);
  return t;
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSubtract: return "subtract";
    case OpKind::kMultiply: return "multiply";
    case OpKind::kBroadcastRows: return "broadcast_rows";
    case OpKind::kSiLU: return "silu";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kSquaredError: return "squared_error";
    case OpKind::kConcat: return "concat";
    case OpKind::kTimestepEmbedding: return "timestep_embedding";
  }
  return "unknown";
}

Tensor sinusoidal_embedding(std::span<const float> t, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ShapeError("timestep_embedding: width must be even and >= 2");
  const std::size_t half = dim / 2;
  Tensor out({t.size(), dim});
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t k = 0; k < half; ++k) {
      const float arg = t[i] * kTimeScale * embedding_frequency(k, half);
      out.at(i, k) = std::sin(arg);
      out.at(i, half + k) = std::cos(arg);
    }
  }
  return out;
}

Tensor GradientMap::get(Var v) const {
  if (v.id >= shapes_.size()) throw ContractError("gradient requested for unknown node");
  if (grads_[v.id]) return *grads_[v.id];
  return Tensor::zeros(shapes_[v.id]);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (differentiated_) throw ContractError("tape already differentiated; reset() before recording");
  Node n;
  n.kind = OpKind::kLeaf;
  n.requires_grad = requires_grad;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf_ref(const Tensor& value, bool requires_grad) {
  if (differentiated_) throw ContractError("tape already differentiated; reset() before recording");
  Node n;
  n.kind = OpKind::kLeaf;
  n.requires_grad = requires_grad;
  n.external = &value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::apply(OpKind kind, std::span<const Var> inputs, std::size_t aux) {
  if (differentiated_) throw ContractError("tape already differentiated; reset() before recording");
  std::vector<const Tensor*> in;
  for (Var v : inputs) {
    if (v.id >= nodes_.size()) throw ContractError("input node is not on this tape");
    in.push_back(&node_value(nodes_[v.id]));
  }
  const auto arity = [&](std::size_t n) {
    if (in.size() != n) throw ContractError(std::string(op_name(kind)) + ": wrong number of inputs");
  };

  Tensor out;
  switch (kind) {
    case OpKind::kLeaf:
      throw ContractError("use leaf() to create leaves");
    case OpKind::kMatMul:
      arity(2);
      if (in[0]->rank() != 2 || in[1]->rank() != 2 || in[0]->dim(1) != in[1]->dim(0)) shape_fail(kind, in);
      out = artaug::matmul(*in[0], *in[1]);
      break;
    case OpKind::kAdd:
    case OpKind::kSubtract:
      arity(2);
      if (in[0]->shape() != in[1]->shape()) shape_fail(kind, in);
      out = kind == OpKind::kAdd ? artaug::add(*in[0], *in[1]) : artaug::sub(*in[0], *in[1]);
      break;
    case OpKind::kMultiply: {
      arity(2);
      const bool scalar_rhs = in[1]->numel() == 1;
      if (!scalar_rhs && in[0]->shape() != in[1]->shape()) shape_fail(kind, in);
      out = *in[0];
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= scalar_rhs ? (*in[1])[0] : (*in[1])[i];
      break;
    }
    case OpKind::kBroadcastRows: {
      arity(1);
      const Tensor& v = *in[0];
      const bool row = v.rank() == 1 || (v.rank() == 2 && v.dim(0) == 1);
      if (!row || aux == 0) shape_fail(kind, in);
      const std::size_t d = v.numel();
      out = Tensor({aux, d});
      for (std::size_t r = 0; r < aux; ++r)
        for (std::size_t c = 0; c < d; ++c) out.at(r, c) = v[c];
      break;
    }
    case OpKind::kSiLU:
      arity(1);
      out = *in[0];
      for (auto& x : out.values()) x = x * sigmoid(x);
      break;
    case OpKind::kMean:
    case OpKind::kSum: {
      arity(1);
      double s = 0.0;
      for (float x : in[0]->values()) s += x;
      if (kind == OpKind::kMean) s /= static_cast<double>(in[0]->numel());
      out = Tensor::scalar(static_cast<float>(s));
      break;
    }
    case OpKind::kSquaredError: {
      arity(2);
      if (in[0]->shape() != in[1]->shape()) shape_fail(kind, in);
      double s = 0.0;
      for (std::size_t i = 0; i < in[0]->numel(); ++i) {
        const double d = double((*in[0])[i]) - double((*in[1])[i]);
        s += d * d;
      }
      out = Tensor::scalar(static_cast<float>(s));
      break;
    }
    case OpKind::kConcat: {
      arity(2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) shape_fail(kind, in);
      out = Tensor({a.dim(0), a.dim(1) + b.dim(1)});
      for (std::size_t r = 0; r < a.dim(0); ++r) {
        for (std::size_t c = 0; c < a.dim(1); ++c) out.at(r, c) = a.at(r, c);
        for (std::size_t c = 0; c < b.dim(1); ++c) out.at(r, a.dim(1) + c) = b.at(r, c);
      }
      break;
    }
    case OpKind::kTimestepEmbedding:
      arity(1);
      if (in[0]->rank() > 2 || (in[0]->rank() == 2 && in[0]->dim(1) != 1)) shape_fail(kind, in);
      out = sinusoidal_embedding(in[0]->data(), aux);
      break;
  }

  Node n;
  n.kind = kind;
  n.aux = aux;
  for (Var v : inputs) {
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  n.value = std::move(out);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

GradientMap Tape::backward(Var loss) {
  if (differentiated_) throw ContractError("backward called twice on one tape without reset()");
  if (loss.id >= nodes_.size()) throw ContractError("loss node is not on this tape");
  if (!node_value(nodes_[loss.id]).is_scalar()) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(node_value(nodes_[loss.id]).shape()));
  }
  differentiated_ = true;

  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[loss.id] = Tensor::scalar(1.0f).reshaped(node_value(nodes_[loss.id]).shape());

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!grads[id] || n.kind == OpKind::kLeaf || !n.requires_grad) continue;
    const Tensor& g = *grads[id];
    const auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
    const auto in = [&](std::size_t k) -> const Tensor& { return node_value(nodes_[n.inputs[k]]); };
    const auto push = [&](std::size_t k, const Tensor& t) { accumulate(grads[n.inputs[k]], t); };

    switch (n.kind) {
      case OpKind::kLeaf:
        break;
      case OpKind::kMatMul:
        if (wants(0)) push(0, artaug::matmul(g, transpose(in(1))));
        if (wants(1)) push(1, artaug::matmul(transpose(in(0)), g));
        break;
      case OpKind::kAdd:
        if (wants(0)) push(0, g);
        if (wants(1)) push(1, g);
        break;
      case OpKind::kSubtract:
        if (wants(0)) push(0, g);
        if (wants(1)) push(1, scale(g, -1.0f));
        break;
      case OpKind::kMultiply: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const bool scalar_rhs = b.numel() == 1;
        if (wants(0)) {
          Tensor ga = g;
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= scalar_rhs ? b[0] : b[i];
          push(0, ga);
        }
        if (wants(1)) {
          if (scalar_rhs) {
            double s = 0.0;
            for (std::size_t i = 0; i < g.numel(); ++i) s += double(g[i]) * a[i];
            push(1, Tensor::scalar(static_cast<float>(s)).reshaped(b.shape()));
          } else {
            Tensor gb = g;
            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] *= a[i];
            push(1, gb);
          }
        }
        break;
      }
      case OpKind::kBroadcastRows: {
        const Tensor& v = in(0);
        Tensor gv = Tensor::zeros(v.shape());
        const std::size_t d = v.numel();
        for (std::size_t r = 0; r < n.aux; ++r)
          for (std::size_t c = 0; c < d; ++c) gv[c] += g.at(r, c);
        push(0, gv);
        break;
      }
      case OpKind::kSiLU: {
        const Tensor& x = in(0);
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.numel(); ++i) {
          const float s = sigmoid(x[i]);
          gx[i] *= s * (1.0f + x[i] * (1.0f - s));
        }
        push(0, gx);
        break;
      }
      case OpKind::kMean:
      case OpKind::kSum: {
        const Tensor& x = in(0);
        float v = g[0];
        if (n.kind == OpKind::kMean) v /= static_cast<float>(x.numel());
        push(0, Tensor(x.shape(), v));
        break;
      }
      case OpKind::kSquaredError: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        Tensor ga = artaug::sub(a, b);
        for (auto& v : ga.values()) v *= 2.0f * g[0];
        if (wants(0)) push(0, ga);
        if (wants(1)) push(1, scale(ga, -1.0f));
        break;
      }
      case OpKind::kConcat: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        Tensor ga = Tensor::zeros(a.shape());
        Tensor gb = Tensor::zeros(b.shape());
        for (std::size_t r = 0; r < a.dim(0); ++r) {
          for (std::size_t c = 0; c < a.dim(1); ++c) ga.at(r, c) = g.at(r, c);
          for (std::size_t c = 0; c < b.dim(1); ++c) gb.at(r, c) = g.at(r, a.dim(1) + c);
        }
        if (wants(0)) push(0, ga);
        if (wants(1)) push(1, gb);
        break;
      }
      case OpKind::kTimestepEmbedding: {
        const Tensor& t = in(0);
        const std::size_t half = n.aux / 2;
        Tensor gt = Tensor::zeros(t.shape());
        for (std::size_t i = 0; i < t.numel(); ++i) {
          double acc = 0.0;
          for (std::size_t k = 0; k < half; ++k) {
            const float f = kTimeScale * embedding_frequency(k, half);
            const float arg = t[i] * f;
            acc += double(g.at(i, k)) * f * std::cos(arg) - double(g.at(i, half + k)) * f * std::sin(arg);
          }
          gt[i] = static_cast<float>(acc);
        }
        push(0, gt);
        break;
      }
    }
  }

  std::vector<Shape> shapes;
  shapes.reserve(nodes_.size());
  for (const auto& n : nodes_) shapes.push_back(node_value(n).shape());
  return GradientMap(std::move(grads), std::move(shapes));
}

void Tape::reset() {
  nodes_.clear();
  differentiated_ = false;
}

double finite_difference_check(const std::function<double(const std::vector<Tensor>&)>& f,
                               const std::vector<Tensor>& params, const std::vector<Tensor>& analytic,
                               double step) {
  if (params.size() != analytic.size()) throw ContractError("finite_difference_check: gradient count mismatch");
  std::vector<Tensor> probe = params;
  if (!std::isfinite(f(probe))) throw NumericalError("finite_difference_check: f is not finite at params");
  double worst = 0.0;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    if (analytic[p].shape() != params[p].shape()) {
      throw ShapeError("finite_difference_check: gradient shape " + shape_str(analytic[p].shape()) +
                       " vs parameter " + shape_str(params[p].shape()));
    }
    for (std::size_t i = 0; i < probe[p].numel(); ++i) {
      const float original = probe[p][i];
      probe[p][i] = static_cast<float>(original + step);
      const double hi = f(probe);
      const double actual_hi = double(probe[p][i]) - original;
      probe[p][i] = static_cast<float>(original - step);
      const double lo = f(probe);
      const double actual_lo = original - double(probe[p][i]);
      probe[p][i] = original;
      if (!std::isfinite(hi) || !std::isfinite(lo)) throw NumericalError("finite_difference_check: f is not finite");
      // f32 parameters cannot represent original +- step exactly; divide by the realised span.
      const double numeric = (hi - lo) / (actual_hi + actual_lo);
      const double err = std::abs(double(analytic[p][i]) - numeric) / (std::abs(numeric) + 1e-8);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

OptimizerState OptimizerState::for_params(const std::vector<Tensor*>& params, double learning_rate) {
  OptimizerState s;
  s.learning_rate = learning_rate;
  for (const Tensor* p : params) {
    s.first_moment.push_back(Tensor::zeros_like(*p));
    s.second_moment.push_back(Tensor::zeros_like(*p));
  }
  return s;
}

void adam_step(OptimizerState& state, const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter/gradient/state counts differ");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p]->shape() != grads[p].shape() || params[p]->shape() != state.first_moment[p].shape()) {
      throw ShapeError("adam_step: parameter " + std::to_string(p) + " shape " + shape_str(params[p]->shape()) +
                       " vs gradient " + shape_str(grads[p].shape()));
    }
    if (!grads[p].all_finite()) throw NumericalError("adam_step: non-finite gradient in parameter " + std::to_string(p));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p]->values();
    auto& m = state.first_moment[p].values();
    auto& v = state.second_moment[p].values();
    const auto& g = grads[p].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = static_cast<float>(state.beta1 * m[i] + (1.0 - state.beta1) * g[i]);
      v[i] = static_cast<float>(state.beta2 * v[i] + (1.0 - state.beta2) * double(g[i]) * g[i]);
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] = static_cast<float>(w[i] - state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  }
}

}  // namespace artaug
