#include "artaug/lora.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "artaug/error.hpp"

namespace artaug {

namespace {

void check_dims(const DenoiserParams& theta, const LoraParams& phi, const char* op) {
  if (theta.layers.size() != phi.layers.size()) {
    throw ShapeError(std::string(op) + ": model has " + std::to_string(theta.layers.size()) + " layers, lora has " +
                     std::to_string(phi.layers.size()));
  }
  for (std::size_t i = 0; i < phi.layers.size(); ++i) {
    const auto& w = theta.layers[i].weight;
    const auto& l = phi.layers[i];
    if (l.b.dim(0) != w.dim(0) || l.a.dim(1) != w.dim(1) || l.a.dim(0) != l.b.dim(1)) {
      throw ShapeError(std::string(op) + ": layer fc" + std::to_string(i) + " weight " + shape_str(w.shape()) +
                       " vs lora B " + shape_str(l.b.shape()) + " A " + shape_str(l.a.shape()));
    }
  }
}

}  // namespace

std::vector<LayerDims> LoraParams::layer_dims() const {
  std::vector<LayerDims> dims;
  for (const auto& l : layers) dims.push_back({l.b.dim(0), l.a.dim(1)});
  return dims;
}

Tensor LoraParams::delta(std::size_t layer) const { return matmul(layers.at(layer).b, layers.at(layer).a); }

std::vector<std::pair<std::string, const Tensor*>> LoraParams::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.emplace_back("fc" + std::to_string(i) + ".lora_a", &layers[i].a);
    out.emplace_back("fc" + std::to_string(i) + ".lora_b", &layers[i].b);
  }
  return out;
}

std::vector<Tensor*> LoraParams::mutable_tensors() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.a);
    out.push_back(&l.b);
  }
  return out;
}

LoraParams lora_init(std::span<const LayerDims> dims, std::size_t rank, std::uint64_t seed) {
  if (rank == 0) throw ContractError("lora rank must be >= 1");
  LoraParams phi;
  phi.rank = rank;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, static_cast<float>(kLoraInitStd));
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (rank > std::min(dims[i].in, dims[i].out)) {
      throw ContractError("lora rank " + std::to_string(rank) + " exceeds min(d1,d2) of layer fc" + std::to_string(i) +
                          " (" + std::to_string(dims[i].in) + "x" + std::to_string(dims[i].out) + ")");
    }
    LoraLayer l{Tensor({rank, dims[i].out}), Tensor::zeros({dims[i].in, rank})};
    for (auto& v : l.a.values()) v = dist(rng);
    phi.layers.push_back(std::move(l));
  }
  phi.metadata["seed"] = seed;
  return phi;
}

DenoiserParams lora_apply(const DenoiserParams& theta, const LoraParams& phi) { return lora_fuse(theta, phi, 1.0); }

DenoiserParams lora_fuse(const DenoiserParams& theta, const LoraParams& phi, double alpha) {
  check_dims(theta, phi, "lora_fuse");
  if (!std::isfinite(alpha)) throw ContractError("lora_fuse: alpha must be finite");
  DenoiserParams out = theta;
  if (alpha == 0.0) return out;
  const auto a = static_cast<float>(alpha);
  for (std::size_t i = 0; i < phi.layers.size(); ++i) {
    const Tensor d = phi.delta(i);
    auto& w = out.layers[i].weight.values();
    for (std::size_t k = 0; k < w.size(); ++k) w[k] += a * d[k];
  }
  return out;
}

LoraParams lora_concat_scale(std::span<const LoraParams> loras, double scale) {
  if (loras.empty()) throw ContractError("lora_concat_scale needs at least one lora");
  const auto dims = loras.front().layer_dims();
  std::size_t total_rank = 0;
  for (const auto& l : loras) {
    if (l.layer_dims() != dims) throw ShapeError("lora_concat_scale: loras target different model dimensions");
    total_rank += l.rank;
  }
  const auto s = static_cast<float>(scale);
  LoraParams out;
  out.rank = total_rank;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    Tensor a({total_rank, dims[i].out});
    Tensor b({dims[i].in, total_rank});
    std::size_t offset = 0;
    for (const auto& l : loras) {
      const auto& la = l.layers[i].a;
      const auto& lb = l.layers[i].b;
      for (std::size_t r = 0; r < l.rank; ++r) {
        for (std::size_t c = 0; c < dims[i].out; ++c) a.at(offset + r, c) = s * la.at(r, c);
        for (std::size_t row = 0; row < dims[i].in; ++row) b.at(row, offset + r) = lb.at(row, r);
      }
      offset += l.rank;
    }
    out.layers.push_back({std::move(a), std::move(b)});
  }
  out.metadata["merged_count"] = loras.size();
  out.metadata["scale"] = scale;
  return out;
}

LoraParams lora_scaled(const LoraParams& phi, double scale) {
  LoraParams out = phi;
  for (auto& l : out.layers) {
    for (auto& v : l.a.values()) v *= static_cast<float>(scale);
  }
  return out;
}

float lora_update_distance(const LoraParams& a, const LoraParams& b) {
  if (a.layer_dims() != b.layer_dims()) throw ShapeError("lora_update_distance: dimensions differ");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.layers.size(); ++i) m = std::max(m, max_abs_diff(a.delta(i), b.delta(i)));
  return m;
}

float lora_update_norm(const LoraParams& phi) {
  double s = 0.0;
  for (std::size_t i = 0; i < phi.layers.size(); ++i) {
    const float n = frobenius_norm(phi.delta(i));
    s += double(n) * n;
  }
  return static_cast<float>(std::sqrt(s));
}

}  // namespace artaug
