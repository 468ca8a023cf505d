#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "artaug/denoiser.hpp"
#include "artaug/tensor.hpp"

namespace artaug {

struct LoraLayer {
  Tensor a;  // [rank, out]
  Tensor b;  // [in, rank]
};

/// Low-rank update {(A_i, B_i)} for every fully connected layer; the update
/// of layer i is B_i A_i, shaped like its weight.
struct LoraParams {
  std::size_t rank = 0;
  std::vector<LoraLayer> layers;
  nlohmann::json metadata = nlohmann::json::object();

  std::vector<LayerDims> layer_dims() const;
  /// Dense B_i A_i of one layer.
  Tensor delta(std::size_t layer) const;

  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<Tensor*> mutable_tensors();
};

inline constexpr double kLoraInitStd = 0.02;

/// A ~ N(0, 0.02^2) seeded, B = 0. Throws ContractError if rank exceeds
/// min(in, out) of any layer or rank == 0.
LoraParams lora_init(std::span<const LayerDims> dims, std::size_t rank, std::uint64_t seed);

/// theta (+) phi: a copy of theta whose layer weights are W_i + B_i A_i.
DenoiserParams lora_apply(const DenoiserParams& theta, const LoraParams& phi);

/// theta (+) alpha * phi. alpha == 0 returns theta bit-for-bit.
DenoiserParams lora_fuse(const DenoiserParams& theta, const LoraParams& phi, double alpha);

/// Column-concatenates B and row-concatenates s*A per layer, so the merged
/// update is s * sum_j B^j A^j exactly. Ranks may differ between inputs.
LoraParams lora_concat_scale(std::span<const LoraParams> loras, double scale);

/// Scales every A by s (the update scales by s).
LoraParams lora_scaled(const LoraParams& phi, double scale);

/// Max over layers of |update_a - update_b| (dense comparison).
float lora_update_distance(const LoraParams& a, const LoraParams& b);
/// sqrt(sum_i ||B_i A_i||_F^2).
float lora_update_norm(const LoraParams& phi);

}  // namespace artaug
