#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "artaug/tensor.hpp"

namespace artaug {

struct DenoiserConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t hidden = 192;
  std::size_t hidden_layers = 3;
  std::size_t time_dim = 32;

  std::size_t pixels() const noexcept { return height * width; }
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
  bool operator==(const DenoiserConfig&) const = default;
};

/// In x Out shape of one fully connected layer (weight is [in, out], y = x W + b).
struct LayerDims {
  std::size_t in = 0;
  std::size_t out = 0;
  bool operator==(const LayerDims&) const = default;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

/// MLP denoiser weights. `layers` are the fully connected layers covered by
/// LoRA; the two conditioning tables feed every hidden pre-activation.
struct DenoiserParams {
  DenoiserConfig config;
  std::vector<Linear> layers;
  Tensor token_table;  // [10, hidden]
  Tensor time_table;   // [time_dim, hidden]

  static DenoiserParams init(const DenoiserConfig& config, std::uint64_t seed);

  std::vector<LayerDims> layer_dims() const;
  std::size_t parameter_count() const;

  /// Stable (name, tensor) view used by the weight file format and optimiser.
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<Tensor*> mutable_tensors();

  bool operator==(const DenoiserParams& other) const;
};

std::vector<LayerDims> layer_dims_for(const DenoiserConfig& config);

}  // namespace artaug
