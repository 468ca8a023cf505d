#include "artaug/denoiser.hpp"

#include <cmath>
#include <random>

#include "artaug/error.hpp"
#include "artaug/toy_world.hpp"

namespace artaug {

namespace {

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, static_cast<float>(stddev));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

std::size_t required(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_unsigned()) {
    throw ContractError(std::string("denoiser config needs unsigned integer \"") + key + "\"");
  }
  return j[key].get<std::size_t>();
}

}  // namespace

nlohmann::json DenoiserConfig::to_json() const {
  return {{"height", height}, {"width", width}, {"hidden", hidden}, {"hidden_layers", hidden_layers}, {"time_dim", time_dim}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.height = required(j, "height");
  c.width = required(j, "width");
  c.hidden = required(j, "hidden");
  c.hidden_layers = required(j, "hidden_layers");
  c.time_dim = required(j, "time_dim");
  return c;
}

std::vector<LayerDims> layer_dims_for(const DenoiserConfig& config) {
  if (config.hidden_layers < 1 || config.hidden < 1) throw ContractError("denoiser needs at least one hidden layer");
  std::vector<LayerDims> dims;
  dims.push_back({config.pixels(), config.hidden});
  for (std::size_t i = 1; i < config.hidden_layers; ++i) dims.push_back({config.hidden, config.hidden});
  dims.push_back({config.hidden, config.pixels()});
  return dims;
}

DenoiserParams DenoiserParams::init(const DenoiserConfig& config, std::uint64_t seed) {
  if (config.time_dim < 2 || config.time_dim % 2) throw ContractError("time_dim must be even and >= 2");
  std::mt19937_64 rng(seed);
  DenoiserParams p;
  p.config = config;
  const auto dims = layer_dims_for(config);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const bool last = i + 1 == dims.size();
    const double stddev = (last ? 0.5 : 1.0) / std::sqrt(static_cast<double>(dims[i].in));
    p.layers.push_back({gaussian({dims[i].in, dims[i].out}, stddev, rng), Tensor::zeros({dims[i].out})});
  }
  p.token_table = gaussian({kPromptTokenSlots, config.hidden}, 0.5, rng);
  p.time_table = gaussian({config.time_dim, config.hidden}, 1.0 / std::sqrt(double(config.time_dim)), rng);
  return p;
}

std::vector<LayerDims> DenoiserParams::layer_dims() const {
  std::vector<LayerDims> dims;
  for (const auto& l : layers) dims.push_back({l.weight.dim(0), l.weight.dim(1)});
  return dims;
}

std::size_t DenoiserParams::parameter_count() const {
  std::size_t n = token_table.numel() + time_table.numel();
  for (const auto& l : layers) n += l.weight.numel() + l.bias.numel();
  return n;
}

std::vector<std::pair<std::string, const Tensor*>> DenoiserParams::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.emplace_back("fc" + std::to_string(i) + ".weight", &layers[i].weight);
    out.emplace_back("fc" + std::to_string(i) + ".bias", &layers[i].bias);
  }
  out.emplace_back("cond.token_table", &token_table);
  out.emplace_back("cond.time_table", &time_table);
  return out;
}

std::vector<Tensor*> DenoiserParams::mutable_tensors() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  out.push_back(&token_table);
  out.push_back(&time_table);
  return out;
}

bool DenoiserParams::operator==(const DenoiserParams& other) const {
  if (!(config == other.config) || layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!(layers[i].weight == other.layers[i].weight) || !(layers[i].bias == other.layers[i].bias)) return false;
  }
  return token_table == other.token_table && time_table == other.time_table;
}

}  // namespace artaug
