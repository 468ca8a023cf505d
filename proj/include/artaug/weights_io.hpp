#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "artaug/denoiser.hpp"
#include "artaug/lora.hpp"
#include "artaug/tensor.hpp"

namespace artaug {

/// ATW1 container: "ATW1", u32 LE metadata length, JSON metadata
/// {version, tensors:[{name, shape, offset}], dtype:"f32le", extra}, then the
/// little-endian f32 payload. Offsets are bytes from the payload start.
struct AtwFile {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json extra = nlohmann::json::object();

  const Tensor& get(const std::string& name) const;
};

std::string encode_atw(const std::vector<std::pair<std::string, const Tensor*>>& tensors, const nlohmann::json& extra);
AtwFile decode_atw(const std::string& bytes);

/// Written to a temporary sibling and renamed into place.
void write_atw(const std::filesystem::path& path, const std::vector<std::pair<std::string, const Tensor*>>& tensors,
               const nlohmann::json& extra);
/// Throws IoError when unreadable and FormatError (byte offset) when malformed.
AtwFile read_atw(const std::filesystem::path& path);

void save_denoiser(const std::filesystem::path& path, const DenoiserParams& params);
DenoiserParams load_denoiser(const std::filesystem::path& path);
void save_lora(const std::filesystem::path& path, const LoraParams& lora);
LoraParams load_lora(const std::filesystem::path& path);

}  // namespace artaug
