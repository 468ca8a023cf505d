#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "artaug/diffusion.hpp"
#include "artaug/image.hpp"
#include "artaug/tensor.hpp"
#include "artaug/toy_world.hpp"

namespace artaug {

/// Raw critic box in absolute pixel coordinates, before validation.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

/// Validated suggestion: ones exactly inside [y1,y2) x [x1,x2).
struct RegionSuggestion {
  std::array<int, 4> bbox{};  // x1, y1, x2, y2 after clamping
  PromptSpec prompt;
  std::string description;
  Tensor mask;  // [H, W] of 0/1

  nlohmann::json to_json() const;
  static RegionSuggestion from_json(const nlohmann::json& j, std::size_t height, std::size_t width);
};

/// Clamps to [0,W] x [0,H], floors the lower corner and ceils the upper one.
/// Throws DegenerateRegion when the clamped box is empty.
Tensor bbox_to_mask(const BBox& bbox, std::size_t height, std::size_t width);
std::array<int, 4> clamp_bbox(const BBox& bbox, std::size_t height, std::size_t width);

/// Pixelwise (base + sum_i region_i * mask_i) / (1 + sum_i mask_i).
/// Every tensor holds H*W values; shapes may differ only by reshaping.
Tensor combine_partitioned(const Tensor& base, std::span<const Tensor> regions, std::span<const Tensor> masks);

/// Per-prompt prediction eps_hat(P', t, h_t) at a fixed (t, h_t).
using PromptPredictor = std::function<Tensor(const PromptSpec&)>;

/// Evaluates the predictor once for `prompt` and once per suggestion (n+1
/// calls) and combines the results.
Tensor partitioned_predict(const PromptPredictor& predict, const PromptSpec& prompt,
                           std::span<const RegionSuggestion> suggestions);

Tensor partitioned_denoise(const DenoiserParams& params, const LoraParams* lora, const PromptSpec& prompt,
                           std::span<const RegionSuggestion> suggestions, const NoiseSchedule& schedule, double t,
                           const Tensor& h_t);

struct CriticBackend {
  enum class Kind { kRuleBased, kHttp };
  Kind kind = Kind::kRuleBased;
  std::string endpoint;  // http://host[:port]/path
  std::string model;
  std::string token_env;  // name of the env var holding the bearer token
  double timeout_seconds = 30.0;
  std::size_t max_regions = 4;

  nlohmann::json to_json() const;
  static CriticBackend from_json(const nlohmann::json& j);
};

/// Looks for (a) a shape region off its brightness token or lacking detail and
/// (b) the flattest quadrant. Region prompts keep the shape token.
std::vector<RegionSuggestion> rule_critic(const ImageBuffer& image, const PromptSpec& prompt,
                                          const CriticBackend& config, std::uint64_t seed);

/// The fixed instruction sent to a multimodal critic, "__prompt__" replaced.
std::string critic_instruction(const PromptSpec& prompt);

/// First substring of `text` that parses as a JSON array.
std::optional<nlohmann::json> first_json_array(std::string_view text);

/// Maps a free-text region description to a prompt by keyword matching;
/// unmatched slots keep the original tokens. No keyword at all gives the
/// original prompt with a halo.
PromptSpec description_to_prompt(std::string_view description, const PromptSpec& original);

/// Parses a critic reply into suggestions. Throws ParseError without a usable
/// array; invalid or degenerate entries are dropped, the list is capped.
std::vector<RegionSuggestion> parse_critic_reply(std::string_view reply, const PromptSpec& prompt,
                                                 std::size_t height, std::size_t width, std::size_t max_regions);

/// Raw POST to the backend; returns the response body. Transport failures and
/// non-2xx statuses throw CriticUnavailable.
std::string post_critic_request(const CriticBackend& backend, const nlohmann::json& body);

std::vector<RegionSuggestion> mllm_critic(const ImageBuffer& image, const PromptSpec& prompt,
                                          const CriticBackend& backend);

/// Dispatches on the backend kind; the http path falls back to rule_critic on
/// CriticUnavailable or ParseError.
std::vector<RegionSuggestion> critique(const ImageBuffer& image, const PromptSpec& prompt,
                                       const CriticBackend& backend, std::uint64_t seed);

/// Rule backend: identity. Http backend: asks for a token tuple, identity on
/// an unparseable reply. Transport failure throws CriticUnavailable.
PromptSpec refine_prompt(const PromptSpec& prompt, const CriticBackend& backend);

struct InteractionResult {
  PromptSpec prompt;  // refined prompt used for generation
  std::uint64_t seed = 0;
  ImageBuffer before, after;
  std::vector<RegionSuggestion> suggestions;
};

/// X = sample(P, seed); X' re-samples from the same noise with partitioned
/// denoising at every step. Empty suggestions give X' == X.
InteractionResult interactive_generate(const DenoiserParams& params, const LoraParams* lora,
                                       const PromptSpec& prompt, std::uint64_t seed, const CriticBackend& critic,
                                       const NoiseSchedule& schedule, std::size_t sampler_steps = 50);

}  // namespace artaug
