#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "artaug/image.hpp"

namespace artaug {

enum class ShapeToken : std::uint8_t { kDisk, kSquare, kCross };
enum class BrightnessToken : std::uint8_t { kDim, kBright };
enum class BackgroundToken : std::uint8_t { kDark, kLight };
enum class DetailToken : std::uint8_t { kNone, kHalo, kBorder };

/// Structured prompt over the procedural scene vocabulary.
struct PromptSpec {
  ShapeToken shape = ShapeToken::kDisk;
  BrightnessToken brightness = BrightnessToken::kBright;
  BackgroundToken background = BackgroundToken::kDark;
  DetailToken detail = DetailToken::kNone;

  /// "a bright disk on a dark background with halo"
  std::string text() const;
  /// Token matching over free text; throws ParseError when shape, brightness
  /// or background cannot be found.
  static PromptSpec parse(std::string_view text);

  /// Index in 0..35, stable across runs.
  std::size_t index() const;
  static PromptSpec from_index(std::size_t index);

  nlohmann::json to_json() const;
  static PromptSpec from_json(const nlohmann::json& j);

  bool operator==(const PromptSpec&) const = default;
};

inline constexpr std::size_t kPromptCount = 36;
/// Width of the one-hot conditioning vector (3 + 2 + 2 + 3).
inline constexpr std::size_t kPromptTokenSlots = 10;

std::string_view token_name(ShapeToken t);
std::string_view token_name(BrightnessToken t);
std::string_view token_name(BackgroundToken t);
std::string_view token_name(DetailToken t);

std::array<float, kPromptTokenSlots> prompt_one_hot(const PromptSpec& p);

/// Uniform over all 36 token combinations; deterministic per seed.
PromptSpec sample_prompt(std::uint64_t seed);

struct RenderOptions {
  std::size_t height = 16;
  std::size_t width = 16;
  bool jitter = true;
};

/// Procedural scene: shape with brightness/background/detail semantics plus
/// seeded jitter (position +-2px, intensity +-0.1).
ImageBuffer render_scene(const PromptSpec& prompt, std::uint64_t variation_seed, const RenderOptions& options = {});
ImageBuffer canonical_template(const PromptSpec& prompt, std::size_t height = 16, std::size_t width = 16);

/// Pixel-level intensities used by the renderer.
float shape_level(BrightnessToken b);
float background_level(BackgroundToken b);

/// Axis-aligned bounds [x1,y1,x2,y2) of the un-jittered shape (detail excluded).
std::array<int, 4> shape_bounds(const PromptSpec& prompt, std::size_t height, std::size_t width);

/// 0.4*min(1, 2*std) + 0.3*(q99 - q1) + 0.3*min(1, 4*mean|grad|).
double aesthetic_proxy(const ImageBuffer& image);
/// (NCC(image, canonical_template(prompt)) + 1) / 2, 0 on zero variance.
double consistency_proxy(const ImageBuffer& image, const PromptSpec& prompt);

/// Zero-mean normalised cross-correlation; 0 when either side is constant.
double normalized_cross_correlation(const std::vector<float>& a, const std::vector<float>& b);
/// Linear-interpolated quantile (q in [0,1]).
double quantile(std::vector<float> values, double q);

/// One prompt per JSONL line: token object or {"text": ...}.
std::vector<PromptSpec> load_prompt_file(const std::filesystem::path& path);

}  // namespace artaug
