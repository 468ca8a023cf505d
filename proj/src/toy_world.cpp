#include "artaug/toy_world.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

#include "artaug/error.hpp"

namespace artaug {

namespace {

constexpr std::array<std::string_view, 3> kShapeNames = {"disk", "square", "cross"};
constexpr std::array<std::string_view, 2> kBrightnessNames = {"dim", "bright"};
constexpr std::array<std::string_view, 2> kBackgroundNames = {"dark", "light"};
constexpr std::array<std::string_view, 3> kDetailNames = {"none", "halo", "border"};

template <std::size_t N>
std::optional<std::size_t> find_token(const std::array<std::string_view, N>& names, std::string_view word) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == word) return i;
  }
  return std::nullopt;
}

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

// Distance from (x, y) to the edge of the shape centred at (cx, cy); negative inside.
float shape_distance(ShapeToken shape, float x, float y, float cx, float cy, float side) {
  const float dx = std::abs(x - cx);
  const float dy = std::abs(y - cy);
  switch (shape) {
    case ShapeToken::kDisk:
      return std::sqrt(dx * dx + dy * dy) - 0.28f * side;
    case ShapeToken::kSquare:
      return std::max(dx, dy) - 0.22f * side;
    case ShapeToken::kCross: {
      const float arm = 0.34f * side;
      const float half_width = 0.09f * side;
      return std::min(std::max(dx - arm, dy - half_width), std::max(dx - half_width, dy - arm));
    }
  }
  return 0.0f;
}

// 1 inside, 0 outside, linear one-pixel ramp across the edge.
float shape_coverage(ShapeToken shape, float x, float y, float cx, float cy, float side) {
  return std::clamp(0.5f - shape_distance(shape, x, y, cx, cy, side), 0.0f, 1.0f);
}

}  // namespace

std::string_view token_name(ShapeToken t) { return kShapeNames[static_cast<std::size_t>(t)]; }
std::string_view token_name(BrightnessToken t) { return kBrightnessNames[static_cast<std::size_t>(t)]; }
std::string_view token_name(BackgroundToken t) { return kBackgroundNames[static_cast<std::size_t>(t)]; }
std::string_view token_name(DetailToken t) { return kDetailNames[static_cast<std::size_t>(t)]; }

std::string PromptSpec::text() const {
  std::string s = "a ";
  s += token_name(brightness);
  s += ' ';
  s += token_name(shape);
  s += " on a ";
  s += token_name(background);
  s += " background";
  if (detail != DetailToken::kNone) {
    s += " with ";
    s += token_name(detail);
  }
  return s;
}

PromptSpec PromptSpec::parse(std::string_view text) {
  std::optional<std::size_t> shape, brightness, background, detail;
  for (const auto& w : words_of(text)) {
    if (!shape) shape = find_token(kShapeNames, w);
    if (!brightness) brightness = find_token(kBrightnessNames, w);
    if (!background) background = find_token(kBackgroundNames, w);
    if (!detail && w != "none") detail = find_token(kDetailNames, w);
  }
  if (!shape || !brightness || !background) {
    throw ParseError("cannot parse prompt text \"" + std::string(text) + "\": need shape, brightness and background");
  }
  PromptSpec p;
  p.shape = static_cast<ShapeToken>(*shape);
  p.brightness = static_cast<BrightnessToken>(*brightness);
  p.background = static_cast<BackgroundToken>(*background);
  p.detail = detail ? static_cast<DetailToken>(*detail) : DetailToken::kNone;
  return p;
}

std::size_t PromptSpec::index() const {
  return ((static_cast<std::size_t>(shape) * 2 + static_cast<std::size_t>(brightness)) * 2 +
          static_cast<std::size_t>(background)) * 3 + static_cast<std::size_t>(detail);
}

PromptSpec PromptSpec::from_index(std::size_t index) {
  if (index >= kPromptCount) throw ContractError("prompt index out of range: " + std::to_string(index));
  PromptSpec p;
  p.detail = static_cast<DetailToken>(index % 3);
  index /= 3;
  p.background = static_cast<BackgroundToken>(index % 2);
  index /= 2;
  p.brightness = static_cast<BrightnessToken>(index % 2);
  index /= 2;
  p.shape = static_cast<ShapeToken>(index);
  return p;
}

nlohmann::json PromptSpec::to_json() const {
  return {{"shape", token_name(shape)},
          {"brightness", token_name(brightness)},
          {"background", token_name(background)},
          {"detail", token_name(detail)}};
}

PromptSpec PromptSpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("prompt must be a JSON object");
  if (j.contains("text")) {
    if (!j["text"].is_string()) throw ParseError("prompt \"text\" must be a string");
    return parse(j["text"].get<std::string>());
  }
  const auto field = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j[key].is_string()) throw ParseError(std::string("prompt missing string field \"") + key + "\"");
    return j[key].get<std::string>();
  };
  PromptSpec p;
  const auto shape = find_token(kShapeNames, field("shape"));
  const auto brightness = find_token(kBrightnessNames, field("brightness"));
  const auto background = find_token(kBackgroundNames, field("background"));
  const auto detail = j.contains("detail") ? find_token(kDetailNames, field("detail")) : std::optional<std::size_t>(0);
  if (!shape || !brightness || !background || !detail) throw ParseError("prompt token outside vocabulary: " + j.dump());
  p.shape = static_cast<ShapeToken>(*shape);
  p.brightness = static_cast<BrightnessToken>(*brightness);
  p.background = static_cast<BackgroundToken>(*background);
  p.detail = static_cast<DetailToken>(*detail);
  return p;
}

std::array<float, kPromptTokenSlots> prompt_one_hot(const PromptSpec& p) {
  std::array<float, kPromptTokenSlots> v{};
  v[static_cast<std::size_t>(p.shape)] = 1.0f;
  v[3 + static_cast<std::size_t>(p.brightness)] = 1.0f;
  v[5 + static_cast<std::size_t>(p.background)] = 1.0f;
  v[7 + static_cast<std::size_t>(p.detail)] = 1.0f;
  return v;
}

PromptSpec sample_prompt(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, kPromptCount - 1);
  return PromptSpec::from_index(pick(rng));
}

float shape_level(BrightnessToken b) { return b == BrightnessToken::kBright ? 0.95f : 0.4f; }
float background_level(BackgroundToken b) { return b == BackgroundToken::kDark ? 0.1f : 0.65f; }

ImageBuffer render_scene(const PromptSpec& prompt, std::uint64_t variation_seed, const RenderOptions& options) {
  const std::size_t h = options.height;
  const std::size_t w = options.width;
  ImageBuffer img(h, w);
  float offset_x = 0.0f;
  float offset_y = 0.0f;
  float intensity = 0.0f;
  if (options.jitter) {
    std::mt19937_64 rng(variation_seed);
    std::uniform_real_distribution<float> pos(-2.0f, 2.0f);
    std::uniform_real_distribution<float> lvl(-0.1f, 0.1f);
    offset_x = pos(rng);
    offset_y = pos(rng);
    intensity = lvl(rng);
  }
  const float side = static_cast<float>(std::min(h, w));
  const float cx = (static_cast<float>(w) - 1.0f) / 2.0f + offset_x;
  const float cy = (static_cast<float>(h) - 1.0f) / 2.0f + offset_y;
  const float bg = background_level(prompt.background);
  const float fg = std::clamp(shape_level(prompt.brightness) + intensity, 0.0f, 1.0f);
  // Detail rings sit just outside the shape edge.
  const float ring_level = prompt.background == BackgroundToken::kDark ? 1.0f : 0.0f;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const float fx = static_cast<float>(x);
      const float fy = static_cast<float>(y);
      const float cover = shape_coverage(prompt.shape, fx, fy, cx, cy, side);
      float v = bg + (fg - bg) * cover;
      const float d = shape_distance(prompt.shape, fx, fy, cx, cy, side);
      if (prompt.detail == DetailToken::kHalo) {
        // Bright ring separated from the shape by a one-pixel gap.
        const float ring = std::clamp(1.0f - std::abs(d - 2.0f) / 0.9f, 0.0f, 1.0f);
        v = v + (std::max(fg, 0.8f) - v) * ring * 0.9f;
      } else if (prompt.detail == DetailToken::kBorder) {
        const float ring = std::clamp(1.0f - std::abs(d - 0.8f) / 0.8f, 0.0f, 1.0f);
        v = v + (ring_level - v) * ring;
      }
      img.at(y, x) = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return img;
}

ImageBuffer canonical_template(const PromptSpec& prompt, std::size_t height, std::size_t width) {
  return render_scene(prompt, 0, RenderOptions{height, width, false});
}

std::array<int, 4> shape_bounds(const PromptSpec& prompt, std::size_t height, std::size_t width) {
  const float side = static_cast<float>(std::min(height, width));
  const float cx = (static_cast<float>(width) - 1.0f) / 2.0f;
  const float cy = (static_cast<float>(height) - 1.0f) / 2.0f;
  int x1 = static_cast<int>(width), y1 = static_cast<int>(height), x2 = 0, y2 = 0;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      if (shape_coverage(prompt.shape, float(x), float(y), cx, cy, side) > 0.0f) {
        x1 = std::min(x1, int(x));
        y1 = std::min(y1, int(y));
        x2 = std::max(x2, int(x) + 1);
        y2 = std::max(y2, int(y) + 1);
      }
    }
  }
  return {x1, y1, x2, y2};
}

double quantile(std::vector<float> values, double q) {
  if (values.empty()) throw ContractError("quantile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (double(values[hi]) - values[lo]) * frac;
}

double aesthetic_proxy(const ImageBuffer& image) {
  const auto& p = image.pixels();
  const double n = static_cast<double>(p.size());
  double mean = 0.0;
  for (float v : p) mean += v;
  mean /= n;
  double var = 0.0;
  for (float v : p) var += (v - mean) * (v - mean);
  const double stddev = std::sqrt(var / n);

  const double range = quantile(p, 0.99) - quantile(p, 0.01);

  double grad = 0.0;
  std::size_t pairs = 0;
  for (std::size_t y = 0; y < image.height(); ++y) {
    for (std::size_t x = 0; x < image.width(); ++x) {
      if (x + 1 < image.width()) {
        grad += std::abs(double(image.at(y, x + 1)) - image.at(y, x));
        ++pairs;
      }
      if (y + 1 < image.height()) {
        grad += std::abs(double(image.at(y + 1, x)) - image.at(y, x));
        ++pairs;
      }
    }
  }
  grad /= static_cast<double>(pairs);

  return 0.4 * std::min(1.0, 2.0 * stddev) + 0.3 * range + 0.3 * std::min(1.0, 4.0 * grad);
}

double normalized_cross_correlation(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw ShapeError("normalized_cross_correlation: sizes differ");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  constexpr double kFlat = 1e-12;
  if (saa <= kFlat || sbb <= kFlat) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double consistency_proxy(const ImageBuffer& image, const PromptSpec& prompt) {
  const ImageBuffer tmpl = canonical_template(prompt, image.height(), image.width());
  const auto& a = image.pixels();
  const auto& b = tmpl.pixels();
  // Zero-variance rule applies to the score, not just the correlation.
  const bool flat_a = std::all_of(a.begin(), a.end(), [&](float v) { return v == a.front(); });
  const bool flat_b = std::all_of(b.begin(), b.end(), [&](float v) { return v == b.front(); });
  if (flat_a || flat_b) return 0.0;
  return (normalized_cross_correlation(a, b) + 1.0) / 2.0;
}

std::vector<PromptSpec> load_prompt_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt file " + path.string());
  std::vector<PromptSpec> prompts;
  std::string line;
  std::uint64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      prompts.push_back(PromptSpec::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("prompt file: ") + e.what(), line_no);
    } catch (const ParseError& e) {
      throw FormatError(std::string("prompt file: ") + e.what(), line_no);
    }
  }
  return prompts;
}

}  // namespace artaug
