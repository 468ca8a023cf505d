#include "artaug/interaction.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "artaug/error.hpp"

namespace artaug {

namespace {

constexpr std::string_view kInstructionTemplate =
    R"(You are a helpful assistant. Given the image please analyze the following image and complete the following tasks:

1. Add more details to this image. For example, beautiful light and shadow, exquisite decorations, gorgeous clothing, beautiful natural landscapes, etc. Caution:
    The added details should be consistent with the original description: __prompt__
2. Mark the locations where these details can be added. Caution:
    Each entity should have only a bounding box in the format [x1, y1, x2, y2] represented using absolute pixel coordinates.
3. For each bounding box, imagine that we modify it into something extremely aesthetically pleasing. Please describe the image content of this part using words. Do not use 'should'. Just describe it. The aesthetical description should be long.

Please provide the results in JSON format as follows, which can be directly loaded by json.loads() in Python:
[
    {
        "bbox": [x1, y1, x2, y2],
        "aesthetical description": "..."
    },
    {
        "bbox": [x1, y1, x2, y2],
        "aesthetical description": "..."
    },
    ...
])";

constexpr const char* kDescriptionKey = "aesthetical description";

// Rule critic thresholds, in pixel units.
constexpr double kFlatQuadrantStd = 0.03;
constexpr int kShapeMargin = 2;

RegionSuggestion make_suggestion(const std::array<int, 4>& box, const PromptSpec& prompt, std::string description,
                                 std::size_t height, std::size_t width) {
  RegionSuggestion s;
  s.bbox = box;
  s.prompt = prompt;
  s.description = std::move(description);
  s.mask = bbox_to_mask({double(box[0]), double(box[1]), double(box[2]), double(box[3])}, height, width);
  return s;
}

// Brightness token with the larger foreground/background gap that keeps the
// sign of the prompt's own contrast (a sign flip would invert the scene).
BrightnessToken strongest_brightness(const PromptSpec& p) {
  const float bg = background_level(p.background);
  const float own = shape_level(p.brightness) - bg;
  BrightnessToken best = p.brightness;
  for (auto b : {BrightnessToken::kDim, BrightnessToken::kBright}) {
    const float gap = shape_level(b) - bg;
    if (gap * own > 0 && std::abs(gap) > std::abs(shape_level(best) - bg)) best = b;
  }
  return best;
}

double region_std(const ImageBuffer& image, const std::array<int, 4>& box) {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (int y = box[1]; y < box[3]; ++y) {
    for (int x = box[0]; x < box[2]; ++x) {
      const double v = image.at(std::size_t(y), std::size_t(x));
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  if (n == 0) return 0.0;
  const double mean = sum / double(n);
  return std::sqrt(std::max(0.0, sq / double(n) - mean * mean));
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return out;
}

// Index one past the bracket closing the one at `open`, honouring strings.
std::optional<std::size_t> matching_close(std::string_view text, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (c == '\\') {
        ++i;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '[' || c == '{') {
      ++depth;
    } else if (c == ']' || c == '}') {
      if (--depth == 0) return i + 1;
    }
  }
  return std::nullopt;
}

void collect_strings(const nlohmann::json& j, std::vector<std::string>& out) {
  if (j.is_string()) {
    out.push_back(j.get<std::string>());
  } else if (j.is_structured()) {
    for (const auto& item : j) collect_strings(item, out);
  }
}

// Text fragments of a reply in search order: string leaves of a JSON body,
// then the raw body.
std::vector<std::string> reply_texts(std::string_view reply) {
  std::vector<std::string> texts;
  const auto body = nlohmann::json::parse(reply, nullptr, false);
  if (!body.is_discarded()) {
    if (body.is_array()) texts.emplace_back(reply);
    collect_strings(body, texts);
  }
  texts.emplace_back(reply);
  return texts;
}

std::optional<nlohmann::json> first_json_object(std::string_view text) {
  for (std::size_t pos = text.find('{'); pos != std::string_view::npos; pos = text.find('{', pos + 1)) {
    const auto end = matching_close(text, pos);
    if (!end) continue;
    auto j = nlohmann::json::parse(text.substr(pos, *end - pos), nullptr, false);
    if (j.is_object()) return j;
  }
  return std::nullopt;
}

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

ParsedUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos || url.substr(0, scheme_end) != "http") {
    throw CriticUnavailable("critic endpoint must be an http:// url, got \"" + url + "\"");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

nlohmann::json RegionSuggestion::to_json() const {
  return {{"bbox", bbox}, {"prompt", prompt.to_json()}, {"description", description}};
}

RegionSuggestion RegionSuggestion::from_json(const nlohmann::json& j, std::size_t height, std::size_t width) {
  const auto box = j.at("bbox").get<std::array<int, 4>>();
  return make_suggestion(box, PromptSpec::from_json(j.at("prompt")), j.value("description", std::string()), height,
                         width);
}

std::array<int, 4> clamp_bbox(const BBox& b, std::size_t height, std::size_t width) {
  for (double v : {b.x1, b.y1, b.x2, b.y2}) {
    if (!std::isfinite(v)) throw DegenerateRegion("bbox has a non-finite coordinate");
  }
  const double w = double(width), h = double(height);
  const int x1 = int(std::floor(std::clamp(b.x1, 0.0, w)));
  const int y1 = int(std::floor(std::clamp(b.y1, 0.0, h)));
  const int x2 = int(std::ceil(std::clamp(b.x2, 0.0, w)));
  const int y2 = int(std::ceil(std::clamp(b.y2, 0.0, h)));
  if (x1 >= x2 || y1 >= y2) {
    throw DegenerateRegion("empty bbox [" + std::to_string(x1) + "," + std::to_string(y1) + "," + std::to_string(x2) +
                           "," + std::to_string(y2) + ") after clamping");
  }
  return {x1, y1, x2, y2};
}

Tensor bbox_to_mask(const BBox& bbox, std::size_t height, std::size_t width) {
  const auto [x1, y1, x2, y2] = clamp_bbox(bbox, height, width);
  Tensor mask = Tensor::zeros({height, width});
  for (int y = y1; y < y2; ++y) {
    for (int x = x1; x < x2; ++x) mask.at(std::size_t(y), std::size_t(x)) = 1.0f;
  }
  return mask;
}

Tensor combine_partitioned(const Tensor& base, std::span<const Tensor> regions, std::span<const Tensor> masks) {
  if (regions.size() != masks.size()) {
    throw ShapeError("partitioned_denoise: " + std::to_string(regions.size()) + " region outputs but " +
                     std::to_string(masks.size()) + " masks");
  }
  const std::size_t d = base.numel();
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (regions[i].numel() != d || masks[i].numel() != d) {
      throw ShapeError("partitioned_denoise: region " + std::to_string(i) + " output " +
                       shape_str(regions[i].shape()) + " mask " + shape_str(masks[i].shape()) + " vs base " +
                       shape_str(base.shape()));
    }
  }
  Tensor out = base;
  for (std::size_t p = 0; p < d; ++p) {
    float num = base[p];
    float den = 1.0f;
    for (std::size_t i = 0; i < regions.size(); ++i) {
      num += regions[i][p] * masks[i][p];
      den += masks[i][p];
    }
    out[p] = num / den;
  }
  return out;
}

Tensor partitioned_predict(const PromptPredictor& predict, const PromptSpec& prompt,
                           std::span<const RegionSuggestion> suggestions) {
  const Tensor base = predict(prompt);
  if (suggestions.empty()) return base;
  std::vector<Tensor> regions, masks;
  regions.reserve(suggestions.size());
  masks.reserve(suggestions.size());
  for (const auto& s : suggestions) {
    regions.push_back(predict(s.prompt));
    masks.push_back(s.mask);
  }
  return combine_partitioned(base, regions, masks);
}

Tensor partitioned_denoise(const DenoiserParams& params, const LoraParams* lora, const PromptSpec& prompt,
                           std::span<const RegionSuggestion> suggestions, const NoiseSchedule& schedule, double t,
                           const Tensor& h_t) {
  return partitioned_predict(
      [&](const PromptSpec& p) { return denoise_predict(params, lora, p, schedule, t, h_t); }, prompt, suggestions);
}

nlohmann::json CriticBackend::to_json() const {
  return {{"kind", kind == Kind::kHttp ? "http" : "rule_based"},
          {"endpoint", endpoint},
          {"model", model},
          {"token_env", token_env},
          {"timeout_seconds", timeout_seconds},
          {"max_regions", max_regions}};
}

CriticBackend CriticBackend::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> kKeys = {"kind",      "endpoint",        "model",
                                                 "token_env", "timeout_seconds", "max_regions"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw ContractError("unknown critic config key \"" + key + "\"");
    }
  }
  CriticBackend b;
  const auto kind = j.value("kind", std::string("rule_based"));
  if (kind == "http") {
    b.kind = Kind::kHttp;
  } else if (kind != "rule_based") {
    throw ContractError("critic kind must be rule_based or http, got \"" + kind + "\"");
  }
  b.endpoint = j.value("endpoint", std::string());
  b.model = j.value("model", std::string());
  b.token_env = j.value("token_env", std::string());
  b.timeout_seconds = j.value("timeout_seconds", 30.0);
  b.max_regions = j.value("max_regions", std::size_t{4});
  if (b.max_regions < 1) throw ContractError("critic max_regions must be >= 1");
  if (b.kind == Kind::kHttp && b.endpoint.empty()) throw ContractError("http critic needs an endpoint");
  return b;
}

std::vector<RegionSuggestion> rule_critic(const ImageBuffer& image, const PromptSpec& prompt,
                                          const CriticBackend& config, std::uint64_t seed) {
  const std::size_t h = image.height(), w = image.width();
  std::vector<std::pair<double, RegionSuggestion>> ranked;

  // (a) Shape region. Ranked by how far the measured foreground sits from the
  // brightness token; emitted only when a stronger token tuple exists.
  const ImageBuffer tmpl = canonical_template(prompt, h, w);
  const float fg = shape_level(prompt.brightness);
  const float bg = background_level(prompt.background);
  double inside = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (std::abs(tmpl.pixels()[i] - fg) < std::abs(tmpl.pixels()[i] - bg)) {
      inside += image.pixels()[i];
      ++count;
    }
  }
  const double deviation = count ? std::abs(inside / double(count) - fg) : 1.0;
  PromptSpec shape_fix = prompt;
  shape_fix.brightness = strongest_brightness(prompt);
  // A bright shape on a light field gains contrast from a darker surround.
  if (shape_fix.brightness == BrightnessToken::kBright && shape_fix.background == BackgroundToken::kLight) {
    shape_fix.background = BackgroundToken::kDark;
  }
  if (shape_fix.detail == DetailToken::kNone) shape_fix.detail = DetailToken::kBorder;
  if (!(shape_fix == prompt)) {
    auto box = shape_bounds(prompt, h, w);
    box = clamp_bbox({double(box[0] - kShapeMargin), double(box[1] - kShapeMargin), double(box[2] + kShapeMargin),
                      double(box[3] + kShapeMargin)},
                     h, w);
    ranked.emplace_back(1.0 + deviation, make_suggestion(box, shape_fix, "shape: " + shape_fix.text(), h, w));
  }

  // (b) Flattest quadrant, ties broken by the seed.
  const int hh = int(h / 2), hw = int(w / 2);
  const std::array<std::array<int, 4>, 4> quadrants = {
      {{0, 0, hw, hh}, {hw, 0, int(w), hh}, {0, hh, hw, int(h)}, {hw, hh, int(w), int(h)}}};
  std::array<double, 4> stds{};
  for (std::size_t q = 0; q < 4; ++q) stds[q] = region_std(image, quadrants[q]);
  const double flattest = *std::min_element(stds.begin(), stds.end());
  if (flattest < kFlatQuadrantStd) {
    std::vector<std::size_t> ties;
    for (std::size_t q = 0; q < 4; ++q) {
      if (stds[q] <= flattest + 1e-9) ties.push_back(q);
    }
    const std::size_t q = ties[seed % ties.size()];
    PromptSpec quad_fix = prompt;
    quad_fix.brightness = BrightnessToken::kBright;
    if (std::abs(shape_level(quad_fix.brightness) - bg) < std::abs(fg - bg)) quad_fix.brightness = prompt.brightness;
    ranked.emplace_back(kFlatQuadrantStd - flattest,
                        make_suggestion(quadrants[q], quad_fix, "flat quadrant: " + quad_fix.text(), h, w));
  }

  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<RegionSuggestion> out;
  for (auto& [score, s] : ranked) {
    if (out.size() == config.max_regions) break;
    out.push_back(std::move(s));
  }
  return out;
}

std::string critic_instruction(const PromptSpec& prompt) {
  std::string text(kInstructionTemplate);
  const std::string placeholder = "__prompt__";
  text.replace(text.find(placeholder), placeholder.size(), prompt.text());
  return text;
}

std::optional<nlohmann::json> first_json_array(std::string_view text) {
  for (std::size_t pos = text.find('['); pos != std::string_view::npos; pos = text.find('[', pos + 1)) {
    const auto end = matching_close(text, pos);
    if (!end) continue;
    auto j = nlohmann::json::parse(text.substr(pos, *end - pos), nullptr, false);
    if (j.is_array()) return j;
  }
  return std::nullopt;
}

PromptSpec description_to_prompt(std::string_view description, const PromptSpec& original) {
  const std::string text = lowercase(description);
  auto has = [&](std::string_view word) { return text.find(word) != std::string::npos; };
  PromptSpec p = original;
  bool matched = false;
  auto set = [&](auto& slot, auto value) {
    slot = value;
    matched = true;
  };
  if (has("disk") || has("circle") || has("round")) set(p.shape, ShapeToken::kDisk);
  else if (has("square") || has("box")) set(p.shape, ShapeToken::kSquare);
  else if (has("cross") || has("plus")) set(p.shape, ShapeToken::kCross);
  if (has("bright") || has("glow") || has("shin") || has("radiant")) set(p.brightness, BrightnessToken::kBright);
  else if (has("dim") || has("faint") || has("muted")) set(p.brightness, BrightnessToken::kDim);
  if (has("dark background") || has("night") || has("shadow")) set(p.background, BackgroundToken::kDark);
  else if (has("light background") || has("daylight")) set(p.background, BackgroundToken::kLight);
  if (has("halo") || has("aura") || has("glow")) set(p.detail, DetailToken::kHalo);
  else if (has("border") || has("outline") || has("frame") || has("edge")) set(p.detail, DetailToken::kBorder);
  if (!matched) {
    p = original;
    p.detail = DetailToken::kHalo;
  }
  return p;
}

std::vector<RegionSuggestion> parse_critic_reply(std::string_view reply, const PromptSpec& prompt,
                                                 std::size_t height, std::size_t width, std::size_t max_regions) {
  std::optional<nlohmann::json> entries;
  for (const auto& text : reply_texts(reply)) {
    entries = first_json_array(text);
    if (entries) break;
  }
  if (!entries) throw ParseError("critic reply contains no JSON array");

  std::vector<RegionSuggestion> out;
  for (std::size_t i = 0; i < entries->size(); ++i) {
    const auto& e = (*entries)[i];
    const bool valid = e.is_object() && e.contains("bbox") && e["bbox"].is_array() && e["bbox"].size() == 4 &&
                       std::all_of(e["bbox"].begin(), e["bbox"].end(), [](const auto& v) { return v.is_number(); }) &&
                       e.contains(kDescriptionKey) && e[kDescriptionKey].is_string();
    if (!valid) {
      spdlog::warn("critic entry {} dropped: expected bbox of 4 numbers and a description", i);
      continue;
    }
    if (out.size() == max_regions) {
      spdlog::warn("critic entry {} dropped: max_regions {} reached", i, max_regions);
      continue;
    }
    const auto& b = e["bbox"];
    const BBox box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    try {
      const auto clamped = clamp_bbox(box, height, width);
      const auto description = e[kDescriptionKey].get<std::string>();
      out.push_back(make_suggestion(clamped, description_to_prompt(description, prompt), description, height, width));
    } catch (const DegenerateRegion& err) {
      spdlog::warn("critic entry {} dropped: {}", i, err.what());
    }
  }
  return out;
}

std::string post_critic_request(const CriticBackend& backend, const nlohmann::json& body) {
  const auto url = split_url(backend.endpoint);
  httplib::Client client(url.origin);
  const auto secs = std::chrono::duration<double>(backend.timeout_seconds);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(secs);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  if (!backend.token_env.empty()) {
    if (const char* token = std::getenv(backend.token_env.c_str())) client.set_bearer_token_auth(token);
  }
  const auto res = client.Post(url.path, body.dump(), "application/json");
  if (!res) {
    throw CriticUnavailable("critic request to " + backend.endpoint + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status < 200 || res->status >= 300) {
    throw CriticUnavailable("critic at " + backend.endpoint + " returned HTTP " + std::to_string(res->status));
  }
  return res->body;
}

std::vector<RegionSuggestion> mllm_critic(const ImageBuffer& image, const PromptSpec& prompt,
                                          const CriticBackend& backend) {
  if (backend.kind != CriticBackend::Kind::kHttp) throw ContractError("mllm_critic needs an http backend");
  const nlohmann::json content = nlohmann::json::array(
      {{{"type", "text"}, {"text", critic_instruction(prompt)}},
       {{"type", "image"}, {"data", httplib::detail::base64_encode(encode_pgm(image))}}});
  const nlohmann::json body = {{"model", backend.model},
                               {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})}};
  const std::string reply = post_critic_request(backend, body);
  return parse_critic_reply(reply, prompt, image.height(), image.width(), backend.max_regions);
}

std::vector<RegionSuggestion> critique(const ImageBuffer& image, const PromptSpec& prompt,
                                       const CriticBackend& backend, std::uint64_t seed) {
  if (backend.kind == CriticBackend::Kind::kHttp) {
    try {
      return mllm_critic(image, prompt, backend);
    } catch (const CriticUnavailable& e) {
      spdlog::warn("http critic unavailable, using rule critic: {}", e.what());
    } catch (const ParseError& e) {
      spdlog::warn("http critic reply unusable, using rule critic: {}", e.what());
    }
  }
  return rule_critic(image, prompt, backend, seed);
}

PromptSpec refine_prompt(const PromptSpec& prompt, const CriticBackend& backend) {
  if (backend.kind == CriticBackend::Kind::kRuleBased) return prompt;
  const std::string instruction =
      "Rewrite this text-to-image prompt into the vocabulary shape {disk, square, cross}, brightness {dim, bright}, "
      "background {dark, light}, detail {none, halo, border}. Reply with one JSON object with keys shape, "
      "brightness, background, detail. Prompt: " +
      prompt.text();
  const nlohmann::json body = {
      {"model", backend.model},
      {"messages", nlohmann::json::array(
                       {{{"role", "user"}, {"content", nlohmann::json::array({{{"type", "text"}, {"text", instruction}}})}}})}};
  const std::string reply = post_critic_request(backend, body);
  for (const auto& text : reply_texts(reply)) {
    if (auto obj = first_json_object(text)) {
      try {
        return PromptSpec::from_json(*obj);
      } catch (const Error&) {
      }
    }
  }
  spdlog::warn("prompt refinement reply unusable, keeping \"{}\"", prompt.text());
  return prompt;
}

InteractionResult interactive_generate(const DenoiserParams& params, const LoraParams* lora,
                                       const PromptSpec& prompt, std::uint64_t seed, const CriticBackend& critic,
                                       const NoiseSchedule& schedule, std::size_t sampler_steps) {
  InteractionResult r;
  r.prompt = prompt;
  r.seed = seed;
  const SamplerConfig sc{sampler_steps, seed};
  r.before = sample(params, lora, prompt, schedule, sc);
  r.suggestions = critique(r.before, prompt, critic, seed);
  if (r.suggestions.empty()) {
    r.after = r.before;
    return r;
  }
  const Predictor partitioned = [&](double t, const Tensor& h_t) {
    return partitioned_denoise(params, lora, prompt, r.suggestions, schedule, t, h_t);
  };
  r.after = sample_with(partitioned, schedule, sc, params.config.height, params.config.width);
  return r;
}

}  // namespace artaug
