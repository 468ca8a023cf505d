#include "artaug/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "artaug/error.hpp"
#include "artaug/toy_world.hpp"

namespace artaug {

static_assert(std::endian::native == std::endian::little, "ATW1 I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'A', 'T', 'W', '1'};
constexpr std::size_t kHeaderBytes = 8;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

Tensor take(AtwFile& file, const std::string& name, const Shape& expected) {
  for (auto& [n, t] : file.tensors) {
    if (n == name) {
      if (t.shape() != expected) {
        throw FormatError("tensor " + name + " has shape " + shape_str(t.shape()) + ", metadata implies " +
                              shape_str(expected), kHeaderBytes);
      }
      return std::move(t);
    }
  }
  throw FormatError("missing tensor " + name, 0);
}

}  // namespace

const Tensor& AtwFile::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("missing tensor " + name, 0);
}

std::string encode_atw(const std::vector<std::pair<std::string, const Tensor*>>& tensors, const nlohmann::json& extra) {
  nlohmann::json meta = {{"version", 1}, {"dtype", "f32le"}, {"extra", extra}, {"tensors", nlohmann::json::array()}};
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    meta["tensors"].push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->numel() * sizeof(float);
  }
  const std::string meta_text = meta.dump();
  std::string out(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
  out += meta_text;
  const std::size_t payload = out.size();
  out.resize(payload + offset);
  std::size_t at = payload;
  for (const auto& [name, t] : tensors) {
    std::memcpy(out.data() + at, t->values().data(), t->numel() * sizeof(float));
    at += t->numel() * sizeof(float);
  }
  return out;
}

AtwFile decode_atw(const std::string& bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("truncated ATW1 header", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected ATW1", 0);
  const std::size_t meta_len = get_u32(bytes, 4);
  if (bytes.size() < kHeaderBytes + meta_len) throw FormatError("truncated ATW1 metadata", bytes.size());
  const auto meta = nlohmann::json::parse(bytes.begin() + kHeaderBytes, bytes.begin() + kHeaderBytes + meta_len,
                                          nullptr, false);
  if (meta.is_discarded() || !meta.is_object()) throw FormatError("ATW1 metadata is not a JSON object", kHeaderBytes);
  if (meta.value("version", 0) != 1 || meta.value("dtype", std::string()) != "f32le" || !meta.contains("tensors") ||
      !meta["tensors"].is_array()) {
    throw FormatError("unsupported ATW1 metadata (version/dtype/tensors)", kHeaderBytes);
  }
  const std::size_t payload = kHeaderBytes + meta_len;
  AtwFile file;
  file.extra = meta.value("extra", nlohmann::json::object());
  for (const auto& entry : meta["tensors"]) {
    Shape shape;
    std::size_t offset = 0;
    std::string name;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception&) {
      throw FormatError("malformed tensor entry " + entry.dump(), kHeaderBytes);
    }
    const std::size_t n = shape_numel(shape);
    const std::size_t begin = payload + offset;
    if (begin + n * sizeof(float) > bytes.size()) {
      throw FormatError("payload of tensor " + name + " (" + std::to_string(n) + " floats) runs past end of file",
                        std::min(begin, bytes.size()));
    }
    Tensor t(shape);
    std::memcpy(t.values().data(), bytes.data() + begin, n * sizeof(float));
    file.tensors.emplace_back(std::move(name), std::move(t));
  }
  return file;
}

void write_atw(const std::filesystem::path& path, const std::vector<std::pair<std::string, const Tensor*>>& tensors,
               const nlohmann::json& extra) {
  const std::string bytes = encode_atw(tensors, extra);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

AtwFile read_atw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_atw(buf.str());
}

void save_denoiser(const std::filesystem::path& path, const DenoiserParams& params) {
  write_atw(path, params.named_tensors(), {{"kind", "denoiser"}, {"config", params.config.to_json()}});
}

DenoiserParams load_denoiser(const std::filesystem::path& path) {
  AtwFile file = read_atw(path);
  if (file.extra.value("kind", std::string()) != "denoiser" || !file.extra.contains("config")) {
    throw FormatError(path.string() + " does not hold denoiser weights", kHeaderBytes);
  }
  DenoiserParams p;
  p.config = DenoiserConfig::from_json(file.extra["config"]);
  for (const auto& d : layer_dims_for(p.config)) {
    const std::string prefix = "fc" + std::to_string(p.layers.size());
    Linear l;
    l.weight = take(file, prefix + ".weight", {d.in, d.out});
    l.bias = take(file, prefix + ".bias", {d.out});
    p.layers.push_back(std::move(l));
  }
  p.token_table = take(file, "cond.token_table", {kPromptTokenSlots, p.config.hidden});
  p.time_table = take(file, "cond.time_table", {p.config.time_dim, p.config.hidden});
  return p;
}

void save_lora(const std::filesystem::path& path, const LoraParams& lora) {
  nlohmann::json dims = nlohmann::json::array();
  for (const auto& d : lora.layer_dims()) dims.push_back({d.in, d.out});
  write_atw(path, lora.named_tensors(),
            {{"kind", "lora"}, {"rank", lora.rank}, {"layers", dims}, {"metadata", lora.metadata}});
}

LoraParams load_lora(const std::filesystem::path& path) {
  AtwFile file = read_atw(path);
  if (file.extra.value("kind", std::string()) != "lora") {
    throw FormatError(path.string() + " does not hold lora weights", kHeaderBytes);
  }
  LoraParams lora;
  try {
    lora.rank = file.extra.at("rank").get<std::size_t>();
    lora.metadata = file.extra.value("metadata", nlohmann::json::object());
    const auto dims = file.extra.at("layers").get<std::vector<std::array<std::size_t, 2>>>();
    for (std::size_t i = 0; i < dims.size(); ++i) {
      const std::string prefix = "fc" + std::to_string(i);
      LoraLayer l;
      l.a = take(file, prefix + ".lora_a", {lora.rank, dims[i][1]});
      l.b = take(file, prefix + ".lora_b", {dims[i][0], lora.rank});
      lora.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed lora metadata: " + e.what(), kHeaderBytes);
  }
  return lora;
}

}  // namespace artaug
