#include "artaug/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "artaug/error.hpp"

namespace artaug {

ImageBuffer::ImageBuffer(std::size_t height, std::size_t width, float fill)
    : ImageBuffer(height, width, std::vector<float>(height * width, fill)) {}

ImageBuffer::ImageBuffer(std::size_t height, std::size_t width, std::vector<float> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels)) {
  if (height_ < kMinSide || width_ < kMinSide) {
    throw ContractError("image sides must be >= 8, got " + std::to_string(height_) + "x" + std::to_string(width_));
  }
  if (pixels_.size() != height_ * width_) {
    throw ShapeError("image " + std::to_string(height_) + "x" + std::to_string(width_) + " given " +
                     std::to_string(pixels_.size()) + " pixels");
  }
}

void ImageBuffer::clamp01() {
  for (auto& p : pixels_) p = std::isnan(p) ? 0.0f : std::clamp(p, 0.0f, 1.0f);
}

bool ImageBuffer::in_range() const noexcept {
  return std::all_of(pixels_.begin(), pixels_.end(), [](float p) { return p >= 0.0f && p <= 1.0f; });
}

Tensor ImageBuffer::to_tensor() const { return Tensor({1, pixels_.size()}, pixels_); }

ImageBuffer ImageBuffer::from_tensor(const Tensor& t, std::size_t height, std::size_t width) {
  if (t.numel() != height * width) {
    throw ShapeError("tensor " + shape_str(t.shape()) + " cannot form a " + std::to_string(height) + "x" +
                     std::to_string(width) + " image");
  }
  return ImageBuffer(height, width, t.values());
}

std::string encode_pgm(const ImageBuffer& image) {
  std::ostringstream os(std::ios::binary);
  os << "P5\n" << image.width() << ' ' << image.height() << "\n255\n";
  for (float p : image.pixels()) {
    const float c = std::isnan(p) ? 0.0f : std::clamp(p, 0.0f, 1.0f);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
  }
  return os.str();
}

void write_pgm(const std::filesystem::path& path, const ImageBuffer& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string bytes = encode_pgm(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

ImageBuffer read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::string magic;
  std::size_t width = 0;
  std::size_t height = 0;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || !in || maxval != 255) throw FormatError("not an 8-bit P5 PGM: " + path.string(), 0);
  in.get();  // single whitespace after maxval
  const auto header = static_cast<std::uint64_t>(in.tellg());
  std::vector<unsigned char> raw(width * height);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw FormatError("truncated PGM payload in " + path.string(), header + static_cast<std::uint64_t>(in.gcount()));
  }
  std::vector<float> pixels(raw.size());
  std::transform(raw.begin(), raw.end(), pixels.begin(), [](unsigned char c) { return c / 255.0f; });
  return ImageBuffer(height, width, std::move(pixels));
}

ImageBuffer quantize_8bit(const ImageBuffer& image) {
  ImageBuffer q = image;
  for (auto& p : q.pixels()) {
    const float c = std::isnan(p) ? 0.0f : std::clamp(p, 0.0f, 1.0f);
    p = static_cast<float>(std::lround(c * 255.0f)) / 255.0f;
  }
  return q;
}

double l2_distance(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw ShapeError("l2_distance: image sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a.pixels()[i]) - b.pixels()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace artaug
