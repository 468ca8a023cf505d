#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "artaug/tensor.hpp"

namespace artaug {

/// Grayscale H x W pixel grid with values in [0,1].
class ImageBuffer {
 public:
  static constexpr std::size_t kMinSide = 8;

  ImageBuffer() = default;
  ImageBuffer(std::size_t height, std::size_t width, float fill = 0.0f);
  ImageBuffer(std::size_t height, std::size_t width, std::vector<float> pixels);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return pixels_.size(); }

  float& at(std::size_t y, std::size_t x) { return pixels_[y * width_ + x]; }
  float at(std::size_t y, std::size_t x) const { return pixels_[y * width_ + x]; }
  const std::vector<float>& pixels() const noexcept { return pixels_; }
  std::vector<float>& pixels() noexcept { return pixels_; }

  /// Clamps every pixel into [0,1]; NaN becomes 0.
  void clamp01();
  bool in_range() const noexcept;

  /// Flattened [1, H*W] tensor of raw pixel values.
  Tensor to_tensor() const;
  static ImageBuffer from_tensor(const Tensor& t, std::size_t height, std::size_t width);

  bool operator==(const ImageBuffer& other) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> pixels_;
};

/// Binary PGM (P5, maxval 255). Pixels are quantised to round(p * 255).
void write_pgm(const std::filesystem::path& path, const ImageBuffer& image);
ImageBuffer read_pgm(const std::filesystem::path& path);
std::string encode_pgm(const ImageBuffer& image);

/// Re-quantises an image through the 8-bit PGM representation.
ImageBuffer quantize_8bit(const ImageBuffer& image);

double l2_distance(const ImageBuffer& a, const ImageBuffer& b);

}  // namespace artaug
