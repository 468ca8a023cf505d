#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace artaug {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major f32 array. Value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0f); }
  static Tensor scalar(float v) { return Tensor(Shape{1}, std::vector<float>{v}); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool is_scalar() const noexcept { return data_.size() == 1; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& values() noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * shape_.at(1) + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_.at(1) + c]; }
  float item() const;

  /// Same data, new shape; numel must match.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;
  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Plain (non-recorded) helpers used outside the differentiable graph.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
float max_abs_diff(const Tensor& a, const Tensor& b);
float frobenius_norm(const Tensor& a);

}  // namespace artaug
