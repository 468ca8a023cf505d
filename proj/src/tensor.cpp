#include "artaug/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <sstream>

#include "artaug/error.hpp"

namespace artaug {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                     " values");
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  std::vector<float> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& row : rows) {
    if (row.size() != cols) throw ShapeError("from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

float Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const noexcept {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({a.dim(0), b.dim(1)});
  Eigen::Map<const RowMatrix> ma(a.data().data(), a.dim(0), a.dim(1));
  Eigen::Map<const RowMatrix> mb(b.data().data(), b.dim(0), b.dim(1));
  Eigen::Map<RowMatrix> mo(out.data().data(), out.dim(0), out.dim(1));
  mo.noalias() = ma * mb;
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("subtract", a, b);
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = a;
  for (auto& v : out.values()) v *= s;
  return out;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape("max_abs_diff", a, b);
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

float frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (float v : a.values()) s += double(v) * v;
  return static_cast<float>(std::sqrt(s));
}

}  // namespace artaug
