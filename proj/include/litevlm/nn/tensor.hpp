#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace litevlm {

/// Base error type thrown by every component of the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major float32 array of rank 1..4.
///
/// A default-constructed tensor is the "empty" value: rank 0, no data. Every
/// other tensor has positive dimensions and `numel() == product(shape)`.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw Error("tensor data length " + std::to_string(data_.size()) +
                  " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor vector(std::vector<float> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
  }

  bool empty() const { return shape_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) {
      throw Error("dim " + std::to_string(i) + " out of range for shape " +
                  shape_str(shape_));
    }
    return shape_[i];
  }
  std::size_t numel() const { return data_.size(); }

  // Rank-2 accessors; most kernels operate on [rows, cols] matrices.
  std::size_t rows() const { return require_rank2("rows"), shape_[0]; }
  std::size_t cols() const { return require_rank2("cols"), shape_[1]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* raw() { return data_.data(); }
  const float* raw() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  std::span<float> row(std::size_t r) {
    const std::size_t c = cols();
    return std::span<float>(data_).subspan(r * c, c);
  }
  std::span<const float> row(std::size_t r) const {
    const std::size_t c = cols();
    return std::span<const float>(data_).subspan(r * c, c);
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Bitwise comparison of shape and payload.
  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() ||
            std::memcmp(data_.data(), other.data_.data(),
                        data_.size() * sizeof(float)) == 0);
  }

 private:
  void validate_shape() const {
    if (shape_.empty() || shape_.size() > 4) {
      throw Error("tensor rank must be 1..4, got shape " + shape_str(shape_));
    }
    for (std::size_t d : shape_) {
      if (d == 0) throw Error("tensor dims must be positive: " + shape_str(shape_));
    }
  }

  void require_rank2(const char* what) const {
    if (shape_.size() != 2) {
      throw Error(std::string(what) + "() needs a rank-2 tensor, got " +
                  shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

inline Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (begin >= end || end > t.rows()) {
    throw Error("slice_rows [" + std::to_string(begin) + ", " +
                std::to_string(end) + ") invalid for " + shape_str(t.shape()));
  }
  const std::size_t c = t.cols();
  std::vector<float> out(t.raw() + begin * c, t.raw() + end * c);
  return Tensor({end - begin, c}, std::move(out));
}

inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  if (idx.empty()) throw Error("gather_rows: empty index list");
  const std::size_t c = t.cols();
  Tensor out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= t.rows()) throw Error("gather_rows: index out of range");
    std::memcpy(out.raw() + i * c, t.raw() + idx[i] * c, c * sizeof(float));
  }
  return out;
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error("concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw Error("concat_rows: column mismatch");
    n += p.rows();
  }
  std::vector<float> out;
  out.reserve(n * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor({n, c}, std::move(out));
}

}  // namespace litevlm
