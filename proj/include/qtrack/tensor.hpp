#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace qtrack {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// Dense shape of rank 0..3. Rank 0 is a scalar holding one element.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  std::size_t last() const { return dims_.empty() ? 1 : dims_.back(); }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>{});
  }

  /// Product of all dims except the last one (number of rows when viewed as a matrix).
  std::size_t rows() const { return dims_.empty() ? 1 : numel() / dims_.back(); }

  Shape with_last(std::size_t n) const {
    auto d = dims_;
    if (d.empty()) {
      d.push_back(n);
    } else {
      d.back() = n;
    }
    return Shape(std::move(d));
  }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      os << (i ? "x" : "") << dims_[i];
    }
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    if (dims_.size() > 3) {
      throw DimensionError("tensor rank " + std::to_string(dims_.size()) + " exceeds 3");
    }
  }

  std::vector<std::size_t> dims_;
};

/// Contiguous row-major tensor. `T` is float for training/inference and double for gradient checks.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{}, data_(1, T{0}) {}
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(Shape{m, n}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.rank(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_.last() + j]; }
  T at(std::size_t i, std::size_t j) const { return data_[i * shape_.last() + j]; }

  T& at(std::size_t b, std::size_t i, std::size_t j) { return data_[(b * shape_[1] + i) * shape_[2] + j]; }
  T at(std::size_t b, std::size_t i, std::size_t j) const {
    return data_[(b * shape_[1] + i) * shape_[2] + j];
  }

  T item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_.str());
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

/// Splits along the last dimension into pieces of the given widths.
template <typename T>
std::vector<Tensor<T>> split_last(const Tensor<T>& x, std::span<const std::size_t> widths) {
  const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  if (total != x.shape().last()) {
    throw DimensionError("split_last: widths sum to " + std::to_string(total) + " but last dim of " +
                         x.shape().str());
  }
  const std::size_t rows = x.shape().rows();
  std::vector<Tensor<T>> out;
  std::size_t offset = 0;
  for (std::size_t w : widths) {
    Tensor<T> piece(x.shape().with_last(w));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < w; ++c) piece[r * w + c] = x[r * total + offset + c];
    }
    out.push_back(std::move(piece));
    offset += w;
  }
  return out;
}

}  // namespace qtrack
