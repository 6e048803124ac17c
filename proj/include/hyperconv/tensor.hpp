#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hconv {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an operation receives tensors whose shapes do not fit together.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward value or a loss becomes NaN or infinite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major N-dimensional array.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const;
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Multi-index access; the number of indices must equal the rank.
  T& at(std::initializer_list<std::int64_t> idx);
  const T& at(std::initializer_list<std::int64_t> idx) const;

  T item() const;

  Tensor reshaped(Shape shape) const;
  void fill(T v);

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[static_cast<std::int64_t>(i)] = static_cast<U>(data_[i]);
    return out;
  }

  bool all_finite() const;
  T sum() const;
  T mean() const;
  T max_abs() const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::int64_t offset(std::initializer_list<std::int64_t> idx) const;

  Shape shape_;
  std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

void check_same_shape(const Shape& a, const Shape& b, const char* what);

}  // namespace hconv
