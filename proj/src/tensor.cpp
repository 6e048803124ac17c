#include "hyperconv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace hconv {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

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

void check_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw ShapeError("dimension index out of range for shape " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

template <typename T>
std::int64_t Tensor<T>::offset(std::initializer_list<std::int64_t> idx) const {
  if (static_cast<std::int64_t>(idx.size()) != rank()) throw ShapeError("index rank does not match tensor rank");
  std::int64_t off = 0;
  std::size_t k = 0;
  for (auto i : idx) {
    const auto d = shape_[k++];
    if (i < 0 || i >= d) throw std::out_of_range("tensor index out of range");
    off = off * d + i;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::int64_t> idx) {
  return data_[static_cast<std::size_t>(offset(idx))];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::int64_t> idx) const {
  return data_[static_cast<std::size_t>(offset(idx))];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (numel(shape) != size()) throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (const T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
T Tensor<T>::sum() const {
  T s{0};
  for (const T v : data_) s += v;
  return s;
}

template <typename T>
T Tensor<T>::mean() const {
  return data_.empty() ? T{0} : sum() / static_cast<T>(data_.size());
}

template <typename T>
T Tensor<T>::max_abs() const {
  T m{0};
  for (const T v : data_) m = std::max(m, std::abs(v));
  return m;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace hconv
