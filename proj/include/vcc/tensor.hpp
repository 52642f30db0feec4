#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vcc/error.hpp"

namespace vcc {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Spatial tensors are laid out channels x height x width
/// for a single image; there is no batch dimension.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    require(data_.size() == shape_size(shape_), ErrorKind::invalid_input,
            "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_spatial() const noexcept { return shape_.size() == 3; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(int c, int y, int x) noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  const T& at(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (int d : shape_)
      require(d > 0, ErrorKind::invalid_input, "tensor dimensions must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using DTensor = BasicTensor<double>;

/// Double-accumulated dot product over two equally sized spans.
template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename A>
double norm2(std::span<const A> a) {
  return std::sqrt(dot<A, A>(a, a));
}

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

}  // namespace vcc
