#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sanr/common.hpp"

namespace sanr {

/// Dense row-major tensor with a runtime shape.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<int> shape, T fill = T{})
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  BasicTensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == count(shape_), "tensor data does not match shape " + shape_string());
  }

  template <typename U>
  static BasicTensor cast(const BasicTensor<U>& other) {
    BasicTensor out(other.shape());
    for (std::size_t i = 0; i < other.size(); ++i) out[i] = static_cast<T>(other[i]);
    return out;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Contiguous slice along the leading axis.
  std::span<T> slice(int index) {
    const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_.at(0));
    return std::span<T>(data_).subspan(static_cast<std::size_t>(index) * stride, stride);
  }
  std::span<const T> slice(int index) const {
    const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_.at(0));
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(index) * stride, stride);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool operator==(const BasicTensor& other) const = default;

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  static std::size_t count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  require(dst.size() == src.size(), "add_into: size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace sanr
