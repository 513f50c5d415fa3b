#pragma once

#include <cmath>
#include <cstddef>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "uvflow/error.hpp"

namespace uvflow {

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ValidationError("negative tensor dimension in " + shape_to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

/// Cache-line aligned storage. Vectorized reductions peel differently
/// depending on the start address, so alignment keeps results bit-identical
/// between runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

/// Dense row-major array with a dynamic shape.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, AlignedAllocator<T>>;

  BasicTensor() = default;
  explicit BasicTensor(std::vector<int> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  BasicTensor(std::vector<int> shape, const std::vector<T>& data)
      : BasicTensor(std::move(shape), Storage(data.begin(), data.end())) {}
  BasicTensor(std::vector<int> shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ValidationError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                            shape_to_string(shape_));
    }
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw ValidationError("axis out of range for " + shape_str());
    return shape_[static_cast<std::size_t>(axis)];
  }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  // rank-2 accessors
  T& at(int row, int col) { return data_[static_cast<std::size_t>(row) * shape_[1] + col]; }
  T at(int row, int col) const { return data_[static_cast<std::size_t>(row) * shape_[1] + col]; }

  BasicTensor reshaped(std::vector<int> shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ValidationError("cannot reshape " + shape_str() + " to " + shape_to_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }
  bool same_shape(const BasicTensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const { return shape_to_string(shape_); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
  double sum() const {
    double s = 0.0;
    for (T v : data_) s += static_cast<double>(v);
    return s;
  }
  double squared_norm() const {
    double s = 0.0;
    for (T v : data_) s += static_cast<double>(v) * static_cast<double>(v);
    return s;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, typename BasicTensor<U>::Storage(data_.begin(), data_.end()));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<int> shape_;
  Storage data_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

}  // namespace uvflow
