#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mrvi/errors.hpp"

namespace mrvi {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major n-d array. Storage is a contiguous Eigen column vector so
// whole-tensor arithmetic goes through Eigen expressions.
template <typename Scalar>
class BasicTensor {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Storage::Constant(Eigen::Index(shape_size(shape_)), fill)) {}

  BasicTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (std::size_t(data_.size()) != shape_size(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
  }

  BasicTensor(Shape shape, std::initializer_list<Scalar> values)
      : BasicTensor(std::move(shape), Storage(Eigen::Index(values.size()))) {
    std::copy(values.begin(), values.end(), data_.data());
  }

  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return std::size_t(data_.size()); }
  bool empty() const { return data_.size() == 0 && shape_.empty(); }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](std::size_t i) { return data_[Eigen::Index(i)]; }
  Scalar operator[](std::size_t i) const { return data_[Eigen::Index(i)]; }

  // Scalar value of a one-element tensor.
  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  template <typename... Idx>
  Scalar& at(Idx... idx) {
    return data_[Eigen::Index(offset({std::size_t(idx)...}))];
  }
  template <typename... Idx>
  Scalar at(Idx... idx) const {
    return data_[Eigen::Index(offset({std::size_t(idx)...}))];
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return BasicTensor(std::move(shape), data_);
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw DimensionError("index rank mismatch for " + shape_string(shape_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) throw IndexError("index out of range on axis " + std::to_string(axis));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<double>;

template <typename Scalar>
using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Binary mask on an H x W grid, values 0/1.
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
// Per-pixel probability or intensity map.
using Map2d = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace mrvi
