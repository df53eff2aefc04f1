#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace vf {

using Index = std::int64_t;
using Shape = std::vector<Index>;
using Rng = std::mt19937_64;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

Index num_elements(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const;
  Index size() const { return static_cast<Index>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Value of a single-element tensor.
  double item() const;

  ArrayMap array() { return {data_.data(), size()}; }
  ConstArrayMap array() const { return {data_.data(), size()}; }
  /// Rank-2 view.
  MatrixMap matrix();
  ConstMatrixMap matrix() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  // Aligned so Eigen's vectorized reductions sum in the same order wherever the buffer lands.
  using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

  Shape shape_;
  Storage data_;
};

using NamedTensors = std::map<std::string, Tensor>;
/// Learnable tensors keyed by a dotted, model-prefixed name.
using ParameterSet = NamedTensors;

Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);
Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi);

/// Throws ShapeError naming `what` unless the shapes match.
void require_shape(const Shape& actual, const Shape& expected, const char* what);

}  // namespace vf
