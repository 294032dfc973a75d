#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace qpm {

using Shape = std::vector<int>;

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;
using StridedMatMap = Eigen::Map<MatrixRM, 0, Eigen::OuterStride<>>;
using ConstStridedMatMap = Eigen::Map<const MatrixRM, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with a runtime shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  /// Negative indices count from the back.
  int dim(int axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double> storage() const { return {data_.begin(), data_.end()}; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Same storage, new shape. Element count must match.
  void reshape(Shape shape);
  Tensor reshaped(Shape shape) const;
  void fill(double value);
  void set_zero() { fill(0.0); }

  MatMap matrix(int rows, int cols, std::size_t offset = 0);
  ConstMatMap matrix(int rows, int cols, std::size_t offset = 0) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  // A fixed base alignment keeps Eigen's vectorised reductions summing in
  // the same order run to run.
  std::vector<double, Eigen::aligned_allocator<double>> data_;
};

}  // namespace qpm
