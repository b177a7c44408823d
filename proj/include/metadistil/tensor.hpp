#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace metadistil {

using Scalar = double;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Extents of a tensor. Rank 0 is a scalar, rank 1 a row vector, rank 2 a matrix.
using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Immutable dense tensor of doubles, rank at most 2, row-major.
///
/// Storage is always an Eigen matrix: a scalar is 1x1 and a rank-1 tensor of
/// extent k is 1xk. Every element is finite; construction rejects NaN and Inf.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::span<const Scalar> data);
  Tensor(Shape shape, std::initializer_list<Scalar> data);
  Tensor(Shape shape, Matrix data);

  static Tensor scalar(Scalar value);
  static Tensor vector(std::span<const Scalar> values);
  static Tensor vector(std::initializer_list<Scalar> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<Scalar> values);
  static Tensor from_matrix(Matrix m);
  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, Scalar value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  Eigen::Index rows() const { return data_.rows(); }
  Eigen::Index cols() const { return data_.cols(); }

  const Matrix& matrix() const { return data_; }
  std::span<const Scalar> data() const { return {data_.data(), size()}; }

  Scalar item() const;
  Scalar operator[](std::size_t flat) const { return data_.data()[flat]; }
  Scalar operator()(Eigen::Index r, Eigen::Index c) const { return data_(r, c); }

  /// Same storage, different shape of equal size.
  Tensor reshaped(Shape shape) const;

  /// Bitwise equality of shape and elements.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  Matrix data_;
};

std::ostream& operator<<(std::ostream& os, const Tensor& t);

/// Storage geometry for a shape: rank 0 -> 1x1, rank 1 [k] -> 1xk.
Eigen::Index storage_rows(const Shape& shape);
Eigen::Index storage_cols(const Shape& shape);

}  // namespace metadistil
