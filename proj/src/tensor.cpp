#include "metadistil/tensor.hpp"

#include "metadistil/error.hpp"

#include <algorithm>
#include <cstring>
#include <ostream>
#include <sstream>

namespace metadistil {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Eigen::Index storage_rows(const Shape& shape) {
  return shape.size() == 2 ? static_cast<Eigen::Index>(shape[0]) : 1;
}

Eigen::Index storage_cols(const Shape& shape) {
  switch (shape.size()) {
    case 0: return 1;
    case 1: return static_cast<Eigen::Index>(shape[0]);
    default: return static_cast<Eigen::Index>(shape[1]);
  }
}

namespace {

void check_rank(const Shape& shape) {
  if (shape.size() > 2) throw ShapeError("tensor rank above 2 is not supported: " + to_string(shape));
}

void check_finite(const Matrix& m) {
  if (!m.allFinite()) throw NumericError("tensor contains a non-finite element");
}

}  // namespace

Tensor::Tensor() : data_(Matrix::Zero(1, 1)) {}

Tensor::Tensor(Shape shape, std::span<const Scalar> data) : shape_(std::move(shape)) {
  check_rank(shape_);
  if (shape_size(shape_) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape_));
  }
  data_.resize(storage_rows(shape_), storage_cols(shape_));
  std::copy(data.begin(), data.end(), data_.data());
  check_finite(data_);
}

Tensor::Tensor(Shape shape, std::initializer_list<Scalar> data)
    : Tensor(std::move(shape), std::span<const Scalar>(data.begin(), data.size())) {}

Tensor::Tensor(Shape shape, Matrix data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_rank(shape_);
  if (data_.rows() != storage_rows(shape_) || data_.cols() != storage_cols(shape_)) {
    throw ShapeError("matrix storage does not match shape " + to_string(shape_));
  }
  check_finite(data_);
}

Tensor Tensor::scalar(Scalar value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::span<const Scalar> values) { return Tensor({values.size()}, values); }

Tensor Tensor::vector(std::initializer_list<Scalar> values) { return Tensor({values.size()}, values); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<Scalar> values) {
  return Tensor({rows, cols}, values);
}

Tensor Tensor::from_matrix(Matrix m) {
  Shape shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
  return Tensor(std::move(shape), std::move(m));
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, Scalar value) {
  check_rank(shape);
  return Tensor(shape, Matrix::Constant(storage_rows(shape), storage_cols(shape), value));
}

Scalar Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return data_(0, 0);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data());
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ &&
         std::memcmp(a.data_.data(), b.data_.data(), a.size() * sizeof(Scalar)) == 0;
}

std::ostream& operator<<(std::ostream& os, const Tensor& t) {
  os << "Tensor" << to_string(t.shape()) << '{';
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) os << ", ";
    os << t[i];
  }
  return os << '}';
}

}  // namespace metadistil
