#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>

#include "covidscreen/core/error.hpp"

namespace covidscreen {

// Dense batch x channels x height x width array, row-major (NCHW). Vectors
// and matrices are represented with trailing unit dimensions: a batch of
// feature vectors is (B, F, 1, 1).
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Index = Eigen::Index;
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMajorMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMajorMatrix>;

  struct Shape {
    Index n = 0, c = 0, h = 0, w = 0;

    Index size() const { return n * c * h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const {
      return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
             std::to_string(w) + ")";
    }
  };

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Storage::Zero(shape.size())) {}
  Tensor(Index n, Index c, Index h, Index w) : Tensor(Shape{n, c, h, w}) {}

  static Tensor constant(const Shape& shape, Scalar value) {
    Tensor t(shape);
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index batch() const { return shape_.n; }
  Index channels() const { return shape_.c; }
  Index height() const { return shape_.h; }
  Index width() const { return shape_.w; }
  Index plane() const { return shape_.h * shape_.w; }
  Index sample_size() const { return shape_.c * shape_.h * shape_.w; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  Scalar* sample_data(Index n) { return data_.data() + n * sample_size(); }
  const Scalar* sample_data(Index n) const { return data_.data() + n * sample_size(); }

  // Sample n viewed as a channels x (height*width) matrix.
  MatrixMap sample(Index n) { return MatrixMap(sample_data(n), shape_.c, plane()); }
  ConstMatrixMap sample(Index n) const { return ConstMatrixMap(sample_data(n), shape_.c, plane()); }

  // Whole tensor viewed as batch x (channels*height*width).
  MatrixMap rows() { return MatrixMap(data_.data(), shape_.n, sample_size()); }
  ConstMatrixMap rows() const { return ConstMatrixMap(data_.data(), shape_.n, sample_size()); }

  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  void set_zero() { data_.setZero(); }

  Tensor reshaped(const Shape& shape) const {
    if (shape.size() != size()) {
      throw ShapeMismatch("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    Tensor out;
    out.shape_ = shape;
    out.data_ = data_;
    return out;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(typename Tensor<Other>::Shape{shape_.n, shape_.c, shape_.h, shape_.w});
    out.array() = data_.template cast<Other>();
    return out;
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  Shape shape_{};
  Storage data_;
};

template <typename Scalar>
void require_shape(const Tensor<Scalar>& t, Eigen::Index c, Eigen::Index h, Eigen::Index w,
                   const char* where) {
  if (t.channels() != c || t.height() != h || t.width() != w || t.batch() < 1) {
    throw ShapeMismatch(std::string(where) + ": expected (B," + std::to_string(c) + "," +
                        std::to_string(h) + "," + std::to_string(w) + "), got " + t.shape().str());
  }
}

}  // namespace covidscreen
