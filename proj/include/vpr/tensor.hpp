#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vpr/errors.hpp"

namespace vpr {

/// (batch, channels, height, width)
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  std::string str() const;
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

/// Dense rank-4 float tensor, row-major with batch outermost.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, float fill = 0.0f);
  Tensor4(Shape4 shape, std::vector<float> values);

  const Shape4& shape() const { return shape_; }
  int batch() const { return shape_.n; }
  int channels() const { return shape_.c; }
  int height() const { return shape_.h; }
  int width() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }

  float& operator()(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  float operator()(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  float* plane(int n, int c) { return data_.data() + offset(n, c, 0, 0); }
  const float* plane(int n, int c) const { return data_.data() + offset(n, c, 0, 0); }

  bool all_finite() const;
  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape4 shape_;
  std::vector<float> data_;
};

/// Largest elementwise |a - b|; shapes must agree.
float max_abs_diff(const Tensor4& a, const Tensor4& b);

struct ConvParams {
  Tensor4 weight;  // (out_channels, in_channels, k_h, k_w)
  Eigen::VectorXf bias;
  int stride = 1;
  int padding = 0;

  int out_channels() const { return weight.batch(); }
  int in_channels() const { return weight.channels(); }
  int kernel_h() const { return weight.height(); }
  int kernel_w() const { return weight.width(); }
  void validate() const;
};

struct BatchNormParams {
  Eigen::VectorXf gamma;
  Eigen::VectorXf beta;
  Eigen::VectorXf running_mean;
  Eigen::VectorXf running_var;
  float epsilon = 1e-5f;

  int channels() const { return static_cast<int>(gamma.size()); }
  void validate() const;

  /// gamma = 1, beta = 0, mean = 0, var = 1.
  static BatchNormParams neutral(int channels, float epsilon = 0.0f);
};

/// Output extent of a convolution along one axis.
int conv_output_size(int in, int kernel, int stride, int padding);

/// Direct 2-D cross-correlation (no kernel flip).
Tensor4 conv2d(const Tensor4& input, const ConvParams& params);
Tensor4 relu(Tensor4 input);
Tensor4 batchnorm_infer(const Tensor4& input, const BatchNormParams& params);
Tensor4 add(const Tensor4& a, const Tensor4& b);

/// Bilinear resampling with half-pixel centers.
Tensor4 resize_bilinear(const Tensor4& input, int height, int width);

template <typename DerivedA, typename DerivedB>
auto matmul(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " times " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
  return (a * b).eval();
}

/// Row-wise softmax with max subtraction.
template <typename Derived>
typename Derived::PlainObject softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  typename Derived::PlainObject out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    if (out.cols() == 0) break;
    const auto peak = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - peak).exp().matrix();
    const double total = out.row(r).template cast<double>().sum();
    out.row(r) /= static_cast<typename Derived::Scalar>(total);
  }
  return out;
}

/// Unit-norm copy of v; the norm is accumulated in double.
template <typename Derived>
typename Derived::PlainObject l2_normalize(const Eigen::MatrixBase<Derived>& v) {
  const double norm = v.template cast<double>().norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw DegenerateInputError("l2_normalize: vector has zero or non-finite norm");
  }
  return (v.template cast<double>() / norm).template cast<typename Derived::Scalar>();
}

}  // namespace vpr
