#include "vpr/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace vpr {

namespace {

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_same_shape(const Tensor4& a, const Tensor4& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes differ " + a.shape().str() + " vs " + b.shape().str());
  }
}

}  // namespace

std::string Shape4::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

Tensor4::Tensor4(Shape4 shape, float fill) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("Tensor4: negative dimension in " + shape.str());
  }
  data_.assign(shape.count(), fill);
}

Tensor4::Tensor4(Shape4 shape, std::vector<float> values) : shape_(shape), data_(std::move(values)) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("Tensor4: negative dimension in " + shape.str());
  }
  if (data_.size() != shape.count()) {
    throw ShapeError("Tensor4: " + std::to_string(data_.size()) + " values do not fill " + shape.str());
  }
}

bool Tensor4::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

float max_abs_diff(const Tensor4& a, const Tensor4& b) {
  require_same_shape(a, b, "max_abs_diff");
  float worst = 0.0f;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) worst = std::max(worst, std::abs(av[i] - bv[i]));
  return worst;
}

void ConvParams::validate() const {
  if (bias.size() != out_channels()) {
    throw ShapeError("ConvParams: bias has " + std::to_string(bias.size()) + " entries for weight " +
                     weight.shape().str());
  }
  if (stride < 1) throw ShapeError("ConvParams: stride must be positive");
  if (padding < 0) throw ShapeError("ConvParams: padding must be non-negative");
}

void BatchNormParams::validate() const {
  const auto c = gamma.size();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("BatchNormParams: gamma/beta/mean/var lengths differ");
  }
  if ((running_var.array() < 0.0f).any()) throw InputError("BatchNormParams: negative running variance");
  if (!(epsilon >= 0.0f)) throw InputError("BatchNormParams: negative epsilon");
}

BatchNormParams BatchNormParams::neutral(int channels, float epsilon) {
  BatchNormParams bn;
  bn.gamma = Eigen::VectorXf::Ones(channels);
  bn.beta = Eigen::VectorXf::Zero(channels);
  bn.running_mean = Eigen::VectorXf::Zero(channels);
  bn.running_var = Eigen::VectorXf::Ones(channels);
  bn.epsilon = epsilon;
  return bn;
}

int conv_output_size(int in, int kernel, int stride, int padding) {
  const int span = in + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

Tensor4 conv2d(const Tensor4& input, const ConvParams& params) {
  params.validate();
  if (input.channels() != params.in_channels()) {
    throw ShapeError("conv2d: input " + input.shape().str() + " does not match weight " +
                     params.weight.shape().str());
  }
  const int kh = params.kernel_h();
  const int kw = params.kernel_w();
  const int pad = params.padding;
  const int stride = params.stride;
  if (input.height() + 2 * pad < kh || input.width() + 2 * pad < kw) {
    throw ShapeError("conv2d: kernel " + params.weight.shape().str() + " does not fit padded input " +
                     input.shape().str());
  }
  const int out_h = conv_output_size(input.height(), kh, stride, pad);
  const int out_w = conv_output_size(input.width(), kw, stride, pad);
  const int cin = input.channels();
  const int cout = params.out_channels();
  const Eigen::Index patch = static_cast<Eigen::Index>(cin) * kh * kw;
  const Eigen::Index pixels = static_cast<Eigen::Index>(out_h) * out_w;

  Tensor4 out({input.batch(), cout, out_h, out_w});
  Eigen::Map<const RowMatrixXf> weights(params.weight.values().data(), cout, patch);
  RowMatrixXf columns(patch, pixels);

  for (int n = 0; n < input.batch(); ++n) {
    // im2col: row (c, ky, kx), column (oy, ox)
    for (int c = 0; c < cin; ++c) {
      const float* src = input.plane(n, c);
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          float* dst = columns.row((static_cast<Eigen::Index>(c) * kh + ky) * kw + kx).data();
          for (int oy = 0; oy < out_h; ++oy) {
            const int iy = oy * stride - pad + ky;
            float* row = dst + static_cast<std::size_t>(oy) * out_w;
            if (iy < 0 || iy >= input.height()) {
              std::fill(row, row + out_w, 0.0f);
              continue;
            }
            const float* line = src + static_cast<std::size_t>(iy) * input.width();
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * stride - pad + kx;
              row[ox] = (ix >= 0 && ix < input.width()) ? line[ix] : 0.0f;
            }
          }
        }
      }
    }
    Eigen::Map<RowMatrixXf> result(out.plane(n, 0), cout, pixels);
    result.noalias() = weights * columns;
    result.colwise() += params.bias;
  }
  return out;
}

Tensor4 relu(Tensor4 input) {
  for (float& v : input.values()) v = std::max(v, 0.0f);
  return input;
}

Tensor4 batchnorm_infer(const Tensor4& input, const BatchNormParams& params) {
  params.validate();
  if (input.channels() != params.channels()) {
    throw ShapeError("batchnorm_infer: input " + input.shape().str() + " has " +
                     std::to_string(input.channels()) + " channels, parameters have " +
                     std::to_string(params.channels()));
  }
  Tensor4 out = input;
  const std::size_t plane = static_cast<std::size_t>(input.height()) * input.width();
  for (int n = 0; n < input.batch(); ++n) {
    for (int c = 0; c < input.channels(); ++c) {
      const double inv_std = 1.0 / std::sqrt(static_cast<double>(params.running_var[c]) + params.epsilon);
      const float scale = static_cast<float>(params.gamma[c] * inv_std);
      const float shift = static_cast<float>(params.beta[c] - params.running_mean[c] * params.gamma[c] * inv_std);
      float* p = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * scale + shift;
    }
  }
  return out;
}

Tensor4 add(const Tensor4& a, const Tensor4& b) {
  require_same_shape(a, b, "add");
  Tensor4 out = a;
  auto ov = out.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  return out;
}

Tensor4 resize_bilinear(const Tensor4& input, int height, int width) {
  if (height <= 0 || width <= 0) throw ShapeError("resize_bilinear: target dims must be positive");
  if (input.height() == height && input.width() == width) return input;
  if (input.height() == 0 || input.width() == 0) throw ShapeError("resize_bilinear: empty input");
  Tensor4 out({input.batch(), input.channels(), height, width});
  const double sy = static_cast<double>(input.height()) / height;
  const double sx = static_cast<double>(input.width()) / width;
  auto source = [](double o, double scale, int extent, int& i0, int& i1, double& t) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, extent - 1);
    t = s - i0;
  };
  for (int n = 0; n < input.batch(); ++n) {
    for (int c = 0; c < input.channels(); ++c) {
      for (int y = 0; y < height; ++y) {
        int y0, y1;
        double ty;
        source(y, sy, input.height(), y0, y1, ty);
        for (int x = 0; x < width; ++x) {
          int x0, x1;
          double tx;
          source(x, sx, input.width(), x0, x1, tx);
          const double top = input(n, c, y0, x0) * (1.0 - tx) + input(n, c, y0, x1) * tx;
          const double bottom = input(n, c, y1, x0) * (1.0 - tx) + input(n, c, y1, x1) * tx;
          out(n, c, y, x) = static_cast<float>(top * (1.0 - ty) + bottom * ty);
        }
      }
    }
  }
  return out;
}

}  // namespace vpr
