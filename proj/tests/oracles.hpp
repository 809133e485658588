#pragma once

// Independent reference implementations used only by tests. Written in the
// most direct form possible; speed is irrelevant.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "vpr/backbone.hpp"
#include "vpr/io_store.hpp"
#include "vpr/tensor.hpp"

namespace oracle {

inline vpr::Tensor4 random_tensor(std::mt19937_64& rng, vpr::Shape4 s, float scale = 1.0f) {
  std::normal_distribution<float> d(0.0f, scale);
  vpr::Tensor4 t(s);
  for (float& v : t.values()) v = d(rng);
  return t;
}

inline Eigen::MatrixXd random_matrix(std::mt19937_64& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Eigen::MatrixXd m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = d(rng);
  return m;
}

inline vpr::Tensor4 conv(const vpr::Tensor4& x, const vpr::ConvParams& p) {
  const int kh = p.weight.height(), kw = p.weight.width();
  const int oh = (x.height() + 2 * p.padding - kh) / p.stride + 1;
  const int ow = (x.width() + 2 * p.padding - kw) / p.stride + 1;
  vpr::Tensor4 out({x.batch(), p.weight.batch(), oh, ow});
  for (int n = 0; n < x.batch(); ++n)
    for (int o = 0; o < p.weight.batch(); ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = p.bias[o];
          for (int c = 0; c < x.channels(); ++c)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int iy = y * p.stride - p.padding + i;
                const int ix = xx * p.stride - p.padding + j;
                if (iy < 0 || ix < 0 || iy >= x.height() || ix >= x.width()) continue;
                acc += double(p.weight(o, c, i, j)) * double(x(n, c, iy, ix));
              }
          out(n, o, y, xx) = float(acc);
        }
  return out;
}

inline vpr::Tensor4 batchnorm(const vpr::Tensor4& x, const vpr::BatchNormParams& bn) {
  vpr::Tensor4 out(x.shape());
  for (int n = 0; n < x.batch(); ++n)
    for (int c = 0; c < x.channels(); ++c)
      for (int y = 0; y < x.height(); ++y)
        for (int xx = 0; xx < x.width(); ++xx) {
          const double v = (double(x(n, c, y, xx)) - bn.running_mean[c]) /
                               std::sqrt(double(bn.running_var[c]) + bn.epsilon) * bn.gamma[c] +
                           bn.beta[c];
          out(n, c, y, xx) = float(v);
        }
  return out;
}

inline vpr::BatchNormParams random_bn(std::mt19937_64& rng, int c) {
  std::uniform_real_distribution<float> pos(0.5f, 1.5f), sym(-0.3f, 0.3f);
  vpr::BatchNormParams bn;
  bn.gamma.resize(c);
  bn.beta.resize(c);
  bn.running_mean.resize(c);
  bn.running_var.resize(c);
  for (int i = 0; i < c; ++i) {
    bn.gamma[i] = pos(rng);
    bn.beta[i] = sym(rng);
    bn.running_mean[i] = sym(rng);
    bn.running_var[i] = pos(rng);
  }
  bn.epsilon = 1e-5f;
  return bn;
}

inline vpr::ConvParams random_conv(std::mt19937_64& rng, int cin, int cout, int k, int stride, bool bias = false) {
  vpr::ConvParams p;
  p.weight = random_tensor(rng, {cout, cin, k, k}, 1.0f / std::sqrt(float(cin * k * k)));
  p.bias = bias ? Eigen::VectorXf(Eigen::VectorXf::Random(cout)) : Eigen::VectorXf(Eigen::VectorXf::Zero(cout));
  p.stride = stride;
  p.padding = k / 2;
  return p;
}

inline vpr::RepVggBlock random_block(std::mt19937_64& rng, int cin, int cout, int stride) {
  vpr::RepVggBlock b;
  b.stride = stride;
  b.conv3x3 = {random_conv(rng, cin, cout, 3, stride), random_bn(rng, cout)};
  b.conv1x1 = vpr::ConvBn{random_conv(rng, cin, cout, 1, stride), random_bn(rng, cout)};
  if (cin == cout && stride == 1) b.identity_bn = random_bn(rng, cin);
  return b;
}

/// Sum of separately evaluated branches, then ReLU.
inline vpr::Tensor4 block_branches(const vpr::Tensor4& x, const vpr::RepVggBlock& b) {
  vpr::Tensor4 sum = batchnorm(conv(x, b.conv3x3.conv), b.conv3x3.bn);
  auto accumulate = [&](const vpr::Tensor4& t) {
    for (std::size_t i = 0; i < sum.size(); ++i) sum.values()[i] += t.values()[i];
  };
  if (b.conv1x1) accumulate(batchnorm(conv(x, b.conv1x1->conv), b.conv1x1->bn));
  if (b.identity_bn) accumulate(batchnorm(x, *b.identity_bn));
  for (float& v : sum.values()) v = std::max(v, 0.0f);
  return sum;
}

/// Number of top-left positions of a dy x dx window with step s.
inline int count_placements(int h, int w, int dy, int dx, int s) {
  int n = 0;
  for (int y = 0; y + dy <= h; y += s)
    for (int x = 0; x + dx <= w; x += s) ++n;
  return n;
}

/// V(j, k) = sum_i a(i, k) (x(j, i) - c(k, j)), returned K x D.
inline Eigen::MatrixXd vlad(const Eigen::MatrixXd& x, const Eigen::MatrixXd& a, const Eigen::MatrixXd& c) {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(c.rows(), c.cols());
  for (int k = 0; k < c.rows(); ++k)
    for (int j = 0; j < c.cols(); ++j)
      for (int i = 0; i < x.cols(); ++i) v(k, j) += a(i, k) * (x(j, i) - c(k, j));
  return v;
}

/// Cyclic Jacobi eigensolver; eigenvalues descending with matching columns.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> jacobi_eigen(Eigen::MatrixXd a) {
  const int n = static_cast<int>(a.rows());
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) > a(j, j); });
  Eigen::VectorXd vals(n);
  Eigen::MatrixXd vecs(n, n);
  for (int i = 0; i < n; ++i) {
    vals[i] = a(order[i], order[i]);
    vecs.col(i) = v.col(order[i]);
  }
  return {vals, vecs};
}

/// Plain-domain Sinkhorn on the dustbin-augmented kernel, fixed iteration count.
inline Eigen::MatrixXd sinkhorn(const Eigen::MatrixXd& c, double dustbin, double reg, int iters = 10000) {
  const auto m = c.rows(), n = c.cols();
  Eigen::MatrixXd s = Eigen::MatrixXd::Constant(m + 1, n + 1, dustbin);
  s.topLeftCorner(m, n) = c;
  const double peak = s.maxCoeff();
  Eigen::MatrixXd k = ((s.array() - peak) / reg).exp().matrix();
  Eigen::VectorXd mu = Eigen::VectorXd::Ones(m + 1), nu = Eigen::VectorXd::Ones(n + 1);
  mu[m] = double(n);
  nu[n] = double(m);
  Eigen::VectorXd a = Eigen::VectorXd::Ones(m + 1), b = Eigen::VectorXd::Ones(n + 1);
  for (int it = 0; it < iters; ++it) {
    a = mu.cwiseQuotient(k * b);
    b = nu.cwiseQuotient(k.transpose() * a);
  }
  return a.asDiagonal() * k * b.asDiagonal();
}

/// Per-layer tally of the fused Table-1 backbone: every layer is a 3x3 conv with bias.
inline std::int64_t fused_backbone_params() {
  struct Layer {
    std::int64_t cin, cout;
  };
  std::vector<Layer> layers;
  layers.push_back({3, 48});
  for (int i = 0; i < 2; ++i) layers.push_back({48, 48});
  layers.push_back({48, 96});
  for (int i = 0; i < 3; ++i) layers.push_back({96, 96});
  layers.push_back({96, 192});
  for (int i = 0; i < 13; ++i) layers.push_back({192, 192});
  std::int64_t total = 0;
  for (const auto& l : layers) total += l.cin * l.cout * 9 + l.cout;
  return total;
}

/// Fused Table-1 backbone parameters (weights plus biases), frozen.
inline constexpr std::int64_t kFusedBackboneParams = 4'815'264;

/// Synthetic street-like scene: sky/ground gradient plus seeded blocks and discs.
inline std::vector<std::uint8_t> synthetic_scene(std::uint64_t seed, int height, int width) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> rgb(static_cast<std::size_t>(height) * width * 3);
  const double horizon = 0.3 + 0.4 * u(rng);
  const double sky[3] = {0.4 + 0.4 * u(rng), 0.5 + 0.4 * u(rng), 0.7 + 0.3 * u(rng)};
  const double ground[3] = {0.2 * u(rng) + 0.2, 0.2 * u(rng) + 0.2, 0.2 * u(rng) + 0.15};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double t = double(y) / height;
        rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] = t < horizon ? sky[c] * (1.0 - 0.5 * t) : ground[c] * (0.5 + t);
      }
  const int shapes = 6 + static_cast<int>(u(rng) * 8);
  for (int s = 0; s < shapes; ++s) {
    const double col[3] = {u(rng), u(rng), u(rng)};
    const int cx = static_cast<int>(u(rng) * width), cy = static_cast<int>(u(rng) * height);
    const int rx = 4 + static_cast<int>(u(rng) * width / 4), ry = 4 + static_cast<int>(u(rng) * height / 3);
    const bool disc = u(rng) < 0.4;
    for (int y = std::max(0, cy - ry); y < std::min(height, cy + ry); ++y)
      for (int x = std::max(0, cx - rx); x < std::min(width, cx + rx); ++x) {
        const double dx = double(x - cx) / rx, dy = double(y - cy) / ry;
        if (disc && dx * dx + dy * dy > 1.0) continue;
        const double stripe = ((x / 3 + y / 5) % 2 == 0) ? 1.0 : 0.8;
        for (int c = 0; c < 3; ++c) rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] = col[c] * stripe;
      }
  }
  std::normal_distribution<double> noise(0.0, 0.02);
  std::vector<std::uint8_t> out(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::clamp(std::lround((rgb[i] + noise(rng)) * 255.0), 0L, 255L));
  }
  return out;
}

/// Writes `count` scenes as PPMs plus a manifest listing each image once as
/// database (`db<i>`) and once as query (`q<i>`) at the same UTM position.
inline std::filesystem::path write_fixture(const std::filesystem::path& dir, int count, int height, int width,
                                           std::uint64_t seed = 7, double spacing_m = 100.0) {
  std::filesystem::create_directories(dir);
  std::vector<vpr::ManifestRecord> records;
  for (int i = 0; i < count; ++i) {
    const std::string name = "scene" + std::to_string(100 + i) + ".ppm";
    vpr::save_ppm(dir / name, height, width, synthetic_scene(seed * 1000 + i, height, width));
    const auto tag = vpr::GeoTag::utm(500000.0 + spacing_m * i, 4100000.0);
    records.push_back({"db" + std::to_string(100 + i), name, tag, vpr::Split::database});
    records.push_back({"q" + std::to_string(100 + i), name, tag, vpr::Split::query});
  }
  const auto manifest = dir / "manifest.csv";
  vpr::save_manifest(manifest, records);
  return manifest;
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("vpr_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace oracle
