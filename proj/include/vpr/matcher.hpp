#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "vpr/errors.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class AttentionMode { self, cross };

/// per_destination: softmax over sources for each destination (rows of rho
/// sum to 1). global: one normalizer over every (destination, source) pair.
enum class AttentionNormalization { per_destination, global };

/// One attention layer. Descriptors are columns; f = wf x + bf and g = wg x + bg
/// live in the key space, h = wh x + bh in the descriptor space.
template <typename Scalar>
struct AttentionLayer {
  MatrixX<Scalar> wf, wg, wh;
  VectorX<Scalar> bf, bg, bh;
  AttentionMode mode = AttentionMode::self;

  int dim() const { return static_cast<int>(wh.cols()); }
  int key_dim() const { return static_cast<int>(wf.rows()); }

  void validate() const {
    const auto c = wh.cols();
    if (wh.rows() != c || wf.cols() != c || wg.cols() != c) {
      throw ShapeError("AttentionLayer: projections disagree on descriptor dimension");
    }
    if (wf.rows() != wg.rows()) throw ShapeError("AttentionLayer: f and g key dimensions differ");
    if (bf.size() != wf.rows() || bg.size() != wg.rows() || bh.size() != c) {
      throw ShapeError("AttentionLayer: bias lengths do not match projections");
    }
  }

  template <typename Other>
  AttentionLayer<Other> cast() const {
    AttentionLayer<Other> o;
    o.wf = wf.template cast<Other>();
    o.wg = wg.template cast<Other>();
    o.wh = wh.template cast<Other>();
    o.bf = bf.template cast<Other>();
    o.bg = bg.template cast<Other>();
    o.bh = bh.template cast<Other>();
    o.mode = mode;
    return o;
  }
};

template <typename Scalar>
struct AttentionParams {
  std::vector<AttentionLayer<Scalar>> layers;
  AttentionNormalization normalization = AttentionNormalization::per_destination;

  int dim() const { return layers.empty() ? 0 : layers.front().dim(); }

  void validate() const {
    for (const auto& l : layers) {
      l.validate();
      if (l.dim() != dim()) throw ShapeError("AttentionParams: layers disagree on descriptor dimension");
    }
  }

  /// `rounds` pairs of (self, cross) layers with Gaussian weights of std
  /// 1/sqrt(dim) and zero biases.
  static AttentionParams random(int dim, int key_dim, int rounds, std::uint64_t seed) {
    if (dim <= 0 || key_dim <= 0 || rounds < 0) throw InputError("AttentionParams::random: invalid sizes");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    auto draw = [&](int rows, int cols) {
      MatrixX<Scalar> m(rows, cols);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(dist(rng));
      return m;
    };
    AttentionParams p;
    for (int r = 0; r < 2 * rounds; ++r) {
      AttentionLayer<Scalar> l;
      l.wf = draw(key_dim, dim);
      l.wg = draw(key_dim, dim);
      l.wh = draw(dim, dim);
      l.bf = VectorX<Scalar>::Zero(key_dim);
      l.bg = VectorX<Scalar>::Zero(key_dim);
      l.bh = VectorX<Scalar>::Zero(dim);
      l.mode = r % 2 == 0 ? AttentionMode::self : AttentionMode::cross;
      p.layers.push_back(std::move(l));
    }
    return p;
  }

  template <typename Other>
  AttentionParams<Other> cast() const {
    AttentionParams<Other> o;
    o.normalization = normalization;
    for (const auto& l : layers) o.layers.push_back(l.template cast<Other>());
    return o;
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers) {
      n += l.wf.size() + l.wg.size() + l.wh.size() + l.bf.size() + l.bg.size() + l.bh.size();
    }
    return n;
  }
};

template <typename Scalar>
struct AttentionOutput {
  MatrixX<Scalar> enhanced;  // C x N_dst
  MatrixX<Scalar> rho;       // N_dst x N_src; rho(j, i) is the weight of source i at destination j
};

/// output_j = x_dst_j + sum_i rho(j, i) h(x_src_i), with
/// rho(j, i) proportional to exp(f(x_src_i) . g(x_dst_j)).
template <typename Scalar>
AttentionOutput<Scalar> attention_forward(const MatrixX<Scalar>& x_src, const MatrixX<Scalar>& x_dst,
                                          const AttentionLayer<Scalar>& layer,
                                          AttentionNormalization normalization =
                                              AttentionNormalization::per_destination) {
  layer.validate();
  if (x_src.rows() != layer.dim() || x_dst.rows() != layer.dim()) {
    throw ShapeError("attention_forward: descriptors of dimension " + std::to_string(x_src.rows()) + "/" +
                     std::to_string(x_dst.rows()) + " for a layer of dimension " + std::to_string(layer.dim()));
  }
  AttentionOutput<Scalar> out;
  if (x_src.cols() == 0 || x_dst.cols() == 0) {
    out.enhanced = x_dst;
    out.rho = MatrixX<Scalar>::Zero(x_dst.cols(), x_src.cols());
    return out;
  }
  const MatrixX<Scalar> f = (layer.wf * x_src).colwise() + layer.bf;
  const MatrixX<Scalar> g = (layer.wg * x_dst).colwise() + layer.bg;
  const MatrixX<Scalar> h = (layer.wh * x_src).colwise() + layer.bh;
  const MatrixX<Scalar> logits = g.transpose() * f;
  if (normalization == AttentionNormalization::per_destination) {
    out.rho = softmax_rows(logits);
  } else {
    out.rho = (logits.array() - logits.maxCoeff()).exp().matrix();
    out.rho /= static_cast<Scalar>(out.rho.template cast<double>().sum());
  }
  out.enhanced = x_dst + h * out.rho.transpose();
  return out;
}

/// Runs every layer: self layers update each set from itself, cross layers
/// update each set from the other (both directions read the pre-layer sets).
template <typename Scalar>
std::pair<MatrixX<Scalar>, MatrixX<Scalar>> enhance_pair(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b,
                                                         const AttentionParams<Scalar>& params) {
  MatrixX<Scalar> x = a;
  MatrixX<Scalar> y = b;
  for (const auto& layer : params.layers) {
    if (layer.mode == AttentionMode::self) {
      MatrixX<Scalar> nx = attention_forward<Scalar>(x, x, layer, params.normalization).enhanced;
      MatrixX<Scalar> ny = attention_forward<Scalar>(y, y, layer, params.normalization).enhanced;
      x = std::move(nx);
      y = std::move(ny);
    } else {
      MatrixX<Scalar> nx = attention_forward<Scalar>(y, x, layer, params.normalization).enhanced;
      MatrixX<Scalar> ny = attention_forward<Scalar>(x, y, layer, params.normalization).enhanced;
      x = std::move(nx);
      y = std::move(ny);
    }
  }
  return {std::move(x), std::move(y)};
}

/// Multiply-adds of enhance_pair for set sizes m and n.
template <typename Scalar>
std::int64_t attention_mult_adds(const AttentionParams<Scalar>& params, std::int64_t m, std::int64_t n) {
  std::int64_t total = 0;
  for (const auto& l : params.layers) {
    const std::int64_t c = l.dim();
    const std::int64_t k = l.key_dim();
    // each direction: f, h on the source, g on the destination, logits and mixing
    const auto one = [&](std::int64_t src, std::int64_t dst) {
      return k * c * src + c * c * src + k * c * dst + k * src * dst + c * src * dst;
    };
    total += l.mode == AttentionMode::self ? one(m, m) + one(n, n) : one(n, m) + one(m, n);
  }
  return total;
}

/// C(i, j) = <yq_i, yd_j> for descriptor columns; no renormalization.
template <typename DerivedQ, typename DerivedD>
auto score_matrix(const Eigen::MatrixBase<DerivedQ>& yq, const Eigen::MatrixBase<DerivedD>& yd) {
  if (yq.rows() != yd.rows()) {
    throw ShapeError("score_matrix: descriptor dimensions differ (" + std::to_string(yq.rows()) + " vs " +
                     std::to_string(yd.rows()) + ")");
  }
  return (yq.transpose() * yd).eval();
}

struct SinkhornConfig {
  double reg = 1.0;
  double dustbin_score = 1.0;
  int max_iters = 100;
  /// Stop when the worst marginal deviation is at most tol; tol <= 0 always
  /// runs max_iters iterations.
  double tol = 1e-6;

  void validate() const {
    if (!(reg > 0.0) || !std::isfinite(reg)) throw InputError("SinkhornConfig: reg must be positive");
    if (!std::isfinite(dustbin_score)) throw InputError("SinkhornConfig: dustbin score must be finite");
    if (max_iters < 1) throw InputError("SinkhornConfig: max_iters must be at least 1");
  }
};

/// (M+1) x (N+1) transport plan; the last row and column are dustbins.
template <typename Scalar>
struct AssignmentMatrix {
  MatrixX<Scalar> z;
  int iterations = 0;
  bool converged = false;
  double marginal_error = 0.0;

  int query_count() const { return static_cast<int>(z.rows()) - 1; }
  int database_count() const { return static_cast<int>(z.cols()) - 1; }
};

namespace detail {

template <typename Scalar>
Scalar log_sum_exp(const Eigen::Ref<const VectorX<Scalar>>& v) {
  const Scalar peak = v.maxCoeff();
  if (!std::isfinite(static_cast<double>(peak))) return peak;
  return peak + std::log((v.array() - peak).exp().sum());
}

template <typename Scalar>
struct SinkhornState {
  MatrixX<Scalar> kernel;  // augmented scores / reg
  VectorX<Scalar> log_mu, log_nu;
  std::vector<VectorX<Scalar>> u_history, v_history;
  VectorX<Scalar> u, v;
  int iterations = 0;
  bool converged = false;
  double marginal_error = 0.0;
};

template <typename Scalar>
double marginal_error(const MatrixX<Scalar>& log_z, const VectorX<Scalar>& log_mu, const VectorX<Scalar>& log_nu) {
  const MatrixX<Scalar> z = log_z.array().exp().matrix();
  const VectorX<Scalar> rows = z.rowwise().sum();
  const VectorX<Scalar> cols = z.colwise().sum().transpose();
  const double er = (rows.array() - log_mu.array().exp()).abs().maxCoeff();
  const double ec = (cols.array() - log_nu.array().exp()).abs().maxCoeff();
  return std::max(er, ec);
}

template <typename Scalar>
SinkhornState<Scalar> run_sinkhorn(const MatrixX<Scalar>& scores, const SinkhornConfig& cfg, bool keep_history) {
  cfg.validate();
  if (!scores.allFinite()) throw InputError("sinkhorn_assign: score matrix contains non-finite values");
  const Eigen::Index m = scores.rows();
  const Eigen::Index n = scores.cols();
  SinkhornState<Scalar> s;
  const Scalar reg = static_cast<Scalar>(cfg.reg);
  s.kernel = MatrixX<Scalar>::Constant(m + 1, n + 1, static_cast<Scalar>(cfg.dustbin_score) / reg);
  s.kernel.topLeftCorner(m, n) = scores / reg;
  s.log_mu = VectorX<Scalar>::Zero(m + 1);
  s.log_nu = VectorX<Scalar>::Zero(n + 1);
  s.log_mu[m] = std::log(static_cast<Scalar>(n));
  s.log_nu[n] = std::log(static_cast<Scalar>(m));
  s.u = VectorX<Scalar>::Zero(m + 1);
  s.v = VectorX<Scalar>::Zero(n + 1);

  MatrixX<Scalar> work(m + 1, n + 1);
  for (int it = 1; it <= cfg.max_iters; ++it) {
    work = s.kernel.rowwise() + s.v.transpose();
    for (Eigen::Index i = 0; i <= m; ++i) s.u[i] = s.log_mu[i] - log_sum_exp<Scalar>(work.row(i).transpose());
    work = s.kernel.colwise() + s.u;
    for (Eigen::Index j = 0; j <= n; ++j) s.v[j] = s.log_nu[j] - log_sum_exp<Scalar>(work.col(j));
    if (keep_history) {
      s.u_history.push_back(s.u);
      s.v_history.push_back(s.v);
    }
    s.iterations = it;
    work.rowwise() += s.v.transpose();
    s.marginal_error = marginal_error<Scalar>(work, s.log_mu, s.log_nu);
    if (cfg.tol > 0.0 && s.marginal_error <= cfg.tol) {
      s.converged = true;
      break;
    }
  }
  if (cfg.tol <= 0.0) s.converged = true;
  return s;
}

}  // namespace detail

/// Log-domain Sinkhorn on the dustbin-augmented score matrix with row
/// marginals (1, ..., 1, N) and column marginals (1, ..., 1, M).
template <typename Scalar>
AssignmentMatrix<Scalar> sinkhorn_assign(const MatrixX<Scalar>& scores, const SinkhornConfig& cfg) {
  const Eigen::Index m = scores.rows();
  const Eigen::Index n = scores.cols();
  AssignmentMatrix<Scalar> out;
  if (m == 0 || n == 0) {
    cfg.validate();
    out.z = MatrixX<Scalar>::Zero(m + 1, n + 1);
    out.z.row(m).head(n).setOnes();
    out.z.col(n).head(m).setOnes();
    out.converged = true;
    return out;
  }
  auto s = detail::run_sinkhorn<Scalar>(scores, cfg, false);
  out.z = ((s.kernel.colwise() + s.u).rowwise() + s.v.transpose()).array().exp().matrix();
  out.iterations = s.iterations;
  out.converged = s.converged;
  out.marginal_error = s.marginal_error;
  return out;
}

/// Ground-truth correspondences (query patch i, database patch j).
struct GroundTruthMatches {
  std::vector<std::pair<int, int>> pairs;

  bool empty() const { return pairs.empty(); }
  void validate(int m, int n) const {
    std::set<std::pair<int, int>> seen;
    for (const auto& [i, j] : pairs) {
      if (i < 0 || i >= m || j < 0 || j >= n) {
        throw InputError("GroundTruthMatches: pair (" + std::to_string(i) + "," + std::to_string(j) +
                         ") outside " + std::to_string(m) + "x" + std::to_string(n));
      }
      if (!seen.insert({i, j}).second) throw InputError("GroundTruthMatches: duplicate pair");
    }
  }
};

inline constexpr double kLogClamp = 1e-12;

struct LossValue {
  double value = 0.0;
  /// Set when G was empty; the loss is then zero.
  bool empty_ground_truth = false;
};

/// -sum over G of log Z(i, j), with Z clamped below at 1e-12.
template <typename Scalar>
LossValue nll_loss(const AssignmentMatrix<Scalar>& assignment, const GroundTruthMatches& g) {
  g.validate(assignment.query_count(), assignment.database_count());
  LossValue loss;
  loss.empty_ground_truth = g.empty();
  for (const auto& [i, j] : g.pairs) {
    loss.value -= std::log(std::max(static_cast<double>(assignment.z(i, j)), kLogClamp));
  }
  return loss;
}

template <typename Scalar>
struct LossGradient {
  double loss = 0.0;
  MatrixX<Scalar> d_scores;  // M x N
  double d_dustbin = 0.0;
  int iterations = 0;
  bool empty_ground_truth = false;
};

/// Exact gradient of the NLL loss through the unrolled log-domain Sinkhorn
/// iterations (same iteration count as the forward pass).
template <typename Scalar>
LossGradient<Scalar> loss_gradient(const MatrixX<Scalar>& scores, const GroundTruthMatches& g,
                                   const SinkhornConfig& cfg) {
  const Eigen::Index m = scores.rows();
  const Eigen::Index n = scores.cols();
  g.validate(static_cast<int>(m), static_cast<int>(n));
  LossGradient<Scalar> out;
  out.d_scores = MatrixX<Scalar>::Zero(m, n);
  out.empty_ground_truth = g.empty();
  if (g.empty() || m == 0 || n == 0) return out;

  auto s = detail::run_sinkhorn<Scalar>(scores, cfg, true);
  out.iterations = s.iterations;
  const int steps = s.iterations;

  const MatrixX<Scalar> log_z = (s.kernel.colwise() + s.u).rowwise() + s.v.transpose();
  const Scalar log_floor = static_cast<Scalar>(std::log(kLogClamp));
  MatrixX<Scalar> grad_kernel = MatrixX<Scalar>::Zero(m + 1, n + 1);
  for (const auto& [i, j] : g.pairs) {
    const Scalar lz = log_z(i, j);
    out.loss -= static_cast<double>(std::max(lz, log_floor));
    if (lz > log_floor) grad_kernel(i, j) -= 1;
  }
  VectorX<Scalar> grad_u = grad_kernel.rowwise().sum();
  VectorX<Scalar> grad_v = grad_kernel.colwise().sum().transpose();

  MatrixX<Scalar> work(m + 1, n + 1);
  const VectorX<Scalar> zero_v = VectorX<Scalar>::Zero(n + 1);
  for (int t = steps - 1; t >= 0; --t) {
    const VectorX<Scalar>& u_t = s.u_history[t];
    const VectorX<Scalar>& v_prev = t > 0 ? s.v_history[t - 1] : zero_v;
    // v_t = log_nu - LSE_i(K + u_t): Q = column softmax
    work = s.kernel.colwise() + u_t;
    for (Eigen::Index j = 0; j <= n; ++j) {
      const Scalar lse = detail::log_sum_exp<Scalar>(work.col(j));
      work.col(j) = (work.col(j).array() - lse).exp().matrix();
    }
    MatrixX<Scalar> contrib = work * (-grad_v).asDiagonal();
    grad_kernel += contrib;
    grad_u += contrib.rowwise().sum();
    // u_t = log_mu - LSE_j(K + v_prev): P = row softmax
    work = s.kernel.rowwise() + v_prev.transpose();
    for (Eigen::Index i = 0; i <= m; ++i) {
      const Scalar lse = detail::log_sum_exp<Scalar>(work.row(i).transpose());
      work.row(i) = (work.row(i).array() - lse).exp().matrix();
    }
    contrib = (-grad_u).asDiagonal() * work;
    grad_kernel += contrib;
    grad_v = contrib.colwise().sum().transpose();
    grad_u.setZero();
  }
  const Scalar inv_reg = static_cast<Scalar>(1.0 / cfg.reg);
  out.d_scores = grad_kernel.topLeftCorner(m, n) * inv_reg;
  out.d_dustbin = static_cast<double>((grad_kernel.sum() - grad_kernel.topLeftCorner(m, n).sum()) * inv_reg);
  return out;
}

/// Interior (non-dustbin) mass of Z divided by min(M, N).
template <typename Scalar>
double match_score(const AssignmentMatrix<Scalar>& assignment) {
  const int m = assignment.query_count();
  const int n = assignment.database_count();
  if (m <= 0 || n <= 0) return 0.0;
  return assignment.z.topLeftCorner(m, n).template cast<double>().sum() / std::min(m, n);
}

/// Stage-two matcher: attention enhancement, score matrix, Sinkhorn, scalar score.
class Matcher {
 public:
  Matcher() = default;
  Matcher(AttentionParams<double> attention, SinkhornConfig sinkhorn)
      : attention_(std::move(attention)), sinkhorn_(sinkhorn) {
    attention_.validate();
    sinkhorn_.validate();
  }

  const AttentionParams<double>& attention() const { return attention_; }
  const SinkhornConfig& sinkhorn() const { return sinkhorn_; }

  AssignmentMatrix<double> assign(const Eigen::MatrixXf& query, const Eigen::MatrixXf& database) const {
    if (query.rows() != database.rows()) throw ShapeError("Matcher: descriptor dimensions differ");
    MatrixX<double> q = query.cast<double>();
    MatrixX<double> d = database.cast<double>();
    if (!attention_.layers.empty()) {
      if (attention_.dim() != q.rows()) {
        throw ShapeError("Matcher: attention expects dimension " + std::to_string(attention_.dim()) + ", got " +
                         std::to_string(q.rows()));
      }
      std::tie(q, d) = enhance_pair(q, d, attention_);
    }
    return sinkhorn_assign<double>(score_matrix(q, d), sinkhorn_);
  }

  double score(const Eigen::MatrixXf& query, const Eigen::MatrixXf& database) const {
    return match_score(assign(query, database));
  }

 private:
  AttentionParams<double> attention_;
  SinkhornConfig sinkhorn_;
};

}  // namespace vpr
