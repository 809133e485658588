#include "vpr/descriptor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace vpr {

namespace {

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_descriptor_dim(const Eigen::MatrixXf& x, const VladParams& params, const char* what) {
  params.validate();
  if (x.rows() != params.dim()) {
    throw ShapeError(std::string(what) + ": descriptors have dimension " + std::to_string(x.rows()) +
                     ", cluster centers have " + std::to_string(params.dim()));
  }
}

// Completes `axes` (columns, orthonormal) to `count` columns by Gram-Schmidt
// over the standard basis.
void complete_orthonormal(Eigen::MatrixXd& axes, int filled, int count) {
  const Eigen::Index dim = axes.rows();
  for (Eigen::Index e = 0; e < dim && filled < count; ++e) {
    Eigen::VectorXd v = Eigen::VectorXd::Unit(dim, e);
    for (int pass = 0; pass < 2; ++pass) {
      v -= axes.leftCols(filled) * (axes.leftCols(filled).transpose() * v);
    }
    const double n = v.norm();
    if (n > 0.5) axes.col(filled++) = v / n;
  }
}

}  // namespace

void VladParams::validate() const {
  if (centers.rows() == 0 || centers.cols() == 0) throw ShapeError("VladParams: no cluster centers");
  if (assign_weights.rows() != centers.rows() || assign_weights.cols() != centers.cols() ||
      assign_bias.size() != centers.rows()) {
    throw ShapeError("VladParams: assignment weights do not match " + std::to_string(centers.rows()) + "x" +
                     std::to_string(centers.cols()) + " centers");
  }
}

VladParams VladParams::from_centers(Eigen::MatrixXf centers, float alpha) {
  VladParams p;
  p.assign_weights = 2.0f * alpha * centers;
  p.assign_bias = -alpha * centers.rowwise().squaredNorm();
  p.centers = std::move(centers);
  return p;
}

VladParams VladParams::random(int clusters, int dim, std::uint64_t seed, float alpha) {
  if (clusters <= 0 || dim <= 0) throw InputError("VladParams::random: sizes must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Eigen::MatrixXf centers(clusters, dim);
  for (int k = 0; k < clusters; ++k) {
    for (int j = 0; j < dim; ++j) centers(k, j) = dist(rng);
    centers.row(k).normalize();
  }
  return from_centers(std::move(centers), alpha);
}

Eigen::MatrixXd soft_assign(const Eigen::MatrixXf& x, const VladParams& params) {
  check_descriptor_dim(x, params, "soft_assign");
  Eigen::MatrixXd scores = (params.assign_weights.cast<double>() * x.cast<double>()).transpose();
  scores.rowwise() += params.assign_bias.cast<double>().transpose();
  return softmax_rows(scores);
}

Eigen::MatrixXd hard_assign(const Eigen::MatrixXf& x, const VladParams& params) {
  check_descriptor_dim(x, params, "hard_assign");
  const Eigen::Index n = x.cols();
  const int k_count = params.cluster_count();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, k_count);
  for (Eigen::Index i = 0; i < n; ++i) {
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int k = 0; k < k_count; ++k) {
      const double d = (x.col(i).cast<double>() - params.centers.row(k).transpose().cast<double>()).squaredNorm();
      if (d < best_dist) {
        best_dist = d;
        best = k;
      }
    }
    a(i, best) = 1.0;
  }
  return a;
}

Eigen::MatrixXd vlad_residuals(const Eigen::MatrixXf& x, const Eigen::MatrixXd& assignment,
                               const VladParams& params) {
  check_descriptor_dim(x, params, "vlad_residuals");
  if (assignment.rows() != x.cols() || assignment.cols() != params.cluster_count()) {
    throw ShapeError("vlad_residuals: assignment is " + std::to_string(assignment.rows()) + "x" +
                     std::to_string(assignment.cols()) + ", expected " + std::to_string(x.cols()) + "x" +
                     std::to_string(params.cluster_count()));
  }
  Eigen::MatrixXd v = assignment.transpose() * x.cast<double>().transpose();
  const Eigen::VectorXd mass = assignment.colwise().sum().transpose();
  v -= mass.asDiagonal() * params.centers.cast<double>();
  return v;
}

Eigen::VectorXf normalize_vlad(const Eigen::MatrixXd& residuals) {
  const Eigen::Index k_count = residuals.rows();
  const Eigen::Index dim = residuals.cols();
  Eigen::VectorXd flat(k_count * dim);
  for (Eigen::Index k = 0; k < k_count; ++k) {
    const double n = residuals.row(k).norm();
    flat.segment(k * dim, dim) = n > 0.0 ? Eigen::VectorXd(residuals.row(k).transpose() / n)
                                         : Eigen::VectorXd::Zero(dim);
  }
  const double total = flat.norm();
  if (!(total > 0.0)) throw DegenerateInputError("vlad_aggregate: all residual blocks are zero");
  return (flat / total).cast<float>();
}

GlobalDescriptor vlad_aggregate(const Eigen::MatrixXf& x, const Eigen::MatrixXd& assignment,
                                const VladParams& params) {
  return {normalize_vlad(vlad_residuals(x, assignment, params)), false};
}

void PcaModel::validate() const {
  if (mean.size() != projection.cols()) throw ShapeError("PcaModel: mean length differs from input dim");
  if (eigenvalues.size() != projection.rows()) throw ShapeError("PcaModel: eigenvalue count differs from output dim");
}

PcaModel pca_fit(const Eigen::MatrixXf& samples, int out_dim, bool whiten) {
  const Eigen::Index dim = samples.rows();
  const Eigen::Index n = samples.cols();
  if (out_dim <= 0 || out_dim > dim) {
    throw InputError("pca_fit: output dim " + std::to_string(out_dim) + " outside [1, " + std::to_string(dim) + "]");
  }
  if (n <= out_dim) {
    throw DegenerateInputError("pca_fit: " + std::to_string(n) + " samples cannot support " +
                               std::to_string(out_dim) + " components");
  }
  const Eigen::VectorXd mean = samples.cast<double>().rowwise().mean();
  Eigen::MatrixXd centered = samples.cast<double>();
  centered.colwise() -= mean;
  const double denom = static_cast<double>(n - 1);

  Eigen::MatrixXd axes(dim, out_dim);
  Eigen::VectorXd eigenvalues(out_dim);
  int filled = 0;
  if (dim <= n) {
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim, dim);
    cov.selfadjointView<Eigen::Lower>().rankUpdate(centered, 1.0 / denom);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov.selfadjointView<Eigen::Lower>());
    for (int i = 0; i < out_dim; ++i) {
      axes.col(i) = solver.eigenvectors().col(dim - 1 - i);
      eigenvalues[i] = std::max(solver.eigenvalues()[dim - 1 - i], 0.0);
    }
    filled = out_dim;
  } else {
    // More dimensions than samples: diagonalize the n x n Gram matrix instead.
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n, n);
    gram.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose(), 1.0 / denom);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram.selfadjointView<Eigen::Lower>());
    const double top = std::max(solver.eigenvalues()[n - 1], 0.0);
    for (int i = 0; i < out_dim; ++i) {
      const double lambda = solver.eigenvalues()[n - 1 - i];
      eigenvalues[i] = std::max(lambda, 0.0);
      if (lambda <= 1e-12 * top || lambda <= 0.0) continue;
      axes.col(filled) = centered * solver.eigenvectors().col(n - 1 - i);
      axes.col(filled).normalize();
      ++filled;
    }
  }
  if (filled < out_dim) complete_orthonormal(axes, filled, out_dim);

  for (int i = 0; i < out_dim; ++i) {
    Eigen::Index peak;
    axes.col(i).cwiseAbs().maxCoeff(&peak);
    if (axes(peak, i) < 0.0) axes.col(i) = -axes.col(i);
  }

  PcaModel model;
  model.projection = axes.transpose().cast<float>();
  model.mean = mean.cast<float>();
  model.eigenvalues = eigenvalues;
  model.whiten = whiten;
  return model;
}

Eigen::MatrixXf pca_project_columns(const Eigen::MatrixXf& columns, const PcaModel& model) {
  model.validate();
  if (columns.rows() != model.input_dim()) {
    throw ShapeError("pca_project: input dimension " + std::to_string(columns.rows()) + ", model expects " +
                     std::to_string(model.input_dim()));
  }
  Eigen::MatrixXf centered = columns;
  centered.colwise() -= model.mean;
  Eigen::MatrixXf projected = model.projection * centered;
  if (model.whiten) {
    const Eigen::VectorXf inv = (model.eigenvalues.array() + 1e-12).rsqrt().cast<float>();
    projected = inv.asDiagonal() * projected;
  }
  for (Eigen::Index c = 0; c < projected.cols(); ++c) projected.col(c) = l2_normalize(projected.col(c));
  return projected;
}

Eigen::VectorXf pca_project(const Eigen::VectorXf& v, const PcaModel& model) {
  return pca_project_columns(v, model).col(0);
}

PatchGrid make_patch_grid(int height, int width, int patch_w, int patch_h, int stride) {
  if (height <= 0 || width <= 0) throw ShapeError("make_patch_grid: feature map dims must be positive");
  if (patch_w <= 0 || patch_h <= 0) throw ShapeError("make_patch_grid: patch dims must be positive");
  if (stride < 1) throw ShapeError("make_patch_grid: stride must be at least 1");
  if (patch_h > height || patch_w > width) {
    throw ShapeError("make_patch_grid: patch " + std::to_string(patch_w) + "x" + std::to_string(patch_h) +
                     " exceeds feature map " + std::to_string(width) + "x" + std::to_string(height));
  }
  PatchGrid g;
  g.height = height;
  g.width = width;
  g.patch_w = patch_w;
  g.patch_h = patch_h;
  g.stride = stride;
  g.rows = (height - patch_h) / stride + 1;
  g.cols = (width - patch_w) / stride + 1;
  g.centers.reserve(static_cast<std::size_t>(g.count()));
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      g.centers.push_back({static_cast<float>(c * stride) + 0.5f * static_cast<float>(patch_w - 1),
                           static_cast<float>(r * stride) + 0.5f * static_cast<float>(patch_h - 1)});
    }
  }
  return g;
}

Eigen::MatrixXf feature_columns(const Tensor4& fmap) {
  if (fmap.batch() != 1) throw ShapeError("feature_columns: expected a single feature map, got " + fmap.shape().str());
  const Eigen::Index cells = static_cast<Eigen::Index>(fmap.height()) * fmap.width();
  return Eigen::Map<const RowMatrixXf>(fmap.values().data(), fmap.channels(), cells);
}

GlobalDescriptor extract_global_descriptor(const Tensor4& fmap, const VladParams& params, const PcaModel* pca) {
  const Eigen::MatrixXf x = feature_columns(fmap);
  GlobalDescriptor g = vlad_aggregate(x, soft_assign(x, params), params);
  if (pca != nullptr) {
    g.values = pca_project(g.values, *pca);
    g.pca_applied = true;
  }
  return g;
}

PatchDescriptorSet extract_patch_descriptors(const Tensor4& fmap, const PatchGrid& grid,
                                             const VladParams& params, const PcaModel* pca) {
  if (grid.height != fmap.height() || grid.width != fmap.width() ||
      static_cast<int>(grid.centers.size()) != grid.count()) {
    throw ShapeError("extract_patch_descriptors: grid for " + std::to_string(grid.width) + "x" +
                     std::to_string(grid.height) + " does not fit feature map " + fmap.shape().str());
  }
  const Eigen::MatrixXf x = feature_columns(fmap);
  const Eigen::MatrixXd a = soft_assign(x, params);
  const Eigen::MatrixXd centers = params.centers.cast<double>();
  const int cells = grid.patch_w * grid.patch_h;

  Eigen::MatrixXf raw(params.output_dim(), grid.count());
  Eigen::MatrixXd patch_x(params.dim(), cells);
  Eigen::MatrixXd patch_a(cells, params.cluster_count());
  for (int p = 0; p < grid.count(); ++p) {
    int cell = 0;
    for (int dy = 0; dy < grid.patch_h; ++dy) {
      for (int dx = 0; dx < grid.patch_w; ++dx, ++cell) {
        const Eigen::Index idx = static_cast<Eigen::Index>(grid.origin_y(p) + dy) * grid.width + grid.origin_x(p) + dx;
        patch_x.col(cell) = x.col(idx).cast<double>();
        patch_a.row(cell) = a.row(idx);
      }
    }
    Eigen::MatrixXd v = patch_a.transpose() * patch_x.transpose();
    v -= patch_a.colwise().sum().transpose().asDiagonal() * centers;
    raw.col(p) = normalize_vlad(v);
  }

  PatchDescriptorSet out;
  out.grid = grid;
  out.descriptors = pca != nullptr ? pca_project_columns(raw, *pca) : std::move(raw);
  return out;
}

double triplet_loss(const Eigen::VectorXf& q, const Eigen::VectorXf& pos, const Eigen::VectorXf& neg, double margin) {
  if (q.size() != pos.size() || q.size() != neg.size()) throw ShapeError("triplet_loss: descriptor lengths differ");
  const double dp = (q.cast<double>() - pos.cast<double>()).squaredNorm();
  const double dn = (q.cast<double>() - neg.cast<double>()).squaredNorm();
  return std::max(0.0, dp + margin - dn);
}

}  // namespace vpr
