#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "vpr/tensor.hpp"

namespace vpr {

/// NetVLAD parameters. Cluster scores are `assign_weights * x + assign_bias`.
struct VladParams {
  Eigen::MatrixXf centers;         // K x D
  Eigen::MatrixXf assign_weights;  // K x D
  Eigen::VectorXf assign_bias;     // K

  int cluster_count() const { return static_cast<int>(centers.rows()); }
  int dim() const { return static_cast<int>(centers.cols()); }
  int output_dim() const { return cluster_count() * dim(); }
  void validate() const;

  /// Scores 2*alpha*<c_k, x> - alpha*|c_k|^2, i.e. softmax of -alpha*|x - c_k|^2.
  static VladParams from_centers(Eigen::MatrixXf centers, float alpha);
  /// Unit-norm Gaussian centers.
  static VladParams random(int clusters, int dim, std::uint64_t seed, float alpha = 10.0f);
};

/// Descriptors are the columns of `x` (D x N). Result is N x K, rows sum to 1.
Eigen::MatrixXd soft_assign(const Eigen::MatrixXf& x, const VladParams& params);

/// One-hot nearest-center rows; ties go to the lowest cluster index.
Eigen::MatrixXd hard_assign(const Eigen::MatrixXf& x, const VladParams& params);

/// Unnormalized residual sums: row k is sum_i a(i,k) (x_i - c_k). K x D.
Eigen::MatrixXd vlad_residuals(const Eigen::MatrixXf& x, const Eigen::MatrixXd& assignment,
                               const VladParams& params);

struct GlobalDescriptor {
  Eigen::VectorXf values;
  bool pca_applied = false;
};

/// Intra-normalizes each cluster block of V (all-zero blocks stay zero), then
/// L2-normalizes the whole vector. Flattened cluster-major: block k occupies
/// [k*D, (k+1)*D).
Eigen::VectorXf normalize_vlad(const Eigen::MatrixXd& residuals);

GlobalDescriptor vlad_aggregate(const Eigen::MatrixXf& x, const Eigen::MatrixXd& assignment,
                                const VladParams& params);

struct PcaModel {
  Eigen::MatrixXf projection;  // output_dim x input_dim, orthonormal rows
  Eigen::VectorXf mean;        // input_dim
  Eigen::VectorXd eigenvalues; // output_dim, descending
  bool whiten = false;

  int input_dim() const { return static_cast<int>(projection.cols()); }
  int output_dim() const { return static_cast<int>(projection.rows()); }
  void validate() const;
};

/// Samples are the columns of `samples`; requires more samples than out_dim.
PcaModel pca_fit(const Eigen::MatrixXf& samples, int out_dim, bool whiten = false);

/// projection * (v - mean), optionally whitened, then L2-normalized.
Eigen::VectorXf pca_project(const Eigen::VectorXf& v, const PcaModel& model);
/// Column-wise pca_project.
Eigen::MatrixXf pca_project_columns(const Eigen::MatrixXf& columns, const PcaModel& model);

struct PatchCenter {
  float x = 0.0f;
  float y = 0.0f;

  friend bool operator==(const PatchCenter&, const PatchCenter&) = default;
};

struct PatchGrid {
  int height = 0;  // feature-map H
  int width = 0;   // feature-map W
  int patch_w = 0; // d_x
  int patch_h = 0; // d_y
  int stride = 1;  // s_p
  int rows = 0;    // placements along y
  int cols = 0;    // placements along x
  std::vector<PatchCenter> centers;  // row-major over (row, col)

  int count() const { return rows * cols; }
  /// Top-left feature-map cell of patch p.
  int origin_x(int p) const { return (p % cols) * stride; }
  int origin_y(int p) const { return (p / cols) * stride; }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

PatchGrid make_patch_grid(int height, int width, int patch_w, int patch_h, int stride);

struct PatchDescriptorSet {
  Eigen::MatrixXf descriptors;  // dim x n_p
  PatchGrid grid;

  int count() const { return static_cast<int>(descriptors.cols()); }
  int dim() const { return static_cast<int>(descriptors.rows()); }
};

/// Channel columns of a 1 x D x H x W map as a D x (H*W) matrix; column y*W + x.
Eigen::MatrixXf feature_columns(const Tensor4& fmap);

/// Whole-map VLAD, normalized, projected through `pca` when given.
GlobalDescriptor extract_global_descriptor(const Tensor4& fmap, const VladParams& params,
                                           const PcaModel* pca = nullptr);

/// VLAD over the cells of every patch in `grid`, normalized, projected when `pca` is given.
PatchDescriptorSet extract_patch_descriptors(const Tensor4& fmap, const PatchGrid& grid,
                                             const VladParams& params, const PcaModel* pca = nullptr);

inline constexpr double kDefaultTripletMargin = 0.1;

/// max(0, |q - pos|^2 + margin - |q - neg|^2)
double triplet_loss(const Eigen::VectorXf& q, const Eigen::VectorXf& pos, const Eigen::VectorXf& neg,
                    double margin = kDefaultTripletMargin);

}  // namespace vpr
