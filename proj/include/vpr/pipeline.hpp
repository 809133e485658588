#pragma once

#include <cstddef>
#include <functional>

#include "vpr/model.hpp"

namespace vpr {

/// Runs fn(0..count-1) on up to `threads` workers. Every index runs; the
/// exception of the lowest failing index is rethrown.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn);

struct PatchSettings {
  int size = 2;
  int stride = 1;
};

/// Normalized VLAD vectors before PCA.
struct RawFeatures {
  Eigen::VectorXf global;
  Eigen::MatrixXf patches;  // (K*D) x n_p
  PatchGrid grid;
};

RawFeatures extract_raw_features(const Model& model, const Tensor4& image, ForwardMode mode,
                                 const PatchSettings& patches);

struct ImageFeatures {
  GlobalDescriptor global;
  PatchDescriptorSet patches;
};

/// Applies `pca` (when given) to the global and every patch descriptor.
ImageFeatures project_features(const RawFeatures& raw, const PcaModel* pca);

}  // namespace vpr
