#include "vpr/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace vpr {

void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(count, 1));
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_index = count;
  std::exception_ptr failure;

  auto work = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_index) {
          failed_index = i;
          failure = std::current_exception();
        }
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
}

RawFeatures extract_raw_features(const Model& model, const Tensor4& image, ForwardMode mode,
                                 const PatchSettings& patches) {
  const Tensor4 fmap = model.backbone.forward(image, mode);
  RawFeatures raw;
  raw.global = extract_global_descriptor(fmap, model.vlad).values;
  raw.grid = make_patch_grid(fmap.height(), fmap.width(), patches.size, patches.size, patches.stride);
  raw.patches = extract_patch_descriptors(fmap, raw.grid, model.vlad).descriptors;
  return raw;
}

ImageFeatures project_features(const RawFeatures& raw, const PcaModel* pca) {
  ImageFeatures f;
  f.patches.grid = raw.grid;
  if (pca != nullptr) {
    f.global = {pca_project(raw.global, *pca), true};
    f.patches.descriptors = pca_project_columns(raw.patches, *pca);
  } else {
    f.global = {raw.global, false};
    f.patches.descriptors = raw.patches;
  }
  return f;
}

}  // namespace vpr
