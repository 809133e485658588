#pragma once

#include <cstdint>
#include <filesystem>

#include "vpr/backbone.hpp"
#include "vpr/descriptor.hpp"
#include "vpr/io_store.hpp"
#include "vpr/matcher.hpp"

namespace vpr {

/// Everything a weights file carries: the stage-one extractor (backbone and
/// VLAD layer) and the stage-two matcher (attention layers and dustbin score).
struct Model {
  Backbone backbone;
  VladParams vlad;
  AttentionParams<float> attention;
  double dustbin_score = 1.0;
};

struct ModelShape {
  NetworkSpec network = NetworkSpec::repvgg_lite();
  int clusters = 64;
  /// Matcher descriptor dimension (the PCA output dimension).
  int matcher_dim = 512;
  int attention_rounds = 2;
  double dustbin_score = 1.0;
  float vlad_alpha = 10.0f;
};

/// Seeded random weights; each component draws from its own derived seed.
Model random_model(const ModelShape& shape, std::uint64_t seed, const RandomInit& init = {});

TensorArchive model_to_archive(const Model& model);
Model model_from_archive(const TensorArchive& archive);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

struct StageCosts {
  std::int64_t stage1_params = 0;
  std::int64_t stage2_params = 0;
  /// Per image: backbone plus soft assignment and residual aggregation.
  std::int64_t stage1_mult_adds = 0;
  /// Per matched pair of patch sets.
  std::int64_t stage2_mult_adds = 0;
};

/// `patches` is the per-image patch count used for the stage-two pair cost.
StageCosts model_costs(const Model& model, ForwardMode mode, int input_height, int input_width, int patches);

}  // namespace vpr
