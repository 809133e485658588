#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "vpr/tensor.hpp"

namespace vpr {

struct ConvBn {
  ConvParams conv;
  BatchNormParams bn;
};

/// Training-time RepVGG block: 3x3 conv+BN, optional 1x1 conv+BN and
/// optional identity BN, summed and passed through ReLU.
struct RepVggBlock {
  ConvBn conv3x3;
  std::optional<ConvBn> conv1x1;
  std::optional<BatchNormParams> identity_bn;
  int stride = 1;

  int in_channels() const { return conv3x3.conv.in_channels(); }
  int out_channels() const { return conv3x3.conv.out_channels(); }
  void validate() const;
};

Tensor4 block_forward_multibranch(const Tensor4& x, const RepVggBlock& block);

/// Folds inference-mode BN into the preceding convolution.
ConvParams fuse_bn_into_conv(const ConvParams& conv, const BatchNormParams& bn);

/// Collapses every branch of the block into one 3x3 convolution whose output
/// equals the pre-ReLU multi-branch sum.
ConvParams reparameterize_block(const RepVggBlock& block);

struct StageSpec {
  int layers = 0;
  int out_channels = 0;
  int first_stride = 2;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct NetworkSpec {
  std::vector<StageSpec> stages;
  int input_channels = 3;
  int input_height = 480;
  int input_width = 640;

  /// Four stages: 1x48, 2x48, 4x96, 14x192, each opening with a stride-2 layer.
  static NetworkSpec repvgg_lite();

  int layer_count() const;
  int output_channels() const;
  /// Product of the first-layer strides.
  int downsample_factor() const;
  void validate() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

enum class ForwardMode { multibranch, fused };

struct RandomInit {
  /// Draw BN statistics at random instead of leaving them neutral.
  bool randomize_bn = false;
  /// Draw conv biases at random (multi-branch convs normally carry zero bias).
  bool randomize_bias = false;
};

/// RepVGG-lite feature extractor. Holds the multi-branch blocks (when
/// available) together with their fused single-conv equivalents.
class Backbone {
 public:
  Backbone() = default;
  Backbone(NetworkSpec spec, std::vector<RepVggBlock> blocks);

  static Backbone from_fused(NetworkSpec spec, std::vector<ConvParams> layers);

  /// Fan-in scaled Gaussian weights, std = 1/sqrt(fan_in).
  static Backbone random(const NetworkSpec& spec, std::uint64_t seed, const RandomInit& init = {});

  const NetworkSpec& spec() const { return spec_; }
  bool has_multibranch() const { return !blocks_.empty() || spec_.layer_count() == 0; }
  const std::vector<RepVggBlock>& blocks() const { return blocks_; }
  const std::vector<ConvParams>& fused_layers() const { return fused_; }

  /// Fused-only copy; multi-branch parameters are dropped.
  Backbone fused() const;

  Tensor4 forward(const Tensor4& x, ForwardMode mode) const;
  /// Output of the last layer of every stage.
  std::vector<Tensor4> forward_stages(const Tensor4& x, ForwardMode mode) const;

 private:
  void check_input(const Tensor4& x) const;

  NetworkSpec spec_;
  std::vector<RepVggBlock> blocks_;
  std::vector<ConvParams> fused_;
};

Tensor4 backbone_forward(const Tensor4& x, const Backbone& net, bool fused);

struct ModelCost {
  std::int64_t params = 0;
  std::int64_t mult_adds = 0;

  friend bool operator==(const ModelCost&, const ModelCost&) = default;
};

/// Analytic parameter and multiply-add count for an input of the given size.
/// Multi-branch counts include BN affine parameters and one multiply-add per
/// normalized element.
ModelCost count_params_flops(const Backbone& net, ForwardMode mode, int input_height, int input_width);
ModelCost count_params_flops(const Backbone& net, ForwardMode mode);

}  // namespace vpr
