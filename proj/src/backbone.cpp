#include "vpr/backbone.hpp"

#include <cmath>
#include <random>

namespace vpr {

namespace {

void check_bn_channels(const BatchNormParams& bn, int channels, const char* what) {
  bn.validate();
  if (bn.channels() != channels) {
    throw ShapeError(std::string(what) + ": BN has " + std::to_string(bn.channels()) + " channels, expected " +
                     std::to_string(channels));
  }
}

Eigen::VectorXf random_vector(std::mt19937_64& rng, int n, float lo, float hi) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Eigen::VectorXf v(n);
  for (int i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

constexpr float kIdentityBlockGain = 0.3f;

ConvParams random_conv(std::mt19937_64& rng, int cin, int cout, int k, int stride, bool random_bias, float gain) {
  ConvParams conv;
  conv.weight = Tensor4({cout, cin, k, k});
  const int fan_in = cin * k * k;
  std::normal_distribution<float> dist(0.0f, gain / std::sqrt(static_cast<float>(std::max(fan_in, 1))));
  for (float& w : conv.weight.values()) w = dist(rng);
  conv.bias = random_bias ? random_vector(rng, cout, -0.1f, 0.1f) : Eigen::VectorXf::Zero(cout);
  conv.stride = stride;
  conv.padding = k / 2;
  return conv;
}

BatchNormParams random_bn(std::mt19937_64& rng, int channels, bool randomize) {
  if (!randomize) return BatchNormParams::neutral(channels, 1e-5f);
  BatchNormParams bn;
  bn.gamma = random_vector(rng, channels, 0.5f, 1.5f);
  bn.beta = random_vector(rng, channels, -0.1f, 0.1f);
  bn.running_mean = random_vector(rng, channels, -0.1f, 0.1f);
  bn.running_var = random_vector(rng, channels, 0.5f, 1.5f);
  bn.epsilon = 1e-5f;
  return bn;
}

}  // namespace

void RepVggBlock::validate() const {
  const ConvParams& c3 = conv3x3.conv;
  c3.validate();
  if (c3.kernel_h() != 3 || c3.kernel_w() != 3 || c3.padding != 1) {
    throw ShapeError("RepVggBlock: main branch must be a 3x3 convolution with padding 1");
  }
  if (stride != 1 && stride != 2) throw ShapeError("RepVggBlock: stride must be 1 or 2");
  if (c3.stride != stride) throw ShapeError("RepVggBlock: 3x3 stride differs from block stride");
  check_bn_channels(conv3x3.bn, c3.out_channels(), "RepVggBlock 3x3");
  if (conv1x1) {
    const ConvParams& c1 = conv1x1->conv;
    c1.validate();
    if (c1.kernel_h() != 1 || c1.kernel_w() != 1 || c1.padding != 0) {
      throw ShapeError("RepVggBlock: 1x1 branch must be a 1x1 convolution without padding");
    }
    if (c1.stride != stride) throw ShapeError("RepVggBlock: 1x1 stride differs from block stride");
    if (c1.in_channels() != c3.in_channels() || c1.out_channels() != c3.out_channels()) {
      throw ShapeError("RepVggBlock: 1x1 weight " + c1.weight.shape().str() + " disagrees with 3x3 weight " +
                       c3.weight.shape().str());
    }
    check_bn_channels(conv1x1->bn, c1.out_channels(), "RepVggBlock 1x1");
  }
  if (identity_bn) {
    if (in_channels() != out_channels() || stride != 1) {
      throw ShapeError("RepVggBlock: identity branch requires equal channels and stride 1");
    }
    check_bn_channels(*identity_bn, in_channels(), "RepVggBlock identity");
  }
}

Tensor4 block_forward_multibranch(const Tensor4& x, const RepVggBlock& block) {
  block.validate();
  Tensor4 sum = batchnorm_infer(conv2d(x, block.conv3x3.conv), block.conv3x3.bn);
  if (block.conv1x1) sum = add(sum, batchnorm_infer(conv2d(x, block.conv1x1->conv), block.conv1x1->bn));
  if (block.identity_bn) sum = add(sum, batchnorm_infer(x, *block.identity_bn));
  return relu(std::move(sum));
}

ConvParams fuse_bn_into_conv(const ConvParams& conv, const BatchNormParams& bn) {
  conv.validate();
  check_bn_channels(bn, conv.out_channels(), "fuse_bn_into_conv");
  ConvParams out = conv;
  const std::size_t per_out =
      static_cast<std::size_t>(conv.in_channels()) * conv.kernel_h() * conv.kernel_w();
  auto w = out.weight.values();
  for (int o = 0; o < conv.out_channels(); ++o) {
    const double scale = static_cast<double>(bn.gamma[o]) / std::sqrt(static_cast<double>(bn.running_var[o]) + bn.epsilon);
    for (std::size_t i = 0; i < per_out; ++i) {
      w[o * per_out + i] = static_cast<float>(conv.weight.values()[o * per_out + i] * scale);
    }
    out.bias[o] = static_cast<float>((static_cast<double>(conv.bias[o]) - bn.running_mean[o]) * scale + bn.beta[o]);
  }
  return out;
}

ConvParams reparameterize_block(const RepVggBlock& block) {
  block.validate();
  const int cout = block.out_channels();
  const int cin = block.in_channels();
  ConvParams fused = fuse_bn_into_conv(block.conv3x3.conv, block.conv3x3.bn);

  if (block.conv1x1) {
    const ConvParams one = fuse_bn_into_conv(block.conv1x1->conv, block.conv1x1->bn);
    for (int o = 0; o < cout; ++o) {
      for (int i = 0; i < cin; ++i) fused.weight(o, i, 1, 1) += one.weight(o, i, 0, 0);
      fused.bias[o] += one.bias[o];
    }
  }
  if (block.identity_bn) {
    const BatchNormParams& bn = *block.identity_bn;
    for (int o = 0; o < cout; ++o) {
      const double scale = static_cast<double>(bn.gamma[o]) / std::sqrt(static_cast<double>(bn.running_var[o]) + bn.epsilon);
      fused.weight(o, o, 1, 1) += static_cast<float>(scale);
      fused.bias[o] += static_cast<float>(bn.beta[o] - bn.running_mean[o] * scale);
    }
  }
  return fused;
}

NetworkSpec NetworkSpec::repvgg_lite() {
  NetworkSpec spec;
  spec.stages = {{1, 48, 2}, {2, 48, 2}, {4, 96, 2}, {14, 192, 2}};
  spec.input_channels = 3;
  spec.input_height = 480;
  spec.input_width = 640;
  return spec;
}

int NetworkSpec::layer_count() const {
  int total = 0;
  for (const auto& s : stages) total += s.layers;
  return total;
}

int NetworkSpec::output_channels() const {
  for (auto it = stages.rbegin(); it != stages.rend(); ++it) {
    if (it->layers > 0) return it->out_channels;
  }
  return input_channels;
}

int NetworkSpec::downsample_factor() const {
  int factor = 1;
  for (const auto& s : stages) {
    if (s.layers > 0) factor *= s.first_stride;
  }
  return factor;
}

void NetworkSpec::validate() const {
  if (input_channels <= 0) throw ShapeError("NetworkSpec: input channels must be positive");
  if (input_height <= 0 || input_width <= 0) throw ShapeError("NetworkSpec: input dims must be positive");
  for (const auto& s : stages) {
    if (s.layers < 0 || s.out_channels <= 0) throw ShapeError("NetworkSpec: invalid stage");
    if (s.first_stride != 1 && s.first_stride != 2) throw ShapeError("NetworkSpec: stage stride must be 1 or 2");
  }
  const int f = downsample_factor();
  if (input_height % f != 0 || input_width % f != 0) {
    throw ShapeError("NetworkSpec: input " + std::to_string(input_width) + "x" + std::to_string(input_height) +
                     " is not divisible by " + std::to_string(f));
  }
}

Backbone::Backbone(NetworkSpec spec, std::vector<RepVggBlock> blocks)
    : spec_(std::move(spec)), blocks_(std::move(blocks)) {
  spec_.validate();
  if (static_cast<int>(blocks_.size()) != spec_.layer_count()) {
    throw ShapeError("Backbone: " + std::to_string(blocks_.size()) + " blocks for a " +
                     std::to_string(spec_.layer_count()) + "-layer spec");
  }
  int channels = spec_.input_channels;
  std::size_t index = 0;
  for (const auto& stage : spec_.stages) {
    for (int l = 0; l < stage.layers; ++l, ++index) {
      const RepVggBlock& b = blocks_[index];
      b.validate();
      const int stride = l == 0 ? stage.first_stride : 1;
      if (b.in_channels() != channels || b.out_channels() != stage.out_channels || b.stride != stride) {
        throw ShapeError("Backbone: block " + std::to_string(index) + " does not match the network spec");
      }
      channels = stage.out_channels;
      fused_.push_back(reparameterize_block(b));
    }
  }
}

Backbone Backbone::from_fused(NetworkSpec spec, std::vector<ConvParams> layers) {
  spec.validate();
  if (static_cast<int>(layers.size()) != spec.layer_count()) {
    throw ShapeError("Backbone: " + std::to_string(layers.size()) + " fused layers for a " +
                     std::to_string(spec.layer_count()) + "-layer spec");
  }
  int channels = spec.input_channels;
  std::size_t index = 0;
  for (const auto& stage : spec.stages) {
    for (int l = 0; l < stage.layers; ++l, ++index) {
      const ConvParams& c = layers[index];
      c.validate();
      const int stride = l == 0 ? stage.first_stride : 1;
      if (c.in_channels() != channels || c.out_channels() != stage.out_channels || c.stride != stride ||
          c.kernel_h() != 3 || c.kernel_w() != 3 || c.padding != 1) {
        throw ShapeError("Backbone: fused layer " + std::to_string(index) + " does not match the network spec");
      }
      channels = stage.out_channels;
    }
  }
  Backbone net;
  net.spec_ = std::move(spec);
  net.fused_ = std::move(layers);
  return net;
}

Backbone Backbone::random(const NetworkSpec& spec, std::uint64_t seed, const RandomInit& init) {
  std::mt19937_64 rng(seed);
  std::vector<RepVggBlock> blocks;
  int channels = spec.input_channels;
  for (const auto& stage : spec.stages) {
    for (int l = 0; l < stage.layers; ++l) {
      const int stride = l == 0 ? stage.first_stride : 1;
      RepVggBlock b;
      b.stride = stride;
      const bool identity = channels == stage.out_channels && stride == 1;
      // keeps activation scale roughly constant with depth
      const float gain = identity ? kIdentityBlockGain : 1.0f;
      b.conv3x3 = {random_conv(rng, channels, stage.out_channels, 3, stride, init.randomize_bias, gain),
                   random_bn(rng, stage.out_channels, init.randomize_bn)};
      b.conv1x1 = ConvBn{random_conv(rng, channels, stage.out_channels, 1, stride, init.randomize_bias, gain),
                         random_bn(rng, stage.out_channels, init.randomize_bn)};
      if (identity) b.identity_bn = random_bn(rng, channels, init.randomize_bn);
      blocks.push_back(std::move(b));
      channels = stage.out_channels;
    }
  }
  return Backbone(spec, std::move(blocks));
}

Backbone Backbone::fused() const { return from_fused(spec_, fused_); }

void Backbone::check_input(const Tensor4& x) const {
  if (x.channels() != spec_.input_channels) {
    throw ShapeError("backbone: input " + x.shape().str() + " needs " + std::to_string(spec_.input_channels) +
                     " channels");
  }
  const int f = spec_.downsample_factor();
  if (x.height() <= 0 || x.width() <= 0 || x.height() % f != 0 || x.width() % f != 0) {
    throw ShapeError("backbone: input " + x.shape().str() + " spatial dims must be positive multiples of " +
                     std::to_string(f));
  }
}

std::vector<Tensor4> Backbone::forward_stages(const Tensor4& x, ForwardMode mode) const {
  check_input(x);
  if (mode == ForwardMode::multibranch && blocks_.empty() && spec_.layer_count() > 0) {
    throw InputError("backbone: multi-branch parameters are not available in a fused-only network");
  }
  std::vector<Tensor4> outputs;
  Tensor4 h = x;
  std::size_t index = 0;
  for (const auto& stage : spec_.stages) {
    for (int l = 0; l < stage.layers; ++l, ++index) {
      h = mode == ForwardMode::fused ? relu(conv2d(h, fused_[index])) : block_forward_multibranch(h, blocks_[index]);
    }
    outputs.push_back(h);
  }
  return outputs;
}

Tensor4 Backbone::forward(const Tensor4& x, ForwardMode mode) const {
  if (spec_.layer_count() == 0) {
    check_input(x);
    return x;
  }
  auto stages = forward_stages(x, mode);
  return std::move(stages.back());
}

Tensor4 backbone_forward(const Tensor4& x, const Backbone& net, bool fused) {
  return net.forward(x, fused ? ForwardMode::fused : ForwardMode::multibranch);
}

ModelCost count_params_flops(const Backbone& net, ForwardMode mode, int input_height, int input_width) {
  ModelCost cost;
  int h = input_height;
  int w = input_width;
  const auto conv_cost = [&](const ConvParams& c, int in_h, int in_w) {
    const std::int64_t oh = conv_output_size(in_h, c.kernel_h(), c.stride, c.padding);
    const std::int64_t ow = conv_output_size(in_w, c.kernel_w(), c.stride, c.padding);
    cost.params += static_cast<std::int64_t>(c.weight.size()) + c.bias.size();
    cost.mult_adds += static_cast<std::int64_t>(c.weight.size()) * oh * ow;
  };
  const auto bn_cost = [&](const BatchNormParams& bn, std::int64_t oh, std::int64_t ow) {
    cost.params += 2 * static_cast<std::int64_t>(bn.channels());
    cost.mult_adds += static_cast<std::int64_t>(bn.channels()) * oh * ow;
  };

  if (mode == ForwardMode::fused) {
    for (const auto& c : net.fused_layers()) {
      conv_cost(c, h, w);
      h = conv_output_size(h, c.kernel_h(), c.stride, c.padding);
      w = conv_output_size(w, c.kernel_w(), c.stride, c.padding);
    }
    return cost;
  }
  if (!net.has_multibranch()) throw InputError("count_params_flops: network has no multi-branch parameters");
  for (const auto& b : net.blocks()) {
    const ConvParams& c3 = b.conv3x3.conv;
    const int oh = conv_output_size(h, 3, c3.stride, c3.padding);
    const int ow = conv_output_size(w, 3, c3.stride, c3.padding);
    conv_cost(c3, h, w);
    bn_cost(b.conv3x3.bn, oh, ow);
    if (b.conv1x1) {
      conv_cost(b.conv1x1->conv, h, w);
      bn_cost(b.conv1x1->bn, oh, ow);
    }
    if (b.identity_bn) bn_cost(*b.identity_bn, oh, ow);
    h = oh;
    w = ow;
  }
  return cost;
}

ModelCost count_params_flops(const Backbone& net, ForwardMode mode) {
  return count_params_flops(net, mode, net.spec().input_height, net.spec().input_width);
}

}  // namespace vpr
