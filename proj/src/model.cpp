#include "vpr/model.hpp"

namespace vpr {

namespace {

constexpr std::uint64_t kSeedStride = 0x9E3779B97F4A7C15ull;

void put_bn(TensorArchive& a, const std::string& prefix, const BatchNormParams& bn) {
  put_vector(a, prefix + "/gamma", bn.gamma);
  put_vector(a, prefix + "/beta", bn.beta);
  put_vector(a, prefix + "/running_mean", bn.running_mean);
  put_vector(a, prefix + "/running_var", bn.running_var);
  const float eps[] = {bn.epsilon};
  a.put_f32(prefix + "/epsilon", {1}, eps);
}

BatchNormParams get_bn(const TensorArchive& a, const std::string& prefix) {
  BatchNormParams bn;
  bn.gamma = get_vector(a, prefix + "/gamma");
  bn.beta = get_vector(a, prefix + "/beta");
  bn.running_mean = get_vector(a, prefix + "/running_mean");
  bn.running_var = get_vector(a, prefix + "/running_var");
  const auto eps = a.get_f32(prefix + "/epsilon");
  if (eps.size() != 1) throw FormatError("weights: malformed epsilon at " + prefix);
  bn.epsilon = eps[0];
  return bn;
}

void put_conv(TensorArchive& a, const std::string& prefix, const ConvParams& c) {
  put_tensor(a, prefix + "/weight", c.weight);
  put_vector(a, prefix + "/bias", c.bias);
}

ConvParams get_conv(const TensorArchive& a, const std::string& prefix, int stride) {
  ConvParams c;
  c.weight = get_tensor(a, prefix + "/weight");
  c.bias = get_vector(a, prefix + "/bias");
  c.stride = stride;
  c.padding = c.kernel_h() / 2;
  return c;
}

Eigen::MatrixXf to_float(const MatrixX<float>& m) { return m; }

}  // namespace

Model random_model(const ModelShape& shape, std::uint64_t seed, const RandomInit& init) {
  Model m;
  m.backbone = Backbone::random(shape.network, seed, init);
  m.vlad = VladParams::random(shape.clusters, shape.network.output_channels(), seed + kSeedStride, shape.vlad_alpha);
  if (shape.attention_rounds > 0) {
    m.attention = AttentionParams<float>::random(shape.matcher_dim, shape.matcher_dim, shape.attention_rounds,
                                                 seed + 2 * kSeedStride);
  }
  m.dustbin_score = shape.dustbin_score;
  return m;
}

TensorArchive model_to_archive(const Model& model) {
  TensorArchive a;
  const NetworkSpec& spec = model.backbone.spec();
  std::vector<std::int64_t> s = {spec.input_channels, spec.input_height, spec.input_width,
                                 static_cast<std::int64_t>(spec.stages.size())};
  for (const auto& st : spec.stages) {
    s.push_back(st.layers);
    s.push_back(st.out_channels);
    s.push_back(st.first_stride);
  }
  a.put_i64("backbone/spec", s);
  const bool multibranch = !model.backbone.blocks().empty();
  const std::int64_t fused_flag[] = {multibranch ? 0 : 1};
  a.put_i64("backbone/fused", fused_flag);
  if (multibranch) {
    for (std::size_t i = 0; i < model.backbone.blocks().size(); ++i) {
      const RepVggBlock& b = model.backbone.blocks()[i];
      const std::string p = "backbone/block" + std::to_string(i);
      put_conv(a, p + "/conv3x3", b.conv3x3.conv);
      put_bn(a, p + "/conv3x3/bn", b.conv3x3.bn);
      if (b.conv1x1) {
        put_conv(a, p + "/conv1x1", b.conv1x1->conv);
        put_bn(a, p + "/conv1x1/bn", b.conv1x1->bn);
      }
      if (b.identity_bn) put_bn(a, p + "/identity/bn", *b.identity_bn);
    }
  } else {
    for (std::size_t i = 0; i < model.backbone.fused_layers().size(); ++i) {
      put_conv(a, "backbone/layer" + std::to_string(i), model.backbone.fused_layers()[i]);
    }
  }

  put_matrix(a, "vlad/centers", model.vlad.centers);
  put_matrix(a, "vlad/assign_weights", model.vlad.assign_weights);
  put_vector(a, "vlad/assign_bias", model.vlad.assign_bias);

  std::vector<std::int64_t> modes;
  for (const auto& l : model.attention.layers) modes.push_back(l.mode == AttentionMode::self ? 0 : 1);
  a.put_i64("matcher/modes", modes);
  const std::int64_t norm[] = {model.attention.normalization == AttentionNormalization::per_destination ? 0 : 1};
  a.put_i64("matcher/normalization", norm);
  for (std::size_t i = 0; i < model.attention.layers.size(); ++i) {
    const auto& l = model.attention.layers[i];
    const std::string p = "matcher/layer" + std::to_string(i);
    put_matrix(a, p + "/wf", to_float(l.wf));
    put_matrix(a, p + "/wg", to_float(l.wg));
    put_matrix(a, p + "/wh", to_float(l.wh));
    put_vector(a, p + "/bf", l.bf);
    put_vector(a, p + "/bg", l.bg);
    put_vector(a, p + "/bh", l.bh);
  }
  const double dustbin[] = {model.dustbin_score};
  a.put_f64("matcher/dustbin", {1}, dustbin);
  return a;
}

Model model_from_archive(const TensorArchive& a) {
  const auto s = a.get_i64("backbone/spec");
  if (s.size() < 4 || s[3] < 0 || s.size() != 4 + 3 * static_cast<std::size_t>(s[3])) {
    throw FormatError("weights: malformed backbone spec");
  }
  NetworkSpec spec;
  spec.input_channels = static_cast<int>(s[0]);
  spec.input_height = static_cast<int>(s[1]);
  spec.input_width = static_cast<int>(s[2]);
  for (std::int64_t i = 0; i < s[3]; ++i) {
    spec.stages.push_back({static_cast<int>(s[4 + 3 * i]), static_cast<int>(s[5 + 3 * i]), static_cast<int>(s[6 + 3 * i])});
  }
  const auto fused_flag = a.get_i64("backbone/fused");
  if (fused_flag.size() != 1) throw FormatError("weights: malformed fused flag");

  std::vector<int> strides;
  for (const auto& st : spec.stages) {
    for (int l = 0; l < st.layers; ++l) strides.push_back(l == 0 ? st.first_stride : 1);
  }

  Model m;
  if (fused_flag[0] == 0) {
    std::vector<RepVggBlock> blocks;
    for (std::size_t i = 0; i < strides.size(); ++i) {
      const std::string p = "backbone/block" + std::to_string(i);
      RepVggBlock b;
      b.stride = strides[i];
      b.conv3x3 = {get_conv(a, p + "/conv3x3", strides[i]), get_bn(a, p + "/conv3x3/bn")};
      if (a.contains(p + "/conv1x1/weight")) b.conv1x1 = ConvBn{get_conv(a, p + "/conv1x1", strides[i]), get_bn(a, p + "/conv1x1/bn")};
      if (a.contains(p + "/identity/bn/gamma")) b.identity_bn = get_bn(a, p + "/identity/bn");
      blocks.push_back(std::move(b));
    }
    m.backbone = Backbone(spec, std::move(blocks));
  } else {
    std::vector<ConvParams> layers;
    for (std::size_t i = 0; i < strides.size(); ++i) layers.push_back(get_conv(a, "backbone/layer" + std::to_string(i), strides[i]));
    m.backbone = Backbone::from_fused(spec, std::move(layers));
  }

  m.vlad.centers = get_matrix(a, "vlad/centers");
  m.vlad.assign_weights = get_matrix(a, "vlad/assign_weights");
  m.vlad.assign_bias = get_vector(a, "vlad/assign_bias");
  m.vlad.validate();
  if (m.vlad.dim() != spec.output_channels()) throw ShapeError("weights: VLAD dimension differs from backbone channels");

  const auto modes = a.get_i64("matcher/modes");
  const auto norm = a.get_i64("matcher/normalization");
  if (norm.size() != 1) throw FormatError("weights: malformed attention normalization");
  m.attention.normalization = norm[0] == 0 ? AttentionNormalization::per_destination : AttentionNormalization::global;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    const std::string p = "matcher/layer" + std::to_string(i);
    AttentionLayer<float> l;
    l.wf = get_matrix(a, p + "/wf");
    l.wg = get_matrix(a, p + "/wg");
    l.wh = get_matrix(a, p + "/wh");
    l.bf = get_vector(a, p + "/bf");
    l.bg = get_vector(a, p + "/bg");
    l.bh = get_vector(a, p + "/bh");
    l.mode = modes[i] == 0 ? AttentionMode::self : AttentionMode::cross;
    m.attention.layers.push_back(std::move(l));
  }
  m.attention.validate();
  const auto dustbin = a.get_f64("matcher/dustbin");
  if (dustbin.size() != 1) throw FormatError("weights: malformed dustbin score");
  m.dustbin_score = dustbin[0];
  return m;
}

void save_model(const std::filesystem::path& path, const Model& model) { save_weights(path, model_to_archive(model)); }

Model load_model(const std::filesystem::path& path) { return model_from_archive(load_weights(path)); }

StageCosts model_costs(const Model& model, ForwardMode mode, int input_height, int input_width, int patches) {
  StageCosts c;
  const ModelCost bb = count_params_flops(model.backbone, mode, input_height, input_width);
  const std::int64_t k = model.vlad.cluster_count();
  const std::int64_t d = model.vlad.dim();
  const int f = model.backbone.spec().downsample_factor();
  const std::int64_t cells = static_cast<std::int64_t>(input_height / f) * (input_width / f);
  c.stage1_params = bb.params + model.vlad.centers.size() + model.vlad.assign_weights.size() + model.vlad.assign_bias.size();
  // assignment scores plus residual accumulation
  c.stage1_mult_adds = bb.mult_adds + 2 * k * d * cells;
  c.stage2_params = model.attention.param_count() + 1;
  c.stage2_mult_adds = attention_mult_adds(model.attention, patches, patches) +
                       static_cast<std::int64_t>(model.attention.dim()) * patches * patches;
  return c;
}

}  // namespace vpr
