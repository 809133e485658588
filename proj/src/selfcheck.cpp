#include "vpr/selfcheck.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "vpr/backbone.hpp"
#include "vpr/descriptor.hpp"
#include "vpr/io_store.hpp"
#include "vpr/matcher.hpp"
#include "vpr/retrieval.hpp"

namespace vpr {

namespace {

using Check = std::function<std::string(std::mt19937_64&)>;  // empty string on success

Tensor4 random_tensor(std::mt19937_64& rng, Shape4 s) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor4 t(s);
  for (float& v : t.values()) v = d(rng);
  return t;
}

Tensor4 direct_conv(const Tensor4& x, const ConvParams& p) {
  const int oh = conv_output_size(x.height(), p.kernel_h(), p.stride, p.padding);
  const int ow = conv_output_size(x.width(), p.kernel_w(), p.stride, p.padding);
  Tensor4 out({x.batch(), p.out_channels(), oh, ow});
  for (int n = 0; n < x.batch(); ++n)
    for (int o = 0; o < p.out_channels(); ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = p.bias[o];
          for (int c = 0; c < x.channels(); ++c)
            for (int ky = 0; ky < p.kernel_h(); ++ky)
              for (int kx = 0; kx < p.kernel_w(); ++kx) {
                const int iy = y * p.stride - p.padding + ky;
                const int ix = xx * p.stride - p.padding + kx;
                if (iy >= 0 && iy < x.height() && ix >= 0 && ix < x.width()) acc += double(p.weight(o, c, ky, kx)) * x(n, c, iy, ix);
              }
          out(n, o, y, xx) = static_cast<float>(acc);
        }
  return out;
}

BatchNormParams random_bn(std::mt19937_64& rng, int c) {
  std::uniform_real_distribution<float> u(0.5f, 1.5f), s(-0.2f, 0.2f);
  BatchNormParams bn;
  bn.gamma.resize(c);
  bn.beta.resize(c);
  bn.running_mean.resize(c);
  bn.running_var.resize(c);
  for (int i = 0; i < c; ++i) {
    bn.gamma[i] = u(rng);
    bn.beta[i] = s(rng);
    bn.running_mean[i] = s(rng);
    bn.running_var[i] = u(rng);
  }
  bn.epsilon = 1e-5f;
  return bn;
}

RepVggBlock random_block(std::mt19937_64& rng, int cin, int cout, int stride) {
  auto conv = [&](int k) {
    ConvParams p;
    p.weight = random_tensor(rng, {cout, cin, k, k});
    for (float& w : p.weight.values()) w /= std::sqrt(float(cin * k * k));
    p.bias = Eigen::VectorXf::Zero(cout);
    p.stride = stride;
    p.padding = k / 2;
    return p;
  };
  RepVggBlock b;
  b.stride = stride;
  b.conv3x3 = {conv(3), random_bn(rng, cout)};
  b.conv1x1 = ConvBn{conv(1), random_bn(rng, cout)};
  if (cin == cout && stride == 1) b.identity_bn = random_bn(rng, cin);
  return b;
}

std::string fmt(const char* what, double value, double bound) {
  std::ostringstream os;
  os << what << " " << value << " exceeds " << bound;
  return os.str();
}

// Plain-domain Sinkhorn with a fixed, large iteration count.
Eigen::MatrixXd reference_sinkhorn(const Eigen::MatrixXd& c, double dustbin, double reg, int iters) {
  const auto m = c.rows(), n = c.cols();
  Eigen::MatrixXd k = Eigen::MatrixXd::Constant(m + 1, n + 1, dustbin);
  k.topLeftCorner(m, n) = c;
  k = ((k.array() - k.maxCoeff()) / reg).exp().matrix();
  Eigen::VectorXd mu = Eigen::VectorXd::Ones(m + 1), nu = Eigen::VectorXd::Ones(n + 1);
  mu[m] = double(n);
  nu[n] = double(m);
  Eigen::VectorXd a = Eigen::VectorXd::Ones(m + 1), b = Eigen::VectorXd::Ones(n + 1);
  for (int i = 0; i < iters; ++i) {
    a = mu.cwiseQuotient(k * b);
    b = nu.cwiseQuotient(k.transpose() * a);
  }
  return a.asDiagonal() * k * b.asDiagonal();
}

}  // namespace

SelfCheckReport run_selfcheck(const SelfCheckOptions& options) {
  SelfCheckReport report;
  std::mt19937_64 rng(options.seed);
  const auto run = [&](const char* module, const char* name, const Check& check) {
    SuiteResult r{module, name, false, {}};
    try {
      r.detail = check(rng);
      r.passed = r.detail.empty();
      if (r.passed) r.detail = "ok";
    } catch (const std::exception& e) {
      r.detail = std::string("exception: ") + e.what();
    }
    report.suites.push_back(std::move(r));
  };
  const auto perturb = [&](ConvParams& p) {
    if (options.inject_fault) p.weight.values()[0] += 0.05f;
  };

  run("tensor_core", "conv2d_vs_direct_loop", [](std::mt19937_64& g) -> std::string {
    std::uniform_int_distribution<int> dim(1, 7), k(1, 3), s(1, 2), pad(0, 1);
    for (int t = 0; t < 25; ++t) {
      ConvParams p;
      const int kk = k(g);
      const Tensor4 x = random_tensor(g, {1, dim(g), kk + dim(g), kk + dim(g)});
      p.weight = random_tensor(g, {dim(g), x.channels(), kk, kk});
      p.bias = Eigen::VectorXf::Random(p.out_channels());
      p.stride = s(g);
      p.padding = pad(g);
      const float err = max_abs_diff(conv2d(x, p), direct_conv(x, p));
      if (err > 1e-5f) return fmt("max |diff|", err, 1e-5);
    }
    return {};
  });
  run("tensor_core", "batchnorm_scalar_formula", [](std::mt19937_64& g) -> std::string {
    const Tensor4 x = random_tensor(g, {2, 3, 4, 5});
    const BatchNormParams bn = random_bn(g, 3);
    const Tensor4 y = batchnorm_infer(x, bn);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i)
          for (int j = 0; j < 5; ++j) {
            const double want = (x(n, c, i, j) - bn.running_mean[c]) / std::sqrt(double(bn.running_var[c]) + bn.epsilon) * bn.gamma[c] + bn.beta[c];
            if (std::abs(want - y(n, c, i, j)) > 1e-5) return fmt("bn |diff|", std::abs(want - y(n, c, i, j)), 1e-5);
          }
    return {};
  });
  run("tensor_core", "softmax_rows_normalized", [](std::mt19937_64&) -> std::string {
    const Eigen::MatrixXd m = 3.0 * Eigen::MatrixXd::Random(6, 9);
    const Eigen::MatrixXd s = softmax_rows(m);
    const double err = (s.rowwise().sum().array() - 1.0).abs().maxCoeff();
    if (err > 1e-12) return fmt("row-sum error", err, 1e-12);
    if ((s.array() <= 0.0).any() || (s.array() >= 1.0).any()) return "entries outside (0,1)";
    return {};
  });

  run("backbone", "reparameterization_equivalence", [&](std::mt19937_64& g) -> std::string {
    std::uniform_int_distribution<int> ch(2, 12), st(1, 2);
    for (int t = 0; t < 20; ++t) {
      const int cin = ch(g);
      const int stride = st(g);
      const int cout = (t % 2 == 0) ? cin : ch(g);
      const RepVggBlock b = random_block(g, cin, cout, stride);
      ConvParams fused = reparameterize_block(b);
      perturb(fused);
      const Tensor4 x = random_tensor(g, {1, cin, 9, 10});
      const float err = max_abs_diff(block_forward_multibranch(x, b), relu(conv2d(x, fused)));
      if (err > 1e-4f) return fmt("block |diff|", err, 1e-4);
    }
    return {};
  });
  run("backbone", "fused_network_forward", [&](std::mt19937_64& g) -> std::string {
    NetworkSpec spec;
    spec.stages = {{1, 8, 2}, {2, 8, 2}, {2, 16, 2}, {3, 16, 2}};
    spec.input_height = 32;
    spec.input_width = 48;
    const Backbone net = Backbone::random(spec, g(), {.randomize_bn = true, .randomize_bias = true});
    std::vector<ConvParams> layers = net.fused_layers();
    perturb(layers.front());
    const Backbone fused = Backbone::from_fused(spec, layers);
    const Tensor4 x = random_tensor(g, {1, 3, 32, 48});
    const float err = max_abs_diff(net.forward(x, ForwardMode::multibranch), fused.forward(x, ForwardMode::fused));
    if (err > 1e-3f) return fmt("network |diff|", err, 1e-3);
    return {};
  });
  run("backbone", "output_shape_rule", [](std::mt19937_64& g) -> std::string {
    const Backbone net = Backbone::random(NetworkSpec::repvgg_lite(), g());
    const Tensor4 y = net.forward(Tensor4({1, 3, 96, 128}), ForwardMode::fused);
    if (y.shape() != Shape4{1, 192, 6, 8}) return "96x128 input produced " + y.shape().str();
    return {};
  });
  run("backbone", "fused_costs_lower", [](std::mt19937_64& g) -> std::string {
    const Backbone net = Backbone::random(NetworkSpec::repvgg_lite(), g());
    const ModelCost multi = count_params_flops(net, ForwardMode::multibranch);
    const ModelCost fused = count_params_flops(net, ForwardMode::fused);
    if (!(fused.mult_adds < multi.mult_adds)) return "fused form is not cheaper";
    return {};
  });

  run("descriptor", "patch_count_enumeration", [](std::mt19937_64&) -> std::string {
    for (int h = 1; h <= 16; ++h)
      for (int w = 1; w <= 16; ++w)
        for (int d = 1; d <= std::min({4, h, w}); ++d)
          for (int s = 1; s <= 3; ++s) {
            int placements = 0;
            for (int y = 0; y + d <= h; y += s)
              for (int x = 0; x + d <= w; x += s) ++placements;
            if (make_patch_grid(h, w, d, d, s).count() != placements) return "patch count mismatch";
          }
    return {};
  });
  run("descriptor", "vlad_double_loop", [](std::mt19937_64& g) -> std::string {
    const VladParams p = VladParams::random(3, 5, g());
    const Eigen::MatrixXf x = Eigen::MatrixXf::Random(5, 7);
    const Eigen::MatrixXd a = soft_assign(x, p);
    const Eigen::MatrixXd v = vlad_residuals(x, a, p);
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (int i = 0; i < 7; ++i) acc += a(i, k) * (double(x(j, i)) - p.centers(k, j));
        if (std::abs(acc - v(k, j)) > 1e-9) return fmt("V |diff|", std::abs(acc - v(k, j)), 1e-9);
      }
    return {};
  });
  run("descriptor", "pca_orthonormal_rows", [](std::mt19937_64&) -> std::string {
    const Eigen::MatrixXf s = Eigen::MatrixXf::Random(12, 40);
    const PcaModel m = pca_fit(s, 5);
    const double err = (m.projection.cast<double>() * m.projection.cast<double>().transpose() -
                        Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff();
    if (err > 1e-5) return fmt("orthonormality error", err, 1e-5);
    return {};
  });

  run("matcher", "sinkhorn_marginals_and_reference", [](std::mt19937_64& g) -> std::string {
    std::uniform_int_distribution<int> sz(1, 6);
    for (int t = 0; t < 10; ++t) {
      const Eigen::MatrixXd c = Eigen::MatrixXd::Random(sz(g), sz(g));
      const SinkhornConfig cfg;
      const auto z = sinkhorn_assign<double>(c, cfg);
      if (!z.converged) return "sinkhorn did not converge";
      if (z.marginal_error > 1e-5) return fmt("marginal error", z.marginal_error, 1e-5);
      const double err = (z.z - reference_sinkhorn(c, cfg.dustbin_score, cfg.reg, 10000)).cwiseAbs().maxCoeff();
      if (err > 1e-4) return fmt("reference |diff|", err, 1e-4);
    }
    return {};
  });
  run("matcher", "nll_gradient_finite_difference", [](std::mt19937_64&) -> std::string {
    const Eigen::MatrixXd c = Eigen::MatrixXd::Random(3, 4);
    const GroundTruthMatches gt{{{0, 1}, {2, 3}}};
    SinkhornConfig cfg;
    cfg.tol = 0.0;
    cfg.max_iters = 30;
    const auto grad = loss_gradient<double>(c, gt, cfg);
    const double h = 1e-4;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) {
        Eigen::MatrixXd cp = c, cm = c;
        cp(i, j) += h;
        cm(i, j) -= h;
        const double fd = (nll_loss(sinkhorn_assign<double>(cp, cfg), gt).value - nll_loss(sinkhorn_assign<double>(cm, cfg), gt).value) / (2 * h);
        const double err = std::abs(fd - grad.d_scores(i, j));
        if (err > 1e-4 * std::max(std::abs(fd), std::abs(grad.d_scores(i, j))) + 1e-7) return fmt("gradient |diff|", err, 1e-4);
      }
    return {};
  });
  run("matcher", "attention_rows_normalized", [](std::mt19937_64& g) -> std::string {
    const auto params = AttentionParams<double>::random(6, 4, 1, g());
    const Eigen::MatrixXd a = Eigen::MatrixXd::Random(6, 5), b = Eigen::MatrixXd::Random(6, 3);
    const auto out = attention_forward<double>(a, b, params.layers[1]);
    const double err = (out.rho.rowwise().sum().array() - 1.0).abs().maxCoeff();
    if (err > 1e-6) return fmt("rho row-sum error", err, 1e-6);
    return {};
  });

  run("retrieval", "global_retrieve_exhaustive", [](std::mt19937_64& g) -> std::string {
    DescriptorIndex index;
    for (int i = 0; i < 50; ++i) {
      index.add({"img" + std::to_string(1000 + i), Eigen::VectorXf::Random(8).normalized(), GeoTag::utm(i, 0)});
    }
    const Eigen::VectorXf q = Eigen::VectorXf::Random(8).normalized();
    const CandidateList top = global_retrieve(q, index, 10);
    (void)g;
    for (std::size_t r = 1; r < top.ranked.size(); ++r) {
      if (top.ranked[r].score > top.ranked[r - 1].score) return "scores not sorted";
    }
    double best = -2.0;
    for (const auto& e : index.entries()) best = std::max(best, double(q.cast<double>().dot(e.descriptor.cast<double>())));
    if (top.ranked.front().score != best) return "rank-1 differs from exhaustive maximum";
    return {};
  });
  run("retrieval", "recall_monotonic", [](std::mt19937_64& g) -> std::string {
    std::uniform_real_distribution<double> pos(0.0, 100.0);
    std::map<std::string, GeoTag> q, d;
    std::vector<CandidateList> results;
    for (int i = 0; i < 10; ++i) d["d" + std::to_string(i)] = GeoTag::utm(pos(g), pos(g));
    for (int i = 0; i < 8; ++i) {
      const std::string id = "q" + std::to_string(i);
      q[id] = GeoTag::utm(pos(g), pos(g));
      CandidateList l;
      l.query_id = id;
      for (int r = 0; r < 10; ++r) l.ranked.push_back({"d" + std::to_string((i + r * 3) % 10), 1.0 - r * 0.1, false});
      results.push_back(l);
    }
    double prev = 0.0;
    for (int k = 1; k <= 10; ++k) {
      const double r = recall_at_k(results, q, d, k, 25.0);
      if (r < prev) return "recall decreased with K";
      prev = r;
    }
    return {};
  });

  run("io_store", "archive_round_trip", [](std::mt19937_64& g) -> std::string {
    std::uniform_int_distribution<std::uint32_t> bits;
    for (int t = 0; t < 20; ++t) {
      TensorArchive a;
      std::vector<float> f(static_cast<std::size_t>(t) * 3);
      for (float& v : f) {
        const std::uint32_t b = bits(g);
        std::memcpy(&v, &b, sizeof v);
      }
      a.put_f32("t" + std::to_string(t), {f.size()}, f);
      a.put_string("name", "x" + std::to_string(t));
      if (!(decode_archive(encode_archive(a, kWeightsMagic), kWeightsMagic) == a)) return "archive round trip differs";
    }
    return {};
  });

  return report;
}

}  // namespace vpr
