#include <doctest.h>

#include "oracles.hpp"
#include "vpr/matcher.hpp"

using namespace vpr;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

AttentionLayer<double> random_layer(std::mt19937_64& rng, int dim, int key_dim, AttentionMode mode, bool biases) {
  AttentionLayer<double> l;
  l.wf = oracle::random_matrix(rng, key_dim, dim);
  l.wg = oracle::random_matrix(rng, key_dim, dim);
  l.wh = oracle::random_matrix(rng, dim, dim);
  l.bf = biases ? VectorXd(oracle::random_matrix(rng, key_dim, 1).col(0)) : VectorXd(VectorXd::Zero(key_dim));
  l.bg = biases ? VectorXd(oracle::random_matrix(rng, key_dim, 1).col(0)) : VectorXd(VectorXd::Zero(key_dim));
  l.bh = biases ? VectorXd(oracle::random_matrix(rng, dim, 1).col(0)) : VectorXd(VectorXd::Zero(dim));
  l.mode = mode;
  return l;
}

double finite_difference(const MatrixXd& c, const GroundTruthMatches& g, const SinkhornConfig& cfg, int i, int j,
                         double h = 1e-4) {
  MatrixXd cp = c, cm = c;
  cp(i, j) += h;
  cm(i, j) -= h;
  return (nll_loss(sinkhorn_assign<double>(cp, cfg), g).value - nll_loss(sinkhorn_assign<double>(cm, cfg), g).value) /
         (2.0 * h);
}

bool close_relative(double a, double b) { return std::abs(a - b) <= 1e-4 * std::max(std::abs(a), std::abs(b)) + 1e-7; }

}  // namespace

TEST_CASE("attention with a single descriptor") {
  std::mt19937_64 rng(1);
  const auto l = random_layer(rng, 3, 2, AttentionMode::self, true);
  const MatrixXd x = oracle::random_matrix(rng, 3, 1);
  const auto out = attention_forward<double>(x, x, l);
  CHECK(out.rho == MatrixXd::Ones(1, 1));
  CHECK((out.enhanced - (x + l.wh * x + l.bh)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("attention over identical descriptors is uniform") {
  std::mt19937_64 rng(2);
  const auto l = random_layer(rng, 4, 3, AttentionMode::self, true);
  const MatrixXd x = oracle::random_matrix(rng, 4, 1).replicate(1, 5);
  const auto out = attention_forward<double>(x, x, l);
  CHECK((out.rho.array() - 0.2).abs().maxCoeff() <= 1e-12);
  for (int j = 1; j < 5; ++j) CHECK((out.enhanced.col(j) - out.enhanced.col(0)).norm() <= 1e-12);
}

TEST_CASE("attention scalar oracle, two descriptors in two dimensions") {
  std::mt19937_64 rng(3);
  const auto l = random_layer(rng, 2, 2, AttentionMode::cross, true);
  const MatrixXd src = oracle::random_matrix(rng, 2, 2), dst = oracle::random_matrix(rng, 2, 2);
  const auto out = attention_forward<double>(src, dst, l);
  for (int j = 0; j < 2; ++j) {
    double logit[2], denom = 0.0;
    for (int i = 0; i < 2; ++i) {
      double s = 0.0;
      for (int k = 0; k < 2; ++k) {
        const double f = l.wf(k, 0) * src(0, i) + l.wf(k, 1) * src(1, i) + l.bf[k];
        const double g = l.wg(k, 0) * dst(0, j) + l.wg(k, 1) * dst(1, j) + l.bg[k];
        s += f * g;
      }
      logit[i] = std::exp(s);
      denom += logit[i];
    }
    for (int c = 0; c < 2; ++c) {
      double v = dst(c, j);
      for (int i = 0; i < 2; ++i) {
        const double h = l.wh(c, 0) * src(0, i) + l.wh(c, 1) * src(1, i) + l.bh[c];
        v += logit[i] / denom * h;
      }
      CHECK(out.enhanced(c, j) == doctest::Approx(v).epsilon(1e-6));
    }
    for (int i = 0; i < 2; ++i) CHECK(out.rho(j, i) == doctest::Approx(logit[i] / denom).epsilon(1e-6));
  }
}

TEST_CASE("attention normalization properties") {
  std::mt19937_64 rng(4);
  const auto l = random_layer(rng, 6, 4, AttentionMode::cross, true);
  const MatrixXd src = oracle::random_matrix(rng, 6, 7), dst = oracle::random_matrix(rng, 6, 5);
  const auto out = attention_forward<double>(src, dst, l);
  CHECK(out.rho.rows() == 5);
  CHECK(out.rho.cols() == 7);
  CHECK((out.rho.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-6);
  CHECK((out.rho.array() > 0.0).all());
  CHECK((out.rho.array() < 1.0).all());

  // shifting every source (or the f bias) adds a per-destination constant to the logits
  auto shifted = l;
  shifted.bf += oracle::random_matrix(rng, 4, 1).col(0);
  CHECK((attention_forward<double>(src, dst, shifted).rho - out.rho).cwiseAbs().maxCoeff() <= 1e-6);
  const MatrixXd moved = src.colwise() + oracle::random_matrix(rng, 6, 1).col(0);
  CHECK((attention_forward<double>(moved, dst, l).rho - out.rho).cwiseAbs().maxCoeff() <= 1e-6);

  const auto global = attention_forward<double>(src, dst, l, AttentionNormalization::global);
  CHECK(global.rho.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cross attention is symmetric in its inputs") {
  std::mt19937_64 rng(5);
  AttentionParams<double> p;
  p.layers.push_back(random_layer(rng, 5, 3, AttentionMode::self, true));
  p.layers.push_back(random_layer(rng, 5, 3, AttentionMode::cross, true));
  const MatrixXd a = oracle::random_matrix(rng, 5, 4), b = oracle::random_matrix(rng, 5, 6);
  const auto [a1, b1] = enhance_pair(a, b, p);
  const auto [b2, a2] = enhance_pair(b, a, p);
  CHECK(a1 == a2);
  CHECK(b1 == b2);

  const auto ab = attention_forward<double>(a, b, p.layers[1]);
  const auto ba = attention_forward<double>(b, a, p.layers[1]);
  CHECK(ab.rho.rows() == ba.rho.cols());
}

TEST_CASE("attention params") {
  const auto p = AttentionParams<float>::random(8, 4, 2, 9);
  REQUIRE(p.layers.size() == 4);
  CHECK(p.layers[0].mode == AttentionMode::self);
  CHECK(p.layers[1].mode == AttentionMode::cross);
  CHECK(p.param_count() == 4 * (4 * 8 * 2 + 8 * 8 + 4 * 2 + 8));
  CHECK(p.cast<double>().cast<float>().layers[3].wh == p.layers[3].wh);
  CHECK(attention_mult_adds(p, 3, 5) > 0);

  std::mt19937_64 rng(10);
  auto bad = random_layer(rng, 4, 3, AttentionMode::self, false);
  bad.wg = MatrixXd::Zero(2, 4);
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  const auto ok = random_layer(rng, 4, 3, AttentionMode::self, false);
  CHECK_THROWS_AS(attention_forward<double>(MatrixXd::Zero(3, 2), MatrixXd::Zero(4, 2), ok), ShapeError);
}

TEST_CASE("score_matrix") {
  const MatrixXd basis = MatrixXd::Identity(4, 4);
  CHECK(score_matrix(basis, basis) == basis);
  CHECK(score_matrix(MatrixXd::Zero(3, 2), MatrixXd::Random(3, 4)).isZero(0.0));
  std::mt19937_64 rng(6);
  const MatrixXd q = oracle::random_matrix(rng, 5, 3), d = oracle::random_matrix(rng, 5, 2);
  const MatrixXd c = score_matrix(q, d);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double s = 0.0;
      for (int k = 0; k < 5; ++k) s += q(k, i) * d(k, j);
      CHECK(c(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
  CHECK_THROWS_AS(score_matrix(q, MatrixXd::Zero(4, 2)), ShapeError);
}

TEST_CASE("sinkhorn closed forms") {
  SinkhornConfig cfg;
  const auto one = sinkhorn_assign<double>(MatrixXd::Constant(1, 1, 1.0), cfg);
  CHECK(one.converged);
  CHECK(one.z(0, 0) == doctest::Approx(0.5).epsilon(1e-9));

  const auto flat = sinkhorn_assign<double>(MatrixXd::Constant(3, 4, 0.3), cfg);
  const double v = flat.z(0, 0);
  CHECK((flat.z.topLeftCorner(3, 4).array() - v).abs().maxCoeff() <= 1e-9);

  MatrixXd c(2, 2);
  c << 10, -10, -10, 10;
  cfg.dustbin_score = -10.0;
  cfg.max_iters = 200000;
  cfg.tol = 1e-12;
  const auto sharp = sinkhorn_assign<double>(c, cfg);
  CHECK(sharp.converged);
  CHECK(sharp.z(0, 0) > 0.9);
  CHECK(sharp.z(1, 1) > 0.9);
  CHECK((sharp.z - oracle::sinkhorn(c, -10.0, 1.0, 1000000)).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("sinkhorn marginals on random scores") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> sz(1, 8);
  for (int t = 0; t < 30; ++t) {
    const int m = sz(rng), n = sz(rng);
    const MatrixXd c = oracle::random_matrix(rng, m, n, -2.0, 2.0);
    SinkhornConfig cfg;
    cfg.dustbin_score = oracle::random_matrix(rng, 1, 1)(0, 0);
    const auto z = sinkhorn_assign<double>(c, cfg);
    REQUIRE(z.converged);
    CHECK((z.z.topRows(m).rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-5);
    CHECK((z.z.leftCols(n).colwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-5);
    CHECK(z.z.row(m).sum() == doctest::Approx(double(n)).epsilon(1e-5));
    CHECK(z.z.col(n).sum() == doctest::Approx(double(m)).epsilon(1e-5));
    // every entry but the dustbin-dustbin corner is a probability
    MatrixXd noncorner = z.z;
    noncorner(m, n) = 0.0;
    CHECK((noncorner.array() >= 0.0).all());
    CHECK((noncorner.array() <= 1.0 + 1e-9).all());
    CHECK((z.z - oracle::sinkhorn(c, cfg.dustbin_score, cfg.reg)).cwiseAbs().maxCoeff() <= 1e-4);
  }
}

TEST_CASE("sinkhorn invariances") {
  std::mt19937_64 rng(8);
  const MatrixXd c = oracle::random_matrix(rng, 4, 6);
  SinkhornConfig cfg;
  cfg.dustbin_score = 0.2;
  const auto base = sinkhorn_assign<double>(c, cfg);

  SinkhornConfig shifted = cfg;
  shifted.dustbin_score += 3.7;
  const MatrixXd cs = (c.array() + 3.7).matrix();
  CHECK((sinkhorn_assign<double>(cs, shifted).z - base.z).cwiseAbs().maxCoeff() <= 1e-6);

  SinkhornConfig doubled = cfg;
  doubled.reg *= 2.0;
  doubled.dustbin_score *= 2.0;
  CHECK((sinkhorn_assign<double>(MatrixXd(2.0 * c), doubled).z - base.z).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("sinkhorn errors and flags") {
  MatrixXd c = MatrixXd::Zero(2, 2);
  c(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(sinkhorn_assign<double>(c, {}), InputError);
  SinkhornConfig bad;
  bad.reg = 0.0;
  CHECK_THROWS_AS(sinkhorn_assign<double>(MatrixXd::Zero(2, 2), bad), InputError);

  std::mt19937_64 rng(9);
  SinkhornConfig short_run;
  short_run.max_iters = 1;
  short_run.tol = 1e-12;
  const auto z = sinkhorn_assign<double>(oracle::random_matrix(rng, 5, 3, -5, 5), short_run);
  CHECK_FALSE(z.converged);
  CHECK(z.iterations == 1);

  const auto empty = sinkhorn_assign<double>(MatrixXd::Zero(0, 3), {});
  CHECK(empty.z.rows() == 1);
  CHECK(empty.z.cols() == 4);
}

TEST_CASE("nll_loss") {
  AssignmentMatrix<double> z;
  z.z = MatrixXd::Zero(3, 3);
  z.z(0, 0) = 1.0;
  z.z(1, 1) = 1.0;
  CHECK(nll_loss(z, {{{0, 0}, {1, 1}}}).value == 0.0);

  z.z(0, 0) = 0.5;
  CHECK(nll_loss(z, {{{0, 0}}}).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  std::mt19937_64 rng(10);
  z.z = oracle::random_matrix(rng, 4, 4, 0.01, 1.0);
  const GroundTruthMatches g{{{0, 1}, {2, 0}, {1, 2}}};
  CHECK(nll_loss(z, g).value ==
        doctest::Approx(-std::log(z.z(0, 1)) - std::log(z.z(2, 0)) - std::log(z.z(1, 2))).epsilon(1e-12));

  const LossValue none = nll_loss(z, {});
  CHECK(none.value == 0.0);
  CHECK(none.empty_ground_truth);

  const double before = nll_loss(z, g).value;
  z.z(2, 0) += 0.2;
  CHECK(nll_loss(z, g).value < before);

  z.z(0, 1) = 0.0;
  CHECK(nll_loss(z, {{{0, 1}}}).value == doctest::Approx(-std::log(kLogClamp)));
  CHECK_THROWS_AS(nll_loss(z, {{{3, 0}}}), InputError);
  CHECK_THROWS_AS(nll_loss(z, {{{0, 0}, {0, 0}}}), InputError);
}

TEST_CASE("loss gradient matches finite differences") {
  SinkhornConfig cfg;
  cfg.tol = 0.0;
  cfg.max_iters = 50;

  const auto none = loss_gradient<double>(MatrixXd::Random(2, 2), {}, cfg);
  CHECK(none.d_scores.isZero(0.0));
  CHECK(none.empty_ground_truth);

  std::mt19937_64 rng(11);
  const MatrixXd c2 = oracle::random_matrix(rng, 2, 2);
  const GroundTruthMatches g2{{{0, 0}, {1, 1}}};
  const auto grad = loss_gradient<double>(c2, g2, cfg);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(close_relative(grad.d_scores(i, j), finite_difference(c2, g2, cfg, i, j)));

  const MatrixXd c3 = 3.0 * c2;
  const auto grad3 = loss_gradient<double>(c3, g2, cfg);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(close_relative(grad3.d_scores(i, j), finite_difference(c3, g2, cfg, i, j)));

  std::uniform_int_distribution<int> sz(1, 5);
  for (int t = 0; t < 20; ++t) {
    const int m = sz(rng), n = sz(rng);
    const MatrixXd c = oracle::random_matrix(rng, m, n, -2.0, 2.0);
    GroundTruthMatches g;
    for (int i = 0; i < std::min(m, n); ++i) g.pairs.push_back({i, (i + t) % n});
    const auto gr = loss_gradient<double>(c, g, cfg);
    CHECK(gr.loss == doctest::Approx(nll_loss(sinkhorn_assign<double>(c, cfg), g).value).epsilon(1e-9));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) CHECK(close_relative(gr.d_scores(i, j), finite_difference(c, g, cfg, i, j)));
  }
}

TEST_CASE("dustbin gradient matches finite differences") {
  SinkhornConfig cfg;
  cfg.tol = 0.0;
  cfg.max_iters = 40;
  std::mt19937_64 rng(12);
  const MatrixXd c = oracle::random_matrix(rng, 3, 4);
  const GroundTruthMatches g{{{0, 1}, {2, 3}}};
  const auto gr = loss_gradient<double>(c, g, cfg);
  SinkhornConfig up = cfg, down = cfg;
  up.dustbin_score += 1e-4;
  down.dustbin_score -= 1e-4;
  const double fd =
      (nll_loss(sinkhorn_assign<double>(c, up), g).value - nll_loss(sinkhorn_assign<double>(c, down), g).value) / 2e-4;
  CHECK(close_relative(gr.d_dustbin, fd));
}

TEST_CASE("match_score") {
  AssignmentMatrix<double> z;
  z.z = MatrixXd::Zero(4, 4);
  z.z(0, 2) = z.z(1, 0) = z.z(2, 1) = 1.0;
  CHECK(match_score(z) == doctest::Approx(1.0));

  z.z.setZero();
  z.z.row(3).head(3).setOnes();
  z.z.col(3).head(3).setOnes();
  CHECK(match_score(z) == 0.0);

  AssignmentMatrix<double> half;
  half.z = MatrixXd::Zero(3, 3);
  half.z.topLeftCorner(2, 2) = MatrixXd::Constant(2, 2, 0.25);
  CHECK(match_score(half) == doctest::Approx(0.5));
}

TEST_CASE("matcher assigns identical sets to themselves") {
  std::mt19937_64 rng(13);
  MatrixXd raw = oracle::random_matrix(rng, 16, 6);
  for (int i = 0; i < 6; ++i) raw.col(i).normalize();
  const Eigen::MatrixXf q = raw.cast<float>();
  SinkhornConfig cfg;
  cfg.reg = 0.1;
  const Matcher m(AttentionParams<double>{}, cfg);
  const auto z = m.assign(q, q);
  for (int i = 0; i < 6; ++i) {
    Eigen::Index best;
    z.z.row(i).head(6).maxCoeff(&best);
    CHECK(best == i);
  }
  CHECK_THROWS_AS(m.assign(q, Eigen::MatrixXf::Zero(8, 3)), ShapeError);
}
