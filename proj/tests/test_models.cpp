#include <gtest/gtest.h>

#include <boost/math/special_functions/beta.hpp>

#include <cmath>
#include <random>

#include "grad_check.hpp"
#include "pmk/gate.hpp"
#include "pmk/models.hpp"
#include "reference_ops.hpp"

namespace pmk {
namespace {

using testing::random_tensor;

JmrnConfig small_jmrn(std::size_t joints = 4, std::size_t classes = 3) {
  JmrnConfig cfg;
  cfg.joints = joints;
  cfg.c_dim = 8;
  cfg.extractor_widths = {4, 8, 8, 256};
  cfg.head_width = 16;
  cfg.num_classes = classes;
  return cfg;
}

double eval_gate(double pi, double tau) {
  Graph<double> g;
  auto v = g.constant(Tensor<double>(Shape{1}, std::vector<double>{pi}));
  return gate::tempered_sigmoid(v, tau).value()[0];
}

std::vector<double> sample_gates(double pi, double tau, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Graph<double> g;
  auto v = g.constant(Tensor<double>(Shape{n}, pi));
  auto w = gate::bin_concrete(v, gate::logistic_noise<double>(Shape{n}, rng), tau);
  return w.value().storage();
}

TEST(BinConcrete, EvalAtZeroLogitIsHalf) {
  for (double tau : {0.01, 2.0 / 3.0, 1.0, 5.0}) EXPECT_DOUBLE_EQ(eval_gate(0.0, tau), 0.5);
}

TEST(BinConcrete, LargeLogitSaturatesHigh) {
  const auto w = sample_gates(10.0, 2.0 / 3.0, 10000, 1);
  double m = 0;
  for (double v : w) m += v;
  EXPECT_GT(m / 10000.0, 0.99);
}

TEST(BinConcrete, LowTemperatureApproachesBernoulli) {
  const std::size_t n = 10000;
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  for (double tau : {0.01, 1e-4})
    for (double pi : {-1.0, 0.0, 0.7}) {
      const auto w = sample_gates(pi, tau, n, 2);
      std::size_t near_binary = 0;
      double m = 0;
      for (double v : w) {
        near_binary += (v < 1e-3 || v > 1.0 - 1e-3);
        m += v;
      }
      // w is inside (1e-3, 1-1e-3) iff |pi + L| < tau*log(999) for logistic L
      const double d = tau * std::log(999.0);
      const double p_mid = sig(pi + d) - sig(pi - d);
      const double frac = static_cast<double>(near_binary) / n;
      EXPECT_NEAR(1.0 - frac, p_mid, 4.0 * std::sqrt(p_mid * (1 - p_mid) / n) + 1e-4) << "tau=" << tau << " pi=" << pi;
      if (tau < 1e-3) EXPECT_GT(frac, 0.99);
      const double p = sig(pi);
      EXPECT_NEAR(m / n, p, 3.0 * std::sqrt(p * (1 - p) / n)) << "pi=" << pi;
    }
}

TEST(BetaFunctions, MatchBoost) {
  for (double a : {0.4, 0.6, 1.0, 2.5})
    for (double b : {0.4, 1.0, 3.0})
      for (double x : {1e-6, 0.01, 0.2, 0.5, 0.77, 0.999, 1 - 1e-6}) {
        EXPECT_NEAR(gate::beta_cdf(x, a, b), boost::math::ibeta(a, b, x), 1e-12);
        EXPECT_NEAR(gate::beta_pdf(x, a, b), boost::math::ibeta_derivative(a, b, x),
                    1e-9 * std::max(1.0, boost::math::ibeta_derivative(a, b, x)));
      }
  EXPECT_NEAR(gate::beta_quantile(0.3, 0.6, 0.4), boost::math::ibeta_inv(0.6, 0.4, 0.3), 1e-12);
}

TEST(BatchShaping, ZeroAtPriorQuantiles) {
  const gate::BetaPrior prior{0.6, 0.4};
  for (std::size_t n : {2, 5, 16}) {
    Tensor<double> w(Shape{n, 3});
    for (std::size_t i = 0; i < n; ++i) {
      const double q = gate::beta_quantile((2.0 * (i + 1) - 1) / (2.0 * n), prior.a, prior.b);
      // different sample order per joint; the statistic sorts
      w.at(i, 0) = q;
      w.at(n - 1 - i, 1) = q;
      w.at((i + 1) % n, 2) = q;
    }
    Graph<double> g;
    EXPECT_LE(gate::batch_shaping_loss(g.constant(w), prior).value()[0], 1e-8);
  }
}

TEST(BatchShaping, DegenerateUpperTail) {
  const gate::BetaPrior prior{0.6, 0.4};
  const std::size_t n = 8;
  Graph<double> g;
  const double loss = gate::batch_shaping_loss(g.constant(Tensor<double>(Shape{n, 1}, 0.999)), prior).value()[0];
  const double f = boost::math::ibeta(0.6, 0.4, 0.999);
  double expect = 0;
  for (std::size_t i = 1; i <= n; ++i) expect += std::pow(f - (2.0 * i - 1) / (2.0 * n), 2);
  EXPECT_NEAR(loss, expect / n, 1e-12);
}

TEST(BatchShaping, NonNegativeAndGradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Parameter<double> w("w", random_tensor(Shape{6, 4}, rng, 0.02, 0.98));
    Graph<double> g0;
    EXPECT_GE(gate::batch_shaping_loss(g0.param(w), {0.6, 0.4}).value()[0], 0.0);
    auto r = testing::grad_check({&w}, [&](Graph<double>& g) { return gate::batch_shaping_loss(g.param(w), {0.6, 0.4}); });
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
  Graph<double> g;
  EXPECT_THROW(gate::batch_shaping_loss(g.constant(Tensor<double>(Shape{1, 3}, 0.5)), {0.6, 0.4}), ValueError);
}

TEST(MotionExtract, SharedWeightsAcrossJoints) {
  Jmrn<double> net(small_jmrn(), 1);
  Rng rng(4);
  const auto x = random_tensor(Shape{2, 3, 16, 16}, rng);
  Graph<double> g;
  auto [r0, c0] = net.motion_extract(g, g.constant(x), 0, nn::Mode::eval);
  auto [r2, c2] = net.motion_extract(g, g.constant(x), 2, nn::Mode::eval);
  EXPECT_EQ(r0.value(), r2.value());
  EXPECT_EQ(c0.value(), c2.value());
  EXPECT_THROW(net.motion_extract(g, g.constant(x), 4, nn::Mode::eval), ValueError);
}

TEST(MotionExtract, FourHalvings) {
  JmrnConfig cfg = small_jmrn(2);
  Jmrn<float> net(cfg, 1);
  Graph<float> g;
  auto [r, c] = net.motion_extract(g, g.constant(Tensor<float>(Shape{1, 3, 64, 64})), 1, nn::Mode::eval);
  EXPECT_EQ(r.shape(), (Shape{1, 256, 4, 4}));
  EXPECT_EQ(c.shape(), (Shape{1, cfg.c_dim, 4, 4}));
}

TEST(MotionExtract, ZeroInputMatchesLayerwiseReference) {
  Jmrn<double> net(small_jmrn(), 5);
  Rng rng(6);
  for (auto& blk : net.extractor()) {
    blk.conv.bias.value = random_tensor(blk.conv.bias.value.shape(), rng);
    blk.bn.beta.value = random_tensor(blk.bn.beta.value.shape(), rng);
  }
  Graph<double> g;
  auto [r, c] = net.motion_extract(g, g.constant(Tensor<double>(Shape{1, 3, 16, 16})), 1, nn::Mode::eval);
  Tensor<double> ref(Shape{1, 3, 16, 16});  // per-joint BN with zero bias keeps zeros
  for (auto& blk : net.extractor()) {
    ref = testing::naive_relu(testing::naive_bn_eval(
        testing::naive_conv(ref, blk.conv.weight.value, blk.conv.bias.value, 2, 1), blk.bn.gamma.value,
        blk.bn.beta.value, blk.bn.running_mean, blk.bn.running_var));
  }
  EXPECT_LT(max_abs_diff(r.value(), ref), 1e-12);
}

TEST(Jmrn, EvalGateIsTemperedSigmoidOfLogits) {
  Jmrn<double> net(small_jmrn(), 7);
  Rng rng(8);
  const auto x = random_tensor(Shape{3, 12, 16, 16}, rng, 0, 1);
  Graph<double> g;
  auto out = net.forward(g, x, nn::Mode::eval, nullptr);
  const auto& pi = out.gate_logits->value();
  const auto& w = out.gate_weights->value();
  ASSERT_EQ(w.shape(), (Shape{3, 4}));
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_DOUBLE_EQ(w[i], 1.0 / (1.0 + std::exp(-pi[i] / (2.0 / 3.0))));
    EXPECT_GT(w[i], 0.0);
    EXPECT_LT(w[i], 1.0);
  }
  Graph<double> g2;
  EXPECT_EQ(net.forward(g2, x, nn::Mode::eval, nullptr).logits.value(), out.logits.value());
}

TEST(Jmrn, ZeroGateAnnihilatesJointEvidence) {
  Jmrn<double> net(small_jmrn(), 9);
  Rng rng(10);
  net.force_gate(Tensor<double>(Shape{2, 4}, 0.0));
  Graph<double> g;
  auto a = net.forward(g, random_tensor(Shape{2, 12, 16, 16}, rng, 0, 1), nn::Mode::eval, nullptr);
  auto b = net.forward(g, random_tensor(Shape{2, 12, 16, 16}, rng, 0, 1), nn::Mode::eval, nullptr);
  EXPECT_EQ(a.logits.value(), b.logits.value());
  auto zeros = net.head_logits(g, g.constant(Tensor<double>(Shape{2, 4 * 8, 1, 1})), nn::Mode::eval);
  EXPECT_EQ(a.logits.value(), zeros.value());
}

TEST(Jmrn, UnitGateEqualsUngatedPass) {
  Jmrn<double> net(small_jmrn(), 11);
  Rng rng(12);
  const auto x = random_tensor(Shape{2, 12, 16, 16}, rng, 0, 1);
  net.force_gate(Tensor<double>(Shape{2, 4}, 1.0));
  Graph<double> g;
  auto gated = net.forward(g, x, nn::Mode::eval, nullptr);
  std::vector<Var<double>> comps;
  auto xin = g.constant(x);
  for (std::size_t j = 0; j < 4; ++j) comps.push_back(net.motion_extract(g, nn::slice_channels(xin, 3 * j, 3 * j + 3), j, nn::Mode::eval).second);
  // comps are [N, c_dim, h, w] per joint; the network stacks them joint-major per sample.
  auto ungated = net.head_logits(g, nn::concat_channels<double>(comps), nn::Mode::eval);
  EXPECT_LT(max_abs_diff(gated.logits.value(), ungated.value()), 1e-12);
}

TEST(Jmrn, JointPermutationEquivariance) {
  const std::size_t nj = 4, a = 1, b = 3, cdim = 8;
  Jmrn<float> net(small_jmrn(nj), 13);
  Rng rng(14);
  for (auto& bn : net.joint_bn()) {
    bn.gamma.value = random_tensor(Shape{3}, rng, 0.5, 1.5).cast<float>();
    bn.running_mean = random_tensor(Shape{3}, rng, 0, 0.5).cast<float>();
  }
  // the gate head starts at zero; give it weights so the gates differ per joint
  net.gate_fc().weight.value = random_tensor(net.gate_fc().weight.value.shape(), rng, -0.1, 0.1).cast<float>();
  net.gate_fc().bias.value = random_tensor(Shape{nj}, rng, -1, 1).cast<float>();
  const auto x = random_tensor(Shape{2, nj * 3, 16, 16}, rng, 0, 1).cast<float>();
  Graph<float> g;
  auto ref = net.forward(g, x, nn::Mode::eval, nullptr);

  auto swap_channel_blocks = [](Tensor<float>& t, std::size_t block, std::size_t i, std::size_t j) {
    // t is [Cout, Cin, k, k]; exchange input-channel blocks i and j.
    const std::size_t cout = t.dim(0), cin = t.dim(1), kk = t.dim(2) * t.dim(3);
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t c = 0; c < block; ++c)
        for (std::size_t k = 0; k < kk; ++k)
          std::swap(t[(o * cin + i * block + c) * kk + k], t[(o * cin + j * block + c) * kk + k]);
  };
  auto xp = x;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 3 * 256; ++k)
      std::swap(xp[(n * nj * 3 + a * 3) * 256 + k], xp[(n * nj * 3 + b * 3) * 256 + k]);
  std::swap(net.joint_bn()[a], net.joint_bn()[b]);
  swap_channel_blocks(net.gate_conv().weight.value, 256, a, b);
  auto& fcw = net.gate_fc().weight.value;
  for (std::size_t k = 0; k < 256; ++k) std::swap(fcw[a * 256 + k], fcw[b * 256 + k]);
  std::swap(net.gate_fc().bias.value[a], net.gate_fc().bias.value[b]);
  swap_channel_blocks(net.reduce().conv.weight.value, cdim, a, b);

  Graph<float> g2;
  auto perm = net.forward(g2, xp, nn::Mode::eval, nullptr);
  EXPECT_LT(max_abs_diff(perm.logits.value(), ref.logits.value()), 1e-5f);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t j = 0; j < nj; ++j) {
      const std::size_t src = j == a ? b : (j == b ? a : j);
      EXPECT_NEAR(perm.gate_weights->value()[n * nj + j], ref.gate_weights->value()[n * nj + src], 1e-5);
    }
}

TEST(Jmrn, EndToEndGradientCheck) {
  JmrnConfig cfg = small_jmrn(3, 2);
  cfg.extractor_widths = {3, 4, 4, 256};
  cfg.c_dim = 4;
  cfg.head_width = 6;
  Jmrn<double> net(cfg, 15);
  Rng rng(16);
  net.gate_fc().weight.value = random_tensor(net.gate_fc().weight.value.shape(), rng, -0.2, 0.2);
  const auto x = random_tensor(Shape{2, 9, 8, 8}, rng, 0, 1);
  std::vector<int> y{0, 1};
  auto params = net.parameters();
  auto r = testing::grad_check(
      params,
      [&](Graph<double>& g) {
        Rng noise(17);
        auto out = net.forward(g, x, nn::Mode::train, &noise);
        auto ce = nn::softmax_cross_entropy<double>(out.logits, y);
        auto reg = gate::batch_shaping_loss(*out.gate_weights, cfg.prior);
        return nn::add(ce, nn::mul_scalar(reg, cfg.lambda_reg));
      },
      1e-5, 6, 18);
  EXPECT_LT(r.max_rel_error, 1e-3) << "checked " << r.checked << " entries";
}

TEST(Baseline, ShapeDeterminismAndGradient) {
  BaselineConfig cfg;
  cfg.joints = 2;
  cfg.widths = {4, 4, 6, 6, 8, 8};
  cfg.num_classes = 5;
  StackedBaseline<double> net(cfg, 3);
  Rng rng(19);
  const auto x = random_tensor(Shape{3, 6, 16, 16}, rng, 0, 1);
  Graph<double> g;
  auto a = net.forward(g, x, nn::Mode::eval, nullptr);
  EXPECT_EQ(a.logits.shape(), (Shape{3, 5}));
  Graph<double> g2;
  EXPECT_EQ(net.forward(g2, x, nn::Mode::eval, nullptr).logits.value(), a.logits.value());

  std::vector<int> y{0, 4, 2};
  auto& w0 = net.block(0).conv.weight;
  auto r = testing::grad_check(
      {&w0}, [&](Graph<double>& gg) { return nn::softmax_cross_entropy<double>(net.forward(gg, x, nn::Mode::train, nullptr).logits, y); },
      1e-5, 16);
  double norm = 0;
  for (double v : w0.grad.data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Jmrn, RejectsBadConfigAndInputs) {
  JmrnConfig cfg = small_jmrn();
  cfg.tau = 0;
  EXPECT_THROW(Jmrn<float>(cfg, 1), ValueError);
  Jmrn<float> net(small_jmrn(), 1);
  Graph<float> g;
  EXPECT_THROW(net.forward(g, Tensor<float>(Shape{1, 5, 16, 16}), nn::Mode::eval, nullptr), ShapeError);
  EXPECT_THROW(net.forward(g, Tensor<float>(Shape{2, 12, 16, 16}), nn::Mode::train, nullptr), ValueError);
}

}  // namespace
}  // namespace pmk
