#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cdpir/model.hpp"

using namespace cdpir;

namespace {

ModelConfig small_config() {
  ModelConfig c = ModelConfig::preset(ModelVariant::Custom, 8, 2, 2);
  c.depth = 1;
  c.hidden_size = 16;
  c.n_heads = 2;
  c.freq_dim = 32;
  return c;
}

std::vector<double> random_image(int n, std::uint64_t seed) {
  Engine rng = make_engine(seed, 1);
  std::normal_distribution<double> normal;
  std::vector<double> x(std::size_t(n * n));
  for (auto& v : x) v = normal(rng);
  return x;
}

double half_sq_loss(const VelocityNet<double>& net, const std::vector<double>& x, double t, int label,
                    const std::vector<double>& target) {
  const auto out = net.forward(x, t, label);
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += 0.5 * (out[i] - target[i]) * (out[i] - target[i]);
  return s;
}

}  // namespace

TEST(Model, OutputShapeMatchesInput) {
  VelocityNet<float> net(ModelConfig::preset(ModelVariant::Tiny, 16, 2, 2));
  net.initialize(3, false);
  std::vector<float> x(256, 0.3f);
  EXPECT_EQ(net.forward(x, 0.4, 1).size(), x.size());
}

TEST(Model, ForwardIsDeterministic) {
  VelocityNet<float> net(small_config());
  net.initialize(5, false);
  std::vector<float> x(64);
  std::iota(x.begin(), x.end(), 0.0f);
  EXPECT_EQ(net.forward(x, 0.3, 0), net.forward(x, 0.3, 0));
}

TEST(Model, ZeroInitGivesZeroVelocity) {
  VelocityNet<float> net(small_config());
  net.initialize(5, true);
  std::vector<float> x(64, 1.0f);
  for (float v : net.forward(x, 0.7, 1)) EXPECT_EQ(v, 0.0f);
}

TEST(Model, NullAndRealLabelDiffer) {
  VelocityNet<float> net(small_config());
  net.initialize(9, false);
  std::vector<float> x(64, 0.5f);
  const auto a = net.forward(x, 0.5, kNullLabel);
  const auto b = net.forward(x, 0.5, 0);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Model, LabelOutOfRangeThrows) {
  VelocityNet<float> net(small_config());
  std::vector<float> x(64, 0.0f);
  EXPECT_THROW(net.forward(x, 0.5, 2), std::invalid_argument);
  EXPECT_THROW(net.forward(x, 0.5, -2), std::invalid_argument);
}

TEST(Model, WrongInputSizeThrows) {
  VelocityNet<float> net(small_config());
  std::vector<float> x(63, 0.0f);
  EXPECT_THROW(net.forward(x, 0.5, 0), std::invalid_argument);
}

TEST(Model, ConfigValidation) {
  ModelConfig c = small_config();
  c.image_size = 9;
  EXPECT_THROW(VelocityNet<float>{c}, std::invalid_argument);
  c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(VelocityNet<float>{c}, std::invalid_argument);
}

TEST(Model, NullRowIsOnePastLastLabel) {
  VelocityNet<float> net(small_config());
  const auto& table = net.params()["y_embed.table"];
  EXPECT_EQ(table.dims[0], 3);
}

TEST(Model, ParameterCountMatchesFormula) {
  for (auto variant : {ModelVariant::Tiny, ModelVariant::Small}) {
    const auto cfg = ModelConfig::preset(variant, 32, 2, 2);
    VelocityNet<float> net(cfg);
    EXPECT_EQ(net.params().numel(), cfg.parameter_count());
  }
}

TEST(Model, ParameterCountIndependentOracle) {
  // Tiny, patch 2, 2 labels: count by hand per component.
  const long d = 128, p = 4, f = 256;
  const long expected = (p * d + d) + (f * d + d) + (d * d + d) + 3 * d +
                        4 * ((6 * d * d + 6 * d) + (3 * d * d + 3 * d) + (d * d + d) + (4 * d * d + 4 * d) +
                             (4 * d * d + d)) +
                        (2 * d * d + 2 * d) + (d * p + p);
  EXPECT_EQ(long(ModelConfig::preset(ModelVariant::Tiny, 64, 2, 2).parameter_count()), expected);
}

TEST(Model, GradientMatchesFiniteDifferences) {
  VelocityNet<double> net(small_config());
  net.initialize(11, false);
  perturb_parameters(net.params(), 0.05, 12);
  const auto x = random_image(8, 1);
  const auto target = random_image(8, 2);
  const double t = 0.37;
  for (int label : {1, kNullLabel}) {
    VelocityNet<double>::Cache cache;
    const auto out = net.forward_cached(x, t, label, cache);
    std::vector<double> d_out(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) d_out[i] = out[i] - target[i];
    auto grads = net.params().zeros_like();
    net.backward(cache, d_out, grads);

    Engine rng = make_engine(77, label + 5);
    const auto& tensors = net.params().tensors;
    int checked = 0;
    double worst = 0;
    for (int trial = 0; trial < 400 && checked < 60; ++trial) {
      const std::size_t ti = std::uniform_int_distribution<std::size_t>(0, tensors.size() - 1)(rng);
      const std::size_t k = std::uniform_int_distribution<std::size_t>(0, tensors[ti].data.size() - 1)(rng);
      const double analytic = grads.tensors[ti].data[k];
      double& p = net.params().tensors[ti].data[k];
      const double saved = p;
      const double h = 1e-3;
      p = saved + h;
      const double lp = half_sq_loss(net, x, t, label, target);
      p = saved - h;
      const double lm = half_sq_loss(net, x, t, label, target);
      p = saved;
      const double numeric = (lp - lm) / (2 * h);
      if (std::max(std::abs(analytic), std::abs(numeric)) < 1e-6) continue;
      const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
      worst = std::max(worst, rel);
      EXPECT_LE(rel, 1e-4) << tensors[ti].name << "[" << k << "] analytic " << analytic << " numeric " << numeric;
      ++checked;
    }
    EXPECT_GE(checked, 50);
  }
}
