#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cdpir/simulate.hpp"
#include "cdpir/training.hpp"

using namespace cdpir;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.variant = ModelVariant::Custom;
  c.image_size = 8;
  c.patch_size = 2;
  c.depth = 1;
  c.hidden_size = 16;
  c.n_heads = 2;
  c.freq_dim = 32;
  return c;
}

std::vector<TrainingExample> small_dataset(int per_domain) {
  const ImageGrid grid{8, 8, 11.0};
  std::vector<TrainingExample> out;
  for (int d = 0; d < 2; ++d)
    for (int i = 0; i < per_domain; ++i) {
      const Image img = gen_phantom(std::uint64_t(100 * d + i), DomainSpec::preset(d), grid);
      out.push_back({std::vector<float>(img.values.begin(), img.values.end()), d});
    }
  return out;
}

TrainConfig quick_train(int iters) {
  TrainConfig t;
  t.n_iters = iters;
  t.batch_size = 4;
  t.learning_rate = 1e-3;
  t.log_every = 5;
  return t;
}

std::vector<LossSample<float>> draw(const std::vector<TrainingExample>& data, double dropout, std::uint64_t seed) {
  std::vector<const TrainingExample*> batch;
  for (const auto& e : data) batch.push_back(&e);
  Engine rng = make_engine(seed, 1);
  return draw_loss_samples<float>(batch, small_config(), InterpolantSchedule{}, dropout, rng);
}


template <class T>
void put(Parameters<T>& p, const std::string& name, std::vector<T> values) {
  const auto i = p.add(name, {int(values.size())});
  p.tensors[i].data.assign(values.begin(), values.end());
}

}  // namespace

TEST(ModelSpace, RoundTrip) {
  const auto cfg = small_config();
  const std::vector<float> img{0.0f, 0.25f, 0.5f, 1.0f};
  const auto m = to_model_space<double>(img, cfg);
  EXPECT_DOUBLE_EQ(m[0], -1.0);
  EXPECT_DOUBLE_EQ(m[2], 0.0);
  EXPECT_DOUBLE_EQ(m[3], 1.0);
  EXPECT_EQ(from_model_space<double>(m, cfg), img);
}

TEST(VelocityLoss, ExactPredictionGivesZero) {
  const auto samples = draw(small_dataset(3), 0.1, 2);
  const double loss = velocity_loss(samples, [&](std::span<const float> x, double, int) {
    for (const auto& s : samples)
      if (s.x_t.data() == x.data()) return s.target;
    ADD_FAILURE() << "unknown sample";
    return std::vector<float>(x.size());
  });
  EXPECT_EQ(loss, 0.0);
}

TEST(VelocityLoss, UnitOffsetGivesOne) {
  const auto samples = draw(small_dataset(3), 0.1, 2);
  const double loss = velocity_loss(samples, [&](std::span<const float> x, double, int) {
    for (const auto& s : samples)
      if (s.x_t.data() == x.data()) {
        auto out = s.target;
        for (auto& v : out) v += 1.0f;
        return out;
      }
    return std::vector<float>(x.size());
  });
  EXPECT_NEAR(loss, 1.0, 1e-6);
}

TEST(LossSamples, FullDropoutUsesNullLabel) {
  const auto samples = draw(small_dataset(4), 1.0, 3);
  int seen = 0;
  velocity_loss(samples, [&](std::span<const float> x, double, int label) {
    EXPECT_EQ(label, kNullLabel);
    ++seen;
    return std::vector<float>(x.size());
  });
  EXPECT_EQ(seen, 8);
  for (const auto& s : draw(small_dataset(4), 0.0, 3)) EXPECT_NE(s.label, kNullLabel);
}

TEST(LossSamples, TimesAvoidEndpointsAndTargetsMatchInterpolant) {
  const auto data = small_dataset(10);
  const auto samples = draw(data, 0.1, 4);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    EXPECT_GE(s.t, kTrainTimeMargin);
    EXPECT_LE(s.t, 1.0 - kTrainTimeMargin);
    // Recover eps from x_t and check the target is the path derivative.
    const auto c = InterpolantSchedule{}(s.t);
    const auto x0 = to_model_space<double>(data[i].image, small_config());
    for (std::size_t k = 0; k < x0.size(); ++k) {
      const double eps = (s.x_t[k] - c.alpha * x0[k]) / c.sigma;
      EXPECT_NEAR(s.target[k], c.alpha_dot * x0[k] + c.sigma_dot * eps, 1e-3);
    }
  }
}

TEST(LossAndGradient, ZeroInitLossMatchesTargetStatistics) {
  // With a zero output head the loss is E||v_target||^2 / n = E_t[a'^2 E|x0|^2 + s'^2].
  const auto cfg = small_config();
  VelocityNet<float> net(cfg);
  net.initialize(1, true);
  std::vector<TrainingExample> data = small_dataset(20);
  double x0_power = 0.0;
  for (const auto& e : data)
    for (double v : to_model_space<double>(e.image, cfg)) x0_power += v * v;
  x0_power /= double(data.size() * cfg.n_pixels());
  const InterpolantSchedule sched;
  double expected = 0.0;
  const int n_quad = 10000;
  for (int i = 0; i < n_quad; ++i) {
    const double t = kTrainTimeMargin + (1 - 2 * kTrainTimeMargin) * (i + 0.5) / n_quad;
    const auto c = sched(t);
    expected += c.alpha_dot * c.alpha_dot * x0_power + c.sigma_dot * c.sigma_dot;
  }
  expected /= n_quad;

  std::vector<const TrainingExample*> batch;
  for (int rep = 0; rep < 50; ++rep)
    for (const auto& e : data) batch.push_back(&e);
  Engine rng = make_engine(6, 1);
  const auto samples = draw_loss_samples<float>(batch, cfg, sched, 0.1, rng);
  Parameters<float> grads;
  const double loss = loss_and_gradient(net, samples, grads);
  EXPECT_NEAR(loss / expected, 1.0, 0.1);
  EXPECT_EQ(grads.tensors.size(), net.params().tensors.size());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Parameters<float> p;
  put(p, "w", {1.0f, -2.0f, 0.5f});
  auto state = AdamState<float>::like(p);
  adam_step(p, state, p.zeros_like(), AdamConfig{});
  EXPECT_EQ(p.tensors[0].data, (AlignedVector<float>{1.0f, -2.0f, 0.5f}));

  state.m.tensors[0].data = {0.4f, 0.4f, 0.4f};
  state.v.tensors[0].data = {2.0f, 2.0f, 2.0f};
  adam_step(p, state, p.zeros_like(), AdamConfig{});
  EXPECT_FLOAT_EQ(state.m.tensors[0].data[0], 0.36f);
  EXPECT_FLOAT_EQ(state.v.tensors[0].data[0], 1.998f);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameters<double> p;
  put(p, "a", {1.0, -1.0});
  put(p, "b", {5.0});
  auto state = AdamState<double>::like(p);
  Parameters<double> g;
  put(g, "a", {3.0, -0.01});
  put(g, "b", {0.0});
  adam_step(p, state, g, AdamConfig{1e-2, 0.9, 0.999, 1e-8});
  EXPECT_NEAR(p.tensors[0].data[0], 1.0 - 1e-2, 1e-8);
  EXPECT_NEAR(p.tensors[0].data[1], -1.0 + 1e-2, 1e-8);
  EXPECT_EQ(p.tensors[1].data[0], 5.0);
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, NonFiniteGradientRejectedWithName) {
  Parameters<float> p;
  put(p, "good", {1.0f});
  put(p, "blocks.0.attn.qkv.weight", {1.0f, 2.0f});
  auto state = AdamState<float>::like(p);
  auto g = p.zeros_like();
  g.tensors[0].data[0] = 1.0f;
  g.tensors[1].data[1] = std::nanf("");
  try {
    adam_step(p, state, g, AdamConfig{});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.0.attn.qkv.weight"), std::string::npos);
  }
  EXPECT_EQ(p.tensors[0].data[0], 1.0f);
  EXPECT_EQ(state.step, 0);
}

TEST(Train, ZeroIterationsReturnsInitialization) {
  const auto cfg = small_config();
  auto tc = quick_train(0);
  tc.seed = 4;
  const auto result = train(small_dataset(2), cfg, tc, InterpolantSchedule{});
  VelocityNet<float> net(cfg);
  net.initialize(4, true);
  for (std::size_t i = 0; i < net.params().tensors.size(); ++i)
    EXPECT_EQ(result.checkpoint.params.tensors[i].data, net.params().tensors[i].data);
  EXPECT_TRUE(result.losses.empty());
}

TEST(Train, SameSeedIsBitIdenticalAndLossDecreases) {
  const auto cfg = small_config();
  const auto data = small_dataset(8);
  const auto a = train(data, cfg, quick_train(120), InterpolantSchedule{});
  const auto b = train(data, cfg, quick_train(120), InterpolantSchedule{});
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  EXPECT_EQ(a.losses, b.losses);
  const auto [head, tail] = smoothed_endpoints(a.losses, 20);
  EXPECT_LT(tail, head);
  for (const auto& t : a.checkpoint.params.tensors)
    for (float v : t.data) ASSERT_TRUE(std::isfinite(v));
  auto other = quick_train(120);
  other.seed = 1;
  EXPECT_NE(encode_checkpoint(train(data, cfg, other, InterpolantSchedule{}).checkpoint),
            encode_checkpoint(a.checkpoint));
}

TEST(Train, WritesLogAndCheckpoints) {
  const auto dir = std::filesystem::temp_directory_path() / "cdpir_train_out";
  std::filesystem::remove_all(dir);
  auto tc = quick_train(10);
  tc.checkpoint_every = 5;
  const auto result = train(small_dataset(2), small_config(), tc, InterpolantSchedule{}, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint_5.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint_10.ckpt"));
  const auto loaded = load_checkpoint(dir / "model.ckpt");
  EXPECT_EQ(encode_checkpoint(loaded), encode_checkpoint(result.checkpoint));
  const std::string csv = detail::read_file(dir / "loss.csv");
  EXPECT_EQ(csv.rfind("iter,loss\n5,", 0), 0u);
  EXPECT_EQ(result.loss_log.size(), 2u);
  std::filesystem::remove_all(dir);
}

TEST(Train, RejectsBadData) {
  auto data = small_dataset(1);
  data[0].label = 2;
  EXPECT_THROW(train(data, small_config(), quick_train(1), InterpolantSchedule{}), DataError);
  EXPECT_THROW(train({}, small_config(), quick_train(1), InterpolantSchedule{}), DataError);
  auto tc = quick_train(1);
  tc.label_dropout = 1.5;
  EXPECT_THROW(train(small_dataset(1), small_config(), tc, InterpolantSchedule{}), std::invalid_argument);
  tc = quick_train(1);
  tc.learning_rate = 0.0;
  EXPECT_THROW(tc.validate(), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  VelocityNet<float> net(small_config());
  net.initialize(3, false);
  const auto ckpt = make_checkpoint(net, InterpolantSchedule{ScheduleKind::VP, 0.2, 15.0}, 42);
  const auto back = decode_checkpoint(encode_checkpoint(ckpt));
  EXPECT_EQ(back.config, ckpt.config);
  EXPECT_EQ(back.iteration, 42);
  EXPECT_EQ(back.schedule.kind, ScheduleKind::VP);
  EXPECT_EQ(back.schedule.beta_max, 15.0);
  for (std::size_t i = 0; i < ckpt.params.tensors.size(); ++i)
    EXPECT_EQ(std::memcmp(back.params.tensors[i].data.data(), ckpt.params.tensors[i].data.data(),
                          ckpt.params.tensors[i].data.size() * sizeof(float)),
              0);
}

TEST(Checkpoint, ConfigMismatchIsExplicit) {
  VelocityNet<float> net(small_config());
  net.initialize(3);
  const std::string bytes = encode_checkpoint(make_checkpoint(net, InterpolantSchedule{}, 0));
  auto wrong = small_config();
  wrong.image_size = 16;
  try {
    decode_checkpoint(bytes, &wrong);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("config mismatch"), std::string::npos);
    EXPECT_NE(what.find("image_size expected 16 found 8"), std::string::npos);
  }
  const auto right = small_config();
  EXPECT_NO_THROW(decode_checkpoint(bytes, &right));
}

TEST(Checkpoint, CorruptInputsRejected) {
  VelocityNet<float> net(small_config());
  net.initialize(3);
  const std::string bytes = encode_checkpoint(make_checkpoint(net, InterpolantSchedule{}, 0));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), DataError);
  bad = bytes;
  bad[9] = 7;
  EXPECT_THROW(decode_checkpoint(bad), DataError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), DataError);
}

TEST(Checkpoint, TinyParameterCountMatchesFormula) {
  const auto cfg = ModelConfig::preset(ModelVariant::Tiny, 64, 4, 2);
  VelocityNet<float> net(cfg);
  const double d = cfg.hidden_size, p = cfg.patch_dim(), f = cfg.freq_dim, n_lab = cfg.n_labels + 1;
  const double per_block = 6 * d * d + 6 * d + 3 * d * d + 3 * d + d * d + d + 2 * (4 * d * d) + 4 * d + d;
  const double formula = (p * d + d) + (f * d + d + d * d + d) + n_lab * d + cfg.depth * per_block +
                         (2 * d * d + 2 * d) + (d * p + p);
  EXPECT_NEAR(double(net.params().numel()) / formula, 1.0, 0.01);
}

TEST(JsonConfigs, TrainConfigStrictRoundTrip) {
  TrainConfig t;
  t.n_iters = 77;
  t.label_dropout = 0.2;
  const auto back = train_config_from_json(to_json(t));
  EXPECT_EQ(back.n_iters, 77);
  EXPECT_EQ(back.label_dropout, 0.2);
  Json j = to_json(t);
  j["momentum"] = 0.5;
  EXPECT_THROW(train_config_from_json(j), UsageError);
  const auto m = small_config();
  EXPECT_EQ(model_config_from_json(to_json(m)), m);
}
