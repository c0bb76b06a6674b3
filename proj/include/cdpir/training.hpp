#pragma once

// Velocity-matching loss, Adam, the training loop and checkpoint files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cdpir/errors.hpp"
#include "cdpir/interpolant.hpp"
#include "cdpir/json_io.hpp"
#include "cdpir/metrics.hpp"
#include "cdpir/model.hpp"
#include "cdpir/parallel.hpp"
#include "cdpir/random.hpp"
#include "cdpir/tensor_io.hpp"

namespace cdpir {

inline constexpr double kTrainTimeMargin = 1e-3;

struct TrainingExample {
  std::vector<float> image;  // raw intensities, row-major image_size^2
  int label = 0;
};

/// One regression pair drawn for a batch element.
template <class T>
struct LossSample {
  std::vector<T> x_t;
  std::vector<T> target;
  double t = 0.0;
  int label = kNullLabel;
};

template <class T>
std::vector<T> to_model_space(std::span<const float> image, const ModelConfig& config) {
  std::vector<T> out(image.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T((image[i] - config.data_offset) * config.data_scale);
  return out;
}

template <class T>
std::vector<float> from_model_space(std::span<const T> x, const ModelConfig& config) {
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = float(double(x[i]) / config.data_scale + config.data_offset);
  return out;
}

/// Draws t ~ U(1e-3, 1 - 1e-3), eps ~ N(0, I) and the (possibly dropped) label
/// for every example, and forms (x_t, velocity target).
template <class T>
std::vector<LossSample<T>> draw_loss_samples(std::span<const TrainingExample* const> batch, const ModelConfig& config,
                                             const InterpolantSchedule& schedule, double label_dropout, Engine& rng) {
  require(!batch.empty(), "loss: batch must be nonempty");
  std::uniform_real_distribution<double> time(kTrainTimeMargin, 1.0 - kTrainTimeMargin);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<LossSample<T>> out;
  out.reserve(batch.size());
  for (const auto* ex : batch) {
    require(ex->image.size() == std::size_t(config.n_pixels()), "loss: example does not match image_size");
    LossSample<T> s;
    s.t = time(rng);
    s.label = coin(rng) < label_dropout ? kNullLabel : ex->label;
    const auto x0 = to_model_space<T>(ex->image, config);
    std::vector<T> eps(x0.size());
    for (auto& e : eps) e = T(normal(rng));
    s.x_t = interpolate<T>(x0, eps, s.t, schedule);
    s.target = velocity_target<T>(x0, eps, s.t, schedule);
    out.push_back(std::move(s));
  }
  return out;
}

/// Mean over the batch of ||predict(x_t, t, c) - target||^2 / n_pixels.
template <class T, class Predict>
double velocity_loss(const std::vector<LossSample<T>>& samples, Predict&& predict) {
  require(!samples.empty(), "loss: batch must be nonempty");
  double total = 0.0;
  for (const auto& s : samples) {
    const std::vector<T> pred = predict(std::span<const T>(s.x_t), s.t, s.label);
    require(pred.size() == s.target.size(), "loss: prediction shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += double(pred[i] - s.target[i]) * double(pred[i] - s.target[i]);
    total += acc / double(pred.size());
  }
  return total / double(samples.size());
}

/// Loss and its gradient with respect to the network parameters. Per-sample
/// terms run in parallel and are reduced in sample order.
template <class T>
double loss_and_gradient(const VelocityNet<T>& net, const std::vector<LossSample<T>>& samples, Parameters<T>& grads) {
  require(!samples.empty(), "loss: batch must be nonempty");
  const std::size_t b = samples.size();
  std::vector<Parameters<T>> partial(b);
  std::vector<double> losses(b);
  parallel_for(int(b), [&](int i) {
    const auto& s = samples[std::size_t(i)];
    typename VelocityNet<T>::Cache cache;
    const auto pred = net.forward_cached(s.x_t, s.t, s.label, cache);
    const double n = double(pred.size());
    std::vector<T> d_out(pred.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const double r = double(pred[k]) - double(s.target[k]);
      acc += r * r;
      d_out[k] = T(2.0 * r / (n * double(b)));
    }
    losses[std::size_t(i)] = acc / n;
    partial[std::size_t(i)] = net.params().zeros_like();
    net.backward(cache, d_out, partial[std::size_t(i)]);
  });
  grads = std::move(partial[0]);
  for (std::size_t i = 1; i < b; ++i)
    for (std::size_t ti = 0; ti < grads.tensors.size(); ++ti) {
      auto& dst = grads.tensors[ti].data;
      const auto& src = partial[i].tensors[ti].data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  return std::accumulate(losses.begin(), losses.end(), 0.0) / double(b);
}

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  Parameters<T> m;
  Parameters<T> v;
  long step = 0;

  static AdamState like(const Parameters<T>& p) { return AdamState{p.zeros_like(), p.zeros_like(), 0}; }
};

/// One bias-corrected Adam update. A non-finite gradient rejects the whole
/// step before anything is modified.
template <class T>
void adam_step(Parameters<T>& params, AdamState<T>& state, const Parameters<T>& grads, const AdamConfig& config) {
  require(grads.tensors.size() == params.tensors.size(), "adam_step: gradient does not match parameters");
  for (std::size_t ti = 0; ti < grads.tensors.size(); ++ti) {
    require(grads.tensors[ti].data.size() == params.tensors[ti].data.size(),
            "adam_step: shape mismatch for " + params.tensors[ti].name);
    for (T g : grads.tensors[ti].data)
      if (!std::isfinite(double(g))) throw NumericalError("non-finite gradient in parameter " + grads.tensors[ti].name);
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(config.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, double(state.step));
  for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
    auto& p = params.tensors[ti].data;
    auto& m = state.m.tensors[ti].data;
    auto& v = state.v.tensors[ti].data;
    const auto& g = grads.tensors[ti].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = T(config.beta1 * m[k] + (1.0 - config.beta1) * g[k]);
      v[k] = T(config.beta2 * v[k] + (1.0 - config.beta2) * double(g[k]) * double(g[k]));
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] = T(p[k] - config.learning_rate * mhat / (std::sqrt(vhat) + config.eps));
    }
  }
}

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch_size = 8;
  int n_iters = 2000;
  double label_dropout = 0.1;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 writes only the final checkpoint
  int log_every = 50;

  void validate() const {
    require(learning_rate > 0.0, "TrainConfig: learning_rate must be > 0");
    require(label_dropout >= 0.0 && label_dropout <= 1.0, "TrainConfig: label_dropout must lie in [0, 1]");
    require(batch_size >= 1 && n_iters >= 0 && log_every >= 1 && checkpoint_every >= 0,
            "TrainConfig: invalid batch_size/n_iters/log_every/checkpoint_every");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "TrainConfig: betas must lie in [0, 1)");
  }
};

inline Json to_json(const ModelConfig& c) {
  return Json{{"variant", to_string(c.variant)},
              {"image_size", c.image_size},
              {"patch_size", c.patch_size},
              {"depth", c.depth},
              {"hidden_size", c.hidden_size},
              {"n_heads", c.n_heads},
              {"n_labels", c.n_labels},
              {"mlp_ratio", c.mlp_ratio},
              {"freq_dim", c.freq_dim},
              {"data_offset", c.data_offset},
              {"data_scale", c.data_scale}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  check_keys(j,
             {"variant", "image_size", "patch_size", "depth", "hidden_size", "n_heads", "n_labels", "mlp_ratio",
              "freq_dim", "data_offset", "data_scale"},
             "model_config");
  ModelConfig c;
  if (j.contains("variant")) {
    const auto v = model_variant_from_string(j.at("variant").get<std::string>());
    c = ModelConfig::preset(v, c.image_size, c.patch_size, c.n_labels);
  }
  read_opt(j, "image_size", c.image_size);
  read_opt(j, "patch_size", c.patch_size);
  read_opt(j, "depth", c.depth);
  read_opt(j, "hidden_size", c.hidden_size);
  read_opt(j, "n_heads", c.n_heads);
  read_opt(j, "n_labels", c.n_labels);
  read_opt(j, "mlp_ratio", c.mlp_ratio);
  read_opt(j, "freq_dim", c.freq_dim);
  read_opt(j, "data_offset", c.data_offset);
  read_opt(j, "data_scale", c.data_scale);
  c.validate();
  return c;
}

inline Json to_json(const InterpolantSchedule& s) {
  return Json{{"kind", to_string(s.kind)}, {"beta_min", s.beta_min}, {"beta_max", s.beta_max}};
}

inline InterpolantSchedule schedule_from_json(const Json& j) {
  check_keys(j, {"kind", "beta_min", "beta_max"}, "schedule");
  InterpolantSchedule s;
  if (j.contains("kind")) s.kind = schedule_kind_from_string(j.at("kind").get<std::string>());
  read_opt(j, "beta_min", s.beta_min);
  read_opt(j, "beta_max", s.beta_max);
  return s;
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"learning_rate", c.learning_rate}, {"beta1", c.beta1},
              {"beta2", c.beta2},                 {"batch_size", c.batch_size},
              {"n_iters", c.n_iters},             {"label_dropout", c.label_dropout},
              {"seed", c.seed},                   {"checkpoint_every", c.checkpoint_every},
              {"log_every", c.log_every}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  check_keys(j,
             {"learning_rate", "beta1", "beta2", "batch_size", "n_iters", "label_dropout", "seed", "checkpoint_every",
              "log_every"},
             "train");
  TrainConfig c;
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "beta1", c.beta1);
  read_opt(j, "beta2", c.beta2);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "n_iters", c.n_iters);
  read_opt(j, "label_dropout", c.label_dropout);
  read_opt(j, "seed", c.seed);
  read_opt(j, "checkpoint_every", c.checkpoint_every);
  read_opt(j, "log_every", c.log_every);
  c.validate();
  return c;
}

inline constexpr char kCheckpointMagic[] = "CDPIRCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  InterpolantSchedule schedule;
  long iteration = 0;
  Parameters<float> params;
};

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, 9);
  detail::put_u32(out, kCheckpointVersion);
  const Json header{{"model_config", to_json(ckpt.config)},
                    {"schedule", to_json(ckpt.schedule)},
                    {"iteration", ckpt.iteration},
                    {"n_tensors", ckpt.params.tensors.size()}};
  const std::string text = header.dump();
  detail::put_u32(out, std::uint32_t(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : ckpt.params.tensors) {
    detail::put_u32(out, std::uint32_t(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_u32(out, std::uint32_t(t.dims.size()));
    for (int d : t.dims) detail::put_u32(out, std::uint32_t(d));
    for (float v : t.data) detail::put_f32(out, v);
  }
  return out;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint make_checkpoint(const VelocityNet<float>& net, const InterpolantSchedule& schedule, long iteration) {
  return Checkpoint{net.config(), schedule, iteration, net.params()};
}

/// Parses a checkpoint. When `expected` is given, its model configuration must
/// match the stored one exactly.
inline Checkpoint decode_checkpoint(const std::string& bytes, const ModelConfig* expected = nullptr,
                                     const std::string& origin = "<memory>") {
  detail::ByteReader in(bytes, origin);
  if (in.raw(9) != std::string(kCheckpointMagic, 9)) throw DataError(origin + ": not a checkpoint (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t header_len = in.u32();
  const std::string header_bytes = in.raw(header_len);
  Json header;
  try {
    header = Json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const Json::exception& e) {
    throw DataError(std::string("checkpoint: corrupt header: ") + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.config = model_config_from_json(header.at("model_config"));
    ckpt.schedule = schedule_from_json(header.at("schedule"));
    ckpt.iteration = header.at("iteration").get<long>();
  } catch (const Json::exception& e) {
    throw DataError(std::string("checkpoint: corrupt header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("checkpoint: invalid model config: ") + e.what());
  }
  if (expected && !(*expected == ckpt.config)) {
    std::string what = "checkpoint: config mismatch:";
    const Json a = to_json(*expected), b = to_json(ckpt.config);
    for (const auto& item : a.items())
      if (item.value() != b.at(item.key()))
        what += " " + item.key() + " expected " + item.value().dump() + " found " + b.at(item.key()).dump();
    throw DataError(what);
  }
  // The layout is fixed by the configuration; stored tensors must match it.
  VelocityNet<float> reference(ckpt.config);
  ckpt.params = reference.params();
  const std::size_t n = header.value("n_tensors", std::size_t(0));
  if (n != ckpt.params.tensors.size()) throw DataError("checkpoint: tensor count does not match configuration");
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = in.raw(in.u32());
    auto& t = ckpt.params.tensors[i];
    if (name != t.name) throw DataError("checkpoint: unexpected tensor '" + name + "' (expected '" + t.name + "')");
    const std::uint32_t rank = in.u32();
    if (rank != t.dims.size()) throw DataError("checkpoint: rank mismatch for " + name);
    for (int d : t.dims)
      if (in.u32() != std::uint32_t(d)) throw DataError("checkpoint: shape mismatch for " + name);
    for (auto& v : t.data) v = in.f32();
  }
  if (!in.at_end()) throw DataError("checkpoint: trailing bytes");
  return ckpt;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  return decode_checkpoint(detail::read_file(path), expected, path.string());
}

inline VelocityNet<float> model_from_checkpoint(const Checkpoint& ckpt) {
  VelocityNet<float> net(ckpt.config);
  net.params() = ckpt.params;
  return net;
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;                     // one per iteration
  std::vector<std::pair<int, double>> loss_log;  // (iteration, mean loss over the interval)
};

/// Mean of the first and last `window` entries of a loss curve.
inline std::pair<double, double> smoothed_endpoints(const std::vector<double>& losses, std::size_t window) {
  require(!losses.empty(), "smoothed_endpoints: empty curve");
  window = std::min(window, losses.size());
  const double head = std::accumulate(losses.begin(), losses.begin() + long(window), 0.0) / double(window);
  const double tail = std::accumulate(losses.end() - long(window), losses.end(), 0.0) / double(window);
  return {head, tail};
}

/// Trains from a fresh initialization. With an output directory, writes
/// loss.csv, periodic checkpoint_<iter>.ckpt files and model.ckpt.
inline TrainResult train(const std::vector<TrainingExample>& data, const ModelConfig& model_config,
                         const TrainConfig& config, const InterpolantSchedule& schedule,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  config.validate();
  model_config.validate();
  if (data.empty()) throw DataError("train: dataset is empty");
  for (const auto& ex : data) {
    if (ex.label < 0 || ex.label >= model_config.n_labels)
      throw DataError("train: example label " + std::to_string(ex.label) + " outside [0, " +
                      std::to_string(model_config.n_labels) + ")");
    if (ex.image.size() != std::size_t(model_config.n_pixels()))
      throw DataError("train: example size does not match image_size " + std::to_string(model_config.image_size));
  }

  VelocityNet<float> net(model_config);
  net.initialize(config.seed, true);
  auto adam = AdamState<float>::like(net.params());
  const AdamConfig adam_config{config.learning_rate, config.beta1, config.beta2, 1e-8};
  Engine rng = make_engine(config.seed, 0x7A1);

  std::optional<std::ofstream> csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    csv.emplace(*out_dir / "loss.csv");
    *csv << "iter,loss\n";
  }

  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  Parameters<float> grads;
  double interval_sum = 0.0;
  int interval_count = 0;
  for (int it = 1; it <= config.n_iters; ++it) {
    std::vector<const TrainingExample*> batch;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t(0));
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    const auto samples = draw_loss_samples<float>(batch, model_config, schedule, config.label_dropout, rng);
    const double loss = loss_and_gradient(net, samples, grads);
    adam_step(net.params(), adam, grads, adam_config);
    result.losses.push_back(loss);
    interval_sum += loss;
    ++interval_count;
    if (it % config.log_every == 0 || it == config.n_iters) {
      const double mean = interval_sum / interval_count;
      result.loss_log.emplace_back(it, mean);
      if (csv) *csv << it << ',' << format_metric(mean) << '\n';
      interval_sum = 0.0;
      interval_count = 0;
    }
    if (out_dir && config.checkpoint_every > 0 && it % config.checkpoint_every == 0)
      save_checkpoint(make_checkpoint(net, schedule, it), *out_dir / ("checkpoint_" + std::to_string(it) + ".ckpt"));
  }
  result.checkpoint = make_checkpoint(net, schedule, config.n_iters);
  if (out_dir) save_checkpoint(result.checkpoint, *out_dir / "model.ckpt");
  return result;
}

}  // namespace cdpir
