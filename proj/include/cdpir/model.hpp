#pragma once

// Pixel-space diffusion transformer v(x, t; c).
//
// Layout: non-overlapping p x p patches -> linear embedding + fixed 2D sin-cos
// positions -> `depth` pre-norm blocks (self-attention + GELU MLP) whose norms
// are modulated by a conditioning vector (adaptive layer norm with gates) ->
// modulated final norm -> linear head -> unpatchify. The conditioning vector
// is the sum of an MLP-embedded sinusoidal timestep and a label embedding; the
// label table carries one extra row for the null token.
//
// backward() implements reverse-mode differentiation for exactly this
// architecture. It consumes the activations recorded by forward_cached().

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdpir/errors.hpp"
#include "cdpir/random.hpp"

namespace cdpir {

inline constexpr int kNullLabel = -1;

enum class ModelVariant { Big, Small, Tiny, Custom };

inline std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::Big: return "big";
    case ModelVariant::Small: return "small";
    case ModelVariant::Tiny: return "tiny";
    case ModelVariant::Custom: return "custom";
  }
  return "unknown";
}

inline ModelVariant model_variant_from_string(const std::string& s) {
  if (s == "big") return ModelVariant::Big;
  if (s == "small") return ModelVariant::Small;
  if (s == "tiny") return ModelVariant::Tiny;
  if (s == "custom") return ModelVariant::Custom;
  throw UsageError("unknown model variant '" + s + "'");
}

struct ModelConfig {
  ModelVariant variant = ModelVariant::Tiny;
  int image_size = 64;
  int patch_size = 2;
  int depth = 4;
  int hidden_size = 128;
  int n_heads = 4;
  int n_labels = 2;
  int mlp_ratio = 4;
  int freq_dim = 256;
  // Images enter the network as (x - data_offset) * data_scale.
  double data_offset = 0.5;
  double data_scale = 2.0;

  /// Big/Small follow depth 12 with hidden 768/384 and 12/6 heads; Tiny is
  /// the desk-scale default.
  static ModelConfig preset(ModelVariant variant, int image_size, int patch_size = 2, int n_labels = 2) {
    ModelConfig c;
    c.variant = variant;
    c.image_size = image_size;
    c.patch_size = patch_size;
    c.n_labels = n_labels;
    switch (variant) {
      case ModelVariant::Big: c.depth = 12, c.hidden_size = 768, c.n_heads = 12; break;
      case ModelVariant::Small: c.depth = 12, c.hidden_size = 384, c.n_heads = 6; break;
      case ModelVariant::Tiny: c.depth = 4, c.hidden_size = 128, c.n_heads = 4; break;
      case ModelVariant::Custom: break;
    }
    return c;
  }

  int grid_side() const { return image_size / patch_size; }
  int n_tokens() const { return grid_side() * grid_side(); }
  int patch_dim() const { return patch_size * patch_size; }
  int head_dim() const { return hidden_size / n_heads; }
  int mlp_hidden() const { return mlp_ratio * hidden_size; }
  int n_pixels() const { return image_size * image_size; }

  void validate() const {
    require(image_size >= 1 && patch_size >= 1 && image_size % patch_size == 0,
            "ModelConfig: image_size must be divisible by patch_size");
    require(hidden_size >= 4 && hidden_size % n_heads == 0, "ModelConfig: hidden_size must be divisible by n_heads");
    require(hidden_size % 4 == 0, "ModelConfig: hidden_size must be divisible by 4 (2D positional embedding)");
    require(depth >= 0 && n_labels >= 1 && mlp_ratio >= 1, "ModelConfig: invalid depth/labels/mlp_ratio");
    require(freq_dim >= 2 && freq_dim % 2 == 0, "ModelConfig: freq_dim must be even");
    require(data_scale != 0.0, "ModelConfig: data_scale must be nonzero");
  }

  /// Closed-form learnable parameter count.
  std::size_t parameter_count() const {
    const std::size_t d = hidden_size, p = patch_dim(), f = freq_dim, h = mlp_hidden(), l = n_labels;
    const std::size_t embed = p * d + d;
    const std::size_t time = f * d + d + d * d + d;
    const std::size_t label = (l + 1) * d;
    const std::size_t block = (d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
    const std::size_t final_layer = (d * 2 * d + 2 * d) + (d * p + p);
    return embed + time + label + std::size_t(depth) * block + final_layer;
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Storage with Eigen's maximal alignment. Vectorized kernels peel loops by
/// address, so a fixed alignment keeps results identical across allocations.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct NamedTensor {
  std::string name;
  std::vector<int> dims;
  AlignedVector<T> data;
};

/// Learnable tensors addressed by stable names, stored in a fixed order.
template <class T>
class Parameters {
 public:
  std::vector<NamedTensor<T>> tensors;

  std::size_t add(std::string name, std::vector<int> dims) {
    std::size_t n = 1;
    for (int d : dims) n *= std::size_t(d);
    index_[name] = tensors.size();
    tensors.push_back(NamedTensor<T>{std::move(name), std::move(dims), AlignedVector<T>(n, T(0))});
    return tensors.size() - 1;
  }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no parameter named '" + name + "'");
    return it->second;
  }
  NamedTensor<T>& operator[](const std::string& name) { return tensors[index(name)]; }
  const NamedTensor<T>& operator[](const std::string& name) const { return tensors[index(name)]; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.data.size();
    return n;
  }

  Parameters zeros_like() const {
    Parameters out = *this;
    for (auto& t : out.tensors) std::fill(t.data.begin(), t.data.end(), T(0));
    return out;
  }

  void set_zero() {
    for (auto& t : tensors) std::fill(t.data.begin(), t.data.end(), T(0));
  }

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (const auto& t : tensors) {
      const auto i = out.add(t.name, t.dims);
      out.tensors[i].data.assign(t.data.begin(), t.data.end());
    }
    return out;
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
class VelocityNet {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;
  using VecMap = Eigen::Map<Vec>;
  using ConstVecMap = Eigen::Map<const Vec>;

  struct BlockCache {
    Mat x_in, xhat1, h1, qkv, attn, a, x_mid, xhat2, h2, f_pre, f_act, m;
    Vec rstd1, rstd2, mod;
    std::vector<Mat> probs;
  };

  struct Cache {
    Mat patches;
    Vec t_freq, t_pre, t_act, cond, silu_cond, mod_final, rstd_final;
    Mat x_final, xhat_final, h_final;
    int label = kNullLabel;
    std::vector<BlockCache> blocks;
  };

  explicit VelocityNet(ModelConfig config) : config_(config) {
    config_.validate();
    build_layout();
    make_position_embedding();
  }

  const ModelConfig& config() const { return config_; }
  Parameters<T>& params() { return params_; }
  const Parameters<T>& params() const { return params_; }

  /// DiT-style initialization. With zero_init the modulation layers and the
  /// output head start at zero, so the initial prediction is exactly 0.
  void initialize(std::uint64_t seed, bool zero_init = true) {
    Engine rng = make_engine(seed, 0x1417);
    std::normal_distribution<double> small(0.0, 0.02);
    auto xavier = [&](std::size_t idx) {
      auto& t = params_.tensors[idx];
      const double limit = std::sqrt(6.0 / double(t.dims[0] + t.dims[1]));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (auto& v : t.data) v = T(u(rng));
    };
    auto normal = [&](std::size_t idx) {
      for (auto& v : params_.tensors[idx].data) v = T(small(rng));
    };
    params_.set_zero();
    xavier(ix_.embed_w);
    normal(ix_.time_fc1_w);
    normal(ix_.time_fc2_w);
    normal(ix_.label_table);
    for (const auto& b : ix_.blocks) {
      xavier(b.qkv_w);
      xavier(b.proj_w);
      xavier(b.fc1_w);
      xavier(b.fc2_w);
      if (!zero_init) normal(b.ada_w);
    }
    if (!zero_init) {
      normal(ix_.final_ada_w);
      normal(ix_.head_w);
    }
  }

  void check_label(int label) const {
    if (label != kNullLabel && (label < 0 || label >= config_.n_labels))
      throw std::invalid_argument("label " + std::to_string(label) + " out of range [0, " +
                                  std::to_string(config_.n_labels) + ") and not the null token");
  }

  std::vector<T> forward(std::span<const T> x, double t, int label) const {
    Cache cache;
    return forward_cached(x, t, label, cache);
  }

  std::vector<T> forward_cached(std::span<const T> x, double t, int label, Cache& cache) const {
    require(x.size() == std::size_t(config_.n_pixels()), "forward: input does not match image_size");
    check_label(label);
    const int n = config_.n_tokens(), d = config_.hidden_size;

    // Conditioning vector.
    cache.label = label;
    cache.t_freq = timestep_features(t);
    cache.t_pre = linear_vec(ix_.time_fc1_w, ix_.time_fc1_b, cache.t_freq);
    cache.t_act = cache.t_pre.unaryExpr([](T v) { return silu(v); });
    cache.cond = linear_vec(ix_.time_fc2_w, ix_.time_fc2_b, cache.t_act);
    cache.cond += label_row(label);
    cache.silu_cond = cache.cond.unaryExpr([](T v) { return silu(v); });

    // Patch embedding.
    cache.patches = patchify(x);
    Mat h = linear(ix_.embed_w, ix_.embed_b, cache.patches);
    h += pos_embed_;

    cache.blocks.resize(std::size_t(config_.depth));
    for (int b = 0; b < config_.depth; ++b) h = block_forward(ix_.blocks[b], h, cache.silu_cond, cache.blocks[b]);

    cache.x_final = h;
    cache.mod_final = linear_vec(ix_.final_ada_w, ix_.final_ada_b, cache.silu_cond);
    const auto shift = cache.mod_final.segment(0, d);
    const auto scale = cache.mod_final.segment(d, d);
    layer_norm(h, cache.xhat_final, cache.rstd_final);
    cache.h_final = modulate(cache.xhat_final, shift, scale);
    const Mat out = linear(ix_.head_w, ix_.head_b, cache.h_final);
    (void)n;
    return unpatchify(out);
  }

  /// Accumulates d(loss)/d(params) into grads given d(loss)/d(output).
  void backward(const Cache& cache, std::span<const T> d_out, Parameters<T>& grads) const {
    require(d_out.size() == std::size_t(config_.n_pixels()), "backward: gradient does not match image_size");
    const int d = config_.hidden_size;
    Vec d_silu_cond = Vec::Zero(d);

    // Head and final modulated norm.
    const Mat d_head = patchify(d_out);
    Mat d_h = linear_backward(ix_.head_w, ix_.head_b, cache.h_final, d_head, grads);
    Vec d_mod_final(2 * d);
    const auto scale = cache.mod_final.segment(d, d);
    d_mod_final.segment(0, d) = d_h.colwise().sum().transpose();
    d_mod_final.segment(d, d) = (d_h.array() * cache.xhat_final.array()).colwise().sum().transpose();
    Mat d_xhat = d_h.array().rowwise() * (scale.array() + T(1)).transpose();
    Mat d_x = layer_norm_backward(d_xhat, cache.xhat_final, cache.rstd_final);
    linear_vec_backward(ix_.final_ada_w, ix_.final_ada_b, cache.silu_cond, d_mod_final, grads, d_silu_cond);

    for (int b = config_.depth - 1; b >= 0; --b)
      d_x = block_backward(ix_.blocks[b], cache.blocks[b], cache.silu_cond, d_x, grads, d_silu_cond);

    // Patch embedding (positions are fixed).
    linear_backward(ix_.embed_w, ix_.embed_b, cache.patches, d_x, grads);

    // Conditioning path.
    const Vec d_cond = (d_silu_cond.array() * cache.cond.unaryExpr([](T v) { return silu_grad(v); }).array()).matrix();
    {
      auto& table = grads.tensors[ix_.label_table].data;
      const std::size_t row = std::size_t(cache.label == kNullLabel ? config_.n_labels : cache.label);
      for (int k = 0; k < d; ++k) table[row * d + k] += d_cond[k];
    }
    Vec d_t_act = Vec::Zero(d);
    linear_vec_backward(ix_.time_fc2_w, ix_.time_fc2_b, cache.t_act, d_cond, grads, d_t_act);
    const Vec d_t_pre = (d_t_act.array() * cache.t_pre.unaryExpr([](T v) { return silu_grad(v); }).array()).matrix();
    Vec d_freq = Vec::Zero(config_.freq_dim);
    linear_vec_backward(ix_.time_fc1_w, ix_.time_fc1_b, cache.t_freq, d_t_pre, grads, d_freq);
  }

 private:
  struct BlockIndex {
    std::size_t ada_w, ada_b, qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  struct Index {
    std::size_t embed_w, embed_b, time_fc1_w, time_fc1_b, time_fc2_w, time_fc2_b, label_table;
    std::vector<BlockIndex> blocks;
    std::size_t final_ada_w, final_ada_b, head_w, head_b;
  };

  static T silu(T v) { return v / (T(1) + std::exp(-v)); }
  static T silu_grad(T v) {
    const T s = T(1) / (T(1) + std::exp(-v));
    return s * (T(1) + v * (T(1) - s));
  }
  static constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2 / pi)
  static T gelu(T v) { return T(0.5) * v * (T(1) + std::tanh(kGeluC * (v + T(0.044715) * v * v * v))); }
  static T gelu_grad(T v) {
    const T th = std::tanh(kGeluC * (v + T(0.044715) * v * v * v));
    return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * kGeluC * (T(1) + T(3 * 0.044715) * v * v);
  }

  void build_layout() {
    const int d = config_.hidden_size, p = config_.patch_dim(), f = config_.freq_dim, h = config_.mlp_hidden();
    ix_.embed_w = params_.add("x_embed.weight", {d, p});
    ix_.embed_b = params_.add("x_embed.bias", {d});
    ix_.time_fc1_w = params_.add("t_embed.fc1.weight", {d, f});
    ix_.time_fc1_b = params_.add("t_embed.fc1.bias", {d});
    ix_.time_fc2_w = params_.add("t_embed.fc2.weight", {d, d});
    ix_.time_fc2_b = params_.add("t_embed.fc2.bias", {d});
    ix_.label_table = params_.add("y_embed.table", {config_.n_labels + 1, d});
    for (int b = 0; b < config_.depth; ++b) {
      const std::string pre = "blocks." + std::to_string(b) + ".";
      BlockIndex bi;
      bi.ada_w = params_.add(pre + "ada.weight", {6 * d, d});
      bi.ada_b = params_.add(pre + "ada.bias", {6 * d});
      bi.qkv_w = params_.add(pre + "attn.qkv.weight", {3 * d, d});
      bi.qkv_b = params_.add(pre + "attn.qkv.bias", {3 * d});
      bi.proj_w = params_.add(pre + "attn.proj.weight", {d, d});
      bi.proj_b = params_.add(pre + "attn.proj.bias", {d});
      bi.fc1_w = params_.add(pre + "mlp.fc1.weight", {h, d});
      bi.fc1_b = params_.add(pre + "mlp.fc1.bias", {h});
      bi.fc2_w = params_.add(pre + "mlp.fc2.weight", {d, h});
      bi.fc2_b = params_.add(pre + "mlp.fc2.bias", {d});
      ix_.blocks.push_back(bi);
    }
    ix_.final_ada_w = params_.add("final.ada.weight", {2 * d, d});
    ix_.final_ada_b = params_.add("final.ada.bias", {2 * d});
    ix_.head_w = params_.add("final.linear.weight", {p, d});
    ix_.head_b = params_.add("final.linear.bias", {p});
  }

  // Fixed 2D sin-cos positions: first half encodes the column, second the row.
  void make_position_embedding() {
    const int side = config_.grid_side(), d = config_.hidden_size, quarter = d / 4;
    pos_embed_ = Mat::Zero(config_.n_tokens(), d);
    for (int gy = 0; gy < side; ++gy)
      for (int gx = 0; gx < side; ++gx) {
        const int row = gy * side + gx;
        for (int i = 0; i < quarter; ++i) {
          const double omega = 1.0 / std::pow(10000.0, double(i) / quarter);
          pos_embed_(row, i) = T(std::sin(gx * omega));
          pos_embed_(row, quarter + i) = T(std::cos(gx * omega));
          pos_embed_(row, 2 * quarter + i) = T(std::sin(gy * omega));
          pos_embed_(row, 3 * quarter + i) = T(std::cos(gy * omega));
        }
      }
  }

  Vec timestep_features(double t) const {
    const int half = config_.freq_dim / 2;
    const double scaled = 1000.0 * t;
    Vec out(config_.freq_dim);
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out[i] = T(std::cos(scaled * freq));
      out[half + i] = T(std::sin(scaled * freq));
    }
    return out;
  }

  Vec label_row(int label) const {
    const int d = config_.hidden_size;
    const std::size_t row = std::size_t(label == kNullLabel ? config_.n_labels : label);
    return ConstVecMap(params_.tensors[ix_.label_table].data.data() + row * d, d);
  }

  Mat patchify(std::span<const T> img) const {
    const int p = config_.patch_size, side = config_.grid_side(), w = config_.image_size;
    Mat out(config_.n_tokens(), config_.patch_dim());
    for (int gy = 0; gy < side; ++gy)
      for (int gx = 0; gx < side; ++gx)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            out(gy * side + gx, py * p + px) = img[std::size_t(gy * p + py) * w + gx * p + px];
    return out;
  }

  std::vector<T> unpatchify(const Mat& tokens) const {
    const int p = config_.patch_size, side = config_.grid_side(), w = config_.image_size;
    std::vector<T> img(std::size_t(config_.n_pixels()));
    for (int gy = 0; gy < side; ++gy)
      for (int gx = 0; gx < side; ++gx)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            img[std::size_t(gy * p + py) * w + gx * p + px] = tokens(gy * side + gx, py * p + px);
    return img;
  }

  ConstMatMap weight(std::size_t idx) const {
    const auto& t = params_.tensors[idx];
    return ConstMatMap(t.data.data(), t.dims[0], t.dims[1]);
  }
  ConstVecMap bias(std::size_t idx) const {
    const auto& t = params_.tensors[idx];
    return ConstVecMap(t.data.data(), Eigen::Index(t.data.size()));
  }

  Mat linear(std::size_t w, std::size_t b, const Mat& x) const {
    Mat y(x.rows(), weight(w).rows());
    y.noalias() = x * weight(w).transpose();
    y.rowwise() += bias(b).transpose();
    return y;
  }

  Vec linear_vec(std::size_t w, std::size_t b, const Vec& x) const {
    Vec y = bias(b);
    y.noalias() += weight(w) * x;
    return y;
  }

  /// Returns dX and accumulates dW += dY^T X, db += colsum(dY).
  Mat linear_backward(std::size_t w, std::size_t b, const Mat& x, const Mat& dy, Parameters<T>& grads) const {
    auto& gw = grads.tensors[w];
    auto& gb = grads.tensors[b];
    MatMap(gw.data.data(), gw.dims[0], gw.dims[1]).noalias() += dy.transpose() * x;
    VecMap(gb.data.data(), Eigen::Index(gb.data.size())) += dy.colwise().sum().transpose();
    Mat dx(dy.rows(), x.cols());
    dx.noalias() = dy * weight(w);
    return dx;
  }

  void linear_vec_backward(std::size_t w, std::size_t b, const Vec& x, const Vec& dy, Parameters<T>& grads,
                           Vec& dx_accum) const {
    auto& gw = grads.tensors[w];
    auto& gb = grads.tensors[b];
    MatMap(gw.data.data(), gw.dims[0], gw.dims[1]).noalias() += dy * x.transpose();
    VecMap(gb.data.data(), Eigen::Index(gb.data.size())) += dy;
    dx_accum.noalias() += weight(w).transpose() * dy;
  }

  static void layer_norm(const Mat& x, Mat& xhat, Vec& rstd) {
    const Eigen::Index n = x.rows(), d = x.cols();
    xhat.resize(n, d);
    rstd.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      const T mean = x.row(r).mean();
      const T var = (x.row(r).array() - mean).square().mean();
      rstd[r] = T(1) / std::sqrt(var + T(1e-6));
      xhat.row(r) = (x.row(r).array() - mean) * rstd[r];
    }
  }

  static Mat layer_norm_backward(const Mat& dxhat, const Mat& xhat, const Vec& rstd) {
    Mat dx(dxhat.rows(), dxhat.cols());
    for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
      const T mean_d = dxhat.row(r).mean();
      const T mean_dx = (dxhat.row(r).array() * xhat.row(r).array()).mean();
      dx.row(r) = rstd[r] * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
    }
    return dx;
  }

  template <class Seg>
  static Mat modulate(const Mat& xhat, const Seg& shift, const Seg& scale) {
    Mat out = xhat.array().rowwise() * (scale.array() + T(1)).transpose();
    out.rowwise() += shift.transpose();
    return out;
  }

  Mat block_forward(const BlockIndex& bi, const Mat& x, const Vec& silu_cond, BlockCache& c) const {
    const int d = config_.hidden_size, heads = config_.n_heads, hd = config_.head_dim(), n = config_.n_tokens();
    c.x_in = x;
    c.mod = linear_vec(bi.ada_w, bi.ada_b, silu_cond);
    const auto shift1 = c.mod.segment(0, d), scale1 = c.mod.segment(d, d), gate1 = c.mod.segment(2 * d, d);
    const auto shift2 = c.mod.segment(3 * d, d), scale2 = c.mod.segment(4 * d, d), gate2 = c.mod.segment(5 * d, d);

    layer_norm(x, c.xhat1, c.rstd1);
    c.h1 = modulate(c.xhat1, shift1, scale1);
    c.qkv = linear(bi.qkv_w, bi.qkv_b, c.h1);
    c.attn.resize(n, d);
    c.probs.resize(std::size_t(heads));
    const T scale = T(1) / std::sqrt(T(hd));
    for (int h = 0; h < heads; ++h) {
      const auto q = c.qkv.middleCols(h * hd, hd);
      const auto k = c.qkv.middleCols(d + h * hd, hd);
      const auto v = c.qkv.middleCols(2 * d + h * hd, hd);
      Mat& p = c.probs[h];
      p.resize(n, n);
      p.noalias() = (q * k.transpose()) * scale;
      for (int r = 0; r < n; ++r) {
        const T mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      c.attn.middleCols(h * hd, hd).noalias() = p * v;
    }
    c.a = linear(bi.proj_w, bi.proj_b, c.attn);
    c.x_mid = x + (c.a.array().rowwise() * gate1.array().transpose()).matrix();

    layer_norm(c.x_mid, c.xhat2, c.rstd2);
    c.h2 = modulate(c.xhat2, shift2, scale2);
    c.f_pre = linear(bi.fc1_w, bi.fc1_b, c.h2);
    c.f_act = c.f_pre.unaryExpr([](T v) { return gelu(v); });
    c.m = linear(bi.fc2_w, bi.fc2_b, c.f_act);
    return c.x_mid + (c.m.array().rowwise() * gate2.array().transpose()).matrix();
  }

  Mat block_backward(const BlockIndex& bi, const BlockCache& c, const Vec& silu_cond, const Mat& d_out,
                     Parameters<T>& grads, Vec& d_silu_cond) const {
    const int d = config_.hidden_size, heads = config_.n_heads, hd = config_.head_dim(), n = config_.n_tokens();
    const auto scale1 = c.mod.segment(d, d), gate1 = c.mod.segment(2 * d, d);
    const auto scale2 = c.mod.segment(4 * d, d), gate2 = c.mod.segment(5 * d, d);
    Vec d_mod(6 * d);

    // MLP branch: out = x_mid + gate2 * m.
    d_mod.segment(5 * d, d) = (d_out.array() * c.m.array()).colwise().sum().transpose();
    const Mat d_m = d_out.array().rowwise() * gate2.array().transpose();
    Mat d_f = linear_backward(bi.fc2_w, bi.fc2_b, c.f_act, d_m, grads);
    d_f.array() *= c.f_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    const Mat d_h2 = linear_backward(bi.fc1_w, bi.fc1_b, c.h2, d_f, grads);
    d_mod.segment(3 * d, d) = d_h2.colwise().sum().transpose();
    d_mod.segment(4 * d, d) = (d_h2.array() * c.xhat2.array()).colwise().sum().transpose();
    const Mat d_xhat2 = d_h2.array().rowwise() * (scale2.array() + T(1)).transpose();
    Mat d_mid = d_out + layer_norm_backward(d_xhat2, c.xhat2, c.rstd2);

    // Attention branch: x_mid = x_in + gate1 * a.
    d_mod.segment(2 * d, d) = (d_mid.array() * c.a.array()).colwise().sum().transpose();
    const Mat d_a = d_mid.array().rowwise() * gate1.array().transpose();
    const Mat d_attn = linear_backward(bi.proj_w, bi.proj_b, c.attn, d_a, grads);
    Mat d_qkv(n, 3 * d);
    const T scale = T(1) / std::sqrt(T(hd));
    Mat d_p(n, n);
    for (int h = 0; h < heads; ++h) {
      const auto q = c.qkv.middleCols(h * hd, hd);
      const auto k = c.qkv.middleCols(d + h * hd, hd);
      const auto v = c.qkv.middleCols(2 * d + h * hd, hd);
      const Mat& p = c.probs[h];
      const auto d_o = d_attn.middleCols(h * hd, hd);
      d_qkv.middleCols(2 * d + h * hd, hd).noalias() = p.transpose() * d_o;
      d_p.noalias() = d_o * v.transpose();
      const Vec row_dot = (d_p.array() * p.array()).rowwise().sum();
      d_p = (p.array() * (d_p.colwise() - row_dot).array()) * scale;
      d_qkv.middleCols(h * hd, hd).noalias() = d_p * k;
      d_qkv.middleCols(d + h * hd, hd).noalias() = d_p.transpose() * q;
    }
    const Mat d_h1 = linear_backward(bi.qkv_w, bi.qkv_b, c.h1, d_qkv, grads);
    d_mod.segment(0, d) = d_h1.colwise().sum().transpose();
    d_mod.segment(d, d) = (d_h1.array() * c.xhat1.array()).colwise().sum().transpose();
    const Mat d_xhat1 = d_h1.array().rowwise() * (scale1.array() + T(1)).transpose();
    d_mid += layer_norm_backward(d_xhat1, c.xhat1, c.rstd1);

    linear_vec_backward(bi.ada_w, bi.ada_b, silu_cond, d_mod, grads, d_silu_cond);
    return d_mid;
  }

  ModelConfig config_;
  Parameters<T> params_;
  Index ix_;
  Mat pos_embed_;
};

/// Adds N(0, stddev^2) noise to every parameter; used to move away from the
/// zero-initialized head in tests.
template <class T>
void perturb_parameters(Parameters<T>& params, double stddev, std::uint64_t seed) {
  Engine rng = make_engine(seed, 0x9E7);
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& t : params.tensors)
    for (auto& v : t.data) v += T(normal(rng));
}

}  // namespace cdpir
