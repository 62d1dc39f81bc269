#pragma once

// Small conditional U-Net noise predictor eps(x_t, t, c).
//
// Layout (base width w, image HxW):
//   enc0  conv3x3 C->w            + time bias, SiLU          [w,   H,   W  ]
//   enc1  conv3x3 w->2w, stride 2 + time bias, SiLU          [2w,  H/2, W/2]
//   enc2  conv3x3 2w->4w, stride 2+ time bias, SiLU          [4w,  H/4, W/4]
//   mid   conv3x3 4w->4w          + time bias, SiLU
//   attn  mid + cross-attention over condition token embeddings
//   dec1  up x2, concat enc1, conv3x3 -> 2w + time bias, SiLU
//   dec0  up x2, concat enc0, conv3x3 -> w  + time bias, SiLU
//   out   conv3x3 w->C + bias
// Stride-2 convs are a stride-1 "same" conv followed by keeping every
// second pixel, which is the same map as a padded stride-2 conv.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dflens/diffusion.hpp"
#include "dflens/error.hpp"
#include "dflens/rng.hpp"
#include "dflens/tensor.hpp"
#include "dflens/tokens.hpp"

namespace dflens {

struct DenoiserConfig {
  int image_size = 32;
  int channels = 3;
  int base_width = 16;
  int num_tokens = 3;
  int vocab_size = vocab::kSize;
  int token_dim = 32;
  int time_dim = 32;
  int attn_dim = 32;
  bool cross_attention = true;

  bool operator==(const DenoiserConfig&) const = default;

  void validate() const {
    if (image_size < 4 || image_size % 4 != 0) {
      throw Error(concat("denoiser: image_size must be a positive multiple of 4, got ", image_size));
    }
    if (channels < 1 || base_width < 1 || num_tokens < 1 || vocab_size < 1 || token_dim < 1 || attn_dim < 1 ||
        time_dim < 2 || time_dim % 2 != 0) {
      throw Error("denoiser: invalid architecture descriptor");
    }
  }
};

inline nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"image_size", c.image_size}, {"channels", c.channels},   {"base_width", c.base_width},
          {"num_tokens", c.num_tokens}, {"vocab_size", c.vocab_size}, {"token_dim", c.token_dim},
          {"time_dim", c.time_dim},     {"attn_dim", c.attn_dim},     {"cross_attention", c.cross_attention}};
}

inline DenoiserConfig config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.num_tokens = j.at("num_tokens").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.token_dim = j.at("token_dim").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.attn_dim = j.at("attn_dim").get<int>();
  c.cross_attention = j.at("cross_attention").get<bool>();
  c.validate();
  return c;
}

/// Callback applied to each named activation; its return value replaces the
/// activation downstream. Used to capture, perturb or re-root activations.
using LayerHook = std::function<Tensor(const std::string& layer, const Tensor& activation)>;

struct ForwardTrace {
  Tensor eps_hat;
  std::map<std::string, Tensor> activations;
  Tensor attention;  // [tokens, H*W] of the bottleneck block; columns sum to 1
  bool has_attention = false;
};

/// Sinusoidal embedding of a time-step, shape [1, dim].
inline Tensor time_embedding(int t, int dim) {
  const int half = dim / 2;
  std::vector<double> e(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e[static_cast<std::size_t>(i)] = std::sin(t * freq);
    e[static_cast<std::size_t>(i + half)] = std::cos(t * freq);
  }
  return Tensor({1, static_cast<std::size_t>(dim)}, std::move(e));
}

class Denoiser {
 public:
  static constexpr std::array<const char*, 7> kLayers{"enc0", "enc1", "enc2", "mid", "attn", "dec1", "dec0"};
  static constexpr const char* kDefaultCamLayer = "dec0";

  Denoiser() : Denoiser(DenoiserConfig{}, 0) {}

  Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    KeyedRng rng(seed, streams::kInit);
    const auto w = static_cast<std::size_t>(config_.base_width);
    const auto c = static_cast<std::size_t>(config_.channels);
    const auto td = static_cast<std::size_t>(config_.time_dim);
    const auto kd = static_cast<std::size_t>(config_.token_dim);
    const auto ad = static_cast<std::size_t>(config_.attn_dim);
    // Insertion order below fixes the order of draws from rng.
    add_conv(rng, "conv_in", w, c);
    add_conv(rng, "down1", 2 * w, w);
    add_conv(rng, "down2", 4 * w, 2 * w);
    add_conv(rng, "mid", 4 * w, 4 * w);
    add_conv(rng, "up1", 2 * w, 6 * w);
    add_conv(rng, "up2", w, 3 * w);
    add_conv(rng, "conv_out", c, w);
    add_param("conv_out.b", Tensor::zeros({c}));
    const std::pair<const char*, std::size_t> stages[] = {
        {"enc0", w}, {"enc1", 2 * w}, {"enc2", 4 * w}, {"mid", 4 * w}, {"dec1", 2 * w}, {"dec0", w}};
    for (const auto& [name, width] : stages) add_linear(rng, concat("time.", name), width, td);
    if (config_.cross_attention) {
      add_param("tok_emb", random_tensor(rng, {static_cast<std::size_t>(config_.vocab_size), kd}, 1.0));
      add_linear(rng, "attn.q", ad, 4 * w);
      add_linear(rng, "attn.k", ad, kd);
      add_linear(rng, "attn.v", 4 * w, kd);
      add_linear(rng, "attn.o", 4 * w, 4 * w);
    }
  }

  const DenoiserConfig& config() const { return config_; }
  const std::map<std::string, Tensor>& parameters() const { return params_; }
  const Tensor& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error(concat("denoiser: no parameter named '", name, "'"));
    return it->second;
  }
  // Replaces a parameter's values; the shape must not change.
  void set_param(const std::string& name, std::vector<double> values) {
    const Tensor& old = param(name);
    params_[name] = Tensor(old.shape(), std::move(values), true);
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.numel();
    return n;
  }
  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    for (const char* n : kLayers) {
      if (!config_.cross_attention && std::string_view(n) == "attn") continue;
      names.emplace_back(n);
    }
    return names;
  }
  Shape input_shape() const {
    const auto s = static_cast<std::size_t>(config_.image_size);
    return {static_cast<std::size_t>(config_.channels), s, s};
  }

  /// Noise prediction. Activations and attention are recorded when `capture`
  /// is set; `hook` (optional) may replace any named activation.
  ForwardTrace forward(const Tensor& x_t, int t, const ConditionTokens& cond, bool capture,
                       const LayerHook& hook = nullptr) const {
    if (x_t.shape() != input_shape()) {
      throw ShapeError(concat("denoiser: input shape ", shape_string(x_t.shape()), " != configured ",
                              shape_string(input_shape())));
    }
    if (t < 0) throw Error(concat("denoiser: negative time-step ", t));
    if (cond.size() != static_cast<std::size_t>(config_.num_tokens)) {
      throw Error(concat("denoiser: expected ", config_.num_tokens, " condition tokens, got ", cond.size()));
    }
    for (int id : cond.ids) {
      if (id < 0 || id >= config_.vocab_size) {
        throw Error(concat("denoiser: unknown token id ", id, " (vocabulary size ", config_.vocab_size, ")"));
      }
    }
    ForwardTrace trace;
    auto tap = [&](const char* name, Tensor a) {
      if (hook) a = hook(name, a);
      if (capture) trace.activations.emplace(name, a);
      return a;
    };
    const Tensor temb = time_embedding(t, config_.time_dim);
    auto stage = [&](const char* name, const Tensor& pre) {
      const Tensor bias = linear(temb, param(concat("time.", name, ".w")), param(concat("time.", name, ".b")));
      return silu(add_bias(pre, reshape(bias, {pre.dim(0)})));
    };

    Tensor enc0 = tap("enc0", stage("enc0", conv2d(x_t, param("conv_in.w"), 1, 1)));
    Tensor enc1 = tap("enc1", stage("enc1", downsample_nearest(conv2d(enc0, param("down1.w"), 1, 1), 2)));
    Tensor enc2 = tap("enc2", stage("enc2", downsample_nearest(conv2d(enc1, param("down2.w"), 1, 1), 2)));
    Tensor mid = tap("mid", stage("mid", conv2d(enc2, param("mid.w"), 1, 1)));
    Tensor h = mid;
    if (config_.cross_attention) {
      Tensor attention;
      h = tap("attn", add(mid, cross_attention(mid, cond, attention)));
      if (capture) {
        trace.attention = attention.detach();
        trace.has_attention = true;
      }
    }
    Tensor up1 = concat_channels(upsample_nearest(h, 2), enc1);
    Tensor dec1 = tap("dec1", stage("dec1", conv2d(up1, param("up1.w"), 1, 1)));
    Tensor up2 = concat_channels(upsample_nearest(dec1, 2), enc0);
    Tensor dec0 = tap("dec0", stage("dec0", conv2d(up2, param("up2.w"), 1, 1)));
    trace.eps_hat = add_bias(conv2d(dec0, param("conv_out.w"), 1, 1), param("conv_out.b"));
    return trace;
  }

  // Inference-only noise prediction (no tape).
  Tensor predict(const Tensor& x_t, int t, const ConditionTokens& cond) const {
    NoGradGuard no_grad;
    return forward(x_t, t, cond, false).eps_hat;
  }

 private:
  Tensor cross_attention(const Tensor& h, const ConditionTokens& cond, Tensor& attention_out) const {
    const std::size_t ch = h.dim(0), hw = h.dim(1) * h.dim(2);
    const Tensor tokens = embedding(param("tok_emb"), cond.ids);                                 // [n, kd]
    const Tensor queries = linear(transpose(reshape(h, {ch, hw})), param("attn.q.w"), param("attn.q.b"));  // [hw, a]
    const Tensor keys = linear(tokens, param("attn.k.w"), param("attn.k.b"));                    // [n, a]
    const Tensor values = linear(tokens, param("attn.v.w"), param("attn.v.b"));                  // [n, ch]
    const Tensor scores = scale(matmul(keys, transpose(queries)), 1.0 / std::sqrt(config_.attn_dim));  // [n, hw]
    attention_out = softmax(scores, 0);
    const Tensor mixed = matmul(transpose(attention_out), values);                               // [hw, ch]
    const Tensor projected = linear(mixed, param("attn.o.w"), param("attn.o.b"));                // [hw, ch]
    return reshape(transpose(projected), h.shape());
  }

  static Tensor random_tensor(KeyedRng& rng, Shape shape, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = stddev * rng.gaussian();
    return Tensor(std::move(shape), std::move(v), true);
  }
  void add_param(const std::string& name, const Tensor& value) { params_[name] = value.requiring_grad(); }
  void add_conv(KeyedRng& rng, const std::string& name, std::size_t out, std::size_t in) {
    add_param(name + ".w", random_tensor(rng, {out, in, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(in))));
  }
  void add_linear(KeyedRng& rng, const std::string& name, std::size_t out, std::size_t in) {
    add_param(name + ".w", random_tensor(rng, {out, in}, 1.0 / std::sqrt(static_cast<double>(in))));
    add_param(name + ".b", Tensor::zeros({out}));
  }

  DenoiserConfig config_;
  std::map<std::string, Tensor> params_;
};

}  // namespace dflens
