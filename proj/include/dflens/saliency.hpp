#pragma once

// Saliency maps for a single denoising step.
//
// df_rise: black-box. Random binary masks M_n perturb the step input R_t;
//   each mask is weighted by the structure similarity between the model
//   outputs on R_t * M_n and on R_t, summed over masks, then min-max
//   normalized once.
// df_cam: white-box. Gradients of sum(eps_hat) with respect to a captured
//   activation A are average-pooled per channel into weights alpha_k; the map
//   is ReLU(sum_k alpha_k A^k), resized to the input and min-max normalized.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <nlohmann/json.hpp>

#include "dflens/denoiser.hpp"
#include "dflens/error.hpp"
#include "dflens/parallel.hpp"
#include "dflens/rng.hpp"
#include "dflens/tensor.hpp"

namespace dflens {

// ---------------------------------------------------------------------------
// Masks

struct MaskGrid {
  std::size_t height = 0, width = 0;
};

struct MaskBatch {
  std::vector<Tensor> masks;  // each [H, W] with values in {0, 1}
  std::size_t height = 0, width = 0;
  double keep_prob = 0.5;
  std::uint64_t seed = 0;
  std::optional<MaskGrid> grid;

  std::size_t size() const { return masks.size(); }
};

/// Threshold on a standard normal draw that keeps a pixel with probability keep_prob.
inline double keep_threshold(double keep_prob) {
  return boost::math::quantile(boost::math::complement(boost::math::normal_distribution<double>(), keep_prob));
}

/// N masks; pixel kept where a standard Gaussian draw exceeds the keep
/// threshold. With a grid, draws are made at the coarse resolution and
/// nearest-neighbour upsampled before thresholding.
inline MaskBatch generate_masks(std::size_t n, std::size_t height, std::size_t width, double keep_prob,
                                std::uint64_t seed, std::optional<MaskGrid> grid = std::nullopt) {
  if (!(keep_prob > 0.0 && keep_prob < 1.0)) {
    throw Error(concat("generate_masks: keep_prob must lie in (0, 1), got ", keep_prob));
  }
  if (height == 0 || width == 0) throw Error("generate_masks: mask extents must be positive");
  if (grid && (grid->height == 0 || grid->width == 0 || grid->height > height || grid->width > width)) {
    throw Error("generate_masks: grid must be non-empty and no finer than the mask");
  }
  const double threshold = keep_threshold(keep_prob);
  MaskBatch batch{{}, height, width, keep_prob, seed, grid};
  batch.masks.reserve(n);
  const std::size_t gh = grid ? grid->height : height;
  const std::size_t gw = grid ? grid->width : width;
  for (std::size_t m = 0; m < n; ++m) {
    KeyedRng rng(seed, streams::kMasks, m);
    const auto draws = rng.gaussian_vector(gh * gw);
    std::vector<double> mask(height * width);
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        const double g = draws[(i * gh / height) * gw + (j * gw / width)];
        mask[i * width + j] = g > threshold ? 1.0 : 0.0;
      }
    }
    batch.masks.emplace_back(Shape{height, width}, std::move(mask));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Similarity

enum class SimilarityKind { structure, luminance, contrast, cosine };

inline std::string to_string(SimilarityKind k) {
  switch (k) {
    case SimilarityKind::structure: return "structure";
    case SimilarityKind::luminance: return "luminance";
    case SimilarityKind::contrast: return "contrast";
    case SimilarityKind::cosine: return "cosine";
  }
  return "?";
}

inline SimilarityKind parse_similarity_kind(std::string_view name) {
  if (name == "structure") return SimilarityKind::structure;
  if (name == "luminance") return SimilarityKind::luminance;
  if (name == "contrast") return SimilarityKind::contrast;
  if (name == "cosine") return SimilarityKind::cosine;
  throw Error(concat("unknown similarity '", name, "' (expected structure, luminance, contrast or cosine)"));
}

struct SimilarityConfig {
  SimilarityKind kind = SimilarityKind::structure;
  double c1 = 1e-4;
  double c2 = 1e-4;
  double c3 = 0.5e-4;

  void validate() const {
    if (!(c1 > 0.0 && c2 > 0.0 && c3 > 0.0)) throw Error("similarity: stabilizers C1, C2, C3 must be positive");
  }
};

inline nlohmann::json to_json(const SimilarityConfig& c) {
  return {{"kind", to_string(c.kind)}, {"C1", c.c1}, {"C2", c.c2}, {"C3", c.c3}};
}

namespace detail {

struct ChannelStats {
  double mean_a, mean_b, var_a, var_b, cov;
};

inline ChannelStats channel_stats(const double* a, const double* b, std::size_t n) {
  double sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sa += a[i];
    sb += b[i];
  }
  const double inv = 1.0 / static_cast<double>(n);
  ChannelStats s{sa * inv, sb * inv, 0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - s.mean_a, db = b[i] - s.mean_b;
    s.var_a += da * da;
    s.var_b += db * db;
    s.cov += da * db;
  }
  s.var_a *= inv;
  s.var_b *= inv;
  s.cov *= inv;
  return s;
}

}  // namespace detail

/// Similarity of two equally shaped tensors. For rank-3 inputs the
/// luminance / contrast / structure terms are computed per channel over all
/// spatial positions and averaged; other ranks form a single channel.
/// Cosine is the plain inner-product cosine over all elements.
inline double similarity(const Tensor& a, const Tensor& b, const SimilarityConfig& cfg = {}) {
  cfg.validate();
  if (a.shape() != b.shape()) {
    throw ShapeError(concat("similarity: shape mismatch ", shape_string(a.shape()), " vs ", shape_string(b.shape())));
  }
  if (a.numel() < 2) throw ShapeError("similarity: inputs need at least two elements");
  if (cfg.kind == SimilarityKind::cosine) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return na == nb ? 1.0 : 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  }
  const std::size_t channels = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t per = a.numel() / channels;
  double total = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    const auto s = detail::channel_stats(a.data().data() + c * per, b.data().data() + c * per, per);
    switch (cfg.kind) {
      case SimilarityKind::luminance:
        total += (2.0 * s.mean_a * s.mean_b + cfg.c1) / (s.mean_a * s.mean_a + s.mean_b * s.mean_b + cfg.c1);
        break;
      case SimilarityKind::contrast:
        total += (2.0 * s.cov + cfg.c2) / (s.var_a + s.var_b + cfg.c2);
        break;
      case SimilarityKind::structure:
        total += (s.cov + cfg.c3) / (std::sqrt(s.var_a) * std::sqrt(s.var_b) + cfg.c3);
        break;
      case SimilarityKind::cosine: break;
    }
  }
  return total / static_cast<double>(channels);
}

// ---------------------------------------------------------------------------
// Maps

/// (x - min) / (max - min); a constant input maps to all zeros.
inline Tensor minmax_normalize(const Tensor& raw) {
  if (raw.numel() == 0) return raw.detach();
  const auto [lo_it, hi_it] = std::minmax_element(raw.vec().begin(), raw.vec().end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<double> out(raw.numel(), 0.0);
  if (hi > lo) {
    const double range = hi - lo;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (raw[i] - lo) / range;
  }
  return Tensor(raw.shape(), std::move(out));
}

/// Nearest-neighbour resize of a [h, w] grid to [height, width].
inline Tensor resize_nearest(const Tensor& grid, std::size_t height, std::size_t width) {
  if (grid.rank() != 2) throw ShapeError("resize_nearest: expected a rank-2 grid");
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  std::vector<double> out(height * width);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) out[i * width + j] = grid[(i * h / height) * w + (j * w / width)];
  }
  return Tensor({height, width}, std::move(out));
}

enum class SaliencyTool { df_rise, df_cam };

inline std::string to_string(SaliencyTool t) { return t == SaliencyTool::df_rise ? "df_rise" : "df_cam"; }

struct SaliencyMap {
  Tensor values;  // [H, W] in [0, 1]
  SaliencyTool tool = SaliencyTool::df_rise;
  int step = -1;
  nlohmann::json config;
};

inline nlohmann::json to_json(const SaliencyMap& m) {
  return {{"tool", to_string(m.tool)},
          {"t", m.step},
          {"height", m.values.dim(0)},
          {"width", m.values.dim(1)},
          {"config", m.config},
          {"values", m.values.vec()}};
}

// ---------------------------------------------------------------------------
// DF-RISE

/// Forward-evaluation capability: model output for an input at a fixed step
/// and condition. Must be safe to call from several threads at once.
using ModelQuery = std::function<Tensor(const Tensor& input)>;

inline ModelQuery query_of(const Denoiser& model, int t, const ConditionTokens& cond) {
  return [&model, t, cond](const Tensor& x) { return model.predict(x, t, cond); };
}

/// Per-mask similarity scores s(f(R_t * M_n), f(R_t)).
inline std::vector<double> rise_scores(const ModelQuery& f, const Tensor& r_t, const MaskBatch& masks,
                                       const SimilarityConfig& cfg, std::size_t workers) {
  if (r_t.rank() != 3 || r_t.dim(1) != masks.height || r_t.dim(2) != masks.width) {
    throw ShapeError(concat("df_rise: masks of ", masks.height, "x", masks.width, " do not match input ",
                            shape_string(r_t.shape())));
  }
  const Tensor target = f(r_t);
  detail::require_finite(target.data(), "df_rise: model output on the unmasked input");
  const std::size_t channels = r_t.dim(0), plane = masks.height * masks.width;
  std::vector<double> scores(masks.size());
  parallel_for(masks.size(), workers, [&](std::size_t n) {
    const Tensor& m = masks.masks[n];
    std::vector<double> perturbed(r_t.numel());
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t p = 0; p < plane; ++p) perturbed[c * plane + p] = r_t[c * plane + p] * m[p];
    }
    Tensor out;
    try {
      out = f(Tensor(r_t.shape(), std::move(perturbed)));
    } catch (const NonFiniteError&) {
      throw NonFiniteError(concat("df_rise: non-finite model output for mask ", n));
    }
    for (double v : out.data()) {
      if (!std::isfinite(v)) throw NonFiniteError(concat("df_rise: non-finite model output for mask ", n));
    }
    scores[n] = similarity(out, target, cfg);
  });
  return scores;
}

/// Unnormalized sum_n M_n * s_n. Masks are added in ascending score order so
/// the result depends only on the set of (mask, score) pairs, not on their
/// order in the batch.
inline Tensor rise_accumulate(const MaskBatch& masks, const std::vector<double>& scores) {
  std::vector<std::size_t> order(masks.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> acc(masks.height * masks.width, 0.0);
  for (std::size_t n : order) {
    const Tensor& m = masks.masks[n];
    for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += m[p] * scores[n];
  }
  return Tensor({masks.height, masks.width}, std::move(acc));
}

inline SaliencyMap df_rise(const ModelQuery& f, const Tensor& r_t, const MaskBatch& masks,
                           const SimilarityConfig& cfg = {}, std::size_t workers = 1, int step = -1) {
  if (masks.size() == 0) throw Error("df_rise: mask batch is empty");
  const auto scores = rise_scores(f, r_t, masks, cfg, workers);
  nlohmann::json config = {{"masks", masks.size()},
                           {"keep_prob", masks.keep_prob},
                           {"mask_seed", masks.seed},
                           {"similarity", to_json(cfg)}};
  if (masks.grid) config["grid"] = {masks.grid->height, masks.grid->width};
  return SaliencyMap{minmax_normalize(rise_accumulate(masks, scores)), SaliencyTool::df_rise, step, std::move(config)};
}

inline SaliencyMap df_rise(const Denoiser& model, const Tensor& r_t, int t, const ConditionTokens& cond,
                           const MaskBatch& masks, const SimilarityConfig& cfg = {}, std::size_t workers = 1) {
  return df_rise(query_of(model, t, cond), r_t, masks, cfg, workers, t);
}

// ---------------------------------------------------------------------------
// DF-CAM

/// White-box access for DF-CAM: a forward pass that routes named activations
/// through a hook, plus the list of hookable layers.
struct CamModel {
  std::function<Tensor(const Tensor& input, const LayerHook& hook)> run;
  std::vector<std::string> layers;
};

inline CamModel cam_model_of(const Denoiser& model, int t, const ConditionTokens& cond) {
  return CamModel{[&model, t, cond](const Tensor& x, const LayerHook& hook) {
                    return model.forward(x, t, cond, false, hook).eps_hat;
                  },
                  model.layer_names()};
}

struct CamResult {
  SaliencyMap map;
  Tensor activation;  // A, [K, H', W']
  Tensor weights;     // alpha, [K]
  Tensor raw;         // ReLU(sum_k alpha_k A^k), [H', W']
};

inline std::string layer_list(const std::vector<std::string>& layers) {
  std::string s;
  for (const auto& l : layers) s += (s.empty() ? "" : ", ") + l;
  return s;
}

inline CamResult df_cam_detailed(const CamModel& model, const Tensor& r_t, const std::string& layer, int step = -1) {
  if (std::find(model.layers.begin(), model.layers.end(), layer) == model.layers.end()) {
    throw Error(concat("df_cam: unknown layer '", layer, "'; available layers: ", layer_list(model.layers)));
  }
  if (r_t.rank() != 3) throw ShapeError("df_cam: input must be [C, H, W]");
  GraphScope scope;
  Tensor activation, root;
  bool seen = false;
  const LayerHook hook = [&](const std::string& name, const Tensor& a) {
    if (name != layer) return a;
    if (a.rank() != 3) throw ShapeError(concat("df_cam: layer '", layer, "' is not a [C, H, W] activation"));
    activation = a.detach();
    root = activation.requiring_grad();
    seen = true;
    return root;
  };
  const Tensor eps_hat = model.run(r_t, hook);
  if (!seen) throw Error(concat("df_cam: layer '", layer, "' was not visited by the forward pass"));
  const Tensor score = sum(eps_hat);
  const Gradients grads = score.requires_grad() ? scope.graph().backward(score) : Gradients{};

  NoGradGuard no_grad;
  const Tensor weights = global_average_pool(grads.get(root));
  const std::size_t k = activation.dim(0), h = activation.dim(1), w = activation.dim(2), plane = h * w;
  std::vector<double> combined(plane, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t p = 0; p < plane; ++p) combined[p] += weights[c] * activation[c * plane + p];
  }
  const Tensor raw = relu(Tensor({h, w}, std::move(combined)));
  const Tensor values = minmax_normalize(resize_nearest(raw, r_t.dim(1), r_t.dim(2)));
  SaliencyMap map{values, SaliencyTool::df_cam, step, {{"layer", layer}}};
  return CamResult{std::move(map), activation, weights, raw};
}

inline SaliencyMap df_cam(const CamModel& model, const Tensor& r_t, const std::string& layer, int step = -1) {
  return df_cam_detailed(model, r_t, layer, step).map;
}

inline SaliencyMap df_cam(const Denoiser& model, const Tensor& r_t, int t, const ConditionTokens& cond,
                          const std::string& layer = Denoiser::kDefaultCamLayer) {
  return df_cam(cam_model_of(model, t, cond), r_t, layer, t);
}

}  // namespace dflens
