#pragma once

// Deletion / insertion games, ordering baselines and per-token concept
// relevance along a generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dflens/denoiser.hpp"
#include "dflens/diffusion.hpp"
#include "dflens/error.hpp"
#include "dflens/generate.hpp"
#include "dflens/parallel.hpp"
#include "dflens/rng.hpp"
#include "dflens/saliency.hpp"
#include "dflens/tensor.hpp"

namespace dflens {

/// Pixel indices (i * W + j), most important first.
using PixelOrdering = std::vector<std::size_t>;

enum class Game { deletion, insertion };

inline std::string to_string(Game g) { return g == Game::deletion ? "deletion" : "insertion"; }

inline Game parse_game(std::string_view name) {
  if (name == "deletion") return Game::deletion;
  if (name == "insertion") return Game::insertion;
  throw Error(concat("unknown game '", name, "' (expected deletion or insertion)"));
}

struct CurvePoint {
  double fraction = 0.0;
  double score = 0.0;
};

/// Trapezoidal area under a curve with strictly increasing fractions.
inline double auc(const std::vector<CurvePoint>& points) {
  if (points.size() < 2) throw Error("auc: need at least two points");
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double dx = points[i].fraction - points[i - 1].fraction;
    if (!(dx > 0.0)) throw Error(concat("auc: fractions must be strictly increasing (point ", i, ")"));
    area += 0.5 * dx * (points[i].score + points[i - 1].score);
  }
  return area;
}

struct PerturbationCurve {
  std::vector<CurvePoint> points;
  double auc = 0.0;
  Game game = Game::deletion;
  std::string ordering;  // saliency tool name, "random" or "occlusion"
};

inline nlohmann::json to_json(const PerturbationCurve& c) {
  nlohmann::json fr = nlohmann::json::array(), sc = nlohmann::json::array();
  for (const auto& p : c.points) {
    fr.push_back(p.fraction);
    sc.push_back(p.score);
  }
  return {{"game", to_string(c.game)}, {"ordering", c.ordering}, {"auc", c.auc}, {"fractions", fr}, {"scores", sc}};
}

// ---------------------------------------------------------------------------
// Orderings

/// Descending saliency; ties keep ascending pixel index.
inline PixelOrdering ordering_from_map(const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("ordering_from_map: map must be [H, W]");
  PixelOrdering order(map.numel());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return map[a] > map[b]; });
  return order;
}

inline PixelOrdering random_ordering(std::size_t height, std::size_t width, std::uint64_t seed) {
  KeyedRng rng(seed, streams::kOrdering);
  return rng.permutation(height * width);
}

/// Output change when a (2r+1)^2 patch around each pixel is zeroed in every
/// channel, as a [H, W] grid.
inline Tensor occlusion_sensitivity(const ModelQuery& f, const Tensor& r_t, std::size_t radius = 1,
                                    std::size_t workers = 1) {
  if (r_t.rank() != 3) throw ShapeError("occlusion: input must be [C, H, W]");
  const Tensor base = f(r_t);
  const std::size_t c = r_t.dim(0), h = r_t.dim(1), w = r_t.dim(2);
  std::vector<double> change(h * w);
  parallel_for(h * w, workers, [&](std::size_t p) {
    const std::size_t pi = p / w, pj = p % w;
    std::vector<double> x = r_t.vec();
    const std::size_t i0 = pi >= radius ? pi - radius : 0, i1 = std::min(h - 1, pi + radius);
    const std::size_t j0 = pj >= radius ? pj - radius : 0, j1 = std::min(w - 1, pj + radius);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = i0; i <= i1; ++i) {
        for (std::size_t j = j0; j <= j1; ++j) x[(ch * h + i) * w + j] = 0.0;
      }
    }
    const Tensor out = f(Tensor(r_t.shape(), std::move(x)));
    double acc = 0.0;
    for (std::size_t k = 0; k < out.numel(); ++k) {
      const double d = out[k] - base[k];
      acc += d * d;
    }
    change[p] = std::sqrt(acc);
  });
  return Tensor({h, w}, std::move(change));
}

inline PixelOrdering occlusion_ordering(const ModelQuery& f, const Tensor& r_t, std::size_t radius = 1,
                                        std::size_t workers = 1) {
  return ordering_from_map(occlusion_sensitivity(f, r_t, radius, workers));
}

// ---------------------------------------------------------------------------
// Games

/// Deletion zeroes pixels (all channels) in ordering order; insertion starts
/// from zeros and restores them. Each of the steps + 1 points scores the
/// model output on the perturbed input against the output on R_t.
inline PerturbationCurve perturbation_game(Game game, const PixelOrdering& ordering, const ModelQuery& f,
                                           const Tensor& r_t, int steps = 32, const SimilarityConfig& metric = {},
                                           std::string ordering_name = "saliency") {
  if (steps < 2) throw Error(concat("perturbation_game: steps must be >= 2, got ", steps));
  if (r_t.rank() != 3) throw ShapeError("perturbation_game: input must be [C, H, W]");
  const std::size_t c = r_t.dim(0), plane = r_t.dim(1) * r_t.dim(2);
  if (ordering.size() != plane) {
    throw ShapeError(concat("perturbation_game: ordering covers ", ordering.size(), " pixels, input has ", plane));
  }
  const Tensor target = f(r_t);
  PerturbationCurve curve;
  curve.game = game;
  curve.ordering = std::move(ordering_name);
  std::vector<double> x = game == Game::deletion ? r_t.vec() : std::vector<double>(r_t.numel(), 0.0);
  std::size_t done = 0;
  for (int k = 0; k <= steps; ++k) {
    const std::size_t upto = plane * static_cast<std::size_t>(k) / static_cast<std::size_t>(steps);
    for (; done < upto; ++done) {
      const std::size_t p = ordering[done];
      for (std::size_t ch = 0; ch < c; ++ch) x[ch * plane + p] = game == Game::deletion ? 0.0 : r_t[ch * plane + p];
    }
    const double score = similarity(f(Tensor(r_t.shape(), x)), target, metric);
    if (!std::isfinite(score)) throw NonFiniteError(concat("perturbation_game: non-finite score at step ", k));
    curve.points.push_back({static_cast<double>(k) / steps, score});
  }
  curve.auc = auc(curve.points);
  return curve;
}

inline PerturbationCurve perturbation_game(Game game, const SaliencyMap& map, const Denoiser& model, const Tensor& r_t,
                                           int t, const ConditionTokens& cond, int steps = 32,
                                           const SimilarityConfig& metric = {}) {
  if (r_t.rank() != 3 || map.values.shape() != Shape{r_t.dim(1), r_t.dim(2)}) {
    throw ShapeError("perturbation_game: map does not match the input's spatial extents");
  }
  return perturbation_game(game, ordering_from_map(map.values), query_of(model, t, cond), r_t, steps, metric,
                           to_string(map.tool));
}

// ---------------------------------------------------------------------------
// Concept relevance

struct RelevanceProfile {
  std::vector<int> token_ids;
  std::vector<int> timesteps;
  std::vector<std::vector<double>> scores;  // [tokens][steps]
  std::vector<double> totals;               // per token, summed over steps
  PlanMode mode = PlanMode::uniform;
  std::string method = "cross_attention_proxy";
};

inline nlohmann::json to_json(const RelevanceProfile& r) {
  nlohmann::json names = nlohmann::json::array();
  for (int id : r.token_ids) names.push_back(std::string(vocab::token_name(id)));
  return {{"method", r.method},  {"mode", to_string(r.mode)}, {"tokens", names},
          {"token_ids", r.token_ids}, {"timesteps", r.timesteps}, {"scores", r.scores},
          {"totals", r.totals}};
}

/// Per-token relevance at each generation step: the spatial mean of that
/// token's cross-attention weights, renormalized to sum to one over tokens.
inline RelevanceProfile concept_relevance(const Denoiser& model, const NoiseSchedule& schedule,
                                          const ConditionTokens& cond, const TimestepPlan& plan, std::uint64_t seed) {
  if (!model.config().cross_attention) {
    throw Error("concept_relevance: model has no cross-attention block to capture");
  }
  const Generation g = generate(model, schedule, plan, cond, seed, true);
  const std::size_t n = cond.size();
  RelevanceProfile r;
  r.token_ids = cond.ids;
  r.mode = plan.mode;
  r.scores.assign(n, std::vector<double>(g.steps.size(), 0.0));
  r.totals.assign(n, 0.0);
  for (std::size_t s = 0; s < g.steps.size(); ++s) {
    const Tensor& a = g.steps[s].attention;  // [tokens, positions]
    r.timesteps.push_back(g.steps[s].t);
    const std::size_t positions = a.dim(1);
    std::vector<double> rel(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t p = 0; p < positions; ++p) rel[k] += a[k * positions + p];
      rel[k] /= static_cast<double>(positions);
    }
    const double z = std::accumulate(rel.begin(), rel.end(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      r.scores[k][s] = rel[k] / z;
      r.totals[k] += r.scores[k][s];
    }
  }
  return r;
}

}  // namespace dflens
