#pragma once

// Seeded comparison of pixel orderings in the deletion and insertion games
// on a trained denoiser.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dflens/denoiser.hpp"
#include "dflens/diffusion.hpp"
#include "dflens/evaluation.hpp"
#include "dflens/saliency.hpp"
#include "dflens/synth.hpp"

namespace dflens {

inline const std::vector<std::string> kOrderingNames{"df_rise", "df_cam", "random", "occlusion"};

struct EvalOptions {
  int seeds = 20;
  std::uint64_t seed = 0;
  int t = 200;  // noise level of the explained input
  std::vector<std::string> orderings = kOrderingNames;
  std::vector<Game> games{Game::deletion, Game::insertion};
  int masks = 1000;
  double keep_prob = 0.5;
  std::optional<MaskGrid> grid;
  std::string layer = Denoiser::kDefaultCamLayer;
  SimilarityConfig metric;
  int perturb_steps = 32;
  std::size_t workers = 1;

  void validate() const {
    if (seeds < 1) throw Error(concat("eval: seeds must be >= 1, got ", seeds));
    if (masks < 1) throw Error(concat("eval: masks must be >= 1, got ", masks));
    if (orderings.empty() || games.empty()) throw Error("eval: need at least one ordering and one game");
    for (const auto& o : orderings) {
      if (std::find(kOrderingNames.begin(), kOrderingNames.end(), o) == kOrderingNames.end()) {
        throw Error(concat("eval: unknown ordering '", o, "' (expected df_rise, df_cam, random or occlusion)"));
      }
    }
    metric.validate();
  }
};

/// One explained input: a noised synthetic sample.
struct EvalCase {
  Tensor x0;
  ConditionTokens cond;
  Tensor r_t;
};

inline EvalCase eval_case(const Denoiser& model, const NoiseSchedule& schedule, int t, std::uint64_t seed) {
  if (t < 0 || t >= schedule.T) throw Error(concat("eval: t must lie in [0, ", schedule.T - 1, "], got ", t));
  Sample s = sample_dataset(1, seed, model.config().image_size).front();
  KeyedRng rng(seed, streams::kNoise, 1);
  const Tensor eps(model.input_shape(), rng.gaussian_vector(shape_numel(model.input_shape())));
  Tensor r_t = q_sample(s.image, t, eps, schedule);
  return EvalCase{std::move(s.image), std::move(s.tokens), std::move(r_t)};
}

inline PixelOrdering make_ordering(const std::string& name, const Denoiser& model, const EvalCase& c, int t,
                                   std::uint64_t seed, const EvalOptions& opt) {
  const std::size_t h = c.r_t.dim(1), w = c.r_t.dim(2);
  if (name == "df_rise") {
    const auto masks = generate_masks(static_cast<std::size_t>(opt.masks), h, w, opt.keep_prob, seed, opt.grid);
    return ordering_from_map(df_rise(model, c.r_t, t, c.cond, masks, opt.metric, opt.workers).values);
  }
  if (name == "df_cam") return ordering_from_map(df_cam(model, c.r_t, t, c.cond, opt.layer).values);
  if (name == "random") return random_ordering(h, w, seed);
  if (name == "occlusion") return occlusion_ordering(query_of(model, t, c.cond), c.r_t, 1, opt.workers);
  throw Error(concat("eval: unknown ordering '", name, "'"));
}

struct OrderingSummary {
  std::vector<double> aucs;      // per seed
  std::vector<double> mean_curve;  // mean score at each fraction
  double mean = 0.0, std = 0.0;
  int wins_vs_random = -1;  // seeds beating random; -1 when random was not run
};

struct EvalReport {
  EvalOptions options;
  std::vector<double> fractions;
  std::map<std::string, std::map<std::string, OrderingSummary>> games;  // game -> ordering -> summary
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json games = nlohmann::json::object();
  for (const auto& [game, per] : r.games) {
    nlohmann::json g = nlohmann::json::object();
    for (const auto& [name, s] : per) {
      g[name] = {{"auc_per_seed", s.aucs}, {"auc_mean", s.mean}, {"auc_std", s.std}, {"mean_curve", s.mean_curve}};
      if (s.wins_vs_random >= 0) g[name]["wins_vs_random"] = s.wins_vs_random;
    }
    games[game] = g;
  }
  nlohmann::json orderings = r.options.orderings;
  return {{"metric", to_json(r.options.metric)},
          {"seeds", r.options.seeds},
          {"t", r.options.t},
          {"orderings", orderings},
          {"fractions", r.fractions},
          {"games", games}};
}

/// Runs every (seed, ordering, game) curve. Seed k explains eval_case(seed + k);
/// a win means a lower deletion AUC or a higher insertion AUC than random.
inline EvalReport run_eval(const Denoiser& model, const NoiseSchedule& schedule, const EvalOptions& opt,
                           const std::function<void(int seed_index)>& on_seed = nullptr) {
  opt.validate();
  EvalReport report;
  report.options = opt;
  const bool have_random = std::find(opt.orderings.begin(), opt.orderings.end(), "random") != opt.orderings.end();
  for (int k = 0; k < opt.seeds; ++k) {
    const std::uint64_t seed = opt.seed + static_cast<std::uint64_t>(k);
    const EvalCase c = eval_case(model, schedule, opt.t, seed);
    const ModelQuery f = query_of(model, opt.t, c.cond);
    for (const auto& name : opt.orderings) {
      const PixelOrdering order = make_ordering(name, model, c, opt.t, seed, opt);
      for (Game game : opt.games) {
        const auto curve = perturbation_game(game, order, f, c.r_t, opt.perturb_steps, opt.metric, name);
        auto& s = report.games[to_string(game)][name];
        s.aucs.push_back(curve.auc);
        if (s.mean_curve.empty()) s.mean_curve.assign(curve.points.size(), 0.0);
        for (std::size_t i = 0; i < curve.points.size(); ++i) s.mean_curve[i] += curve.points[i].score / opt.seeds;
        if (report.fractions.empty()) {
          for (const auto& p : curve.points) report.fractions.push_back(p.fraction);
        }
      }
    }
    if (on_seed) on_seed(k);
  }
  for (auto& [game, per] : report.games) {
    for (auto& [name, s] : per) {
      const double n = static_cast<double>(s.aucs.size());
      for (double a : s.aucs) s.mean += a / n;
      for (double a : s.aucs) s.std += (a - s.mean) * (a - s.mean);
      s.std = s.aucs.size() > 1 ? std::sqrt(s.std / (n - 1.0)) : 0.0;
      if (!have_random || name == "random") continue;
      const auto& rnd = per.at("random").aucs;
      s.wins_vs_random = 0;
      for (std::size_t i = 0; i < s.aucs.size(); ++i) {
        s.wins_vs_random += game == "deletion" ? s.aucs[i] < rnd[i] : s.aucs[i] > rnd[i];
      }
    }
  }
  return report;
}

}  // namespace dflens
