#pragma once

// Deterministic DDIM generation along a time-step plan.

#include <cstdint>
#include <functional>
#include <vector>

#include "dflens/denoiser.hpp"
#include "dflens/diffusion.hpp"
#include "dflens/rng.hpp"
#include "dflens/tensor.hpp"

namespace dflens {

struct GenerationStep {
  int t = 0;
  Tensor x_t;      // latent fed to the model at this step
  Tensor eps_hat;
  Tensor attention;  // empty unless captured
};

struct Generation {
  std::vector<GenerationStep> steps;
  Tensor image;  // final clean estimate
};

inline Tensor initial_noise(const Shape& shape, std::uint64_t seed) {
  KeyedRng rng(seed, streams::kNoise);
  return Tensor(shape, rng.gaussian_vector(shape_numel(shape)));
}

/// Runs sigma = 0 DDIM from seeded pure noise through every plan step; the
/// last step jumps to the clean estimate.
inline Generation generate(const Denoiser& model, const NoiseSchedule& schedule, const TimestepPlan& plan,
                           const ConditionTokens& cond, std::uint64_t seed, bool capture_attention = false) {
  if (plan.steps.empty()) throw Error("generate: empty time-step plan");
  NoGradGuard no_grad;
  Generation g;
  Tensor x = initial_noise(model.input_shape(), seed);
  const Tensor zero = Tensor::zeros(model.input_shape());
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    const int t = plan.steps[i];
    const int t_prev = i + 1 < plan.steps.size() ? plan.steps[i + 1] : -1;
    ForwardTrace trace = model.forward(x, t, cond, capture_attention);
    g.steps.push_back(GenerationStep{t, x, trace.eps_hat, trace.attention});
    if (capture_attention && !trace.has_attention) throw Error("generate: model has no cross-attention block");
    x = ddim_step(x, t, t_prev, trace.eps_hat, 0.0, zero, schedule);
  }
  g.image = x;
  return g;
}

}  // namespace dflens
