#pragma once

// Shared oracles for the test suites: finite differences, random tensors and
// an analytically planted denoiser.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "dflens/dflens.hpp"

namespace dflens::testing {

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
  KeyedRng rng(seed, 1000);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.gaussian();
  return Tensor(shape, std::move(v));
}

// Values bounded away from zero, so kinks (ReLU) stay outside the FD stencil.
inline Tensor random_away_from_zero(const Shape& shape, std::uint64_t seed) {
  KeyedRng rng(seed, 1001);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    const double mag = 0.1 + 0.9 * rng.uniform();
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor(shape, std::move(v));
}

/// ||a - b||_2 / max(||a||_2, ||b||_2, floor). The floor keeps gradients that
/// vanish analytically (FD then returns rounding noise) from reading as 100%.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max(std::sqrt(std::max(na, nb)), floor);
  return std::sqrt(diff) / denom;
}

/// Central differences of a scalar function with respect to each element of x.
inline std::vector<double> finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                             double h = 1e-4) {
  std::vector<double> g(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    std::vector<double> plus = x.vec(), minus = x.vec();
    plus[i] += h;
    minus[i] -= h;
    g[i] = (f(Tensor(x.shape(), plus)) - f(Tensor(x.shape(), minus))) / (2.0 * h);
  }
  return g;
}

using MultiOp = std::function<Tensor(const std::vector<Tensor>&)>;

/// Worst relative error between taped and finite-difference gradients of
/// sum(op(inputs) * W) for a fixed random weighting W, over inputs flagged in
/// `differentiable`.
inline double op_gradient_error(const MultiOp& op, std::vector<Tensor> inputs, std::vector<bool> differentiable,
                                std::uint64_t seed, double h = 1e-4) {
  Tensor weight;
  {
    NoGradGuard ng;
    weight = random_tensor(op(inputs).shape(), seed + 7);
  }
  auto scalar = [&](const std::vector<Tensor>& in) { return sum(mul(op(in), weight)); };

  std::vector<Tensor> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    leaves.push_back(differentiable[i] ? inputs[i].requiring_grad() : inputs[i]);
  }
  GraphScope scope;
  const Gradients grads = scope.graph().backward(scalar(leaves));

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!differentiable[i]) continue;
    auto f = [&](const Tensor& xi) {
      NoGradGuard ng;
      std::vector<Tensor> in = inputs;
      in[i] = xi;
      return scalar(in).item();
    };
    worst = std::max(worst, relative_error(grads.get(leaves[i]).vec(), finite_difference(f, inputs[i], h)));
  }
  return worst;
}

/// Denoiser stand-in whose output depends only on an 8x8 patch of channel 0:
///   f(x) = tanh(kappa * (mean of the patch - 1/2 + 1/128)) * K
/// for a fixed non-constant pattern K. Structure similarity against the
/// unmasked output (patch all ones) is then +1 when at least half of the
/// patch survives and -1 otherwise.
struct PlantedModel {
  std::size_t size = 32;
  std::size_t top = 8, left = 16, extent = 8;
  double kappa = 4.0;
  Tensor pattern;

  explicit PlantedModel(std::uint64_t seed = 99) : pattern(random_tensor({3, 32, 32}, seed)) {}

  bool in_patch(std::size_t pixel) const {
    const std::size_t i = pixel / size, j = pixel % size;
    return i >= top && i < top + extent && j >= left && j < left + extent;
  }

  Tensor operator()(const Tensor& x) const {
    double acc = 0.0;
    for (std::size_t i = top; i < top + extent; ++i) {
      for (std::size_t j = left; j < left + extent; ++j) acc += x[i * size + j];
    }
    const double m = acc / static_cast<double>(extent * extent);
    const double a = std::tanh(kappa * (m - 0.5 + 1.0 / 128.0));
    std::vector<double> out(pattern.numel());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = a * pattern[k];
    return Tensor(pattern.shape(), std::move(out));
  }

  // Step input: ones on the patch of channel 0, noise elsewhere.
  Tensor input(std::uint64_t seed) const {
    std::vector<double> x = random_tensor({3, size, size}, seed).vec();
    for (std::size_t p = 0; p < size * size; ++p) {
      if (in_patch(p)) x[p] = 1.0;
    }
    return Tensor({3, size, size}, std::move(x));
  }

  ModelQuery query() const {
    return [this](const Tensor& x) { return (*this)(x); };
  }
};

/// Finite-difference oracle for DF-CAM weights: shifting every element of
/// channel k of the captured activation by h changes sum(eps_hat) by
/// h * sum_ij d score / dA^k_ij, so alpha_k = that slope / (H' W').
inline std::vector<double> cam_weights_fd(const CamModel& model, const Tensor& r_t, const std::string& layer,
                                          double h = 1e-4) {
  auto score_with_shift = [&](std::size_t channel, double shift) {
    NoGradGuard ng;
    const LayerHook hook = [&](const std::string& name, const Tensor& a) {
      if (name != layer) return a;
      std::vector<double> v = a.vec();
      const std::size_t plane = a.dim(1) * a.dim(2);
      for (std::size_t p = 0; p < plane; ++p) v[channel * plane + p] += shift;
      return Tensor(a.shape(), std::move(v));
    };
    return sum(model.run(r_t, hook)).item();
  };
  std::size_t channels = 0, plane = 0;
  {
    NoGradGuard ng;
    model.run(r_t, [&](const std::string& name, const Tensor& a) {
      if (name == layer) {
        channels = a.dim(0);
        plane = a.dim(1) * a.dim(2);
      }
      return a;
    });
  }
  std::vector<double> alpha(channels);
  for (std::size_t k = 0; k < channels; ++k) {
    alpha[k] = (score_with_shift(k, h) - score_with_shift(k, -h)) / (2.0 * h * static_cast<double>(plane));
  }
  return alpha;
}

/// Tiny denoiser used where a full-size network would be slow.
inline DenoiserConfig miniature_config() {
  DenoiserConfig c;
  c.image_size = 4;
  c.base_width = 4;
  c.token_dim = 4;
  c.time_dim = 4;
  c.attn_dim = 4;
  return c;
}

}  // namespace dflens::testing
