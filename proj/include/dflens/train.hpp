#pragma once

// Noise-prediction training with Adam.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dflens/denoiser.hpp"
#include "dflens/diffusion.hpp"
#include "dflens/error.hpp"
#include "dflens/rng.hpp"
#include "dflens/synth.hpp"
#include "dflens/tensor.hpp"

namespace dflens {

struct TrainOptions {
  int steps = 2000;
  int batch = 4;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

/// Random draws of one training step, a pure function of (seed, step).
struct TrainDraw {
  std::vector<std::size_t> sample;
  std::vector<int> t;
  std::vector<Tensor> eps;
};

inline TrainDraw training_draw(std::size_t dataset_size, const Shape& image_shape, int T, std::uint64_t seed,
                               std::uint64_t step, int batch) {
  KeyedRng rng(seed, streams::kTrain, step);
  TrainDraw d;
  for (int b = 0; b < batch; ++b) {
    d.sample.push_back(static_cast<std::size_t>(rng.below(dataset_size)));
    d.t.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(T))));
    d.eps.emplace_back(image_shape, rng.gaussian_vector(shape_numel(image_shape)));
  }
  return d;
}

// Mean squared noise-prediction error over one draw. Records on the active
// tape when grad mode is on.
inline Tensor draw_loss(const Denoiser& model, const std::vector<Sample>& dataset, const NoiseSchedule& schedule,
                        const TrainDraw& draw) {
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t b = 0; b < draw.sample.size(); ++b) {
    const Sample& s = dataset[draw.sample[b]];
    const Tensor x_t = q_sample(s.image, draw.t[b], draw.eps[b], schedule);
    const Tensor eps_hat = model.forward(x_t, draw.t[b], s.tokens, false).eps_hat;
    const Tensor diff = sub(eps_hat, draw.eps[b]);
    total = add(total, mean(mul(diff, diff)));
  }
  return scale(total, 1.0 / static_cast<double>(draw.sample.size()));
}

inline double batch_loss(const Denoiser& model, const std::vector<Sample>& dataset, const NoiseSchedule& schedule,
                         const TrainDraw& draw) {
  NoGradGuard no_grad;
  return draw_loss(model, dataset, schedule, draw).item();
}

/// Adam over the model's parameters. Moments are keyed by parameter name.
class Adam {
 public:
  explicit Adam(const TrainOptions& opt) : opt_(opt) {}

  void step(Denoiser& model, const Gradients& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    for (const auto& [name, param] : model.parameters()) {
      const Tensor g = grads.get(param);
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(param.numel(), 0.0);
        v.assign(param.numel(), 0.0);
      }
      std::vector<double> updated(param.numel());
      for (std::size_t i = 0; i < updated.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        updated[i] = param[i] - opt_.lr * mhat / (std::sqrt(vhat) + opt_.adam_eps);
      }
      detail::require_finite(updated, "adam");
      pending_.emplace_back(name, std::move(updated));
    }
    for (auto& [name, values] : pending_) model.set_param(name, std::move(values));
    pending_.clear();
  }

 private:
  TrainOptions opt_;
  int t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
  std::vector<std::pair<std::string, std::vector<double>>> pending_;
};

/// Trains `model` in place and returns the per-step loss (measured before
/// each update). Throws when the loss stops being finite.
inline std::vector<double> train(Denoiser& model, const std::vector<Sample>& dataset, const NoiseSchedule& schedule,
                                 const TrainOptions& opt,
                                 const std::function<void(int step, double loss)>& on_step = nullptr) {
  if (dataset.empty()) throw Error("train: dataset is empty");
  if (opt.steps < 0 || opt.batch < 1) throw Error("train: steps must be >= 0 and batch >= 1");
  Adam adam(opt);
  std::vector<double> history;
  history.reserve(static_cast<std::size_t>(opt.steps));
  for (int step = 0; step < opt.steps; ++step) {
    const TrainDraw draw = training_draw(dataset.size(), model.input_shape(), schedule.T, opt.seed,
                                         static_cast<std::uint64_t>(step), opt.batch);
    GraphScope scope;
    Tensor loss;
    try {
      loss = draw_loss(model, dataset, schedule, draw);
    } catch (const NonFiniteError& e) {
      throw Error(concat("train: diverged at step ", step, " (", e.what(), ")"));
    }
    if (!std::isfinite(loss.item())) throw Error(concat("train: loss is not finite at step ", step));
    history.push_back(loss.item());
    const Gradients grads = scope.graph().backward(loss);
    adam.step(model, grads);
    if (on_step) on_step(step, loss.item());
  }
  return history;
}

}  // namespace dflens
