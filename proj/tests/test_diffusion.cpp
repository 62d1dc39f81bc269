#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "support.hpp"

using namespace dflens;
using dflens::testing::random_tensor;

TEST(Schedule, Invariants) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (int T : {2, 10, 100, 1000}) {
      const auto s = make_schedule(kind, T);
      ASSERT_EQ(s.beta.size(), static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) {
        EXPECT_GT(s.beta[t], 0.0);
        EXPECT_LT(s.beta[t], 1.0);
        if (t > 0) EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]) << to_string(kind) << " T=" << T << " t=" << t;
      }
      EXPECT_EQ(s.sigma[0], 0.0);
    }
    const auto s = make_schedule(kind, 1000);
    EXPECT_GT(s.alpha_bar.front(), 0.999);
    EXPECT_LT(s.alpha_bar.back(), 1e-3);
  }
}

TEST(Schedule, LinearEndpointsAndProduct) {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  EXPECT_DOUBLE_EQ(s.beta.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta.back(), 0.02);
  // direct product oracle, accumulated in log space
  double log_prod = 0.0;
  for (int t = 0; t < 1000; ++t) log_prod += std::log1p(-(1e-4 + (0.02 - 1e-4) * t / 999.0));
  EXPECT_NEAR(s.alpha_bar[999], std::exp(log_prod), 1e-15);
  EXPECT_NEAR(s.alpha_bar[999], 4.0e-5, 0.1e-5);
}

TEST(Schedule, RejectsTinyT) {
  EXPECT_THROW(make_schedule(ScheduleKind::linear, 1), Error);
  EXPECT_THROW(parse_schedule_kind("quadratic"), Error);
}

TEST(QSample, Examples) {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  const auto x0 = random_tensor({3, 4, 4}, 1), eps = random_tensor({3, 4, 4}, 2);
  const Tensor no_noise = q_sample(x0, 500, Tensor::zeros(x0.shape()), s);
  for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_EQ(no_noise[i], std::sqrt(s.alpha_bar[500]) * x0[i]);
  const Tensor pure = q_sample(Tensor::zeros(x0.shape()), 999, eps, s);
  for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(pure[i], eps[i], 1e-4 * std::abs(eps[i]) + 1e-12);
  EXPECT_THROW(q_sample(x0, 0, random_tensor({3, 4, 5}, 3), s), ShapeError);
  EXPECT_THROW(q_sample(x0, 1000, eps, s), Error);
}

TEST(QSample, InversionRecoversNoise) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const auto s = make_schedule(kind, 1000);
    const auto x0 = random_tensor({3, 4, 4}, 4), eps = random_tensor({3, 4, 4}, 5);
    for (int t = 0; t < 1000; t += 37) {
      const Tensor xt = q_sample(x0, t, eps, s);
      const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
      for (std::size_t i = 0; i < x0.numel(); ++i) {
        EXPECT_NEAR((xt[i] - a * x0[i]) / b, eps[i], 1e-12) << "t=" << t;
      }
    }
  }
}

TEST(DdpmStep, Examples) {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  const auto x = random_tensor({2, 3, 3}, 6), zero = Tensor::zeros({2, 3, 3});
  const Tensor out = ddpm_step(x, 300, zero, zero, s);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], x[i] / std::sqrt(1.0 - s.beta[300]));
  EXPECT_THROW(ddpm_step(x, 1000, zero, zero, s), Error);
  EXPECT_THROW(ddpm_step(x, -1, zero, zero, s), Error);
}

TEST(DdpmStep, MatchesScalarLoop) {
  const auto s = make_schedule(ScheduleKind::cosine, 500);
  const auto x = random_tensor({2, 3, 3}, 7), e = random_tensor({2, 3, 3}, 8), z = random_tensor({2, 3, 3}, 9);
  for (int t : {0, 1, 250, 499}) {
    const Tensor out = ddpm_step(x, t, e, z, s);
    const double beta = s.beta[t], ab = s.alpha_bar[t];
    const double sigma = t == 0 ? 0.0 : std::sqrt((1 - s.alpha_bar[t - 1]) / (1 - ab) * beta);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double expect = 1.0 / std::sqrt(1.0 - beta) * (x[i] - beta / std::sqrt(1.0 - ab) * e[i]) + sigma * z[i];
      EXPECT_NEAR(out[i], expect, 1e-12);
    }
  }
}

TEST(DdimStep, RecoversCleanImageWithTrueNoise) {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  const auto x0 = random_tensor({3, 4, 4}, 10), eps = random_tensor({3, 4, 4}, 11);
  const Tensor zero = Tensor::zeros(x0.shape());
  for (int t : {1, 100, 500, 900}) {
    const Tensor xt = q_sample(x0, t, eps, s);
    const Tensor clean = ddim_step(xt, t, -1, eps, 0.0, zero, s);
    const Tensor x0_hat = predict_x0(xt, t, eps, s);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
      EXPECT_NEAR(clean[i], x0[i], 1e-9);
      EXPECT_NEAR(x0_hat[i], x0[i], 1e-9);
    }
  }
}

TEST(DdimStep, MatchesScalarLoopAndIsDeterministic) {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  const auto x = random_tensor({2, 3, 3}, 12), e = random_tensor({2, 3, 3}, 13), z = random_tensor({2, 3, 3}, 14);
  const int t = 700, tp = 650;
  const double sig = 0.05;
  const Tensor out = ddim_step(x, t, tp, e, sig, z, s);
  const double ab = s.alpha_bar[t], abp = s.alpha_bar[tp];
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double x0 = (x[i] - std::sqrt(1 - ab) * e[i]) / std::sqrt(ab);
    EXPECT_NEAR(out[i], std::sqrt(abp) * x0 + std::sqrt(1 - abp - sig * sig) * e[i] + sig * z[i], 1e-12);
  }
  const Tensor zero = Tensor::zeros(x.shape());
  EXPECT_TRUE(ddim_step(x, t, tp, e, 0.0, zero, s).same_values(ddim_step(x, t, tp, e, 0.0, zero, s)));
  // sigma = 0 ignores z entirely
  EXPECT_TRUE(ddim_step(x, t, tp, e, 0.0, zero, s).same_values(ddim_step(x, t, tp, e, 0.0, z, s)));
}

TEST(DdimStep, Errors) {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  const auto x = random_tensor({2, 3, 3}, 15);
  EXPECT_THROW(ddim_step(x, 500, 400, x, 2.0, x, s), Error);  // 1 - ab_prev - sigma^2 < 0
  EXPECT_THROW(ddim_step(x, 500, 500, x, 0.0, x, s), Error);
  EXPECT_THROW(ddim_step(x, 500, 400, x, -0.1, x, s), Error);
}

TEST(UniformPlan, Examples) {
  const auto p20 = uniform_timesteps(1000, 20);
  ASSERT_EQ(p20.size(), 20u);
  for (std::size_t i = 1; i < p20.size(); ++i) EXPECT_EQ(p20.steps[i - 1] - p20.steps[i], 50);
  EXPECT_EQ(uniform_timesteps(1000, 1).steps, (std::vector<int>{999}));
  const auto p30 = uniform_timesteps(1000, 30);
  EXPECT_EQ(p30.steps.front(), 999);
  for (std::size_t i = 1; i < p30.size(); ++i) EXPECT_EQ(p30.steps[i - 1] - p30.steps[i], 33);
  for (int v : p30.steps) EXPECT_TRUE(v >= 0 && v < 1000);
  EXPECT_THROW(uniform_timesteps(10, 11), Error);
  EXPECT_THROW(uniform_timesteps(10, 0), Error);
}

TEST(ExponentialPlan, ClosedForms) {
  const auto p = exponential_points(1000, 30, 60);
  EXPECT_NEAR(p.front(), 900.0, 1e-9);
  EXPECT_NEAR(std::pow(exponential_base(1000, 30, 60), 90), 1000.0, 1e-9);
  for (int T : {100, 1000}) {
    for (int l : {5, 20, 50}) EXPECT_NEAR(exponential_points(T, l, 0).back(), 0.0, 1e-9);
  }
}

TEST(ExponentialPlan, EarlyGapsGrow) {
  const auto p = exponential_points(1000, 30, 60);
  for (std::size_t t = 2; t < p.size(); ++t) EXPECT_GT(p[t - 1] - p[t], p[t - 2] - p[t - 1]);
}

TEST(ExponentialPlan, LatterMirrorsEarly) {
  const auto pts = exponential_points(1000, 30, 10);
  const auto latter = exponential_timesteps(1000, 30, 10, PlanMode::exp_latter);
  // every non-prepended step is a rounded delta^(t+gamma)
  for (std::size_t i = 1; i < latter.size(); ++i) {
    bool found = false;
    for (double p : pts) found |= latter.steps[i] == std::clamp<int>(static_cast<int>(std::lround(1000 - p)), 0, 999);
    EXPECT_TRUE(found) << latter.steps[i];
  }
  EXPECT_EQ(latter.steps.front(), 999);
}

TEST(ExponentialPlan, InvariantsOverSweep) {
  for (int T : {100, 1000}) {
    for (int l = 5; l <= 50; ++l) {
      for (int gamma = 0; gamma <= 100; ++gamma) {
        for (auto mode : {PlanMode::exp_early, PlanMode::exp_latter}) {
          const auto plan = exponential_timesteps(T, l, gamma, mode);
          ASSERT_FALSE(plan.steps.empty());
          ASSERT_LE(plan.size(), static_cast<std::size_t>(l));
          ASSERT_EQ(plan.steps.front(), T - 1);
          for (std::size_t i = 0; i < plan.size(); ++i) {
            ASSERT_GE(plan.steps[i], 0);
            ASSERT_LT(plan.steps[i], T);
            if (i) ASSERT_LT(plan.steps[i], plan.steps[i - 1]) << "T=" << T << " l=" << l << " gamma=" << gamma;
          }
        }
      }
    }
  }
}

// Early-mode density: with gamma > l, more than half of the plan lies above
// T (1 - T^(-l / (2 (l + gamma)))). Before rounding, exactly the points with
// t < l/2 clear that threshold, plus the prepended T-1. Rounding can merge
// neighbouring high steps (gaps there are below one step when T is small),
// so the rounded plan can drop to half or less.
TEST(ExponentialPlan, EarlyDensityAtT1000) {
  const int T = 1000;
  for (int l = 5; l <= 50; ++l) {
    for (int gamma = l + 1; gamma <= 100; ++gamma) {
      const auto plan = exponential_timesteps(T, l, gamma, PlanMode::exp_early);
      const double threshold = T * (1.0 - std::pow(T, -static_cast<double>(l) / (2.0 * (l + gamma))));
      std::size_t above = 0;
      for (int s : plan.steps) above += s > threshold;
      EXPECT_GT(2 * above, plan.size()) << "l=" << l << " gamma=" << gamma;
    }
  }
}

TEST(ExponentialPlan, EarlyDensityShortfallsAtT100ComeFromRoundingCollisions) {
  const int T = 100;
  int shortfalls = 0;
  for (int l = 5; l <= 50; ++l) {
    for (int gamma = l + 1; gamma <= 100; ++gamma) {
      const auto plan = exponential_timesteps(T, l, gamma, PlanMode::exp_early);
      const auto points = exponential_points(T, l, gamma);
      const double threshold = T * (1.0 - std::pow(T, -static_cast<double>(l) / (2.0 * (l + gamma))));
      std::size_t above = 0;
      for (int s : plan.steps) above += s > threshold;
      if (2 * above > plan.size()) continue;
      ++shortfalls;
      // the unrounded candidates satisfy the property ...
      std::size_t raw_above = 1;  // prepended T-1
      std::set<int> rounded_above{T - 1};
      for (double p : points) {
        if (p > threshold) {
          ++raw_above;
          rounded_above.insert(std::clamp(static_cast<int>(std::lround(p)), 0, T - 1));
        }
      }
      EXPECT_GT(2 * raw_above, static_cast<std::size_t>(l)) << "l=" << l << " gamma=" << gamma;
      // ... and rounding merged some of them
      EXPECT_LT(rounded_above.size(), raw_above) << "l=" << l << " gamma=" << gamma;
    }
  }
  RecordProperty("shortfalls", shortfalls);
}

TEST(Plans, ParseAndMake) {
  EXPECT_EQ(parse_plan_mode("early"), PlanMode::exp_early);
  EXPECT_EQ(parse_plan_mode("exp_latter"), PlanMode::exp_latter);
  EXPECT_THROW(parse_plan_mode("middle"), Error);
  EXPECT_EQ(make_plan(PlanMode::uniform, 1000, 20, 60).steps, uniform_timesteps(1000, 20).steps);
  EXPECT_THROW(exponential_timesteps(1000, 0, 10, PlanMode::exp_early), Error);
  EXPECT_THROW(exponential_timesteps(1000, 10, -1, PlanMode::exp_early), Error);
  EXPECT_EQ(plan_to_json(uniform_timesteps(10, 2)).dump(), "[9,4]");
}
