#include <cmath>
#include <limits>
#include <numbers>

#include <gtest/gtest.h>

#include "loopeval/optim/optim.hpp"

using namespace loopeval;
using namespace loopeval::optim;
using nn::ParamTensor;

TEST(Schedule, WarmupMidpoint) { EXPECT_NEAR(cosine_warmup_lr(100, 1000, 200, 1e-4, 1e-6), 0.5e-4, 1e-18); }

TEST(Schedule, Endpoints) {
  EXPECT_EQ(cosine_warmup_lr(0, 1000, 200, 1e-4, 1e-6), 0.0);
  EXPECT_NEAR(cosine_warmup_lr(1000, 1000, 200, 1e-4, 1e-6), 1e-6, 1e-18);
}

TEST(Schedule, CosineMidpoint) {
  EXPECT_NEAR(cosine_warmup_lr(600, 1000, 200, 1e-4, 1e-6), (1e-4 + 1e-6) / 2, 1e-12);
}

TEST(Schedule, ContinuousAtJunction) {
  const double at = cosine_warmup_lr(200, 1000, 200, 1e-4, 1e-6);
  const double ramp = 1e-4 * 200.0 / 200.0;
  EXPECT_NEAR(at, ramp, 1e-15);
  EXPECT_NEAR(cosine_warmup_lr(199, 1000, 200, 1e-4, 1e-6), 1e-4 * 199 / 200, 1e-15);
}

TEST(Schedule, ClosedFormEverywhere) {
  const std::int64_t total = 777, warm = 50;
  for (std::int64_t s = 0; s <= total; ++s) {
    double expect;
    if (s < warm) {
      expect = 3e-3 * double(s) / double(warm);
    } else {
      const double t = double(s - warm) / double(total - warm);
      expect = 1e-5 + (3e-3 - 1e-5) * (1 + std::cos(std::numbers::pi * t)) / 2;
    }
    EXPECT_NEAR(cosine_warmup_lr(s, total, warm, 3e-3, 1e-5), expect, 1e-12) << s;
  }
}

TEST(Schedule, NonIncreasingAfterWarmup) {
  double prev = cosine_warmup_lr(20, 400, 20, 1e-4, 1e-6);
  for (std::int64_t s = 21; s <= 400; ++s) {
    const double lr = cosine_warmup_lr(s, 400, 20, 1e-4, 1e-6);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(Schedule, BadArgumentsThrow) {
  EXPECT_THROW(cosine_warmup_lr(0, 100, 100, 1e-4, 1e-6), ConfigError);
  EXPECT_THROW(cosine_warmup_lr(101, 100, 10, 1e-4, 1e-6), ConfigError);
  EXPECT_THROW(cosine_warmup_lr(-1, 100, 10, 1e-4, 1e-6), ConfigError);
}

TEST(Clip, ScalesToMaxNorm) {
  ParamTensor<float> a("a", {2});
  ParamTensor<float> b("b", {2});
  a.grad = {3, 0};
  b.grad = {0, 4};
  const double scale = clip_grad_norm({&a, &b}, 1.0);
  EXPECT_NEAR(scale, 0.2, 1e-7);
  EXPECT_NEAR(a.grad[0], 0.6f, 1e-6f);
  EXPECT_NEAR(b.grad[1], 0.8f, 1e-6f);
  EXPECT_NEAR(global_grad_norm({&a, &b}), 1.0, 1e-6);
}

TEST(Clip, NormTwoGivesHalf) {
  ParamTensor<float> a("a", {1});
  a.grad = {2};
  EXPECT_NEAR(clip_grad_norm({&a}, 1.0), 0.5, 1e-12);
  EXPECT_FLOAT_EQ(a.grad[0], 1.0f);
}

TEST(Clip, SmallNormUntouched) {
  ParamTensor<float> a("a", {2});
  a.grad = {0.3f, 0};
  EXPECT_EQ(clip_grad_norm({&a}, 1.0), 1.0);
  EXPECT_EQ(a.grad[0], 0.3f);
}

TEST(Clip, Idempotent) {
  ParamTensor<float> a("a", {3});
  a.grad = {5, -2, 7};
  clip_grad_norm({&a}, 1.0);
  const auto once = a.grad;
  EXPECT_EQ(clip_grad_norm({&a}, 1.0), 1.0);
  EXPECT_EQ(a.grad, once);
}

TEST(Clip, NonFiniteThrows) {
  ParamTensor<float> a("a", {1});
  a.grad = {std::numeric_limits<float>::infinity()};
  EXPECT_THROW(clip_grad_norm({&a}, 1.0), NumericError);
  EXPECT_THROW(clip_grad_norm({&a}, 0.0), ConfigError);
}

TEST(AdamW, ZeroGradNoDecayLeavesParams) {
  ParamTensor<float> w("w", {2});
  w.values = {1.5f, -2.f};
  AdamW opt({&w}, {1e-4, 1e-6, 0.0});
  opt.step(0.1);
  EXPECT_EQ(w.values[0], 1.5f);
  EXPECT_EQ(w.values[1], -2.f);
}

TEST(AdamW, DecoupledDecay) {
  ParamTensor<float> w("w", {1});
  w.values = {1.0f};
  AdamW opt({&w}, {1e-4, 1e-6, 0.01});
  opt.step(0.1);
  EXPECT_NEAR(w.values[0], 0.999, 1e-7);
}

TEST(AdamW, FirstStepMovesByLr) {
  ParamTensor<float> w("w", {1});
  w.grad = {1.0f};
  AdamW opt({&w}, {1e-4, 1e-6, 0.0});
  opt.step(1e-4);
  // m_hat = 1, v_hat = 1 after bias correction, up to float rounding of the moments
  const float m = static_cast<float>(0.1);
  const float v = static_cast<float>(0.001);
  const double expect = -1e-4 * (double(m) / 0.1) / (std::sqrt(double(v) / 0.001) + 1e-8);
  EXPECT_NEAR(w.values[0], expect, 1e-9);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(AdamW, MatchesReferenceOverSeveralSteps) {
  ParamTensor<float> w("w", {2});
  w.values = {0.5f, -1.0f};
  AdamW opt({&w}, {1e-2, 1e-6, 0.05});
  double rw[2] = {0.5, -1.0}, rm[2] = {0, 0}, rv[2] = {0, 0};
  const double grads[4][2] = {{0.3, -0.1}, {-0.2, 0.4}, {1.0, 0.0}, {0.05, -2.0}};
  const double lrs[4] = {1e-2, 5e-3, 2e-2, 1e-3};
  for (int t = 0; t < 4; ++t) {
    w.grad = {float(grads[t][0]), float(grads[t][1])};
    opt.step(lrs[t]);
    for (int i = 0; i < 2; ++i) {
      const double g = double(float(grads[t][i]));
      rm[i] = 0.9 * rm[i] + 0.1 * g;
      rv[i] = 0.999 * rv[i] + 0.001 * g * g;
      const double mh = rm[i] / (1 - std::pow(0.9, t + 1));
      const double vh = rv[i] / (1 - std::pow(0.999, t + 1));
      rw[i] = rw[i] * (1 - lrs[t] * 0.05) - lrs[t] * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  EXPECT_NEAR(w.values[0], rw[0], 1e-6);
  EXPECT_NEAR(w.values[1], rw[1], 1e-6);
  EXPECT_EQ(opt.step_count(), 4);
  EXPECT_EQ(opt.first_moments()[0].size(), 2u);
}

TEST(AdamW, QuadraticBowlDecreases) {
  ParamTensor<float> w("w", {1});
  w.values = {1.0f};
  AdamW opt({&w}, {1e-2, 1e-6, 0.0});
  double prev = 1.0;
  for (int i = 0; i < 100; ++i) {
    w.grad = {2 * w.values[0]};
    opt.step(1e-2);
    const double loss = double(w.values[0]) * w.values[0];
    EXPECT_LT(loss, prev) << i;
    prev = loss;
  }
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  ParamTensor<float> ok("fine", {1});
  ParamTensor<float> bad("scorer.fc1.weight", {1});
  ok.grad = {1};
  bad.grad = {std::numeric_limits<float>::quiet_NaN()};
  ok.values = {3};
  AdamW opt({&ok, &bad}, {});
  try {
    opt.step(1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("scorer.fc1.weight"), std::string::npos);
  }
  EXPECT_EQ(ok.values[0], 3.0f);
  EXPECT_EQ(opt.step_count(), 0);
}
