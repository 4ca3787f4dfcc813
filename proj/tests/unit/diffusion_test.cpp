#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "facediff/diffusion.hpp"
#include "facediff/errors.hpp"
#include "facediff/rng.hpp"

namespace {

using namespace facediff;
using diffusion::Mat;
using diffusion::NoiseSchedule;

Mat<double> scalar(double v) { return Mat<double>::Constant(1, 1, v); }

// Two-entry schedule with alpha_2 = 0.99 and alpha_bar_2 = 0.64.
NoiseSchedule hand_schedule() {
  return diffusion::schedule_from_alpha_bars({0.64 / 0.99, 0.64});
}

TEST(Schedule, LinearEndpoints) {
  const auto s = diffusion::build_schedule(32, 1e-4, 0.02);
  ASSERT_EQ(s.betas.size(), 32u);
  EXPECT_DOUBLE_EQ(s.betas.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.betas.back(), 0.02);
  for (std::size_t i = 1; i < s.betas.size(); ++i) {
    EXPECT_NEAR(s.betas[i] - s.betas[i - 1], (0.02 - 1e-4) / 31, 1e-15);
  }
}

TEST(Schedule, SingleStep) {
  const auto s = diffusion::build_schedule(1, 0.02, 0.02);
  ASSERT_EQ(s.alpha_bars.size(), 1u);
  EXPECT_DOUBLE_EQ(s.alpha_bars[0], 0.98);
  EXPECT_DOUBLE_EQ(s.signal(1), std::sqrt(0.98));
}

TEST(Schedule, SequentialProductOracle) {
  const auto s = diffusion::build_schedule(4, 1e-4, 0.02);
  double prod = 1.0;
  for (int i = 0; i < 4; ++i) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 3.0);
  EXPECT_NEAR(s.alpha_bars[3], prod, 1e-15);
}

TEST(Schedule, RejectsBadBounds) {
  EXPECT_THROW(diffusion::build_schedule(0, 1e-4, 0.02), ConfigError);
  EXPECT_THROW(diffusion::build_schedule(8, 0.0, 0.02), ConfigError);
  EXPECT_THROW(diffusion::build_schedule(8, 1e-4, 1.0), ConfigError);
  EXPECT_THROW(diffusion::build_schedule(8, 0.03, 0.02), ConfigError);
}

TEST(Schedule, SnrStrictlyDecreasing) {
  for (int T : {1, 8, 16, 32, 64}) {
    const auto s = diffusion::make_schedule({T, 1000, 1e-4, 0.02});
    for (int t = 1; t < T; ++t) EXPECT_GT(s.snr[t - 1], s.snr[t]) << "T=" << T << " t=" << t;
    for (int t = 1; t <= T; ++t) {
      EXPECT_NEAR(s.signal(t) * s.signal(t) + s.noise(t) * s.noise(t), 1.0, 1e-12);
    }
  }
}

TEST(Schedule, RespacedStudentIsStrideTwoSubsample) {
  for (int T : {64, 32, 16}) {
    const auto teacher = diffusion::make_schedule({T, 1000, 1e-4, 0.02});
    const auto student = diffusion::make_schedule({T / 2, 1000, 1e-4, 0.02});
    EXPECT_TRUE(diffusion::same_tables(student, diffusion::subsample(teacher, 2), 0.0))
        << "T=" << T;
  }
}

TEST(QSample, ZeroNoise) {
  const auto s = diffusion::build_schedule(8, 1e-4, 0.02);
  Rng rng(3);
  const auto x0 = standard_normal<Mat<double>>(4, 5, rng);
  const auto out = diffusion::q_sample<double>(x0, 5, Mat<double>::Zero(4, 5), s);
  EXPECT_TRUE(out.x.isApprox(s.signal(5) * x0, 1e-15));
  EXPECT_EQ(out.t, 5);
}

TEST(QSample, HandValue) {
  const auto s = diffusion::schedule_from_alpha_bars({0.64});
  const auto out = diffusion::q_sample<double>(scalar(2.0), 1, scalar(1.0), s);
  EXPECT_NEAR(out.x(0, 0), 2.2, 1e-15);
}

TEST(QSample, IdentityWhenNoNoise) {
  NoiseSchedule s;
  s.num_steps = 1;
  s.betas = {0.0};
  s.alphas = {1.0};
  s.alpha_bars = {1.0};
  s.signal_scale = {1.0};
  s.noise_scale = {0.0};
  s.snr = {INFINITY};
  Rng rng(4);
  const auto x0 = standard_normal<Mat<double>>(3, 3, rng);
  const auto eps = standard_normal<Mat<double>>(3, 3, rng);
  EXPECT_EQ(diffusion::q_sample<double>(x0, 1, eps, s).x, x0);
  EXPECT_THROW(diffusion::x0_to_eps<double>({x0, 1}, x0, s), SingularityError);
}

TEST(QSample, ShapeAndRangeErrors) {
  const auto s = diffusion::build_schedule(8, 1e-4, 0.02);
  EXPECT_THROW(diffusion::q_sample<double>(Mat<double>::Zero(2, 3), 1, Mat<double>::Zero(3, 2), s),
               DimensionError);
  EXPECT_THROW(diffusion::q_sample<double>(scalar(0), 0, scalar(0), s), StepRangeError);
  EXPECT_THROW(diffusion::q_sample<double>(scalar(0), 9, scalar(0), s), StepRangeError);
}

TEST(X0ToEps, HandValue) {
  const auto s = diffusion::schedule_from_alpha_bars({0.64});
  EXPECT_NEAR(diffusion::x0_to_eps<double>({scalar(2.2), 1}, scalar(2.0), s)(0, 0), 1.0, 1e-14);
}

TEST(X0ToEps, RoundTripEveryStep) {
  const auto s = diffusion::make_schedule({32, 1000, 1e-4, 0.02});
  Rng rng(5);
  for (int t = 1; t <= 32; ++t) {
    const auto x0 = standard_normal<Mat<double>>(6, 52, rng);
    const auto eps = standard_normal<Mat<double>>(6, 52, rng);
    const auto xt = diffusion::q_sample<double>(x0, t, eps, s);
    EXPECT_LT((diffusion::x0_to_eps<double>(xt, x0, s) - eps).cwiseAbs().maxCoeff(), 1e-10);
    const Mat<double> consistent = xt.x / s.signal(t);
    EXPECT_LT(diffusion::x0_to_eps<double>(xt, consistent, s).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(AncestralStep, HandValue) {
  const auto s = hand_schedule();
  ASSERT_NEAR(s.alpha(2), 0.99, 1e-15);
  // x0_hat chosen so that the recovered noise estimate is exactly 1.
  const double x0_hat = (2.2 - 0.6) / 0.8;
  const auto next = diffusion::ancestral_step<double>({scalar(2.2), 2}, scalar(x0_hat), s,
                                                      scalar(0.0), diffusion::SigmaMode::beta);
  EXPECT_NEAR(next.x(0, 0), (1.0 / std::sqrt(0.99)) * (2.2 - (0.01 / 0.6) * 1.0), 1e-12);
  EXPECT_EQ(next.t, 1);
}

TEST(AncestralStep, SigmaModes) {
  const auto s = diffusion::build_schedule(4, 1e-4, 0.02);
  EXPECT_DOUBLE_EQ(diffusion::sigma<double>(s, 1, diffusion::SigmaMode::zero_at_last), 0.0);
  EXPECT_DOUBLE_EQ(diffusion::sigma<double>(s, 1, diffusion::SigmaMode::beta), std::sqrt(1e-4));
  EXPECT_DOUBLE_EQ(diffusion::sigma<double>(s, 3, diffusion::SigmaMode::zero_at_last),
                   std::sqrt(s.beta(3)));
  EXPECT_THROW(diffusion::ancestral_step<double>({scalar(0), 0}, scalar(0), s, scalar(0),
                                                 diffusion::SigmaMode::beta),
               StepRangeError);
}

TEST(AncestralStep, VanishingBetaKeepsLatent) {
  const auto s = diffusion::build_schedule(2, 1e-12, 1e-12);
  Rng rng(6);
  const auto x0 = standard_normal<Mat<double>>(2, 4, rng);
  const auto eps = standard_normal<Mat<double>>(2, 4, rng);
  const auto xt = diffusion::q_sample<double>(x0, 2, eps, s);
  const auto next = diffusion::ancestral_step<double>(xt, x0, s, Mat<double>::Zero(2, 4),
                                                      diffusion::SigmaMode::zero_at_last);
  EXPECT_LT((next.x - xt.x).cwiseAbs().maxCoeff(), 1e-5);
}

// Independent scalar implementation of the reverse step.
double oracle_step(double x, double x0_hat, double beta, double alpha_bar, double sigma,
                   double z) {
  const double eps = (x - std::sqrt(alpha_bar) * x0_hat) / std::sqrt(1.0 - alpha_bar);
  return (x - beta / std::sqrt(1.0 - alpha_bar) * eps) / std::sqrt(1.0 - beta) + sigma * z;
}

TEST(AncestralStep, TwoStepsMatchScalarOracle) {
  const auto s = diffusion::build_schedule(8, 1e-4, 0.02);
  // One-dimensional data N(mu, v); the denoiser is its exact posterior mean.
  const double mu = 0.3, v = 0.25;
  const auto posterior = [&](double x, int t) {
    const double a = s.signal(t), n = s.noise(t);
    return mu + a * v / (a * a * v + n * n) * (x - a * mu);
  };
  Rng rng(7);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 50; ++trial) {
    double x = normal(rng);
    double ox = x;
    diffusion::LatentState<double> state{scalar(x), 8};
    for (int t = 8; t >= 7; --t) {
      const double z = normal(rng);
      state = diffusion::ancestral_step<double>(state, scalar(posterior(state.x(0, 0), t)), s,
                                                scalar(z), diffusion::SigmaMode::zero_at_last);
      double prod = 1.0;
      for (int k = 0; k < t; ++k) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * k / 7.0);
      const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 7.0;
      ox = oracle_step(ox, posterior(ox, t), beta, prod, std::sqrt(beta), z);
    }
    EXPECT_NEAR(state.x(0, 0), ox, 1e-10);
  }
}

TEST(AncestralStep, OracleDenoiserChainReconstructs) {
  for (int T : {8, 32, 64}) {
    const auto s = diffusion::make_schedule({T, 1000, 1e-4, 0.02});
    Rng rng(static_cast<std::uint64_t>(T));
    const auto x0 = uniform<Mat<double>>(20, 52, 0.0, 1.0, rng);
    diffusion::LatentState<double> state{standard_normal<Mat<double>>(20, 52, rng), T};
    while (state.t >= 1) {
      const auto z = standard_normal<Mat<double>>(20, 52, rng);
      state = diffusion::ancestral_step<double>(state, x0, s, z,
                                                diffusion::SigmaMode::zero_at_last);
    }
    EXPECT_EQ(state.t, 0);
    EXPECT_LT((state.x - x0).cwiseAbs().maxCoeff(), 1e-6) << "T=" << T;
  }
}

}  // namespace
