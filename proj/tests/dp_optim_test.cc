//
// Copyright 2026 The dpmaes Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

// Clipping, noise, optimizer steps and the private training loop.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dpmaes/accountant.h"
#include "dpmaes/data.h"
#include "dpmaes/dp_optim.h"
#include "dpmaes/errors.h"
#include "dpmaes/rng.h"

namespace dpmaes {
namespace {

PerSampleGrads RandomRows(int64_t batch, uint64_t seed, double scale) {
  PerSampleGrads g(batch, {{"a", {3, 4}, 0, 12}, {"b", {5}, 12, 5}});
  Rng rng(seed);
  for (double& v : g.data()) v = scale * rng.normal();
  return g;
}

// Straight loop over rows: scale by min(1, C / ||row||).
std::vector<double> ClipOracle(std::span<const double> rows, int64_t len, double c) {
  std::vector<double> out(rows.begin(), rows.end());
  for (size_t r = 0; r * len < out.size(); ++r) {
    long double ss = 0;
    for (int64_t j = 0; j < len; ++j) ss += (long double)out[r * len + j] * out[r * len + j];
    const double norm = std::sqrt(static_cast<double>(ss));
    if (norm > c) {
      for (int64_t j = 0; j < len; ++j) out[r * len + j] *= c / norm;
    }
  }
  return out;
}

double Norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

MaeConfig Tiny() {
  MaeConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.encoder_depth = 1;
  c.encoder_width = 16;
  c.encoder_heads = 2;
  c.decoder_depth = 1;
  c.decoder_width = 8;
  c.decoder_heads = 1;
  return c;
}

ImageDataset TinyData(int64_t n) {
  SynthOptions o;
  o.count = n;
  o.resolution = 8;
  o.seed = 31;
  o.role = DatasetRole::kPrivateTrain;
  return generate_synthetic(o);
}

// Clipping -------------------------------------------------------------------

TEST(Clip, MatchesLoopOracleAndBound) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    PerSampleGrads g = RandomRows(8, seed, 0.05 + 0.1 * seed);
    const std::vector<double> before(g.data().begin(), g.data().end());
    const double c = 0.1 + 0.05 * (seed % 4);
    const ClipStats s = clip_per_sample(g, c);
    const std::vector<double> want = ClipOracle(before, g.row_length(), c);
    for (size_t i = 0; i < want.size(); ++i) {
      ASSERT_NEAR(g.data()[i], want[i], 1e-15 * std::max(1.0, std::abs(want[i])));
    }
    int64_t over = 0;
    for (int64_t b = 0; b < g.batch_size(); ++b) {
      EXPECT_LE(g.row_norm(b), c * (1 + 1e-6));
      if (s.norms[b] > c) ++over;
      EXPECT_NEAR(s.norms[b], Norm(std::span<const double>(before).subspan(b * 17, 17)), 1e-12);
    }
    EXPECT_EQ(s.clipped, over);
  }
}

TEST(Clip, Idempotent) {
  PerSampleGrads g = RandomRows(6, 4, 1.0);
  clip_per_sample(g, 0.3);
  const std::vector<double> once(g.data().begin(), g.data().end());
  clip_per_sample(g, 0.3);
  for (size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(g.data()[i], once[i], 1e-16);
}

TEST(Clip, SaturatesForLargeRows) {
  const double c = 0.1;
  PerSampleGrads base = RandomRows(4, 9, 1.0);  // every row norm >> C
  PerSampleGrads clipped_base = base;
  clip_per_sample(clipped_base, c);
  for (double k : {1.0, 1.5, 10.0, 1e3, 1e6}) {
    PerSampleGrads g = base;
    for (double& v : g.data()) v *= k;
    clip_per_sample(g, c);
    for (size_t i = 0; i < g.data().size(); ++i) {
      ASSERT_NEAR(g.data()[i], clipped_base.data()[i], 1e-15) << "k=" << k;
    }
  }
}

TEST(Clip, SmallAndZeroRowsUntouched) {
  PerSampleGrads g = RandomRows(3, 2, 1e-3);
  std::fill(g.row(1).begin(), g.row(1).end(), 0.0);
  const std::vector<double> before(g.data().begin(), g.data().end());
  const ClipStats s = clip_per_sample(g, 1.0);
  EXPECT_EQ(s.clipped, 0);
  for (size_t i = 0; i < before.size(); ++i) EXPECT_EQ(g.data()[i], before[i]);
}

// Noise ----------------------------------------------------------------------

TEST(Noise, ZeroSigmaGivesExactMean) {
  PerSampleGrads g = RandomRows(4, 3, 0.2);
  Rng rng(1);
  const std::vector<double> m = noisy_mean(g, 0.0, 0.1, 4.0, rng);
  for (int64_t j = 0; j < g.row_length(); ++j) {
    double s = 0;
    for (int64_t b = 0; b < 4; ++b) s += g.row(b)[j];
    EXPECT_DOUBLE_EQ(m[j], s / 4.0);
  }
}

TEST(Noise, EmpiricalStdWithinTwoPercent) {
  PerSampleGrads empty(0, {{"w", {100000}, 0, 100000}});
  const double sigma = 2.0, c = 0.5;
  Rng rng(derive_seed(5, SeedPurpose::kNoise, 0));
  const std::vector<double> z = noisy_mean(empty, sigma, c, 1.0, rng);
  ASSERT_EQ(z.size(), 100000u);
  const double mean = std::accumulate(z.begin(), z.end(), 0.0) / z.size();
  double var = 0;
  for (double v : z) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (z.size() - 1));
  EXPECT_NEAR(sd / (sigma * c), 1.0, 0.02);
  EXPECT_NEAR(mean, 0.0, 5 * sigma * c / std::sqrt(1e5));
}

TEST(Noise, ScalesWithClipNorm) {
  PerSampleGrads empty(0, {{"w", {50}, 0, 50}});
  Rng r1(8), r2(8);
  const auto a = noisy_mean(empty, 1.0, 0.1, 3.0, r1);
  const auto b = noisy_mean(empty, 1.0, 0.2, 3.0, r2);
  for (size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], 2 * a[i], 1e-15);
}

TEST(Noise, NonPositiveBatchNormRejected) {
  PerSampleGrads g = RandomRows(2, 1, 1.0);
  Rng rng(0);
  EXPECT_THROW(noisy_mean(g, 1.0, 0.1, 0.0, rng), InvalidArgumentError);
  EXPECT_THROW(noisy_mean(g, 1.0, 0.1, -2.0, rng), InvalidArgumentError);
}

// Optimizer steps ------------------------------------------------------------

TEST(Sgd, HandExample) {
  std::vector<double> theta = {1.0};
  const std::vector<double> g = {0.5};
  dp_sgd_step(theta, g, 0.1);
  EXPECT_DOUBLE_EQ(theta[0], 0.95);
  dp_sgd_step(theta, g, 0.0);
  EXPECT_DOUBLE_EQ(theta[0], 0.95);
}

DpOptimConfig AdamConfig(double eps) {
  DpOptimConfig c;
  c.optimizer = OptimizerKind::kAdamW;
  c.beta1 = 0.9;
  c.beta2 = 0.95;
  c.weight_decay = 0.005;
  c.adam_epsilon = eps;
  return c;
}

// m_hat = 0.5, v_hat = 0.25: theta' = 1 - 0.1 (0.5 / 0.5 + 0.005) = 0.8995.
TEST(AdamW, HandExample) {
  std::vector<double> theta = {1.0};
  OptimState s;
  dp_adamw_step(theta, s, std::vector<double>{0.5}, AdamConfig(0.0), 0.1);
  EXPECT_NEAR(theta[0], 0.8995, 1e-12);
  EXPECT_EQ(s.step, 1);
  EXPECT_NEAR(s.m[0], 0.05, 1e-15);
  EXPECT_NEAR(s.v[0], 0.0125, 1e-15);
}

// With the numerical epsilon of 1e-8 the step is smaller by 2e-9; checked
// against the closed form rather than the rounded 0.8995.
TEST(AdamW, HandExampleWithEpsilon) {
  std::vector<double> theta = {1.0};
  OptimState s;
  dp_adamw_step(theta, s, std::vector<double>{0.5}, AdamConfig(1e-8), 0.1);
  EXPECT_NEAR(theta[0], 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.005), 1e-12);
  EXPECT_NEAR(theta[0], 0.8995, 1e-8);
}

TEST(AdamW, NoDecayIsPlainAdaptiveStep) {
  DpOptimConfig c = AdamConfig(1e-8);
  c.weight_decay = 0.0;
  std::vector<double> theta = {2.0, -1.0};
  OptimState s;
  const std::vector<double> g1 = {0.3, -0.2}, g2 = {0.1, 0.4};
  dp_adamw_step(theta, s, g1, c, 0.01);
  dp_adamw_step(theta, s, g2, c, 0.01);
  for (int i = 0; i < 2; ++i) {
    double th = i == 0 ? 2.0 : -1.0, m = 0, v = 0;
    for (int t = 1; t <= 2; ++t) {
      const double g = (t == 1 ? g1 : g2)[i];
      m = 0.9 * m + 0.1 * g;
      v = 0.95 * v + 0.05 * g * g;
      th -= 0.01 * (m / (1 - std::pow(0.9, t))) /
            (std::sqrt(v / (1 - std::pow(0.95, t))) + 1e-8);
    }
    EXPECT_NEAR(theta[i], th, 1e-14);
  }
}

TEST(AdamW, Deterministic) {
  auto run = [] {
    std::vector<double> theta(10, 0.3);
    OptimState s;
    Rng rng(4);
    for (int t = 0; t < 5; ++t) {
      std::vector<double> g(10);
      for (double& x : g) x = rng.normal();
      dp_adamw_step(theta, s, g, AdamConfig(1e-8), 0.01);
    }
    return std::make_pair(theta, s.m);
  };
  EXPECT_EQ(run(), run());
}

TEST(Schedule, WarmupThenCosineToFloor) {
  DpOptimConfig c;
  c.learning_rate = 1.0;
  c.warmup_steps = 4;
  c.total_steps = 14;
  c.lr_floor_fraction = 0.1;
  EXPECT_DOUBLE_EQ(c.learning_rate_at(0), 0.25);
  EXPECT_DOUBLE_EQ(c.learning_rate_at(3), 1.0);
  EXPECT_DOUBLE_EQ(c.learning_rate_at(4), 1.0);
  EXPECT_NEAR(c.learning_rate_at(13), 0.1, 1e-15);
  for (int64_t t = 4; t < 13; ++t) {
    EXPECT_GE(c.learning_rate_at(t), c.learning_rate_at(t + 1));
  }
}

// Training loop --------------------------------------------------------------

TrainDpOptions LoopOptions(int64_t steps) {
  TrainDpOptions o;
  o.optim.optimizer = OptimizerKind::kAdamW;
  o.optim.learning_rate = 1e-3;
  o.optim.total_steps = steps;
  o.optim.expected_batch_size = 6;
  o.optim.noise_multiplier = 0.7;
  o.seed = 12;
  o.chunk_size = 4;
  return o;
}

TEST(TrainDp, ZeroStepsRejected) {
  EXPECT_THROW(LoopOptions(0).optim.validate(), ConfigError);
  EXPECT_THROW(train_dp(init_params(Tiny(), 1), TinyData(20), LoopOptions(0)),
               ConfigError);
}

TEST(TrainDp, ExactlyTStepsAndRealizedBudget) {
  const ImageDataset data = TinyData(30);
  const TrainDpOptions o = LoopOptions(5);
  const TrainDpResult r = train_dp(init_params(Tiny(), 1), data, o);
  ASSERT_EQ(r.reports.size(), 5u);
  EXPECT_EQ(r.steps_completed, 5);
  const double q = 6.0 / 30.0;
  EXPECT_DOUBLE_EQ(r.sample_rate, q);
  EXPECT_DOUBLE_EQ(r.delta, 1.0 / 60.0);
  const auto want = accountant::dp_guarantee({q, 0.7, 5}, 1.0 / 60.0);
  EXPECT_EQ(r.realized.epsilon, want.epsilon);
  EXPECT_EQ(r.reports.back().epsilon, want.epsilon);
  for (size_t t = 0; t < r.reports.size(); ++t) {
    EXPECT_EQ(r.reports[t].step, static_cast<int64_t>(t));
    EXPECT_EQ(r.reports[t].noise_draws, 1);
    if (t > 0) {
      EXPECT_GT(r.reports[t].epsilon, r.reports[t - 1].epsilon);
    }
  }
}

TEST(TrainDp, NoiselessUnclippedMatchesNonPrivate) {
  const ImageDataset data = TinyData(24);
  TrainDpOptions priv = LoopOptions(4);
  priv.optim.noise_multiplier = 0.0;
  priv.optim.clip_norm = 1e12;
  TrainDpOptions plain = priv;
  plain.private_mode = false;
  const TrainDpResult a = train_dp(init_params(Tiny(), 2), data, priv);
  const TrainDpResult b = train_dp(init_params(Tiny(), 2), data, plain);
  EXPECT_EQ(a.params.weights.flatten(), b.params.weights.flatten());
  for (size_t t = 0; t < a.reports.size(); ++t) {
    EXPECT_EQ(a.reports[t].loss_mean, b.reports[t].loss_mean);
    EXPECT_EQ(a.reports[t].clipped_fraction, 0.0);
  }
}

TEST(TrainDp, SameSeedSameRun) {
  const ImageDataset data = TinyData(24);
  const TrainDpResult a = train_dp(init_params(Tiny(), 3), data, LoopOptions(3));
  const TrainDpResult b = train_dp(init_params(Tiny(), 3), data, LoopOptions(3));
  EXPECT_EQ(a.params.weights.flatten(), b.params.weights.flatten());
  EXPECT_EQ(a.state.m, b.state.m);
  EXPECT_EQ(a.state.v, b.state.v);
  for (size_t t = 0; t < a.reports.size(); ++t) {
    EXPECT_EQ(metrics_line(a.reports[t]), metrics_line(b.reports[t]));
  }
}

TEST(TrainDp, ResumeEqualsUninterrupted) {
  const ImageDataset data = TinyData(24);
  const TrainDpResult full = train_dp(init_params(Tiny(), 3), data, LoopOptions(6));
  TrainDpOptions first = LoopOptions(6);
  int calls = 0;
  first.should_stop = [&] { return calls++ >= 2; };
  const TrainDpResult part = train_dp(init_params(Tiny(), 3), data, first);
  ASSERT_EQ(part.steps_completed, 2);
  const TrainDpResult rest = train_dp(part.params, data, LoopOptions(6), part.state);
  EXPECT_EQ(rest.steps_completed, 6);
  EXPECT_EQ(rest.params.weights.flatten(), full.params.weights.flatten());
  EXPECT_EQ(rest.realized.epsilon, full.realized.epsilon);
}

TEST(TrainDp, InterruptedRunAccountsOnlyCompletedSteps) {
  TrainDpOptions o = LoopOptions(10);
  int calls = 0;
  o.should_stop = [&] { return calls++ >= 3; };
  const TrainDpResult r = train_dp(init_params(Tiny(), 1), TinyData(30), o);
  EXPECT_EQ(r.steps_completed, 3);
  EXPECT_EQ(r.realized.epsilon,
            accountant::dp_guarantee({0.2, 0.7, 3}, 1.0 / 60.0).epsilon);
}

TEST(TrainDp, CalibratesWhenTargetGiven) {
  TrainDpOptions o = LoopOptions(2);
  o.target = accountant::PrivacyBudget{8.0, 1e-3};
  const ResolvedNoise r = resolve_noise(o, 30);
  EXPECT_EQ(r.sigma, accountant::calibrate_sigma(*o.target, 0.2, 2));
  EXPECT_EQ(r.delta, 1e-3);
  o.target = accountant::PrivacyBudget{1e-4, 1e-9};
  o.optim.total_steps = 100000;
  EXPECT_THROW(resolve_noise(o, 30), InfeasibleBudgetError);
}

TEST(TrainDp, EmptyBatchStillSteps) {
  TrainDpOptions o = LoopOptions(3);
  o.sample_rate = 1e-9;
  const TrainDpResult r = train_dp(init_params(Tiny(), 1), TinyData(10), o);
  ASSERT_EQ(r.reports.size(), 3u);
  for (const auto& rep : r.reports) {
    EXPECT_EQ(rep.realized_batch, 0);
    EXPECT_TRUE(std::isnan(rep.loss_mean));
    EXPECT_EQ(rep.noise_draws, 1);
  }
  EXPECT_NE(r.params.weights.flatten(), init_params(Tiny(), 1).weights.flatten());
}

TEST(TrainDp, MetricsLineFormat) {
  DpStepReport r;
  r.step = 3;
  r.loss_mean = 0.25;
  r.norm_median = 1.5;
  r.clipped_fraction = 1.0;
  r.realized_batch = 17;
  r.lr = 1e-3;
  r.epsilon = 2.5;
  EXPECT_EQ(metrics_header(),
            "step,loss_mean,preclip_median_norm,clipped_fraction,realized_batch,lr,epsilon");
  EXPECT_EQ(metrics_line(r), "3,0.25,1.5,1,17,0.001,2.5");
}

// The reference large-scale setting: C = 0.1, q = 81920 / n, sigma = 0.5,
// delta = 1 / (2n) with n = 233M stays inside epsilon = 8 for ten thousand
// steps.
TEST(TrainDp, ReferencePresetIsCoherent) {
  const int64_t n = 233000000;
  TrainDpOptions o;
  o.optim.clip_norm = 0.1;
  o.optim.noise_multiplier = 0.5;
  o.optim.expected_batch_size = 81920;
  o.optim.total_steps = 10000;
  const ResolvedNoise r = resolve_noise(o, n);
  EXPECT_DOUBLE_EQ(r.sample_rate, 81920.0 / n);
  EXPECT_DOUBLE_EQ(r.delta, 1.0 / (2.0 * n));
  const auto eps = accountant::dp_guarantee({r.sample_rate, 0.5, 10000}, r.delta);
  EXPECT_LE(eps.epsilon, 8.0);
  EXPECT_GT(eps.epsilon, 1.0);
}

}  // namespace
}  // namespace dpmaes
