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

// Run configuration, checkpoints, and the run orchestration behind the CLI.

#include <gtest/gtest.h>

#include <csignal>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dpmaes/accountant.h"
#include "dpmaes/checkpoint.h"
#include "dpmaes/data.h"
#include "dpmaes/errors.h"
#include "dpmaes/pipeline.h"
#include "dpmaes/run_config.h"
#include "test_dirs.h"

namespace dpmaes {
namespace {

namespace fs = std::filesystem;

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// RunConfig -------------------------------------------------------------------

TEST(RunConfig, DefaultsFollowReferenceSettings) {
  const RunConfig c = RunConfig::parse("");
  EXPECT_EQ(c.model, MaeConfig::preset("vip-micro"));
  EXPECT_EQ(c.optim.clip_norm, 0.1);
  EXPECT_EQ(c.optim.learning_rate, 3.84e-4);
  EXPECT_EQ(c.optim.beta2, 0.95);
  EXPECT_EQ(c.optim.weight_decay, 0.005);
  EXPECT_EQ(c.model.mask_ratio, 0.75);
  ASSERT_TRUE(c.epsilon.has_value());
  EXPECT_EQ(*c.epsilon, 8.0);
  EXPECT_FALSE(c.delta.has_value());
  EXPECT_FALSE(c.noise_multiplier_set);
}

TEST(RunConfig, ParsesAndOverridesModelFields) {
  const RunConfig c = RunConfig::parse(
      "# comment\n"
      "run.seed = 42\n"
      "model.preset = vip-tiny\n"
      "model.mask_ratio = 0.5\n"
      "model.decoder_depth = 2\n"
      "optim.noise_multiplier = 1.25\n"
      "optim.kind = sgd\n"
      "privacy.epsilon = none\n"
      "privacy.delta = 1e-6\n");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.model.encoder_width, MaeConfig::preset("vip-tiny").encoder_width);
  EXPECT_EQ(c.model.mask_ratio, 0.5);
  EXPECT_EQ(c.model.decoder_depth, 2);
  EXPECT_TRUE(c.noise_multiplier_set);
  EXPECT_EQ(c.optim.noise_multiplier, 1.25);
  EXPECT_EQ(c.optim.optimizer, OptimizerKind::kSgd);
  EXPECT_FALSE(c.epsilon.has_value());
  EXPECT_EQ(*c.delta, 1e-6);
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(RunConfig::parse("run.sed = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("model.nonsense = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("run.seed = 1\nrun.seed = 2\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("optim.lr = fast\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("just words\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("optim.steps = 0\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("optim.clip_norm = -1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("model.preset = vip-giant\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("privacy.delta = 2\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("model.mask_ratio = 1.5\n"), ConfigError);
}

TEST(RunConfig, EffectiveTextRoundTrips) {
  const RunConfig c = RunConfig::parse(
      "run.output_dir = /tmp/x\ndata.train = /data\noptim.noise_multiplier = 0.9\n"
      "model.mask_ratio = 0.6\nprivacy.delta = 1e-5\n");
  const std::string text = c.to_text();
  EXPECT_EQ(RunConfig::parse(text).to_text(), text);
}

TEST(RunConfig, UnreadableFile) {
  EXPECT_THROW(RunConfig::load("/nonexistent/run.cfg"), ConfigError);
}

// Checkpoints ----------------------------------------------------------------

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

TEST(Checkpoint, BitExactRoundTrip) {
  Checkpoint ck;
  ck.metadata = {{"b", "two"}, {"a", "one=1"}};
  ck.tensors.add("x", Tensor({2, 3}, {0.1, -0.0, 1e-310, 1e300, -7.5, 3.0}));
  ck.tensors.add("s", Tensor::scalar(std::nan("")));
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.metadata, ck.metadata);
  ASSERT_EQ(back.tensors.names(), ck.tensors.names());
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
  EXPECT_TRUE(std::signbit(back.tensors.get("x")[1]));
  EXPECT_TRUE(std::isnan(back.tensors.get("s")[0]));
}

TEST(Checkpoint, DetectsDamage) {
  Checkpoint ck;
  ck.tensors.add("w", Tensor({4}, {1, 2, 3, 4}));
  const std::string bytes = encode_checkpoint(ck);
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(flipped), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), IoError);
  EXPECT_THROW(read_checkpoint("/nonexistent.ckpt"), IoError);
}

TEST(Checkpoint, ModelAndOptimizerStateRoundTrip) {
  TempDir t;
  const MaeParams p = init_params(Tiny(), 4);
  OptimState s;
  s.step = 7;
  s.m.assign(static_cast<size_t>(p.weights.total_size()), 0.25);
  s.v.assign(static_cast<size_t>(p.weights.total_size()), 0.5);
  write_checkpoint(t.path() / "a.ckpt", make_checkpoint(p, &s, {{"kind", "test"}}));
  const Checkpoint ck = read_checkpoint(t.path() / "a.ckpt");
  const MaeParams q = params_from_checkpoint(ck);
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(q.weights, p.weights);
  EXPECT_EQ(q.encoder_pos, p.encoder_pos);
  const OptimState r = optim_state_from_checkpoint(ck);
  EXPECT_EQ(r.step, 7);
  EXPECT_EQ(r.m, s.m);
  EXPECT_EQ(r.v, s.v);
  EXPECT_EQ(ck.metadata.at("kind"), "test");
}

TEST(Checkpoint, MissingWeightIsReported) {
  const MaeParams p = init_params(Tiny(), 4);
  Checkpoint ck = make_checkpoint(p, nullptr, {});
  Checkpoint partial;
  partial.metadata = ck.metadata;
  for (size_t i = 1; i < ck.tensors.size(); ++i) {
    partial.tensors.add(ck.tensors.names()[i], ck.tensors.value(i));
  }
  try {
    params_from_checkpoint(partial);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(ck.tensors.names()[0]), std::string::npos);
  }
}

// Runs -----------------------------------------------------------------------

struct RunFixture {
  TempDir tmp;
  fs::path data;

  explicit RunFixture(int64_t n = 40) {
    SynthOptions o;
    o.count = n;
    o.resolution = 8;
    o.seed = 21;
    o.role = DatasetRole::kPrivateTrain;
    data = tmp.path() / "data";
    generate_synthetic(o, data);
  }

  RunConfig Config(const std::string& out, int64_t steps, const std::string& extra = "") {
    return RunConfig::parse(
        "run.seed = 5\n"
        "run.output_dir = " + (tmp.path() / out).string() + "\n"
        "run.checkpoint_every = 2\n"
        "model.image_size = 8\nmodel.patch_size = 4\n"
        "model.encoder_depth = 1\nmodel.encoder_width = 16\nmodel.encoder_heads = 2\n"
        "model.decoder_depth = 1\nmodel.decoder_width = 8\nmodel.decoder_heads = 1\n"
        "data.train = " + data.string() + "\n"
        "optim.steps = " + std::to_string(steps) + "\n"
        "optim.batch_size = 8\n"
        "optim.lr = 1e-3\n" + extra);
  }
};

TEST(TrainDpRun, WritesArtifactsWithRecomputedEpsilon) {
  RunFixture f;
  const RunConfig c = f.Config("run", 5);
  std::ostringstream log;
  const RunOutcome r = run_train_dp(c, {}, false, log);
  const fs::path dir = c.output_dir;
  EXPECT_FALSE(r.interrupted);
  EXPECT_TRUE(fs::exists(dir / "config.effective"));
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "final.ckpt"));
  EXPECT_TRUE(fs::exists(step_checkpoint_path(dir, 2)));
  EXPECT_TRUE(fs::exists(step_checkpoint_path(dir, 4)));
  EXPECT_FALSE(fs::exists(dir / ".lock"));
  EXPECT_EQ(RunConfig::load(dir / "config.effective").to_text(), c.to_text());

  const PrivacyStatement s = read_privacy_statement(dir / "privacy.txt");
  EXPECT_EQ(s.status, "complete");
  EXPECT_EQ(s.steps_completed, 5);
  EXPECT_DOUBLE_EQ(s.delta, 1.0 / 80.0);
  EXPECT_DOUBLE_EQ(s.sample_rate, 8.0 / 40.0);
  // sigma came from calibration for epsilon = 8; the statement recomputes.
  const auto want = accountant::dp_guarantee({s.sample_rate, s.sigma, 5}, s.delta);
  EXPECT_EQ(s.epsilon, want.epsilon);
  EXPECT_LE(s.epsilon, 8.0);
  EXPECT_GT(s.epsilon, 7.9);

  const RunReport rep = make_report(dir);
  ASSERT_EQ(rep.steps.size(), 5u);
  for (size_t i = 1; i < rep.epsilon.size(); ++i) {
    EXPECT_GE(rep.epsilon[i], rep.epsilon[i - 1]);
  }
  EXPECT_EQ(rep.epsilon.back(), s.epsilon);
}

TEST(TrainDpRun, RerunIsByteIdentical) {
  RunFixture f;
  std::ostringstream log;
  run_train_dp(f.Config("a", 4), {}, false, log);
  run_train_dp(f.Config("b", 4), {}, false, log);
  const fs::path a = f.tmp.path() / "a", b = f.tmp.path() / "b";
  EXPECT_EQ(Slurp(a / "metrics.csv"), Slurp(b / "metrics.csv"));
  EXPECT_EQ(Slurp(a / "checkpoints/final.ckpt"), Slurp(b / "checkpoints/final.ckpt"));
  EXPECT_EQ(Slurp(a / "privacy.txt"), Slurp(b / "privacy.txt"));
}

// A run that died after its step-2 checkpoint, resumed, matches the
// uninterrupted run byte for byte.
TEST(TrainDpRun, ResumeFromPeriodicCheckpoint) {
  RunFixture f;
  std::ostringstream log;
  run_train_dp(f.Config("full", 6), {}, false, log);
  const fs::path full = f.tmp.path() / "full", crashed = f.tmp.path() / "crashed";
  fs::copy(full, crashed, fs::copy_options::recursive);
  for (const char* gone : {"checkpoints/final.ckpt", "checkpoints/step_00000004.ckpt",
                           "privacy.txt"}) {
    fs::remove(crashed / gone);
  }
  {
    std::ofstream out(crashed / "metrics.csv", std::ios::app);
    out << "99,garbage\n";
  }
  run_train_dp(f.Config("crashed", 6), {}, true, log);
  EXPECT_EQ(Slurp(full / "metrics.csv"), Slurp(crashed / "metrics.csv"));
  EXPECT_EQ(Slurp(full / "checkpoints/final.ckpt"),
            Slurp(crashed / "checkpoints/final.ckpt"));
  EXPECT_NE(log.str().find("resuming"), std::string::npos);
}

TEST(TrainDpRun, InterruptWritesStatementAndResumes) {
  RunFixture f;
  std::ostringstream log;
  install_stop_handlers();
  std::raise(SIGINT);
  ASSERT_TRUE(stop_requested());
  const RunOutcome r = run_train_dp(f.Config("run", 3), {}, false, log);
  clear_stop_request();
  EXPECT_TRUE(r.interrupted);
  EXPECT_EQ(r.steps_completed, 0);
  const fs::path dir = f.tmp.path() / "run";
  const PrivacyStatement s = read_privacy_statement(dir / "privacy.txt");
  EXPECT_EQ(s.status, "interrupted");
  EXPECT_EQ(s.steps_completed, 0);
  EXPECT_EQ(s.steps_planned, 3);
  EXPECT_EQ(s.epsilon, 0.0);
  EXPECT_TRUE(fs::exists(step_checkpoint_path(dir, 0)));

  run_train_dp(f.Config("run", 3), {}, true, log);
  run_train_dp(f.Config("ref", 3), {}, false, log);
  EXPECT_EQ(Slurp(dir / "metrics.csv"), Slurp(f.tmp.path() / "ref" / "metrics.csv"));
  EXPECT_EQ(read_privacy_statement(dir / "privacy.txt").status, "complete");
}

TEST(TrainDpRun, ExplicitSigmaSkipsCalibration) {
  RunFixture f;
  std::ostringstream log;
  const RunOutcome r =
      run_train_dp(f.Config("run", 2, "optim.noise_multiplier = 3\n"), {}, false, log);
  ASSERT_TRUE(r.privacy.has_value());
  EXPECT_EQ(r.privacy->sigma, 3.0);
  EXPECT_EQ(r.privacy->epsilon,
            accountant::dp_guarantee({0.2, 3.0, 2}, 1.0 / 80.0).epsilon);
}

TEST(TrainDpRun, ConfigProblemsComeFirst) {
  RunFixture f;
  std::ostringstream log;
  RunConfig c = f.Config("run", 2);
  c.train_data = f.tmp.path() / "missing";
  EXPECT_THROW(run_train_dp(c, {}, false, log), ConfigError);
  EXPECT_FALSE(fs::exists(f.tmp.path() / "run"));
  RunConfig none = f.Config("run", 2, "privacy.epsilon = none\n");
  EXPECT_THROW(run_train_dp(none, {}, false, log), ConfigError);
  // Infeasible budgets surface before the output directory is created.
  RunConfig tight = f.Config("run", 2000, "privacy.epsilon = 0.001\nprivacy.delta = 1e-9\n");
  EXPECT_THROW(run_train_dp(tight, {}, false, log), InfeasibleBudgetError);
  EXPECT_FALSE(fs::exists(f.tmp.path() / "run"));
}

TEST(TrainDpRun, LockedDirectoryRefused) {
  RunFixture f;
  std::ostringstream log;
  fs::create_directories(f.tmp.path() / "run");
  std::ofstream(f.tmp.path() / "run" / ".lock") << "1\n";
  EXPECT_THROW(run_train_dp(f.Config("run", 2), {}, false, log), IoError);
  EXPECT_FALSE(fs::exists(f.tmp.path() / "run" / "metrics.csv"));
}

TEST(TrainDpRun, WarmStartLoadsWeights) {
  RunFixture f;
  std::ostringstream log;
  const RunConfig c = f.Config("run", 1);
  const MaeParams warm = init_params(c.model, 999);
  const fs::path init = f.tmp.path() / "warm.ckpt";
  write_checkpoint(init, make_checkpoint(warm, nullptr, {}));
  run_train_dp(c, init, false, log);
  RunConfig other = f.Config("other", 1);
  run_train_dp(other, {}, false, log);
  // Same seed, different starting weights.
  EXPECT_NE(Slurp(f.tmp.path() / "run" / "metrics.csv"),
            Slurp(f.tmp.path() / "other" / "metrics.csv"));
  RunConfig wrong = f.Config("wrong", 1, "model.mask_ratio = 0.5\n");
  EXPECT_THROW(run_train_dp(wrong, init, false, log), ConfigError);
}

TEST(Report, EmptyDirectoryFails) {
  TempDir t;
  EXPECT_THROW(make_report(t.path()), IoError);
}

// Pretraining ------------------------------------------------------------------

// Toy pretraining: vip-micro on 96 synthetic 32px images, batch 16, 3
// epochs. Epoch losses were pinned from the first execution.
constexpr double kPinnedFirstEpoch = 0.18100107661023454;
constexpr double kPinnedLastEpoch = 0.037804789109336975;

TEST(PretrainRun, LossFallsAndMatchesPinnedValues) {
  TempDir t;
  SynthOptions o;
  o.count = 96;
  o.seed = 8;
  generate_synthetic(o, t.path() / "syn");
  const RunConfig c = RunConfig::parse(
      "run.seed = 2\nrun.output_dir = " + (t.path() / "pre").string() +
      "\nrun.checkpoint_every = 6\ndata.train = " + (t.path() / "syn").string() +
      "\npretrain.epochs = 3\npretrain.batch_size = 16\noptim.lr = 1e-3\n");
  std::ostringstream log;
  const RunOutcome r = run_pretrain(c, false, log);
  EXPECT_EQ(r.steps_completed, 18);
  const MaeParams p =
      params_from_checkpoint(read_checkpoint(t.path() / "pre/checkpoints/final.ckpt"));
  EXPECT_EQ(p.config, c.model);

  std::vector<double> epoch(3, 0.0);
  std::ifstream in(t.path() / "pre" / "pretrain.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,epoch,loss,lr");
  int rows = 0;
  while (std::getline(in, line)) {
    int64_t step = 0, e = 0;
    double loss = 0, lr = 0;
    ASSERT_EQ(std::sscanf(line.c_str(), "%ld,%ld,%lf,%lf", &step, &e, &loss, &lr), 4);
    epoch[static_cast<size_t>(e)] += loss / 6.0;
    ++rows;
  }
  EXPECT_EQ(rows, 18);
  EXPECT_LT(epoch[2], epoch[0]);
  EXPECT_NEAR(epoch[0], kPinnedFirstEpoch, 1e-6 * kPinnedFirstEpoch);
  EXPECT_NEAR(epoch[2], kPinnedLastEpoch, 1e-6 * kPinnedLastEpoch);

  // Resume from the step-6 checkpoint reproduces the run.
  fs::copy(t.path() / "pre", t.path() / "again", fs::copy_options::recursive);
  fs::remove(t.path() / "again/checkpoints/final.ckpt");
  fs::remove(t.path() / "again/checkpoints/step_00000012.ckpt");
  RunConfig again = c;
  again.output_dir = t.path() / "again";
  run_pretrain(again, true, log);
  EXPECT_EQ(Slurp(t.path() / "pre/pretrain.csv"), Slurp(t.path() / "again/pretrain.csv"));
  EXPECT_EQ(Slurp(t.path() / "pre/checkpoints/final.ckpt"),
            Slurp(t.path() / "again/checkpoints/final.ckpt"));
}

TEST(PretrainRun, MissingDatasetIsConfigError) {
  TempDir t;
  const RunConfig c = RunConfig::parse("run.output_dir = " + (t.path() / "o").string() +
                                       "\ndata.train = " + (t.path() / "nope").string() + "\n");
  std::ostringstream log;
  EXPECT_THROW(run_pretrain(c, false, log), ConfigError);
  EXPECT_THROW(run_pretrain(RunConfig::parse(""), false, log), ConfigError);
}

}  // namespace
}  // namespace dpmaes
