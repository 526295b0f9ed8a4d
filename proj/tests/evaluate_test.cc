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

// Linear probe, few-shot selection and fine-tuning, evaluation log.

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "dpmaes/data.h"
#include "dpmaes/errors.h"
#include "dpmaes/evaluate.h"
#include "dpmaes/rng.h"
#include "test_dirs.h"

namespace dpmaes {
namespace {

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

ImageDataset Labeled(int64_t n, int64_t classes, uint64_t seed) {
  SynthOptions o;
  o.count = n;
  o.resolution = 8;
  o.seed = seed;
  o.num_classes = classes;
  o.role = DatasetRole::kEval;
  return generate_synthetic(o);
}

ImageDataset Relabel(const ImageDataset& d, const std::vector<int64_t>& labels) {
  ImageDataset out(d.resolution(), d.channels(), d.role());
  for (int64_t i = 0; i < d.size(); ++i) out.add(d.pixels(i), labels[i]);
  return out;
}

TEST(Probe, SeparableFeaturesGivePerfectAccuracy) {
  Rng rng(3);
  const int64_t n = 200, d = 5;
  Tensor x({n, d}), e({n, d});
  std::vector<int64_t> y(n), ye(n);
  for (int64_t i = 0; i < n; ++i) {
    y[i] = i % 2;
    ye[i] = (i + 1) % 2;
    for (int64_t j = 0; j < d; ++j) {
      x.data()[i * d + j] = rng.normal() + (j == 0 ? 4.0 * (2 * y[i] - 1) : 0.0);
      e.data()[i * d + j] = rng.normal() + (j == 0 ? 4.0 * (2 * ye[i] - 1) : 0.0);
    }
    // Keep the margin strictly positive.
    x.data()[i * d] = std::copysign(std::max(std::abs(x.data()[i * d]), 1.0), 2 * y[i] - 1.0);
    e.data()[i * d] = std::copysign(std::max(std::abs(e.data()[i * d]), 1.0), 2 * ye[i] - 1.0);
  }
  const ProbeResult r = probe_features(x, y, e, ye, 0);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.num_classes, 2);
  EXPECT_EQ(r.train_count, n);
  EXPECT_EQ(r.eval_count, n);
  EXPECT_EQ(r.feature_dim, d);
}

TEST(Probe, ConvergesToTolerance) {
  Rng rng(1);
  Tensor x({60, 3});
  std::vector<int64_t> y(60);
  for (int64_t i = 0; i < 60; ++i) {
    y[i] = i % 3;
    for (int64_t j = 0; j < 3; ++j) x.data()[i * 3 + j] = rng.normal() + (j == y[i]);
  }
  const LogisticFit f = fit_logistic(x, y, 3);
  EXPECT_TRUE(f.converged);
  EXPECT_LE(f.grad_norm, 1e-6);
}

TEST(Probe, PermutedLabelsGiveChance) {
  const MaeParams p = init_params(Tiny(), 5);
  const ImageDataset train = Labeled(600, 10, 1), eval = Labeled(600, 10, 2);
  std::vector<int64_t> lt = train.labels(), le = eval.labels();
  Rng rng(77);
  for (auto* v : {&lt, &le}) {
    for (size_t i = v->size() - 1; i > 0; --i) std::swap((*v)[i], (*v)[rng.below(i + 1)]);
  }
  const ProbeResult r = linear_probe(p, Relabel(train, lt), Relabel(eval, le), 0);
  EXPECT_NEAR(r.accuracy, 0.1, 0.05);
}

TEST(Probe, EncoderUnchangedAndDeterministic) {
  const MaeParams p = init_params(Tiny(), 5);
  const std::vector<double> before = p.weights.flatten();
  const ImageDataset train = Labeled(60, 3, 1), eval = Labeled(30, 3, 2);
  const ProbeResult a = linear_probe(p, train, eval, 4);
  const ProbeResult b = linear_probe(p, train, eval, 4);
  EXPECT_EQ(p.weights.flatten(), before);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_GE(a.accuracy, 0.0);
  EXPECT_LE(a.accuracy, 1.0);
  EXPECT_EQ(a.feature_dim, 16);
}

TEST(Probe, EvalClassMissingFromTrain) {
  const MaeParams p = init_params(Tiny(), 5);
  const ImageDataset eval = Labeled(30, 3, 2);
  ImageDataset train(8, 3, DatasetRole::kEval);
  const ImageDataset src = Labeled(30, 3, 1);
  for (int64_t i = 0; i < src.size(); ++i) {
    if (src.labels()[i] != 2) train.add(src.pixels(i), src.labels()[i]);
  }
  EXPECT_THROW(linear_probe(p, train, eval, 0), ProbeError);
}

TEST(FewShot, ExactlyKPerClassWithoutReplacement) {
  std::vector<int64_t> labels;
  for (int i = 0; i < 73; ++i) labels.push_back(i % 4);
  const auto sel = select_few_shot(labels, 4, 5, 9);
  ASSERT_EQ(sel.size(), 20u);
  EXPECT_EQ(std::set<int64_t>(sel.begin(), sel.end()).size(), 20u);
  std::map<int64_t, int> per;
  for (int64_t i : sel) per[labels[i]]++;
  for (int c = 0; c < 4; ++c) EXPECT_EQ(per[c], 5);
  EXPECT_EQ(sel, select_few_shot(labels, 4, 5, 9));
  EXPECT_NE(sel, select_few_shot(labels, 4, 5, 10));
}

TEST(FewShot, FullCountSelectsEverything) {
  std::vector<int64_t> labels;
  for (int i = 0; i < 30; ++i) labels.push_back(i % 3);
  auto sel = select_few_shot(labels, 3, 10, 1);
  std::sort(sel.begin(), sel.end());
  for (int64_t i = 0; i < 30; ++i) EXPECT_EQ(sel[i], i);
}

TEST(FewShot, TooFewNamesTheClass) {
  std::vector<int64_t> labels = {0, 0, 0, 1, 1, 2, 2, 2};
  try {
    select_few_shot(labels, 3, 3, 0);
    FAIL() << "expected InvalidArgumentError";
  } catch (const InvalidArgumentError& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(select_few_shot(labels, 3, 0, 0), InvalidArgumentError);
}

TEST(FewShot, FineTuneIsDeterministicAndLeavesInputAlone) {
  const MaeParams p = init_params(Tiny(), 2);
  const std::vector<double> before = p.weights.flatten();
  const ImageDataset train = Labeled(40, 4, 1), eval = Labeled(20, 4, 2);
  FewShotSpec spec;
  spec.shots = 3;
  spec.epochs = 2;
  spec.batch_size = 4;
  const ProbeResult a = few_shot_finetune(p, spec, train, eval, 6);
  const ProbeResult b = few_shot_finetune(p, spec, train, eval, 6);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.train_count, 12);
  EXPECT_EQ(a.eval_count, 20);
  EXPECT_EQ(p.weights.flatten(), before);
}

// With K equal to the whole per-class count this is plain fine-tuning; the
// model should at least fit its own training images.
TEST(FewShot, FitsItsTrainingSet) {
  const MaeParams p = init_params(Tiny(), 2);
  const ImageDataset train = Labeled(40, 2, 1);
  FewShotSpec spec;
  spec.shots = 20;
  spec.epochs = 200;
  spec.batch_size = 10;
  spec.learning_rate = 3e-3;
  spec.flip_augment = false;
  const ProbeResult r = few_shot_finetune(p, spec, train, train, 1);
  EXPECT_EQ(r.train_count, 40);
  EXPECT_GE(r.accuracy, 0.9);
}

TEST(EvalSplit, EveryFifthImageGoesToEval) {
  const ImageDataset d = Labeled(23, 3, 4);
  ImageDataset tr(8, 3, d.role()), ev(8, 3, d.role());
  split_labeled(d, &tr, &ev);
  EXPECT_EQ(tr.size(), 19);
  EXPECT_EQ(ev.size(), 4);
  EXPECT_EQ(ev.labels()[0], d.labels()[4]);
}

TEST(EvalLog, AppendsHeaderOnce) {
  TempDir t;
  const auto file = t.path() / "eval.csv";
  append_eval_log(file, eval_log_line("run1", "probe", "probe", 0.5, 3));
  append_eval_log(file, eval_log_line("run1", "finetune", "10", 0.25, 4));
  std::ifstream in(file);
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  EXPECT_EQ(l1, "run_id,task,k,accuracy,seed");
  EXPECT_EQ(l2, "run1,probe,probe,0.5,3");
  EXPECT_EQ(l3, "run1,finetune,10,0.25,4");
}

}  // namespace
}  // namespace dpmaes
