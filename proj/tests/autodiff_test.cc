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

#include "dpmaes/autodiff.h"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "dpmaes/errors.h"
#include "dpmaes/rng.h"
#include "grad_check.h"
#include "kernel_cases.h"

namespace dpmaes {
namespace {

using testing::LossBuilder;
using testing::MaxFiniteDifferenceError;
using testing::RandomTensor;
using testing::RelativeDifference;
using testing::KernelCase;
using testing::KernelCases;
using testing::Project;
using testing::RandomParams;
using testing::SampleInput;

constexpr int kSeeds = 20;
constexpr double kKernelTolerance = 1e-4;
constexpr double kPerSampleTolerance = 1e-6;

// Kernel examples ------------------------------------------------------------

TEST(Kernels, MatmulScalar) {
  Graph g;
  Var a = g.constant(Tensor({1, 1}, {2.0}));
  Var b = g.constant(Tensor({1, 1}, {3.0}));
  EXPECT_EQ(g.value(g.matmul(a, b))[0], 6.0);
}

TEST(Kernels, LayerNormOfConstantIsZero) {
  Graph g;
  Var x = g.constant(Tensor({5}, 3.25));
  Var y = g.layer_norm(x, g.constant(Tensor({5}, 1.0)),
                       g.constant(Tensor({5}, 0.0)));
  for (double v : g.value(y).data()) EXPECT_EQ(v, 0.0);
}

TEST(Kernels, SoftmaxOfZerosIsUniform) {
  Graph g;
  Var y = g.softmax(g.constant(Tensor({2}, 0.0)));
  EXPECT_EQ(g.value(y)[0], 0.5);
  EXPECT_EQ(g.value(y)[1], 0.5);
}

TEST(Kernels, GeluMatchesErfForm) {
  Graph g;
  Var y = g.gelu(g.constant(Tensor({3}, {-1.0, 0.0, 2.0})));
  EXPECT_NEAR(g.value(y)[0], -0.15865525393145707, 1e-15);
  EXPECT_EQ(g.value(y)[1], 0.0);
  EXPECT_NEAR(g.value(y)[2], 1.9544997361036416, 1e-15);
}

TEST(Kernels, CrossEntropyOfUniformLogits) {
  Graph g;
  Var y = g.cross_entropy(g.constant(Tensor({1, 4}, 0.0)), {2});
  EXPECT_NEAR(g.value(y)[0], std::log(4.0), 1e-15);
}

TEST(Kernels, ShapeErrorsNameBothShapes) {
  Graph g;
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({4, 5}));
  try {
    g.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4x5]"), std::string::npos);
  }
  EXPECT_THROW(g.add(a, b), ShapeError);
  EXPECT_THROW(g.reshape(a, {5}), ShapeError);
  EXPECT_THROW(g.transpose(a, {0, 0}), ShapeError);
  EXPECT_THROW(g.gather_rows(a, std::vector<int64_t>{2}), ShapeError);
  EXPECT_THROW(g.concat_rows(a, b), ShapeError);
}

TEST(Kernels, SharedOperandCannotSpanSampleAxis) {
  Graph g(2);
  Var x = g.sample_constant(Tensor({2, 3}));
  Var w = g.constant(Tensor({2, 3}));
  EXPECT_THROW(g.add(x, w), ShapeError);
  EXPECT_THROW(g.sample_constant(Tensor({3, 3})), ShapeError);
}

// backward examples ----------------------------------------------------------

TEST(Backward, SumOfSquares) {
  Graph g;
  Var w = g.parameter("w", Tensor({2}, {1.0, -2.0}));
  auto grads = g.backward(g.sum_sq(w, Reduce::kAll));
  EXPECT_EQ(grads.at("w")[0], 2.0);
  EXPECT_EQ(grads.at("w")[1], -4.0);
}

TEST(Backward, ConstantLossGivesZeroGrads) {
  Graph g;
  Var w = g.parameter("w", Tensor({3}, 1.5));
  (void)w;
  Var loss = g.sum(g.constant(Tensor({4}, 2.0)), Reduce::kAll);
  auto grads = g.backward(loss);
  ASSERT_EQ(grads.at("w").shape(), Shape{3});
  for (double v : grads.at("w").data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, NonScalarLossRejected) {
  Graph g;
  Var w = g.parameter("w", Tensor({2}, 1.0));
  EXPECT_THROW(g.backward(w), InvalidArgumentError);
}

TEST(Backward, DuplicateParameterNameRejected) {
  Graph g;
  g.parameter("w", Tensor({1}));
  EXPECT_THROW(g.parameter("w", Tensor({1})), InvalidArgumentError);
}

TEST(Backward, ParametersUntouched) {
  Graph g;
  Tensor init({3}, {0.5, -1.0, 2.0});
  Var w = g.parameter("w", init);
  g.backward(g.sum_sq(g.gelu(w), Reduce::kAll));
  EXPECT_EQ(g.value(w), init);
}

TEST(Backward, MatmulChainMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    const LossBuilder build = [](Graph& g, const std::vector<Var>& p) {
      return g.sum_sq(g.matmul(g.matmul(p[0], p[1]), p[2]), Reduce::kAll);
    };
    auto params = RandomParams({{3, 4}, {4, 5}, {5, 2}}, seed);
    EXPECT_LT(MaxFiniteDifferenceError(params, 0, build), 1e-5)
        << "seed " << seed;
  }
}

// Finite-difference checks, one per kernel and operand configuration ---------

TEST(FiniteDifference, EveryKernel) {
  for (const KernelCase& kc : KernelCases()) {
    for (int seed = 0; seed < kSeeds; ++seed) {
      const uint64_t s = static_cast<uint64_t>(seed) * 7919 + 13;
      const LossBuilder build = [&](Graph& g, const std::vector<Var>& p) {
        return Project(g, kc.body(g, p, s), s);
      };
      auto params = RandomParams(kc.param_shapes, s);
      const double err = MaxFiniteDifferenceError(params, kc.batch, build);
      EXPECT_LT(err, kKernelTolerance) << kc.name << " seed " << seed;
    }
  }
}

// Per-sample gradients -------------------------------------------------------

// Toy MLP on [B, 5] inputs: two linear layers, GELU, layer norm, squared norm.
Var ToyMlpLosses(Graph& g, const Tensor& inputs,
                 const std::vector<Tensor>& params) {
  Var w1 = g.parameter("w1", params[0]);
  Var b1 = g.parameter("b1", params[1]);
  Var w2 = g.parameter("w2", params[2]);
  Var b2 = g.parameter("b2", params[3]);
  Var gamma = g.parameter("gamma", params[4]);
  Var beta = g.parameter("beta", params[5]);
  Var x = g.sample_constant(inputs);
  Var h = g.gelu(g.add(g.matmul(x, w1), b1));
  Var y = g.layer_norm(g.add(g.matmul(h, w2), b2), gamma, beta);
  return g.sum_sq(y, Reduce::kPerSample);
}

std::vector<Tensor> ToyMlpParams(uint64_t seed) {
  return RandomParams({{5, 8}, {8}, {8, 3}, {3}, {3}, {3}}, seed, 0.7);
}

Tensor SampleRow(const Tensor& batch, int64_t b) {
  return batch.slice0(b, 1);
}

TEST(PerSample, SingleSampleEqualsBackward) {
  Rng rng(3);
  Tensor x = RandomTensor({1, 5}, rng);
  auto params = ToyMlpParams(3);
  Graph g(1);
  Var losses = ToyMlpLosses(g, x, params);
  PerSampleGrads rows = g.per_sample_backward(losses);
  auto full = g.backward(g.sum(losses, Reduce::kAll));
  for (const auto& slot : rows.slots()) {
    EXPECT_EQ(rows.grad(0, slot.name), full.at(slot.name)) << slot.name;
  }
}

TEST(PerSample, ToyMlpMatchesLoopOracle) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(seed, SeedPurpose::kSynthetic, 1));
    Tensor x = RandomTensor({4, 5}, rng);
    auto params = ToyMlpParams(seed);
    Graph g(4);
    PerSampleGrads rows = g.per_sample_backward(ToyMlpLosses(g, x, params));
    for (int64_t b = 0; b < 4; ++b) {
      Graph single(1);
      Var loss = single.sum(ToyMlpLosses(single, SampleRow(x, b), params),
                            Reduce::kAll);
      auto ref = single.backward(loss);
      std::vector<double> flat;
      for (const auto& slot : rows.slots()) {
        const Tensor& t = ref.at(slot.name);
        flat.insert(flat.end(), t.data().begin(), t.data().end());
      }
      EXPECT_LT(RelativeDifference(rows.row(b), flat), kPerSampleTolerance)
          << "seed " << seed << " sample " << b;
    }
  }
}

TEST(PerSample, RowSumsMatchFullBatch) {
  Rng rng(11);
  Tensor x = RandomTensor({6, 5}, rng);
  auto params = ToyMlpParams(11);
  Graph g(6);
  Var losses = ToyMlpLosses(g, x, params);
  PerSampleGrads rows = g.per_sample_backward(losses);
  auto full = g.backward(g.sum(losses, Reduce::kAll));
  std::vector<double> flat;
  for (const auto& slot : rows.slots()) {
    const Tensor& t = full.at(slot.name);
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  }
  EXPECT_LT(RelativeDifference(rows.row_sum(), flat), 1e-12);
}

TEST(PerSample, BatchStatisticsAreRejected) {
  Rng rng(5);
  Graph g(3);
  Var w = g.parameter("w", RandomTensor({4}, rng));
  Var x = g.mul(g.sample_constant(RandomTensor({3, 4}, rng)), w);
  // Batch-norm style centering mixes samples.
  Var centered = g.sub(x, g.mean_axis(x, 0));
  Var losses = g.sum_sq(centered, Reduce::kPerSample);
  EXPECT_TRUE(g.coupled(losses));
  EXPECT_THROW(g.per_sample_backward(losses), NonSeparableGraphError);
  EXPECT_NO_THROW(g.backward(g.sum(losses, Reduce::kAll)));
}

TEST(PerSample, CrossSampleOpsMarkCoupling) {
  Graph g(2);
  Var w = g.parameter("w", Tensor({3}, 1.0));
  Var x = g.mul(g.sample_constant(Tensor({2, 3}, 1.0)), w);
  EXPECT_FALSE(g.coupled(x));
  EXPECT_TRUE(g.coupled(g.transpose(x, {1, 0})));
  EXPECT_TRUE(g.coupled(g.reshape(x, {6})));
  EXPECT_FALSE(g.coupled(g.reshape(x, {2, 3, 1})));
  Var pooled = g.sum(x, Reduce::kAll);
  EXPECT_TRUE(g.coupled(pooled));
  Var mixed = g.add(x, pooled);
  EXPECT_THROW(g.per_sample_backward(g.sum_sq(mixed, Reduce::kPerSample)),
               NonSeparableGraphError);
}

TEST(PerSample, LossMustBeBatchedVector) {
  Graph g(2);
  Var w = g.parameter("w", Tensor({3}, 1.0));
  Var x = g.mul(g.sample_constant(Tensor({2, 3}, 1.0)), w);
  EXPECT_THROW(g.per_sample_backward(x), InvalidArgumentError);
  EXPECT_THROW(g.per_sample_backward(g.sum(w, Reduce::kAll)),
               InvalidArgumentError);
}

// Random small graphs built from the transformer op vocabulary. Every
// sample-dependent choice is drawn from (seed, sample id) so the same graph
// can be rebuilt for a single sample.
constexpr int64_t kRows = 4;
constexpr int64_t kCols = 6;

Var RandomGraphLosses(Graph& g, uint64_t seed, const Tensor& inputs,
                      const std::vector<int64_t>& sample_ids,
                      std::map<std::string, Tensor>* values_by_name = nullptr) {
  Rng plan(derive_seed(seed, SeedPurpose::kInit, 1));
  Rng values(derive_seed(seed, SeedPurpose::kInit, 2));
  const int64_t B = static_cast<int64_t>(sample_ids.size());
  auto param = [&](const std::string& name, Shape shape, double scale) {
    Tensor init = RandomTensor(std::move(shape), values, scale);
    if (values_by_name != nullptr) {
      auto [it, fresh] = values_by_name->try_emplace(name, init);
      if (!fresh) init = it->second;
    }
    return g.parameter(name, std::move(init));
  };
  Var h = g.sample_constant(inputs);
  const int ops = 3 + static_cast<int>(plan.below(6));
  for (int i = 0; i < ops; ++i) {
    const std::string tag = "op" + std::to_string(i);
    switch (plan.below(10)) {
      case 0:
        h = g.matmul(h, param(tag + ".w", {kCols, kCols}, 0.5));
        break;
      case 1:
        h = g.add(h, param(tag + ".b", {kCols}, 0.5));
        break;
      case 2:
        h = g.gelu(h);
        break;
      case 3:
        h = g.softmax(h);
        break;
      case 4:
        h = g.layer_norm(h, param(tag + ".g", {kCols}, 1.0),
                         param(tag + ".beta", {kCols}, 0.5));
        break;
      case 5: {
        Var t = g.transpose(h, {0, 2, 1});
        t = g.matmul(t, param(tag + ".w", {kRows, kRows}, 0.5));
        h = g.transpose(t, {0, 2, 1});
        break;
      }
      case 6: {
        Var scores =
            g.scale(g.matmul(h, g.transpose(h, {0, 2, 1})), 0.4);
        h = g.matmul(g.softmax(scores), h);
        break;
      }
      case 7: {
        Var ext = g.concat_rows(h, param(tag + ".tok", {1, kCols}, 0.5));
        std::vector<std::vector<int64_t>> lists;
        for (int64_t b = 0; b < B; ++b) {
          Rng pick(derive_seed(seed, SeedPurpose::kMasking,
                               static_cast<uint64_t>(sample_ids[b] * 100 + i)));
          std::vector<int64_t> list;
          for (int64_t r = 0; r < kRows; ++r) {
            list.push_back(static_cast<int64_t>(pick.below(kRows + 1)));
          }
          lists.push_back(std::move(list));
        }
        h = g.gather_rows(ext, lists);
        break;
      }
      case 8: {
        Var pos = g.gather_rows(param(tag + ".pos", {kRows + 2, kCols}, 0.5),
                                std::vector<int64_t>{5, 0, 2, 1});
        h = g.add(h, g.gelu(pos));
        break;
      }
      default: {
        Var flat = g.reshape(h, {B, kRows * kCols});
        flat = g.mul(flat, param(tag + ".s", {kRows * kCols}, 1.0));
        h = g.reshape(flat, {B, kRows, kCols});
        break;
      }
    }
  }
  return g.sum_sq(h, Reduce::kPerSample);
}

TEST(PerSampleProperties, RandomGraphsAgreeWithLoopAndSum) {
  constexpr int64_t kBatch = 5;
  for (uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(derive_seed(seed, SeedPurpose::kSynthetic, 0));
    Tensor x = RandomTensor({kBatch, kRows, kCols}, rng);
    std::vector<int64_t> ids = {0, 1, 2, 3, 4};
    Graph g(kBatch);
    Var losses = RandomGraphLosses(g, seed, x, ids);
    PerSampleGrads rows = g.per_sample_backward(losses);

    auto full = g.backward(g.sum(losses, Reduce::kAll));
    std::vector<double> flat;
    for (const auto& slot : rows.slots()) {
      const Tensor& t = full.at(slot.name);
      flat.insert(flat.end(), t.data().begin(), t.data().end());
    }
    EXPECT_LT(RelativeDifference(rows.row_sum(), flat), 1e-12)
        << "seed " << seed;

    for (int64_t b = 0; b < kBatch; ++b) {
      Graph single(1);
      Var loss = single.sum(
          RandomGraphLosses(single, seed, SampleRow(x, b), {ids[b]}),
          Reduce::kAll);
      auto ref = single.backward(loss);
      std::vector<double> expect;
      for (const auto& slot : rows.slots()) {
        const Tensor& t = ref.at(slot.name);
        expect.insert(expect.end(), t.data().begin(), t.data().end());
      }
      EXPECT_LT(RelativeDifference(rows.row(b), expect), kPerSampleTolerance)
          << "seed " << seed << " sample " << b;
    }
  }
}

// Entry-wise central differences through whole random graphs. The first
// build records the parameter values; later builds replay them by name.
TEST(PerSampleProperties, RandomGraphsPassFiniteDifferences) {
  constexpr double kH = 1e-5;
  for (uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(seed, SeedPurpose::kSynthetic, 0));
    Tensor x = RandomTensor({2, kRows, kCols}, rng);
    std::map<std::string, Tensor> params;
    auto loss_value = [&] {
      Graph g(2);
      Var loss = g.sum(RandomGraphLosses(g, seed, x, {0, 1}, &params),
                       Reduce::kAll);
      return g.value(loss)[0];
    };
    std::map<std::string, Tensor> analytic;
    {
      Graph g(2);
      analytic = g.backward(g.sum(
          RandomGraphLosses(g, seed, x, {0, 1}, &params), Reduce::kAll));
    }
    for (auto& [name, value] : params) {
      std::vector<double> fd(static_cast<size_t>(value.numel()));
      for (int64_t i = 0; i < value.numel(); ++i) {
        const double saved = value[i];
        value[i] = saved + kH;
        const double plus = loss_value();
        value[i] = saved - kH;
        const double minus = loss_value();
        value[i] = saved;
        fd[static_cast<size_t>(i)] = (plus - minus) / (2 * kH);
      }
      EXPECT_LT(RelativeDifference(analytic.at(name).data(), fd),
                kKernelTolerance)
          << "seed " << seed << " parameter " << name;
    }
  }
}

TEST(Determinism, ForwardAndBackwardBitIdentical) {
  auto run = [] {
    Rng rng(99);
    Tensor x = RandomTensor({5, kRows, kCols}, rng);
    Graph g(5);
    Var losses = RandomGraphLosses(g, 17, x, {0, 1, 2, 3, 4});
    PerSampleGrads rows = g.per_sample_backward(losses);
    std::vector<double> out(g.value(losses).data().begin(),
                            g.value(losses).data().end());
    out.insert(out.end(), rows.data().begin(), rows.data().end());
    return out;
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
}

}  // namespace
}  // namespace dpmaes
