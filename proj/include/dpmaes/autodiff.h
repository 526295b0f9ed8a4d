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

#ifndef DPMAES_AUTODIFF_H_
#define DPMAES_AUTODIFF_H_

// Tape-based reverse-mode differentiation with per-sample gradients.
//
// A Graph is built eagerly: every kernel computes its forward value on the
// spot and records a backward rule. Values are either *shared* (parameters,
// constants, and anything computed only from them) or *batched*, meaning axis
// 0 is the sample axis of extent batch_size(). Kernels keep samples apart; the
// few that mix them (full reductions, reshapes or transposes that move axis 0)
// mark their output as coupled, and per_sample_backward refuses coupled
// losses.
//
// per_sample_backward runs one reverse pass. Gradients of batched values are
// already per-sample (sample b only influences loss b), so only gradients that
// land on shared values need splitting; kernels that combine a batched input
// with a shared one emit per-sample contributions for the shared side.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dpmaes/tensor.h"

namespace dpmaes {

enum class Reduce {
  kPerSample,  // reduce everything except the sample axis: [B, ...] -> [B]
  kAll,        // reduce to a scalar
};

// Handle to a node in a Graph.
struct Var {
  int32_t id = -1;
};

// One flattened gradient row per sample; the parameter-offset table
// partitions each row.
class PerSampleGrads {
 public:
  struct Slot {
    std::string name;
    Shape shape;
    int64_t offset;
    int64_t size;
  };

  PerSampleGrads(int64_t batch_size, std::vector<Slot> slots);

  int64_t batch_size() const { return batch_size_; }
  int64_t row_length() const { return row_length_; }
  const std::vector<Slot>& slots() const { return slots_; }

  std::span<double> row(int64_t sample);
  std::span<const double> row(int64_t sample) const;
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  Tensor grad(int64_t sample, const std::string& name) const;
  std::vector<double> row_sum() const;
  double row_norm(int64_t sample) const;

 private:
  int64_t batch_size_;
  int64_t row_length_;
  std::vector<Slot> slots_;
  std::vector<double> data_;
};

class BackwardPass;

class Graph {
 public:
  using BackwardFn = std::function<void(BackwardPass&, const Tensor&)>;

  // batch_size 0 builds a graph without a sample axis.
  explicit Graph(int64_t batch_size = 0);

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  int64_t batch_size() const { return batch_size_; }

  // Leaves.
  Var parameter(const std::string& name, Tensor value);
  Var constant(Tensor value);
  Var sample_constant(Tensor value);

  // Kernels.
  //
  // matmul: [..., m, k] x [k, n] (shared right operand, any left), or
  // [..., m, k] x [..., k, n] with equal leading extents and equal batching.
  Var matmul(Var a, Var b);
  // add / mul: equal shapes, or b a shared suffix of a's shape (broadcast).
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double factor);
  Var reshape(Var a, Shape shape);
  Var transpose(Var a, std::vector<int> perm);
  // Rows of a shared [R, C] or batched [B, R, C] table. One index list for
  // every sample, or one list per sample.
  Var gather_rows(Var a, const std::vector<int64_t>& rows);
  Var gather_rows(Var a, const std::vector<std::vector<int64_t>>& rows);
  // [.., Ra, C] ++ [.., Rb, C] along the row axis; shared operands are
  // broadcast to every sample.
  Var concat_rows(Var a, Var b);
  // Normalizes the last axis, then applies gamma/beta of shape [D].
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
  Var gelu(Var x);
  Var softmax(Var x);  // last axis
  Var sum(Var x, Reduce reduce);
  Var mean(Var x, Reduce reduce);
  Var sum_sq(Var x, Reduce reduce);
  Var mean_axis(Var x, int axis);
  // Per-row softmax cross-entropy of [N, K] logits -> [N].
  Var cross_entropy(Var logits, const std::vector<int64_t>& labels);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool batched(Var v) const;
  bool coupled(Var v) const;
  bool requires_grad(Var v) const;
  size_t node_count() const { return nodes_.size(); }
  std::vector<std::string> parameter_names() const;

  // Gradient of a scalar loss with respect to every parameter. Parameters
  // that do not influence the loss get zeros.
  std::map<std::string, Tensor> backward(Var loss) const;

  // Row b is the gradient of losses[b]. Requires a batched, uncoupled [B]
  // loss vector.
  PerSampleGrads per_sample_backward(Var losses) const;

 private:
  friend class BackwardPass;

  struct Node {
    const char* op;
    std::string name;  // parameters only
    std::vector<int32_t> inputs;
    Tensor value;
    bool batched = false;
    bool coupled = false;
    bool requires_grad = false;
    int32_t param_index = -1;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Var push(const char* op, std::vector<int32_t> inputs, Tensor value,
           bool batched, bool couples, BackwardFn backward);
  void check_batched_leading(const char* op, const Tensor& t) const;
  Var binary_elementwise(const char* op, Var a, Var b, bool multiply);
  Var reduction(const char* op, Var x, Reduce reduce, int kind);

  int64_t batch_size_;
  std::vector<Node> nodes_;
  std::vector<int32_t> param_nodes_;
};

// Executes backward rules and routes gradients. Kernels call accumulate()
// for inputs whose gradient has the input's own shape, and
// accumulate_samples() for shared inputs of a batched node, which lets the
// pass keep or sum the per-sample contributions.
class BackwardPass {
 public:
  // True while running a batched node in per-sample mode.
  bool split() const { return split_; }
  int64_t batch_size() const { return graph_.batch_size_; }
  const Tensor& value(int32_t id) const { return graph_.nodes_[id].value; }
  bool needs(int32_t id) const { return graph_.nodes_[id].requires_grad; }
  bool batched(int32_t id) const { return graph_.nodes_[id].batched; }

  void accumulate(int32_t id, const Tensor& grad);
  // fn(sample, out) adds sample `sample`'s contribution into `out`, a span
  // with the input's element count.
  void accumulate_samples(
      int32_t id,
      const std::function<void(int64_t, std::span<double>)>& fn);

 private:
  friend class Graph;

  struct Stacked {
    double* base = nullptr;
    int64_t stride = 0;
    std::vector<double> storage;
    bool touched = false;
  };

  BackwardPass(const Graph& graph, bool per_sample, PerSampleGrads* rows);
  void run(Var seed, Tensor seed_grad);
  std::span<double> stacked_slice(int32_t id, int64_t sample);

  const Graph& graph_;
  bool per_sample_;
  bool split_ = false;
  int64_t current_sample_ = -1;
  PerSampleGrads* rows_;
  std::vector<Tensor> grads_;
  std::vector<bool> has_grad_;
  std::vector<Stacked> stacked_;
};

}  // namespace dpmaes

#endif  // DPMAES_AUTODIFF_H_
