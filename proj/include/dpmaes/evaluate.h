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

#ifndef DPMAES_EVALUATE_H_
#define DPMAES_EVALUATE_H_

// Downstream evaluation of an encoder on labeled images: a linear probe on
// frozen, standardized, mean-pooled features, and K-shot fine-tuning of the
// whole encoder plus a linear head.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dpmaes/data.h"
#include "dpmaes/tensor.h"
#include "dpmaes/vit_mae.h"

namespace dpmaes {

struct ProbeResult {
  double accuracy = 0.0;
  int64_t num_classes = 0;
  int64_t train_count = 0;
  int64_t eval_count = 0;
  int64_t feature_dim = 0;
  uint64_t seed = 0;
};

struct ProbeOptions {
  // L2 penalty on every head weight and bias. Keeps the objective strongly
  // convex so separable features still have a finite optimum.
  double l2 = 1e-4;
  // Stop when the gradient norm of the objective falls below this.
  double tolerance = 1e-6;
  int64_t max_iterations = 200000;
};

// Multinomial logistic regression by accelerated full-batch gradient
// descent with adaptive restart. weights is [(d + 1) x k], bias last row.
struct LogisticFit {
  std::vector<double> weights;
  int64_t dim = 0;
  int64_t classes = 0;
  int64_t iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
};

LogisticFit fit_logistic(const Tensor& features, std::span<const int64_t> labels,
                         int64_t num_classes, const ProbeOptions& options = {});
std::vector<int64_t> predict_logistic(const LogisticFit& fit,
                                      const Tensor& features);

// Standardizes both sets with the training mean and std, fits, and scores.
// Throws ProbeError when an eval label never occurs in training.
ProbeResult probe_features(const Tensor& train_features,
                           std::span<const int64_t> train_labels,
                           const Tensor& eval_features,
                           std::span<const int64_t> eval_labels, uint64_t seed,
                           const ProbeOptions& options = {});

ProbeResult linear_probe(const MaeParams& params, const ImageDataset& train,
                         const ImageDataset& eval, uint64_t seed,
                         const ProbeOptions& options = {});

struct FewShotSpec {
  int64_t shots = 10;
  int64_t epochs = 15;
  int64_t batch_size = 25;
  double learning_rate = 5e-4;
  double weight_decay = 0.05;
  bool flip_augment = true;

  void validate() const;
};

// Exactly `shots` indices per class, drawn without replacement from the
// seeded stream of that class; ascending within a class, classes in order.
// Throws InvalidArgumentError naming the first class that is too small.
std::vector<int64_t> select_few_shot(std::span<const int64_t> labels,
                                     int64_t num_classes, int64_t shots,
                                     uint64_t seed);

// Fine-tunes a copy of the encoder with a zero-initialized linear head on
// the selected shots (non-private AdamW, random horizontal flips), then
// scores the eval set. The decoder is carried along untouched.
ProbeResult few_shot_finetune(const MaeParams& params, const FewShotSpec& spec,
                              const ImageDataset& train,
                              const ImageDataset& eval, uint64_t seed);

// Deterministic labeled split: index i goes to eval when i % 5 == 4.
void split_labeled(const ImageDataset& data, ImageDataset* train,
                   ImageDataset* eval);

// Evaluation log: "run_id,task,k,accuracy,seed", k is "probe" for probes.
std::string eval_log_header();
std::string eval_log_line(const std::string& run_id, const std::string& task,
                          const std::string& k, double accuracy, uint64_t seed);
void append_eval_log(const std::filesystem::path& path,
                     const std::string& line);

}  // namespace dpmaes

#endif  // DPMAES_EVALUATE_H_
