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

#ifndef DPMAES_RUN_CONFIG_H_
#define DPMAES_RUN_CONFIG_H_

// Run configuration: flat "section.key = value" lines, '#' comments.
//
//   run.seed, run.output_dir, run.checkpoint_every
//   model.preset, then any model field (model.mask_ratio, ...)
//   data.train
//   optim.kind, optim.clip_norm, optim.noise_multiplier, optim.lr,
//   optim.warmup_steps, optim.lr_floor_fraction, optim.beta1, optim.beta2,
//   optim.weight_decay, optim.adam_epsilon, optim.steps, optim.batch_size
//   privacy.epsilon, privacy.delta
//   train.chunk_size, train.init
//   pretrain.epochs, pretrain.batch_size
//
// Unknown keys, repeated keys and malformed values are ConfigErrors. The
// effective configuration (defaults filled in) prints back in the same
// format.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "dpmaes/dp_optim.h"
#include "dpmaes/vit_mae.h"

namespace dpmaes {

struct RunConfig {
  uint64_t seed = 0;
  std::filesystem::path output_dir;
  int64_t checkpoint_every = 100;

  std::string preset = "vip-micro";
  MaeConfig model = MaeConfig::preset("vip-micro");

  std::filesystem::path train_data;

  // learning_rate, warmup and moments follow the reference AdamW settings;
  // total_steps and the expected batch come from optim.steps and
  // optim.batch_size.
  DpOptimConfig optim = default_optim();
  bool noise_multiplier_set = false;

  std::optional<double> epsilon = 8.0;
  std::optional<double> delta;  // unset: 1 / (2n)

  int64_t chunk_size = 8;
  std::filesystem::path init_checkpoint;

  int64_t pretrain_epochs = 5;
  int64_t pretrain_batch_size = 32;

  static DpOptimConfig default_optim();

  // Throws ConfigError on the first problem.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& file);

  // Cross-field checks; data-dependent checks happen when the data is read.
  void validate() const;

  std::string to_text() const;
};

}  // namespace dpmaes

#endif  // DPMAES_RUN_CONFIG_H_
