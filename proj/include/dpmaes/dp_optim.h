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

#ifndef DPMAES_DP_OPTIM_H_
#define DPMAES_DP_OPTIM_H_

// Per-sample clipping, Gaussian noise, SGD / AdamW updates, and the private
// and non-private training loops for the masked autoencoder.
//
// One private step at index t (0-based):
//   1. batch = poisson_sample(n, q, seed(master, sampling, t))
//   2. one mask per batch member, seeded from (master, masking, t)
//   3. per-sample gradients in chunks; each row clipped to norm C over the
//      concatenation of all parameters
//   4. g = (sum of clipped rows + z) / (n q), z ~ N(0, sigma^2 C^2 I) drawn
//      once from the stream (master, noise, t)
//   5. optimizer update with the learning rate of step t
//
// The divisor is the expected batch size n q, not the realized one, so an
// empty batch still produces a (pure-noise) update and T stays fixed.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpmaes/accountant.h"
#include "dpmaes/autodiff.h"
#include "dpmaes/data.h"
#include "dpmaes/rng.h"
#include "dpmaes/vit_mae.h"

namespace dpmaes {

enum class OptimizerKind { kSgd, kAdamW };

std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct DpOptimConfig {
  double clip_norm = 0.1;
  double noise_multiplier = 0.5;
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double learning_rate = 1e-3;
  int64_t warmup_steps = 0;
  // Cosine decay ends at this fraction of the base rate.
  double lr_floor_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.005;
  double adam_epsilon = 1e-8;
  int64_t total_steps = 1;
  double expected_batch_size = 1.0;

  void validate() const;

  // Linear warmup over warmup_steps, then cosine from the base rate down to
  // lr_floor_fraction of it at the last step.
  double learning_rate_at(int64_t step) const;
};

struct OptimState {
  int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
};

struct DpStepReport {
  int64_t step = 0;
  double loss_mean = 0.0;
  double norm_min = 0.0;
  double norm_median = 0.0;
  double norm_max = 0.0;
  double clipped_fraction = 0.0;
  int64_t realized_batch = 0;
  double lr = 0.0;
  double epsilon = 0.0;  // cumulative through this step
  int64_t noise_draws = 0;
};

struct ClipStats {
  std::vector<double> norms;  // pre-clip, one per row
  int64_t clipped = 0;
};

// Scales each row by min(1, C / ||row||). Zero rows are left alone.
ClipStats clip_per_sample(PerSampleGrads& grads, double clip_norm);
ClipStats clip_rows(std::span<double> rows, int64_t row_length,
                    double clip_norm);

// (row sum + z) / batch_norm with z ~ N(0, (sigma C)^2) per coordinate,
// drawn from rng. batch_norm must be positive (the expected batch size);
// with no rows the result is pure noise.
std::vector<double> noisy_mean(const PerSampleGrads& clipped, double sigma,
                               double clip_norm, double batch_norm, Rng& rng);
// Same, starting from an already summed gradient.
std::vector<double> noisy_mean_from_sum(std::vector<double> sum, double sigma,
                                        double clip_norm, double batch_norm,
                                        Rng& rng);

void dp_sgd_step(std::span<double> params, std::span<const double> grad,
                 double lr);

// Decoupled weight decay, bias-corrected moments. Initializes empty moment
// buffers on the first call and advances state.step.
void dp_adamw_step(std::span<double> params, OptimState& state,
                   std::span<const double> grad, const DpOptimConfig& config,
                   double lr);

// Dispatches on config.optimizer and advances state.step.
void optimizer_step(std::span<double> params, OptimState& state,
                    std::span<const double> grad, const DpOptimConfig& config,
                    double lr);

// Mask seeds for a batch at one step: mask i is random_mask(L, ratio,
// derive_seed(step_seed, masking, i)).
std::vector<MaskSpec> batch_masks(const MaeConfig& config, uint64_t master,
                                  int64_t step, int64_t count);

struct TrainDpOptions {
  DpOptimConfig optim;
  // Sampling ratio; 0 means optim.expected_batch_size / n.
  double sample_rate = 0.0;
  // When set, sigma is calibrated for this budget before any data is read;
  // otherwise optim.noise_multiplier is used. Its delta is always the one
  // reported.
  std::optional<accountant::PrivacyBudget> target;
  double delta = 0.0;  // used when target is unset; 0 means 1 / (2n)
  uint64_t seed = 0;
  int64_t chunk_size = 8;
  // false: no clipping, no noise (the non-private reference loop).
  bool private_mode = true;
  // Called after every step, with the updated parameters.
  std::function<void(const DpStepReport&, const MaeParams&,
                     const OptimState&)>
      on_step;
  // Polled before every step; returning true ends the run early.
  std::function<bool()> should_stop;
};

struct TrainDpResult {
  MaeParams params;
  OptimState state;
  std::vector<DpStepReport> reports;
  double sigma = 0.0;
  double sample_rate = 0.0;
  double delta = 0.0;
  int64_t steps_completed = 0;
  // Recomputed from (sigma, q, steps_completed, delta).
  accountant::PrivacyBudget realized;
  double best_alpha = 0.0;
};

// Resolves sigma (calibrating if asked) and q without touching data.
struct ResolvedNoise {
  double sigma;
  double sample_rate;
  double delta;
};
ResolvedNoise resolve_noise(const TrainDpOptions& options, int64_t n);

// Runs steps state.step .. optim.total_steps - 1, so a restored state resumes
// where it stopped.
TrainDpResult train_dp(MaeParams params, const ImageDataset& data,
                       const TrainDpOptions& options, OptimState state = {});

// One step's clipped-and-noised gradient (flat, in parameter order) and its
// report, without the optimizer update.
struct PrivateGradient {
  std::vector<double> grad;
  DpStepReport report;
};
PrivateGradient private_gradient(const MaeParams& params,
                                 const ImageDataset& data, int64_t step,
                                 double sigma, double sample_rate,
                                 const TrainDpOptions& options);

// Realized (epsilon, best alpha) after `steps` steps; infinite epsilon for
// sigma = 0.
accountant::DpConversion realized_budget(double sigma, double q, int64_t steps,
                                         double delta);

// Non-private pretraining: shuffled fixed-size batches, epochs, standard
// optimizer, full-batch backward.
struct PretrainOptions {
  DpOptimConfig optim;  // clip / noise fields unused
  int64_t batch_size = 32;
  int64_t epochs = 1;
  uint64_t seed = 0;
  std::function<void(int64_t step, int64_t epoch, double loss,
                     const MaeParams&, const OptimState&)>
      on_step;
  std::function<bool()> should_stop;
};

struct PretrainResult {
  MaeParams params;
  OptimState state;
  std::vector<double> epoch_losses;  // mean step loss per completed epoch
  std::vector<double> step_losses;
};

int64_t pretrain_steps_per_epoch(int64_t n, int64_t batch_size);

PretrainResult pretrain(MaeParams params, const ImageDataset& data,
                        const PretrainOptions& options, OptimState state = {});

// Mean reconstruction loss over a fixed image set with masks derived from
// seed; used to compare models on identical inputs.
double evaluate_reconstruction(const MaeParams& params,
                               const ImageDataset& data, uint64_t seed,
                               int64_t max_images = 0);

// Metrics file: header plus one line per step.
std::string metrics_header();
std::string metrics_line(const DpStepReport& report);

}  // namespace dpmaes

#endif  // DPMAES_DP_OPTIM_H_
