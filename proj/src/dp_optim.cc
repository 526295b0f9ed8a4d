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

#include "dpmaes/dp_optim.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "dpmaes/errors.h"

namespace dpmaes {
namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid),
                   v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

// Flat gradient in ParameterSet order from a name-keyed map.
std::vector<double> flatten_grads(const ParameterSet& weights,
                                  const std::map<std::string, Tensor>& grads) {
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(weights.total_size()));
  for (const std::string& name : weights.names()) {
    const Tensor& t = grads.at(name);
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  }
  return flat;
}

void check_slot_order(const PerSampleGrads& rows, const ParameterSet& weights) {
  const auto& slots = rows.slots();
  if (slots.size() != weights.size()) {
    throw std::logic_error("gradient rows do not cover the parameters");
  }
  for (size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].name != weights.names()[i]) {
      throw std::logic_error("gradient row order differs from parameter order");
    }
  }
}

}  // namespace

std::string_view optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adamw";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adamw") return OptimizerKind::kAdamW;
  throw ConfigError("unknown optimizer '" + std::string(name) +
                    "' (expected sgd or adamw)");
}

void DpOptimConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("optim: " + m); };
  if (!(clip_norm > 0.0)) fail("clip_norm must be > 0");
  if (!(noise_multiplier >= 0.0)) fail("noise_multiplier must be >= 0");
  if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (!(lr_floor_fraction >= 0.0 && lr_floor_fraction <= 1.0)) {
    fail("lr_floor_fraction must lie in [0, 1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(adam_epsilon >= 0.0)) fail("adam_epsilon must be >= 0");
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (!(expected_batch_size > 0.0)) fail("expected_batch_size must be > 0");
}

double DpOptimConfig::learning_rate_at(int64_t step) const {
  if (step < warmup_steps) {
    return learning_rate * static_cast<double>(step + 1) /
           static_cast<double>(warmup_steps);
  }
  const int64_t decay = total_steps - warmup_steps;
  const double progress =
      decay <= 1 ? 0.0
                 : static_cast<double>(std::min(step - warmup_steps, decay - 1)) /
                       static_cast<double>(decay - 1);
  const double floor = learning_rate * lr_floor_fraction;
  return floor + (learning_rate - floor) * 0.5 *
                     (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Clip, noise, update

ClipStats clip_rows(std::span<double> rows, int64_t row_length,
                    double clip_norm) {
  if (!(clip_norm > 0.0)) throw InvalidArgumentError("clip norm must be > 0");
  ClipStats stats;
  if (row_length == 0) return stats;
  const int64_t count = static_cast<int64_t>(rows.size()) / row_length;
  for (int64_t b = 0; b < count; ++b) {
    double* r = rows.data() + b * row_length;
    double sq = 0.0;
    for (int64_t j = 0; j < row_length; ++j) sq += r[j] * r[j];
    const double norm = std::sqrt(sq);
    stats.norms.push_back(norm);
    if (norm > clip_norm) {
      const double f = clip_norm / norm;
      for (int64_t j = 0; j < row_length; ++j) r[j] *= f;
      ++stats.clipped;
    }
  }
  return stats;
}

ClipStats clip_per_sample(PerSampleGrads& grads, double clip_norm) {
  return clip_rows(grads.data(), grads.row_length(), clip_norm);
}

std::vector<double> noisy_mean_from_sum(std::vector<double> sum, double sigma,
                                        double clip_norm, double batch_norm,
                                        Rng& rng) {
  if (!(batch_norm > 0.0)) {
    throw InvalidArgumentError("noisy_mean: batch normalizer must be > 0");
  }
  if (!(sigma >= 0.0)) throw InvalidArgumentError("sigma must be >= 0");
  const double std = sigma * clip_norm;
  for (double& v : sum) v = (v + std * rng.normal()) / batch_norm;
  return sum;
}

std::vector<double> noisy_mean(const PerSampleGrads& clipped, double sigma,
                               double clip_norm, double batch_norm, Rng& rng) {
  std::vector<double> sum = clipped.row_sum();
  return noisy_mean_from_sum(std::move(sum), sigma, clip_norm, batch_norm, rng);
}

void dp_sgd_step(std::span<double> params, std::span<const double> grad,
                 double lr) {
  if (params.size() != grad.size()) {
    throw ShapeError("sgd: gradient length does not match parameters");
  }
  for (size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

void dp_adamw_step(std::span<double> params, OptimState& state,
                   std::span<const double> grad, const DpOptimConfig& c,
                   double lr) {
  const size_t n = params.size();
  if (grad.size() != n) {
    throw ShapeError("adamw: gradient length does not match parameters");
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  if (state.m.size() != n || state.v.size() != n) {
    throw ShapeError("adamw: moment buffers do not match parameters");
  }
  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr * (mhat / (std::sqrt(vhat) + c.adam_epsilon) +
                       c.weight_decay * params[i]);
  }
  ++state.step;
}

void optimizer_step(std::span<double> params, OptimState& state,
                    std::span<const double> grad, const DpOptimConfig& config,
                    double lr) {
  if (config.optimizer == OptimizerKind::kSgd) {
    dp_sgd_step(params, grad, lr);
    ++state.step;
  } else {
    dp_adamw_step(params, state, grad, config, lr);
  }
}

std::vector<MaskSpec> batch_masks(const MaeConfig& config, uint64_t master,
                                  int64_t step, int64_t count) {
  const uint64_t step_seed =
      derive_seed(master, SeedPurpose::kMasking, static_cast<uint64_t>(step));
  std::vector<MaskSpec> masks;
  masks.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    masks.push_back(random_mask(
        config.num_patches(), config.mask_ratio,
        derive_seed(step_seed, SeedPurpose::kMasking, static_cast<uint64_t>(i))));
  }
  return masks;
}

// ---------------------------------------------------------------------------
// Private training

accountant::DpConversion realized_budget(double sigma, double q, int64_t steps,
                                         double delta) {
  if (steps <= 0) return {0.0, 0.0};
  if (sigma <= 0.0) {
    if (q == 0.0) return {0.0, 0.0};
    return {std::numeric_limits<double>::infinity(), 0.0};
  }
  return accountant::account({q, sigma, steps}, delta);
}

ResolvedNoise resolve_noise(const TrainDpOptions& o, int64_t n) {
  o.optim.validate();
  if (n < 1) throw ConfigError("training set is empty");
  if (o.chunk_size < 1) throw ConfigError("chunk_size must be >= 1");
  ResolvedNoise r;
  r.sample_rate = o.sample_rate > 0.0
                      ? o.sample_rate
                      : o.optim.expected_batch_size / static_cast<double>(n);
  if (r.sample_rate > 1.0) {
    throw ConfigError("expected batch size exceeds the dataset size");
  }
  if (o.target) {
    o.target->validate();
    r.delta = o.target->delta;
    r.sigma = accountant::calibrate_sigma(*o.target, r.sample_rate,
                                          o.optim.total_steps);
  } else {
    r.delta = o.delta > 0.0 ? o.delta : accountant::default_delta(n);
    r.sigma = o.optim.noise_multiplier;
  }
  if (!(r.delta > 0.0 && r.delta < 1.0)) {
    throw ConfigError("delta must lie in (0, 1)");
  }
  return r;
}

PrivateGradient private_gradient(const MaeParams& params,
                                 const ImageDataset& data, int64_t step,
                                 double sigma, double q,
                                 const TrainDpOptions& o) {
  const int64_t n = data.size();
  const std::vector<int64_t> batch = poisson_sample(
      n, q, derive_seed(o.seed, SeedPurpose::kSampling, static_cast<uint64_t>(step)));
  const int64_t B = static_cast<int64_t>(batch.size());
  const std::vector<MaskSpec> masks =
      batch_masks(params.config, o.seed, step, B);
  const double C = o.optim.clip_norm;

  PrivateGradient out;
  DpStepReport& rep = out.report;
  rep.step = step;
  rep.realized_batch = B;
  std::vector<double> sum(static_cast<size_t>(params.weights.total_size()), 0.0);
  std::vector<double> norms;
  double loss_total = 0.0;
  int64_t clipped = 0;
  for (int64_t start = 0; start < B; start += o.chunk_size) {
    const int64_t nc = std::min(o.chunk_size, B - start);
    const std::span<const int64_t> idx(batch.data() + start,
                                       static_cast<size_t>(nc));
    const Tensor images = data.fetch(idx);
    const std::vector<MaskSpec> chunk_masks(masks.begin() + start,
                                            masks.begin() + start + nc);
    Graph g(nc);
    MaeVars vars = bind_weights(g, params.weights, true);
    MaeGraph m = build_mae(g, params, vars, images, chunk_masks);
    for (double l : g.value(m.losses).data()) loss_total += l;
    PerSampleGrads rows = g.per_sample_backward(m.losses);
    check_slot_order(rows, params.weights);
    if (o.private_mode) {
      ClipStats s = clip_per_sample(rows, C);
      clipped += s.clipped;
      norms.insert(norms.end(), s.norms.begin(), s.norms.end());
    } else {
      for (int64_t b = 0; b < nc; ++b) norms.push_back(rows.row_norm(b));
    }
    const int64_t len = rows.row_length();
    for (int64_t b = 0; b < nc; ++b) {
      const double* r = rows.row(b).data();
      for (int64_t j = 0; j < len; ++j) sum[static_cast<size_t>(j)] += r[j];
    }
  }
  const double batch_norm = q * static_cast<double>(n);
  if (o.private_mode) {
    Rng noise(o.seed, SeedPurpose::kNoise, static_cast<uint64_t>(step));
    out.grad = noisy_mean_from_sum(std::move(sum), sigma, C, batch_norm, noise);
    rep.noise_draws = 1;
  } else {
    for (double& v : sum) v /= batch_norm;
    out.grad = std::move(sum);
  }
  rep.loss_mean = B > 0 ? loss_total / static_cast<double>(B)
                        : std::numeric_limits<double>::quiet_NaN();
  if (!norms.empty()) {
    rep.norm_min = *std::min_element(norms.begin(), norms.end());
    rep.norm_max = *std::max_element(norms.begin(), norms.end());
    rep.norm_median = median_of(norms);
  } else {
    rep.norm_min = rep.norm_max = rep.norm_median =
        std::numeric_limits<double>::quiet_NaN();
  }
  rep.clipped_fraction =
      B > 0 ? static_cast<double>(clipped) / static_cast<double>(B) : 0.0;
  return out;
}

TrainDpResult train_dp(MaeParams params, const ImageDataset& data,
                       const TrainDpOptions& o, OptimState state) {
  // Everything that can fail on configuration fails here, before data use.
  const ResolvedNoise noise = resolve_noise(o, data.size());
  params.config.validate();
  if (data.resolution() != params.config.image_size ||
      data.channels() != params.config.channels) {
    throw ConfigError("dataset images are " + std::to_string(data.resolution()) +
                      "px x " + std::to_string(data.channels()) +
                      " channels, model expects " +
                      std::to_string(params.config.image_size) + "px x " +
                      std::to_string(params.config.channels));
  }
  const int64_t T = o.optim.total_steps;
  if (state.step < 0 || state.step > T) {
    throw ConfigError("resume step " + std::to_string(state.step) +
                      " outside [0, " + std::to_string(T) + "]");
  }

  TrainDpResult result;
  result.sigma = noise.sigma;
  result.sample_rate = noise.sample_rate;
  result.delta = noise.delta;

  // Per-step curve once; the cumulative epsilon is a composition of it.
  const bool finite_noise = noise.sigma > 0.0;
  std::optional<accountant::RdpCurve> per_step;
  if (finite_noise && o.private_mode) {
    per_step = accountant::rdp_curve(noise.sample_rate, noise.sigma,
                                     accountant::default_alpha_grid());
  }

  std::vector<double> flat = params.weights.flatten();
  for (int64_t t = state.step; t < T; ++t) {
    if (o.should_stop && o.should_stop()) break;
    PrivateGradient pg =
        private_gradient(params, data, t, noise.sigma, noise.sample_rate, o);
    const double lr = o.optim.learning_rate_at(t);
    optimizer_step(flat, state, pg.grad, o.optim, lr);
    params.weights.unflatten(flat);
    pg.report.lr = lr;
    if (!o.private_mode) {
      pg.report.epsilon = std::numeric_limits<double>::infinity();
    } else if (per_step) {
      pg.report.epsilon =
          accountant::rdp_to_dp(accountant::compose(*per_step, t + 1),
                                noise.delta)
              .epsilon;
    } else {
      pg.report.epsilon = realized_budget(0.0, noise.sample_rate, t + 1,
                                          noise.delta).epsilon;
    }
    result.reports.push_back(pg.report);
    if (o.on_step) o.on_step(pg.report, params, state);
  }
  result.steps_completed = state.step;
  const accountant::DpConversion conv =
      o.private_mode
          ? realized_budget(noise.sigma, noise.sample_rate, state.step,
                            noise.delta)
          : accountant::DpConversion{std::numeric_limits<double>::infinity(), 0.0};
  result.realized = {conv.epsilon, noise.delta};
  result.best_alpha = conv.best_alpha;
  result.params = std::move(params);
  result.state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------
// Non-private pretraining

int64_t pretrain_steps_per_epoch(int64_t n, int64_t batch_size) {
  return std::max<int64_t>(1, n / std::max<int64_t>(batch_size, 1));
}

PretrainResult pretrain(MaeParams params, const ImageDataset& data,
                        const PretrainOptions& o, OptimState state) {
  if (o.batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
  if (o.epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
  if (data.size() < 1) throw ConfigError("pretrain: dataset is empty");
  params.config.validate();
  const int64_t n = data.size();
  const int64_t B = std::min(o.batch_size, n);
  const int64_t spe = pretrain_steps_per_epoch(n, B);
  DpOptimConfig optim = o.optim;
  optim.total_steps = spe * o.epochs;
  optim.expected_batch_size = static_cast<double>(B);
  optim.validate();

  PretrainResult result;
  std::vector<double> flat = params.weights.flatten();
  std::vector<int64_t> order;
  int64_t order_epoch = -1;
  double epoch_total = 0.0;
  int64_t epoch_count = 0;
  for (int64_t t = state.step; t < optim.total_steps; ++t) {
    if (o.should_stop && o.should_stop()) break;
    const int64_t epoch = t / spe;
    if (epoch != order_epoch) {
      order.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
      Rng shuffle(o.seed, SeedPurpose::kShuffle, static_cast<uint64_t>(epoch));
      for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = static_cast<int64_t>(shuffle.below(static_cast<uint64_t>(i + 1)));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
      }
      order_epoch = epoch;
    }
    const int64_t pos = (t % spe) * B;
    const std::span<const int64_t> idx(order.data() + pos, static_cast<size_t>(B));
    const Tensor images = data.fetch(idx);
    const std::vector<MaskSpec> masks = batch_masks(params.config, o.seed, t, B);
    Graph g(B);
    MaeVars vars = bind_weights(g, params.weights, true);
    MaeGraph m = build_mae(g, params, vars, images, masks);
    Var mean_loss = g.mean(m.losses, Reduce::kAll);
    const double loss = g.value(mean_loss)[0];
    const std::vector<double> grad =
        flatten_grads(params.weights, g.backward(mean_loss));
    const double lr = optim.learning_rate_at(t);
    optimizer_step(flat, state, grad, optim, lr);
    params.weights.unflatten(flat);
    result.step_losses.push_back(loss);
    epoch_total += loss;
    ++epoch_count;
    if ((t + 1) % spe == 0) {
      result.epoch_losses.push_back(epoch_total / static_cast<double>(epoch_count));
      epoch_total = 0.0;
      epoch_count = 0;
    }
    if (o.on_step) o.on_step(t, epoch, loss, params, state);
  }
  result.params = std::move(params);
  result.state = std::move(state);
  return result;
}

double evaluate_reconstruction(const MaeParams& params, const ImageDataset& data,
                               uint64_t seed, int64_t max_images) {
  const int64_t n = max_images > 0 ? std::min(max_images, data.size()) : data.size();
  if (n < 1) throw InvalidArgumentError("no images to evaluate");
  const std::vector<MaskSpec> masks = batch_masks(params.config, seed, 0, n);
  constexpr int64_t kChunk = 64;
  double total = 0.0;
  std::vector<int64_t> idx;
  for (int64_t start = 0; start < n; start += kChunk) {
    const int64_t nc = std::min(kChunk, n - start);
    idx.resize(static_cast<size_t>(nc));
    for (int64_t i = 0; i < nc; ++i) idx[static_cast<size_t>(i)] = start + i;
    const std::vector<MaskSpec> m(masks.begin() + start,
                                  masks.begin() + start + nc);
    for (double l : mae_forward(params, data.fetch(idx), m).per_sample_losses) {
      total += l;
    }
  }
  return total / static_cast<double>(n);
}

std::string metrics_header() {
  return "step,loss_mean,preclip_median_norm,clipped_fraction,realized_batch,"
         "lr,epsilon";
}

std::string metrics_line(const DpStepReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%lld,%.17g,%.17g",
                static_cast<long long>(r.step), r.loss_mean, r.norm_median,
                r.clipped_fraction, static_cast<long long>(r.realized_batch),
                r.lr, r.epsilon);
  return buf;
}

}  // namespace dpmaes
