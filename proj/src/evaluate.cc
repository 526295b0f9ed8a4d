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

#include "dpmaes/evaluate.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <utility>

#include "dpmaes/autodiff.h"
#include "dpmaes/dp_optim.h"
#include "dpmaes/errors.h"
#include "dpmaes/rng.h"

namespace dpmaes {
namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat with_bias_column(const Tensor& features) {
  if (features.rank() != 2) {
    throw ShapeError("features must be [N, d], got " +
                     shape_string(features.shape()));
  }
  const int64_t n = features.dim(0);
  const int64_t d = features.dim(1);
  Mat x(n, d + 1);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) x(i, j) = features[i * d + j];
    x(i, d) = 1.0;
  }
  return x;
}

// Row-wise softmax probabilities of x * w.
Mat probabilities(const Mat& x, const Mat& w) {
  Mat z = x * w;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double hi = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - hi).exp();
    z.row(i) /= z.row(i).sum();
  }
  return z;
}

struct Objective {
  const Mat& x;
  const Mat& y;  // one-hot
  double l2;

  Mat gradient(const Mat& w) const {
    const double n = static_cast<double>(x.rows());
    return x.transpose() * (probabilities(x, w) - y) / n + l2 * w;
  }
};

Tensor standardize(const Tensor& f, const std::vector<double>& mean,
                   const std::vector<double>& scale) {
  Tensor out = f;
  const int64_t d = f.dim(1);
  for (int64_t i = 0; i < f.dim(0); ++i) {
    for (int64_t j = 0; j < d; ++j) {
      out[i * d + j] = (f[i * d + j] - mean[static_cast<size_t>(j)]) /
                       scale[static_cast<size_t>(j)];
    }
  }
  return out;
}

// Per-dimension mean and standard deviation over rows; a constant dimension
// gets scale 1.
std::pair<std::vector<double>, std::vector<double>> feature_moments(
    const Tensor& f) {
  const int64_t n = f.dim(0);
  const int64_t d = f.dim(1);
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  std::vector<double> scale(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += f[i * d + j];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      const double c = f[i * d + j] - mean[static_cast<size_t>(j)];
      scale[static_cast<size_t>(j)] += c * c;
    }
  }
  for (double& v : scale) {
    v = std::sqrt(v / static_cast<double>(n));
    if (v < 1e-12) v = 1.0;
  }
  return {mean, scale};
}

double accuracy_of(std::span<const int64_t> predicted,
                   std::span<const int64_t> truth) {
  if (truth.empty()) return 0.0;
  int64_t hits = 0;
  for (size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

Tensor flip_horizontal(const Tensor& images, const std::vector<bool>& flip) {
  Tensor out = images;
  const int64_t B = images.dim(0);
  const int64_t C = images.dim(1);
  const int64_t H = images.dim(2);
  const int64_t W = images.dim(3);
  for (int64_t b = 0; b < B; ++b) {
    if (!flip[static_cast<size_t>(b)]) continue;
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t y = 0; y < H; ++y) {
        const int64_t row = ((b * C + c) * H + y) * W;
        for (int64_t x = 0; x < W; ++x) {
          out[row + x] = images[row + W - 1 - x];
        }
      }
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Logistic head

LogisticFit fit_logistic(const Tensor& features, std::span<const int64_t> labels,
                         int64_t num_classes, const ProbeOptions& o) {
  const Mat x = with_bias_column(features);
  const int64_t n = x.rows();
  if (static_cast<int64_t>(labels.size()) != n || n == 0) {
    throw InvalidArgumentError("need one label per feature row");
  }
  if (num_classes < 2) throw InvalidArgumentError("need at least two classes");
  if (!(o.l2 > 0.0)) throw InvalidArgumentError("probe l2 must be > 0");
  Mat y = Mat::Zero(n, num_classes);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t l = labels[static_cast<size_t>(i)];
    if (l < 0 || l >= num_classes) throw InvalidArgumentError("label out of range");
    y(i, l) = 1.0;
  }
  const Objective obj{x, y, o.l2};

  // Softmax cross-entropy has Hessian at most (X^T X / n) / 2 per class
  // block, so this is a valid smoothness constant.
  const Mat gram = x.transpose() * x / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Mat> eig(gram, Eigen::EigenvaluesOnly);
  const double lipschitz = 0.5 * eig.eigenvalues().maxCoeff() + o.l2;
  const double step = 1.0 / lipschitz;

  Mat w = Mat::Zero(x.cols(), num_classes);
  Mat w_prev = w;
  double momentum_t = 1.0;
  LogisticFit fit;
  fit.dim = x.cols() - 1;
  fit.classes = num_classes;
  for (int64_t it = 0; it < o.max_iterations; ++it) {
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum_t * momentum_t));
    const Mat yk = w + ((momentum_t - 1.0) / t_next) * (w - w_prev);
    const Mat g = obj.gradient(yk);
    Mat w_next = yk - step * g;
    // Gradient-based restart: drop momentum when it points uphill.
    if ((g.array() * (w_next - w).array()).sum() > 0.0) {
      momentum_t = 1.0;
    } else {
      momentum_t = t_next;
    }
    w_prev = std::move(w);
    w = std::move(w_next);
    fit.iterations = it + 1;
    if (it % 10 == 9 || it + 1 == o.max_iterations) {
      fit.grad_norm = obj.gradient(w).norm();
      if (fit.grad_norm <= o.tolerance) {
        fit.converged = true;
        break;
      }
    }
  }
  fit.weights.assign(w.data(), w.data() + w.size());
  return fit;
}

std::vector<int64_t> predict_logistic(const LogisticFit& fit,
                                      const Tensor& features) {
  const Mat x = with_bias_column(features);
  if (x.cols() != fit.dim + 1) {
    throw ShapeError("feature dimension does not match the fitted head");
  }
  const Eigen::Map<const Mat> w(fit.weights.data(), fit.dim + 1, fit.classes);
  const Mat z = x * w;
  std::vector<int64_t> out(static_cast<size_t>(x.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index best = 0;
    z.row(i).maxCoeff(&best);
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

ProbeResult probe_features(const Tensor& train_features,
                           std::span<const int64_t> train_labels,
                           const Tensor& eval_features,
                           std::span<const int64_t> eval_labels, uint64_t seed,
                           const ProbeOptions& options) {
  if (train_features.rank() != 2 || eval_features.rank() != 2 ||
      train_features.dim(1) != eval_features.dim(1)) {
    throw ShapeError("probe features must be [N, d] with matching d");
  }
  int64_t classes = 0;
  for (int64_t l : train_labels) classes = std::max(classes, l + 1);
  std::vector<bool> seen(static_cast<size_t>(classes), false);
  for (int64_t l : train_labels) seen[static_cast<size_t>(l)] = true;
  for (int64_t l : eval_labels) {
    if (l < 0 || l >= classes || !seen[static_cast<size_t>(l)]) {
      throw ProbeError("class " + std::to_string(l) +
                       " appears in the eval set but not in training");
    }
  }
  const int64_t n = train_features.dim(0);
  const auto [mean, scale] = feature_moments(train_features);
  const LogisticFit fit =
      fit_logistic(standardize(train_features, mean, scale), train_labels,
                   std::max<int64_t>(classes, 2), options);
  const std::vector<int64_t> pred =
      predict_logistic(fit, standardize(eval_features, mean, scale));
  ProbeResult r;
  r.accuracy = accuracy_of(pred, eval_labels);
  r.num_classes = classes;
  r.train_count = n;
  r.eval_count = eval_features.dim(0);
  r.feature_dim = train_features.dim(1);
  r.seed = seed;
  return r;
}

ProbeResult linear_probe(const MaeParams& params, const ImageDataset& train,
                         const ImageDataset& eval, uint64_t seed,
                         const ProbeOptions& options) {
  if (!train.labeled() || !eval.labeled()) {
    throw ProbeError("linear probing needs labeled train and eval sets");
  }
  const Tensor ft = encode_features(params, train.fetch_all());
  const Tensor fe = encode_features(params, eval.fetch_all());
  return probe_features(ft, train.labels(), fe, eval.labels(), seed, options);
}

// ---------------------------------------------------------------------------
// Few-shot fine-tuning

void FewShotSpec::validate() const {
  if (shots < 1) throw InvalidArgumentError("shots must be >= 1");
  if (epochs < 1) throw InvalidArgumentError("epochs must be >= 1");
  if (batch_size < 1) throw InvalidArgumentError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw InvalidArgumentError("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw InvalidArgumentError("weight_decay must be >= 0");
}

std::vector<int64_t> select_few_shot(std::span<const int64_t> labels,
                                     int64_t num_classes, int64_t shots,
                                     uint64_t seed) {
  if (shots < 1) throw InvalidArgumentError("shots must be >= 1");
  std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < labels.size(); ++i) {
    const int64_t l = labels[i];
    if (l < 0 || l >= num_classes) throw InvalidArgumentError("label out of range");
    by_class[static_cast<size_t>(l)].push_back(static_cast<int64_t>(i));
  }
  std::vector<int64_t> out;
  for (int64_t c = 0; c < num_classes; ++c) {
    std::vector<int64_t>& pool = by_class[static_cast<size_t>(c)];
    if (static_cast<int64_t>(pool.size()) < shots) {
      throw InvalidArgumentError("class " + std::to_string(c) + " has " +
                                 std::to_string(pool.size()) +
                                 " samples, fewer than the requested " +
                                 std::to_string(shots) + " shots");
    }
    Rng rng(seed, SeedPurpose::kFewShot, static_cast<uint64_t>(c));
    for (int64_t i = 0; i < shots; ++i) {
      const int64_t j = i + static_cast<int64_t>(rng.below(pool.size() - static_cast<size_t>(i)));
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    std::vector<int64_t> pick(pool.begin(), pool.begin() + shots);
    std::sort(pick.begin(), pick.end());
    out.insert(out.end(), pick.begin(), pick.end());
  }
  return out;
}

ProbeResult few_shot_finetune(const MaeParams& params, const FewShotSpec& spec,
                              const ImageDataset& train,
                              const ImageDataset& eval, uint64_t seed) {
  spec.validate();
  if (!train.labeled() || !eval.labeled()) {
    throw ProbeError("fine-tuning needs labeled train and eval sets");
  }
  const int64_t K = train.num_classes();
  for (int64_t l : eval.labels()) {
    if (l >= K) {
      throw ProbeError("class " + std::to_string(l) +
                       " appears in the eval set but not in training");
    }
  }
  const std::vector<int64_t> picked =
      select_few_shot(train.labels(), K, spec.shots, seed);
  const int64_t n = static_cast<int64_t>(picked.size());
  const int64_t D = params.config.encoder_width;

  // Pooled features are standardized with moments of the starting encoder
  // on the selected images, held fixed during training, as in the probe.
  const auto [mu, sd] = feature_moments(encode_features(params, train.fetch(picked)));
  Tensor shift({D}), inv_scale({D});
  for (int64_t j = 0; j < D; ++j) {
    shift[j] = mu[static_cast<size_t>(j)];
    inv_scale[j] = 1.0 / sd[static_cast<size_t>(j)];
  }

  MaeParams model = params;
  ParameterSet head;
  head.add("head.w", Tensor({D, K}));
  head.add("head.b", Tensor({K}));
  const int64_t encoder_size = model.weights.total_size();

  DpOptimConfig optim;
  optim.optimizer = OptimizerKind::kAdamW;
  optim.learning_rate = spec.learning_rate;
  optim.weight_decay = spec.weight_decay;
  optim.beta2 = 0.999;
  const int64_t B = std::min(spec.batch_size, n);
  const int64_t per_epoch = (n + B - 1) / B;
  optim.total_steps = per_epoch * spec.epochs;
  optim.validate();

  std::vector<double> flat = model.weights.flatten();
  {
    const std::vector<double> h = head.flatten();
    flat.insert(flat.end(), h.begin(), h.end());
  }
  OptimState state;
  std::vector<int64_t> order = picked;
  for (int64_t epoch = 0; epoch < spec.epochs; ++epoch) {
    Rng shuffle(seed, SeedPurpose::kShuffle, static_cast<uint64_t>(epoch));
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = static_cast<int64_t>(shuffle.below(static_cast<uint64_t>(i + 1)));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    Rng augment(seed, SeedPurpose::kAugment, static_cast<uint64_t>(epoch));
    for (int64_t start = 0; start < n; start += B) {
      const int64_t nb = std::min(B, n - start);
      const std::span<const int64_t> idx(order.data() + start, static_cast<size_t>(nb));
      std::vector<bool> flip(static_cast<size_t>(nb), false);
      if (spec.flip_augment) {
        for (int64_t b = 0; b < nb; ++b) flip[static_cast<size_t>(b)] = augment.uniform() < 0.5;
      }
      const Tensor images = flip_horizontal(train.fetch(idx), flip);
      std::vector<int64_t> labels;
      for (int64_t i : idx) labels.push_back(train.labels()[static_cast<size_t>(i)]);

      Graph g(nb);
      MaeVars vars = bind_weights(g, model.weights, true);
      Var hw = g.parameter("head.w", head.get("head.w"));
      Var hb = g.parameter("head.b", head.get("head.b"));
      Var pooled = g.mul(g.sub(encode_pooled(g, model, vars, images), g.constant(shift)),
                         g.constant(inv_scale));
      Var logits = g.add(g.matmul(pooled, hw), hb);
      Var loss = g.mean(g.cross_entropy(logits, labels), Reduce::kAll);
      const auto grads = g.backward(loss);
      std::vector<double> grad;
      grad.reserve(flat.size());
      for (const std::string& name : model.weights.names()) {
        const Tensor& t = grads.at(name);
        grad.insert(grad.end(), t.data().begin(), t.data().end());
      }
      for (const std::string& name : head.names()) {
        const Tensor& t = grads.at(name);
        grad.insert(grad.end(), t.data().begin(), t.data().end());
      }
      optimizer_step(flat, state, grad, optim, optim.learning_rate_at(state.step));
      model.weights.unflatten(std::span<const double>(flat).first(
          static_cast<size_t>(encoder_size)));
      head.unflatten(std::span<const double>(flat).subspan(
          static_cast<size_t>(encoder_size)));
    }
  }

  const Tensor features = standardize(encode_features(model, eval.fetch_all()), mu, sd);
  const Tensor& w = head.get("head.w");
  const Tensor& bias = head.get("head.b");
  int64_t hits = 0;
  for (int64_t i = 0; i < eval.size(); ++i) {
    int64_t best = 0;
    double best_score = -1e300;
    for (int64_t k = 0; k < K; ++k) {
      double s = bias[k];
      for (int64_t j = 0; j < D; ++j) s += features[i * D + j] * w[j * K + k];
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    hits += best == eval.labels()[static_cast<size_t>(i)];
  }
  ProbeResult r;
  r.accuracy = eval.size() > 0 ? static_cast<double>(hits) / static_cast<double>(eval.size()) : 0.0;
  r.num_classes = K;
  r.train_count = n;
  r.eval_count = eval.size();
  r.feature_dim = D;
  r.seed = seed;
  return r;
}

void split_labeled(const ImageDataset& data, ImageDataset* train,
                   ImageDataset* eval) {
  std::vector<int64_t> tr;
  std::vector<int64_t> ev;
  for (int64_t i = 0; i < data.size(); ++i) (i % 5 == 4 ? ev : tr).push_back(i);
  *train = data.subset(tr);
  *eval = data.subset(ev);
}

std::string eval_log_header() { return "run_id,task,k,accuracy,seed"; }

std::string eval_log_line(const std::string& run_id, const std::string& task,
                          const std::string& k, double accuracy, uint64_t seed) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", accuracy);
  return run_id + "," + task + "," + k + "," + buf + "," + std::to_string(seed);
}

void append_eval_log(const std::filesystem::path& path, const std::string& line) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  if (fresh) out << eval_log_header() << "\n";
  out << line << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace dpmaes
