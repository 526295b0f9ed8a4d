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

#ifndef DPMAES_TESTS_GRAD_CHECK_H_
#define DPMAES_TESTS_GRAD_CHECK_H_

// Finite-difference and loop oracles for the autodiff engine. Test-only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dpmaes/autodiff.h"
#include "dpmaes/rng.h"
#include "dpmaes/tensor.h"

namespace dpmaes::testing {

// Builds the loss from parameter variables registered in the given order.
using LossBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

inline Tensor RandomTensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline double EvalLoss(const std::vector<Tensor>& params, int64_t batch,
                       const LossBuilder& build) {
  Graph g(batch);
  std::vector<Var> vars;
  for (size_t i = 0; i < params.size(); ++i) {
    vars.push_back(g.parameter("p" + std::to_string(i), params[i]));
  }
  return g.value(build(g, vars))[0];
}

inline std::vector<Tensor> AnalyticGrads(const std::vector<Tensor>& params,
                                         int64_t batch,
                                         const LossBuilder& build) {
  Graph g(batch);
  std::vector<Var> vars;
  for (size_t i = 0; i < params.size(); ++i) {
    vars.push_back(g.parameter("p" + std::to_string(i), params[i]));
  }
  auto grads = g.backward(build(g, vars));
  std::vector<Tensor> out;
  for (size_t i = 0; i < params.size(); ++i) {
    out.push_back(grads.at("p" + std::to_string(i)));
  }
  return out;
}

// Entry-wise central differences; returns the largest norm-wise relative
// error ||analytic - fd|| / max(||analytic||, ||fd||, floor) over tensors.
inline double MaxFiniteDifferenceError(std::vector<Tensor> params,
                                       int64_t batch, const LossBuilder& build,
                                       double h = 1e-5, double floor = 1e-8) {
  const std::vector<Tensor> analytic = AnalyticGrads(params, batch, build);
  double worst = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    double diff_sq = 0.0;
    double a_sq = 0.0;
    double f_sq = 0.0;
    for (int64_t i = 0; i < params[p].numel(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + h;
      const double plus = EvalLoss(params, batch, build);
      params[p][i] = saved - h;
      const double minus = EvalLoss(params, batch, build);
      params[p][i] = saved;
      const double fd = (plus - minus) / (2 * h);
      const double a = analytic[p][i];
      diff_sq += (a - fd) * (a - fd);
      a_sq += a * a;
      f_sq += fd * fd;
    }
    const double denom =
        std::max({std::sqrt(a_sq), std::sqrt(f_sq), floor});
    worst = std::max(worst, std::sqrt(diff_sq) / denom);
  }
  return worst;
}

inline double RelativeDifference(std::span<const double> a,
                                 std::span<const double> b) {
  double diff = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
  return std::sqrt(diff) / denom;
}

}  // namespace dpmaes::testing

#endif  // DPMAES_TESTS_GRAD_CHECK_H_
