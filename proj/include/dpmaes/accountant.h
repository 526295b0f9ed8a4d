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

#ifndef DPMAES_ACCOUNTANT_H_
#define DPMAES_ACCOUNTANT_H_

// Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//
// A single step of noisy clipped gradient descent with per-sample inclusion
// probability q and noise multiplier sigma is (alpha, eps_alpha)-RDP. T steps
// compose to (alpha, T * eps_alpha)-RDP, and an RDP guarantee at order alpha
// converts to (epsilon, delta)-DP via
//
//   epsilon = eps_alpha + log((alpha - 1) / alpha)
//             - (log(delta) + log(alpha)) / (alpha - 1),
//
// minimized over the orders on the curve. Fixed-size (non-Poisson) batches are
// not covered by these bounds.
//
// All functions are pure and thread-safe.

#include <cstdint>
#include <span>
#include <vector>

namespace dpmaes::accountant {

struct RdpPoint {
  double alpha;
  double eps;

  bool operator==(const RdpPoint&) const = default;
};

// Orders strictly increasing, every eps finite and non-negative, non-empty.
class RdpCurve {
 public:
  explicit RdpCurve(std::vector<RdpPoint> points);

  const std::vector<RdpPoint>& points() const { return points_; }
  size_t size() const { return points_.size(); }

  bool operator==(const RdpCurve&) const = default;

 private:
  std::vector<RdpPoint> points_;
};

struct MechanismParams {
  double q = 0.0;       // sampling ratio, [0, 1]
  double sigma = 1.0;   // noise multiplier, > 0
  int64_t steps = 1;    // T >= 1

  void validate() const;
};

struct PrivacyBudget {
  double epsilon = 0.0;
  double delta = 0.0;

  void validate() const;
};

struct DpConversion {
  double epsilon;
  double best_alpha;
};

// Integer orders 2..256 plus {1.5, 1.75}, ascending.
const std::vector<double>& default_alpha_grid();

// delta = 1 / (2n).
double default_delta(int64_t n);

// Per-step RDP at an integer order alpha >= 2, from the exact binomial
// expansion evaluated in log space. Throws InvalidArgumentError for
// non-integer or small orders.
double rdp_subsampled_gaussian(double q, double sigma, double alpha);

// Per-step RDP at any real order alpha > 1. Integer orders use the binomial
// expansion; fractional orders use the two-sided erfc series.
double rdp_subsampled_gaussian_any(double q, double sigma, double alpha);

RdpCurve rdp_curve(double q, double sigma, std::span<const double> alphas);

RdpCurve compose(const RdpCurve& curve, int64_t steps);

// The RDP-to-DP conversion for a single point.
double rdp_point_to_dp(double alpha, double eps_alpha, double delta);

DpConversion rdp_to_dp(const RdpCurve& curve, double delta);

// Full chain: per-step curve -> composition over T -> conversion.
DpConversion account(const MechanismParams& params, double delta,
                     std::span<const double> alphas = default_alpha_grid());

PrivacyBudget dp_guarantee(
    const MechanismParams& params, double delta,
    std::span<const double> alphas = default_alpha_grid());

struct CalibrationOptions {
  double sigma_min = 1e-2;
  double sigma_max = 1e3;
  double relative_tolerance = 1e-3;
  int max_iterations = 200;
};

// Smallest-noise sigma (to within the tolerance) whose guarantee does not
// exceed target.epsilon at target.delta. Throws InfeasibleBudgetError if even
// sigma_max overspends the budget.
double calibrate_sigma(const PrivacyBudget& target, double q, int64_t steps,
                       const CalibrationOptions& options = {});

}  // namespace dpmaes::accountant

#endif  // DPMAES_ACCOUNTANT_H_
