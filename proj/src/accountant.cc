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

#include "dpmaes/accountant.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>

#include "dpmaes/errors.h"

namespace dpmaes::accountant {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

double log_sub(double a, double b) {
  if (b == kNegInf) return a;
  if (b > a) {
    throw Error("log-space subtraction went negative in the RDP series");
  }
  if (a == b) return kNegInf;
  return a + std::log1p(-std::exp(b - a));
}

// log(exp(x) - 1) for x > 0.
double log_expm1(double x) {
  if (x > 30.0) return x + std::log1p(-std::exp(-x));
  return std::log(std::expm1(x));
}

double log_erfc(double x) {
  if (x < 25.0) return std::log(std::erfc(x));
  const double inv2 = 1.0 / (x * x);
  return -x * x - std::log(x) - 0.5 * std::log(std::numbers::pi) +
         std::log1p(inv2 * (-0.5 + inv2 * (0.75 - inv2 * 1.875)));
}

void check_q_sigma(double q, double sigma) {
  if (!(q >= 0.0 && q <= 1.0)) {
    throw InvalidArgumentError("sampling ratio q must lie in [0, 1], got " +
                               std::to_string(q));
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw InvalidArgumentError("noise multiplier sigma must be > 0, got " +
                               std::to_string(sigma));
  }
}

bool is_integer_order(double alpha) {
  return std::isfinite(alpha) && alpha == std::floor(alpha);
}

// log of  sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k exp((k^2-k)/(2s^2))
// minus one. The k = 0, 1 terms carry zero exponent and the binomial weights
// sum to one, so the remainder is a sum of positive terms:
//   sum_{k>=2} C(alpha,k) (1-q)^(alpha-k) q^k expm1((k^2-k)/(2s^2)).
// Working with the remainder keeps full relative precision when eps is tiny.
double log_excess_integer(double q, double sigma, int64_t alpha) {
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
  double log_binom = 0.0;
  double acc = kNegInf;
  for (int64_t k = 1; k <= alpha; ++k) {
    log_binom += std::log(static_cast<double>(alpha - k + 1) /
                          static_cast<double>(k));
    if (k < 2) continue;
    const double exponent = static_cast<double>(k * k - k) * inv_two_var;
    const double term = log_binom + static_cast<double>(alpha - k) * log_1mq +
                        static_cast<double>(k) * log_q + log_expm1(exponent);
    acc = log_add(acc, term);
  }
  return acc;
}

// log A_alpha for fractional alpha: the integral split at z0 expands into two
// generalized-binomial series with erfc tails.
double log_a_fractional(double q, double sigma, double alpha) {
  double log_a0 = kNegInf;
  double log_a1 = kNegInf;
  const double z0 = sigma * sigma * std::log(1.0 / q - 1.0) + 0.5;
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  const double two_var = 2.0 * sigma * sigma;
  const double sqrt2_sigma = std::numbers::sqrt2 * sigma;
  double coef = 1.0;  // generalized binomial C(alpha, i)
  for (int i = 0; i < 100000; ++i) {
    if (i > 0) coef *= (alpha - (i - 1)) / static_cast<double>(i);
    const double log_coef = coef == 0.0 ? kNegInf : std::log(std::abs(coef));
    const double j = alpha - i;
    const double log_t0 = log_coef + i * log_q + j * log_1mq;
    const double log_t1 = log_coef + j * log_q + i * log_1mq;
    const double log_e0 =
        std::log(0.5) + log_erfc((i - z0) / sqrt2_sigma);
    const double log_e1 =
        std::log(0.5) + log_erfc((z0 - j) / sqrt2_sigma);
    const double log_s0 = log_t0 + (i * i - i) / two_var + log_e0;
    const double log_s1 = log_t1 + (j * j - j) / two_var + log_e1;
    if (coef > 0.0) {
      log_a0 = log_add(log_a0, log_s0);
      log_a1 = log_add(log_a1, log_s1);
    } else {
      log_a0 = log_sub(log_a0, log_s0);
      log_a1 = log_sub(log_a1, log_s1);
    }
    if (std::max(log_s0, log_s1) < -30.0) break;
  }
  return log_add(log_a0, log_a1);
}

}  // namespace

RdpCurve::RdpCurve(std::vector<RdpPoint> points) : points_(std::move(points)) {
  if (points_.empty()) {
    throw InvalidArgumentError("RDP curve needs at least one point");
  }
  for (size_t i = 0; i < points_.size(); ++i) {
    const RdpPoint& p = points_[i];
    if (!(p.alpha > 1.0) || !std::isfinite(p.alpha)) {
      throw InvalidArgumentError("RDP order must be finite and > 1");
    }
    if (!(p.eps >= 0.0) || !std::isfinite(p.eps)) {
      throw InvalidArgumentError("RDP eps_alpha must be finite and >= 0");
    }
    if (i > 0 && !(p.alpha > points_[i - 1].alpha)) {
      throw InvalidArgumentError("RDP orders must be strictly increasing");
    }
  }
}

void MechanismParams::validate() const {
  check_q_sigma(q, sigma);
  if (steps < 1) {
    throw InvalidArgumentError("steps must be >= 1, got " +
                               std::to_string(steps));
  }
}

void PrivacyBudget::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw InvalidArgumentError("epsilon must be finite and > 0");
  }
  if (!(delta > 0.0 && delta < 1.0)) {
    throw InvalidArgumentError("delta must lie in (0, 1)");
  }
}

const std::vector<double>& default_alpha_grid() {
  static const std::vector<double> grid = [] {
    std::vector<double> g = {1.5, 1.75};
    for (int a = 2; a <= 256; ++a) g.push_back(a);
    return g;
  }();
  return grid;
}

double default_delta(int64_t n) {
  if (n < 1) throw InvalidArgumentError("dataset size must be >= 1");
  return 1.0 / (2.0 * static_cast<double>(n));
}

double rdp_subsampled_gaussian(double q, double sigma, double alpha) {
  if (!is_integer_order(alpha) || alpha < 2.0) {
    throw InvalidArgumentError(
        "RDP order must be an integer >= 2 for the binomial expansion");
  }
  check_q_sigma(q, sigma);
  if (q == 0.0) return 0.0;
  if (q == 1.0) return alpha / (2.0 * sigma * sigma);
  const double log_excess =
      log_excess_integer(q, sigma, static_cast<int64_t>(alpha));
  // log(1 + e^L)
  const double log_sum = log_excess > 0.0
                             ? log_excess + std::log1p(std::exp(-log_excess))
                             : std::log1p(std::exp(log_excess));
  const double eps = log_sum / (alpha - 1.0);
  if (!std::isfinite(eps)) {
    throw Error("RDP evaluation overflowed at alpha=" + std::to_string(alpha));
  }
  return eps;
}

double rdp_subsampled_gaussian_any(double q, double sigma, double alpha) {
  if (!(alpha > 1.0) || !std::isfinite(alpha)) {
    throw InvalidArgumentError("RDP order must be finite and > 1");
  }
  if (is_integer_order(alpha)) return rdp_subsampled_gaussian(q, sigma, alpha);
  check_q_sigma(q, sigma);
  if (q == 0.0) return 0.0;
  if (q == 1.0) return alpha / (2.0 * sigma * sigma);
  const double eps = log_a_fractional(q, sigma, alpha) / (alpha - 1.0);
  if (!std::isfinite(eps)) {
    throw Error("RDP evaluation overflowed at alpha=" + std::to_string(alpha));
  }
  return std::max(eps, 0.0);
}

RdpCurve rdp_curve(double q, double sigma, std::span<const double> alphas) {
  std::vector<RdpPoint> points;
  points.reserve(alphas.size());
  for (double a : alphas) {
    points.push_back({a, rdp_subsampled_gaussian_any(q, sigma, a)});
  }
  return RdpCurve(std::move(points));
}

RdpCurve compose(const RdpCurve& curve, int64_t steps) {
  if (steps < 1) {
    throw InvalidArgumentError("composition needs steps >= 1");
  }
  std::vector<RdpPoint> points = curve.points();
  for (RdpPoint& p : points) p.eps *= static_cast<double>(steps);
  return RdpCurve(std::move(points));
}

double rdp_point_to_dp(double alpha, double eps_alpha, double delta) {
  return eps_alpha + std::log((alpha - 1.0) / alpha) -
         (std::log(delta) + std::log(alpha)) / (alpha - 1.0);
}

DpConversion rdp_to_dp(const RdpCurve& curve, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) {
    throw InvalidArgumentError("delta must lie in (0, 1)");
  }
  DpConversion best{std::numeric_limits<double>::infinity(), 0.0};
  for (const RdpPoint& p : curve.points()) {
    const double eps = rdp_point_to_dp(p.alpha, p.eps, delta);
    if (eps < best.epsilon) best = {eps, p.alpha};
  }
  return best;
}

DpConversion account(const MechanismParams& params, double delta,
                     std::span<const double> alphas) {
  params.validate();
  if (alphas.empty()) throw InvalidArgumentError("alpha grid is empty");
  return rdp_to_dp(compose(rdp_curve(params.q, params.sigma, alphas),
                           params.steps),
                   delta);
}

PrivacyBudget dp_guarantee(const MechanismParams& params, double delta,
                           std::span<const double> alphas) {
  return {account(params, delta, alphas).epsilon, delta};
}

double calibrate_sigma(const PrivacyBudget& target, double q, int64_t steps,
                       const CalibrationOptions& options) {
  target.validate();
  MechanismParams probe{q, options.sigma_max, steps};
  probe.validate();
  auto eps_at = [&](double sigma) {
    probe.sigma = sigma;
    return dp_guarantee(probe, target.delta).epsilon;
  };

  double lo = options.sigma_min;
  double hi = options.sigma_max;
  const double eps_lo = eps_at(lo);
  const double eps_hi = eps_at(hi);
  if (eps_hi > target.epsilon) {
    std::ostringstream msg;
    msg.precision(12);
    msg << "privacy budget epsilon=" << target.epsilon
        << " is infeasible: sigma in [" << lo << ", " << hi
        << "] yields epsilon in [" << eps_hi << ", " << eps_lo << "]";
    throw InfeasibleBudgetError(msg.str(), lo, eps_lo, hi, eps_hi);
  }
  if (eps_lo <= target.epsilon) return lo;

  // Invariant: eps(lo) > target >= eps(hi). Return hi so the budget is never
  // overspent.
  const double tol = options.relative_tolerance * target.epsilon;
  double eps_at_hi = eps_hi;
  for (int it = 0; it < options.max_iterations; ++it) {
    if (target.epsilon - eps_at_hi <= tol) break;
    const double mid = std::sqrt(lo * hi);
    if (mid <= lo || mid >= hi) break;
    const double eps_mid = eps_at(mid);
    if (eps_mid > target.epsilon) {
      lo = mid;
    } else {
      hi = mid;
      eps_at_hi = eps_mid;
    }
  }
  return hi;
}

}  // namespace dpmaes::accountant
