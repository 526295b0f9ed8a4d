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

#ifndef DPMAES_ERRORS_H_
#define DPMAES_ERRORS_H_

#include <stdexcept>
#include <string>

namespace dpmaes {

// Base for every error this library raises. The CLI maps subclasses onto
// process exit codes (see tools/dpmaes_main.cc).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised by per-sample backward when the loss couples samples.
class NonSeparableGraphError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ProbeError : public Error {
 public:
  using Error::Error;
};

class InfeasibleBudgetError : public Error {
 public:
  InfeasibleBudgetError(const std::string& what, double sigma_lo,
                        double eps_at_lo, double sigma_hi, double eps_at_hi)
      : Error(what),
        sigma_lo_(sigma_lo),
        eps_at_lo_(eps_at_lo),
        sigma_hi_(sigma_hi),
        eps_at_hi_(eps_at_hi) {}

  double sigma_lo() const { return sigma_lo_; }
  double eps_at_lo() const { return eps_at_lo_; }
  double sigma_hi() const { return sigma_hi_; }
  double eps_at_hi() const { return eps_at_hi_; }

 private:
  double sigma_lo_;
  double eps_at_lo_;
  double sigma_hi_;
  double eps_at_hi_;
};

}  // namespace dpmaes

#endif  // DPMAES_ERRORS_H_
