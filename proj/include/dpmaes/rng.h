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

#ifndef DPMAES_RNG_H_
#define DPMAES_RNG_H_

#include <cstdint>
#include <random>
#include <string_view>

namespace dpmaes {

// Purpose tags for seed derivation. One master seed fans out to independent
// streams keyed by (master, purpose, index); the index is the step number for
// per-step streams and the sample/image number for per-item streams.
enum class SeedPurpose : uint64_t {
  kInit = 1,
  kSampling = 2,
  kMasking = 3,
  kNoise = 4,
  kSynthetic = 5,
  kFewShot = 6,
  kShuffle = 7,
  kAugment = 8,
  kLabels = 9,
};

// SplitMix64 finalizer.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr uint64_t derive_seed(uint64_t master, SeedPurpose purpose,
                               uint64_t index) {
  return mix64(mix64(mix64(master) ^ static_cast<uint64_t>(purpose)) ^
               mix64(index + 0x632be59bd9b4e019ULL));
}

// A seeded stream with portable distributions. std::*_distribution output is
// implementation-defined, so only raw engine bits are consumed here.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}
  Rng(uint64_t master, SeedPurpose purpose, uint64_t index)
      : engine_(derive_seed(master, purpose, index)) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) by rejection (unbiased).
  uint64_t below(uint64_t n);

  // Standard normal via Box-Muller; caches the second variate.
  double normal();

  // Normal truncated to [-2, 2] standard deviations, then scaled.
  double truncated_normal(double stddev);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dpmaes

#endif  // DPMAES_RNG_H_
