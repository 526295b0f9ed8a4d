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

#ifndef DPMAES_CHECKPOINT_H_
#define DPMAES_CHECKPOINT_H_

// Flat tensor container. Byte layout (all integers little-endian):
//
//   magic      8 bytes  "DPMAESCK"
//   version    u32      kCheckpointVersion
//   n_meta     u32      metadata entries, sorted by key
//   per entry: u32 key length, key bytes, u32 value length, value bytes
//   n_records  u32
//   per record: u32 name length, name bytes, u32 rank, rank x i64 extents,
//               numel x f64 (IEEE-754 binary64, little-endian)
//   checksum   u64      FNV-1a over every preceding byte
//
// See docs/checkpoint_format.md.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "dpmaes/tensor.h"

namespace dpmaes {

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> metadata;
  ParameterSet tensors;
};

std::string encode_checkpoint(const Checkpoint& checkpoint);
// Throws IoError on truncation, bad magic, unknown version, or checksum
// mismatch.
Checkpoint decode_checkpoint(std::string_view bytes);

// Writes to a sibling temporary file and renames it into place.
void write_checkpoint(const std::filesystem::path& path,
                      const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

uint64_t fnv1a64(std::string_view bytes, uint64_t state = 0xcbf29ce484222325ULL);

}  // namespace dpmaes

#endif  // DPMAES_CHECKPOINT_H_
