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

#ifndef DPMAES_DATA_H_
#define DPMAES_DATA_H_

// Procedural images, on-disk datasets, and the Poisson subsampler.
//
// Dataset directory layout:
//
//   manifest        key=value lines: format, n, resolution, channels, role,
//                   labels (yes|no), digest
//   000000.ppm ...  one 8-bit binary portable pixmap per image (P6 for three
//                   channels, P5 for one), numbered from zero, zero-padded
//                   to at least six digits
//   labels          optional, one integer class id per line
//
// The digest is FNV-1a 64 over the encoded image files in index order,
// printed as 16 hex digits. Labels are not part of it.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpmaes/tensor.h"

namespace dpmaes {

enum class DatasetRole { kSyntheticPretrain, kPrivateTrain, kEval };

std::string_view role_name(DatasetRole role);
DatasetRole parse_role(std::string_view name);

struct DatasetManifest {
  std::filesystem::path root;
  int64_t n = 0;
  int64_t resolution = 0;
  int64_t channels = 0;
  DatasetRole role = DatasetRole::kPrivateTrain;
  bool has_labels = false;
  std::string digest;
};

// Images held as 8-bit pixels in (y, x, channel) order; fetch() converts to
// [B, C, H, W] doubles in [0, 1].
class ImageDataset {
 public:
  ImageDataset(int64_t resolution, int64_t channels, DatasetRole role);

  void add(std::span<const uint8_t> pixels,
           std::optional<int64_t> label = std::nullopt);

  int64_t size() const { return count_; }
  int64_t resolution() const { return resolution_; }
  int64_t channels() const { return channels_; }
  DatasetRole role() const { return role_; }
  int64_t image_bytes() const { return resolution_ * resolution_ * channels_; }

  bool labeled() const { return !labels_.empty(); }
  const std::vector<int64_t>& labels() const { return labels_; }
  // 1 + largest label; 0 when unlabeled.
  int64_t num_classes() const;

  std::span<const uint8_t> pixels(int64_t index) const;
  Tensor fetch(std::span<const int64_t> indices) const;
  Tensor fetch_all() const;

  ImageDataset subset(std::span<const int64_t> indices) const;

  std::string digest() const;
  DatasetManifest manifest(const std::filesystem::path& root = {}) const;

 private:
  void check_index(int64_t index) const;

  int64_t resolution_;
  int64_t channels_;
  DatasetRole role_;
  int64_t count_ = 0;
  std::vector<uint8_t> pixels_;
  std::vector<int64_t> labels_;
};

// One procedural image: a value-noise base layer under `depth` further
// layers, each a grating, a noise field, a filled shape, or a color-map
// transform. Everything is drawn from the seed in a fixed order.
struct SynthLayer {
  enum class Kind { kGrating, kNoise, kShape, kColorMap };
  Kind kind = Kind::kGrating;
  double opacity = 1.0;
  // Grating: angle, cycles per image, phase, sharpness. Noise: octaves,
  // base lattice size, persistence. Shape: kind (0 disc, 1 box, 2 triangle),
  // center x/y, size, rotation.
  std::vector<double> params;
  // Two or three RGB colors, interpolated by the layer's scalar field.
  std::vector<double> palette;
  uint64_t noise_seed = 0;
};

struct SynthProgram {
  uint64_t seed = 0;
  int64_t depth = 0;
  std::vector<SynthLayer> layers;  // layers[0] is the base
};

SynthProgram sample_program(uint64_t seed);

// Labeled variant: a full-contrast grating over a random noise background.
// The class picks the orientation bucket and the frequency band (low or high,
// when there are at least two classes).
SynthProgram sample_labeled_program(uint64_t seed, int64_t label,
                                    int64_t num_classes);

// Renders to 8-bit RGB, (y, x, channel) order.
std::vector<uint8_t> render(const SynthProgram& program, int64_t resolution);

struct SynthOptions {
  int64_t count = 0;
  int64_t resolution = 32;
  uint64_t seed = 0;
  DatasetRole role = DatasetRole::kSyntheticPretrain;
  // 0 for unlabeled images, otherwise labels cycle through 0..num_classes-1.
  int64_t num_classes = 0;
};

ImageDataset generate_synthetic(const SynthOptions& options);

// Generates and writes in one go; returns the written manifest.
DatasetManifest generate_synthetic(const SynthOptions& options,
                                   const std::filesystem::path& out_dir);

DatasetManifest write_dataset(const ImageDataset& dataset,
                              const std::filesystem::path& dir);

DatasetManifest read_manifest(const std::filesystem::path& dir);

// Reads every image and checks it against the manifest. Throws IoError
// naming the offending file.
ImageDataset load_dataset(const std::filesystem::path& dir);

// Portable pixmap codec for 8-bit images with 1 or 3 channels.
std::string encode_pnm(std::span<const uint8_t> pixels, int64_t width,
                       int64_t height, int64_t channels);
std::vector<uint8_t> decode_pnm(std::string_view bytes, int64_t* width,
                                int64_t* height, int64_t* channels);

// Each index in [0, n) included independently with probability q, from a
// stream seeded by step_seed. Ascending.
std::vector<int64_t> poisson_sample(int64_t n, double q, uint64_t step_seed);

}  // namespace dpmaes

#endif  // DPMAES_DATA_H_
