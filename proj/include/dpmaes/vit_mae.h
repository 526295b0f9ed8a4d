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

#ifndef DPMAES_VIT_MAE_H_
#define DPMAES_VIT_MAE_H_

// Vision-transformer masked autoencoder.
//
// Images are [C, H, W] (batches [B, C, H, W]) with values in [0, 1]. Patches
// are numbered row-major over the patch grid; a patch row holds its pixels in
// (y, x, channel) order. The encoder sees only the kept patches, the decoder
// sees encoder states plus a shared mask token at every masked position, and
// both add fixed 2-D sinusoidal position embeddings.
//
// Loss per sample: mean over evaluated patches of the per-patch mean squared
// pixel error. Evaluated patches are the masked ones, or all of them when
// loss_on_masked_only is false.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dpmaes/autodiff.h"
#include "dpmaes/tensor.h"

namespace dpmaes {

struct MaeConfig {
  int64_t image_size = 32;
  int64_t channels = 3;
  int64_t patch_size = 4;
  int64_t encoder_depth = 4;
  int64_t encoder_width = 128;
  int64_t encoder_heads = 4;
  int64_t decoder_depth = 2;
  int64_t decoder_width = 64;
  int64_t decoder_heads = 4;
  int64_t mlp_ratio = 4;
  double mask_ratio = 0.75;
  bool loss_on_masked_only = true;
  bool normalize_patch_targets = false;

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  int64_t grid() const { return image_size / patch_size; }
  int64_t num_patches() const { return grid() * grid(); }
  int64_t patch_dim() const { return patch_size * patch_size * channels; }
  int64_t latent_dim() const { return encoder_width; }
  int64_t num_masked() const;
  int64_t num_kept() const { return num_patches() - num_masked(); }

  // "key=value" lines in a fixed order; from_text accepts any order and
  // rejects unknown keys.
  std::string to_text() const;
  static MaeConfig from_text(std::string_view text);

  // vip-micro (desk default), vip-nano, vip-tiny, vip-small, vip-base,
  // vip-large.
  static MaeConfig preset(std::string_view name);

  bool operator==(const MaeConfig&) const = default;
};

struct MaskSpec {
  std::vector<int64_t> kept;    // ascending
  std::vector<int64_t> masked;  // ascending
  uint64_t seed = 0;
};

// Uniform subset of round(ratio * L) masked patches.
MaskSpec random_mask(int64_t num_patches, double mask_ratio, uint64_t seed);

// [C, H, W] -> [L, p*p*C] and back.
Tensor patchify(const Tensor& image, int64_t patch_size);
Tensor unpatchify(const Tensor& patches, int64_t patch_size, int64_t channels,
                  int64_t image_size);
// [B, C, H, W] -> [B, L, p*p*C].
Tensor patchify_batch(const Tensor& images, int64_t patch_size);

// [L, D] fixed embedding: the first D/2 columns encode the patch row, the
// rest the patch column, each as sin/cos pairs over geometric frequencies.
Tensor sincos_position_embedding(int64_t grid, int64_t dim);

struct MaeParams {
  MaeConfig config;
  ParameterSet weights;  // trainable
  Tensor encoder_pos;    // [L, encoder_width], constant
  Tensor decoder_pos;    // [L, decoder_width], constant

  // Rebuilds the position embeddings from config.
  void refresh_constants();
};

MaeParams init_params(const MaeConfig& config, uint64_t seed);

// Trainable scalar count implied by a config, without allocating.
int64_t parameter_count(const MaeConfig& config);

// Graph handles for every weight, keyed by name.
using MaeVars = std::map<std::string, Var>;

// Registers the weights as graph parameters, or as constants when frozen.
MaeVars bind_weights(Graph& g, const ParameterSet& weights, bool trainable);

// Encoder over per-sample kept patch lists. patches is [B, L, P]; returns
// normalized token states [B, |kept|, encoder_width].
Var encode_tokens(Graph& g, const MaeParams& params, const MaeVars& vars,
                  const Tensor& patches,
                  const std::vector<std::vector<int64_t>>& kept);

struct MaeGraph {
  Var losses;       // [B]
  Var predictions;  // [B, L, P]
};

// Full forward pass in an existing graph whose batch size is images.dim(0).
MaeGraph build_mae(Graph& g, const MaeParams& params, const MaeVars& vars,
                   const Tensor& images, const std::vector<MaskSpec>& masks);

struct MaeOutput {
  Tensor reconstructions;             // [B, C, H, W]
  std::vector<double> per_sample_losses;
};

MaeOutput mae_forward(const MaeParams& params, const Tensor& images,
                      const std::vector<MaskSpec>& masks);

// Loss of predicted patch rows against an image, outside any graph.
double reconstruction_loss(const Tensor& predicted_patches,
                           const Tensor& target_patches, const MaskSpec& mask,
                           bool masked_only);

// Per-patch zero-mean, unit-variance targets (eps 1e-6 on the variance).
Tensor normalize_patches(const Tensor& patches);

// Mean over all tokens of the final encoder states, no masking: [B, d].
Var encode_pooled(Graph& g, const MaeParams& params, const MaeVars& vars,
                  const Tensor& images);
Tensor encode_features(const MaeParams& params, const Tensor& images);

}  // namespace dpmaes

#endif  // DPMAES_VIT_MAE_H_
