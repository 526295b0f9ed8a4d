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

#include "dpmaes/vit_mae.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "dpmaes/errors.h"
#include "dpmaes/rng.h"

namespace dpmaes {
namespace {

constexpr double kInitStd = 0.02;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("model config: '" + key + "' expects an integer, got '" +
                      v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("model config: '" + key + "' expects a number, got '" +
                      v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("model config: '" + key + "' expects true or false, got '" +
                    v + "'");
}

Var linear(Graph& g, const MaeVars& v, const std::string& name, Var x) {
  return g.add(g.matmul(x, v.at(name + ".w")), v.at(name + ".b"));
}

Var attention(Graph& g, const MaeVars& v, const std::string& prefix, Var x,
              int64_t heads) {
  const Shape& s = g.shape(x);
  const int64_t B = s[0];
  const int64_t N = s[1];
  const int64_t D = s[2];
  const int64_t dh = D / heads;
  auto split_heads = [&](Var t) {
    return g.transpose(g.reshape(t, {B, N, heads, dh}), {0, 2, 1, 3});
  };
  Var q = split_heads(linear(g, v, prefix + "q", x));
  Var k = split_heads(linear(g, v, prefix + "k", x));
  Var val = split_heads(linear(g, v, prefix + "v", x));
  Var scores = g.scale(g.matmul(q, g.transpose(k, {0, 1, 3, 2})),
                       1.0 / std::sqrt(static_cast<double>(dh)));
  Var mixed = g.matmul(g.softmax(scores), val);  // [B, h, N, dh]
  Var merged = g.reshape(g.transpose(mixed, {0, 2, 1, 3}), {B, N, D});
  return linear(g, v, prefix + "o", merged);
}

Var block(Graph& g, const MaeVars& v, const std::string& prefix, Var x,
          int64_t heads) {
  Var h = g.layer_norm(x, v.at(prefix + "ln1.g"), v.at(prefix + "ln1.b"));
  x = g.add(x, attention(g, v, prefix + "attn.", h, heads));
  h = g.layer_norm(x, v.at(prefix + "ln2.g"), v.at(prefix + "ln2.b"));
  h = linear(g, v, prefix + "mlp.fc2",
             g.gelu(linear(g, v, prefix + "mlp.fc1", h)));
  return g.add(x, h);
}

void add_block_params(ParameterSet& w, Rng& rng, const std::string& prefix,
                      int64_t width, int64_t hidden) {
  auto weight = [&](const std::string& name, int64_t in, int64_t out) {
    Tensor t({in, out});
    for (auto& x : t.data()) x = rng.truncated_normal(kInitStd);
    w.add(name + ".w", std::move(t));
    w.add(name + ".b", Tensor({out}));
  };
  w.add(prefix + "ln1.g", Tensor({width}, 1.0));
  w.add(prefix + "ln1.b", Tensor({width}));
  for (const char* n : {"q", "k", "v", "o"}) {
    weight(prefix + "attn." + n, width, width);
  }
  w.add(prefix + "ln2.g", Tensor({width}, 1.0));
  w.add(prefix + "ln2.b", Tensor({width}));
  weight(prefix + "mlp.fc1", width, hidden);
  weight(prefix + "mlp.fc2", hidden, width);
}

std::vector<int64_t> iota_list(int64_t n) {
  std::vector<int64_t> v(static_cast<size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// MaeConfig

int64_t MaeConfig::num_masked() const {
  return std::llround(mask_ratio * static_cast<double>(num_patches()));
}

void MaeConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (image_size < 1 || channels < 1 || patch_size < 1) {
    fail("image_size, channels and patch_size must be positive");
  }
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) +
         " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (encoder_depth < 1 || decoder_depth < 1) {
    fail("encoder_depth and decoder_depth must be >= 1");
  }
  if (encoder_heads < 1 || decoder_heads < 1 || mlp_ratio < 1) {
    fail("head counts and mlp_ratio must be >= 1");
  }
  if (encoder_width % encoder_heads != 0) {
    fail("encoder_width " + std::to_string(encoder_width) +
         " is not divisible by encoder_heads " + std::to_string(encoder_heads));
  }
  if (decoder_width % decoder_heads != 0) {
    fail("decoder_width " + std::to_string(decoder_width) +
         " is not divisible by decoder_heads " + std::to_string(decoder_heads));
  }
  if (encoder_width < 4 || encoder_width % 4 != 0 || decoder_width < 4 ||
      decoder_width % 4 != 0) {
    fail("widths must be positive multiples of 4 (sinusoidal embeddings)");
  }
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
    fail("mask_ratio must lie in [0, 1)");
  }
  if (num_masked() > num_patches() - 1) {
    fail("mask_ratio " + std::to_string(mask_ratio) +
         " leaves no visible patch out of " + std::to_string(num_patches()));
  }
}

std::string MaeConfig::to_text() const {
  std::ostringstream out;
  char ratio[32];
  std::snprintf(ratio, sizeof(ratio), "%.17g", mask_ratio);
  out << "image_size=" << image_size << "\n"
      << "channels=" << channels << "\n"
      << "patch_size=" << patch_size << "\n"
      << "encoder_depth=" << encoder_depth << "\n"
      << "encoder_width=" << encoder_width << "\n"
      << "encoder_heads=" << encoder_heads << "\n"
      << "decoder_depth=" << decoder_depth << "\n"
      << "decoder_width=" << decoder_width << "\n"
      << "decoder_heads=" << decoder_heads << "\n"
      << "mlp_ratio=" << mlp_ratio << "\n"
      << "mask_ratio=" << ratio << "\n"
      << "loss_on_masked_only=" << (loss_on_masked_only ? "true" : "false")
      << "\n"
      << "normalize_patch_targets="
      << (normalize_patch_targets ? "true" : "false") << "\n";
  return out.str();
}

MaeConfig MaeConfig::from_text(std::string_view text) {
  MaeConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("model config: expected key=value, got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    if (key == "image_size") c.image_size = parse_int(key, val);
    else if (key == "channels") c.channels = parse_int(key, val);
    else if (key == "patch_size") c.patch_size = parse_int(key, val);
    else if (key == "encoder_depth") c.encoder_depth = parse_int(key, val);
    else if (key == "encoder_width") c.encoder_width = parse_int(key, val);
    else if (key == "encoder_heads") c.encoder_heads = parse_int(key, val);
    else if (key == "decoder_depth") c.decoder_depth = parse_int(key, val);
    else if (key == "decoder_width") c.decoder_width = parse_int(key, val);
    else if (key == "decoder_heads") c.decoder_heads = parse_int(key, val);
    else if (key == "mlp_ratio") c.mlp_ratio = parse_int(key, val);
    else if (key == "mask_ratio") c.mask_ratio = parse_double(key, val);
    else if (key == "loss_on_masked_only") c.loss_on_masked_only = parse_bool(key, val);
    else if (key == "normalize_patch_targets") c.normalize_patch_targets = parse_bool(key, val);
    else throw ConfigError("model config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

MaeConfig MaeConfig::preset(std::string_view name) {
  MaeConfig c;
  if (name == "vip-micro") return c;
  // ImageNet-resolution backbones: 224 px, patch 16, 4-block 512-wide
  // decoder, 64-dimensional heads.
  c.image_size = 224;
  c.patch_size = 16;
  c.decoder_depth = 4;
  c.decoder_width = 512;
  c.decoder_heads = 16;
  if (name == "vip-nano") {
    c.encoder_depth = 12, c.encoder_width = 192, c.encoder_heads = 3;
  } else if (name == "vip-tiny") {
    c.encoder_depth = 12, c.encoder_width = 384, c.encoder_heads = 6;
  } else if (name == "vip-small") {
    c.encoder_depth = 12, c.encoder_width = 576, c.encoder_heads = 9;
  } else if (name == "vip-base") {
    c.encoder_depth = 12, c.encoder_width = 768, c.encoder_heads = 12;
  } else if (name == "vip-large") {
    c.encoder_depth = 24, c.encoder_width = 1024, c.encoder_heads = 16;
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Masking and patches

MaskSpec random_mask(int64_t num_patches, double mask_ratio, uint64_t seed) {
  if (num_patches < 1) throw InvalidArgumentError("no patches to mask");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
    throw InvalidArgumentError("mask_ratio must lie in [0, 1)");
  }
  const int64_t n_mask =
      std::llround(mask_ratio * static_cast<double>(num_patches));
  if (n_mask > num_patches - 1) {
    throw InvalidArgumentError("mask_ratio leaves no visible patch");
  }
  std::vector<int64_t> order = iota_list(num_patches);
  Rng rng(seed);
  for (int64_t i = num_patches - 1; i > 0; --i) {
    const auto j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  MaskSpec m;
  m.seed = seed;
  m.masked.assign(order.begin(), order.begin() + n_mask);
  m.kept.assign(order.begin() + n_mask, order.end());
  std::sort(m.masked.begin(), m.masked.end());
  std::sort(m.kept.begin(), m.kept.end());
  return m;
}

Tensor patchify(const Tensor& image, int64_t p) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw ShapeError("patchify expects a square [C, H, W] image, got " +
                     shape_string(image.shape()));
  }
  const int64_t C = image.dim(0);
  const int64_t H = image.dim(1);
  if (p < 1 || H % p != 0) {
    throw ConfigError("image size " + std::to_string(H) +
                      " is not divisible by patch size " + std::to_string(p));
  }
  const int64_t G = H / p;
  Tensor out({G * G, p * p * C});
  double* o = out.ptr();
  for (int64_t gy = 0; gy < G; ++gy) {
    for (int64_t gx = 0; gx < G; ++gx) {
      for (int64_t y = 0; y < p; ++y) {
        for (int64_t x = 0; x < p; ++x) {
          for (int64_t c = 0; c < C; ++c) {
            *o++ = image[(c * H + gy * p + y) * H + gx * p + x];
          }
        }
      }
    }
  }
  return out;
}

Tensor unpatchify(const Tensor& patches, int64_t p, int64_t channels,
                  int64_t image_size) {
  const int64_t C = channels;
  const int64_t H = image_size;
  if (p < 1 || H % p != 0) {
    throw ConfigError("image size " + std::to_string(H) +
                      " is not divisible by patch size " + std::to_string(p));
  }
  const int64_t G = H / p;
  if (patches.shape() != Shape{G * G, p * p * C}) {
    throw ShapeError("unpatchify expects [" + std::to_string(G * G) + "x" +
                     std::to_string(p * p * C) + "], got " +
                     shape_string(patches.shape()));
  }
  Tensor out({C, H, H});
  const double* in = patches.ptr();
  for (int64_t gy = 0; gy < G; ++gy) {
    for (int64_t gx = 0; gx < G; ++gx) {
      for (int64_t y = 0; y < p; ++y) {
        for (int64_t x = 0; x < p; ++x) {
          for (int64_t c = 0; c < C; ++c) {
            out[(c * H + gy * p + y) * H + gx * p + x] = *in++;
          }
        }
      }
    }
  }
  return out;
}

Tensor patchify_batch(const Tensor& images, int64_t p) {
  if (images.rank() != 4) {
    throw ShapeError("patchify_batch expects [B, C, H, W], got " +
                     shape_string(images.shape()));
  }
  const int64_t B = images.dim(0);
  const int64_t per = images.numel() / std::max<int64_t>(B, 1);
  Tensor first = patchify(
      images.slice0(0, 1).reshaped({images.dim(1), images.dim(2), images.dim(3)}),
      p);
  const int64_t L = first.dim(0);
  const int64_t P = first.dim(1);
  Tensor out({B, L, P});
  std::copy_n(first.ptr(), L * P, out.ptr());
  for (int64_t b = 1; b < B; ++b) {
    Tensor img({images.dim(1), images.dim(2), images.dim(3)},
               std::vector<double>(images.ptr() + b * per,
                                   images.ptr() + (b + 1) * per));
    Tensor pb = patchify(img, p);
    std::copy_n(pb.ptr(), L * P, out.ptr() + b * L * P);
  }
  return out;
}

Tensor sincos_position_embedding(int64_t grid, int64_t dim) {
  if (dim % 4 != 0) {
    throw ConfigError("position embedding width must be a multiple of 4");
  }
  const int64_t quarter = dim / 4;
  Tensor out({grid * grid, dim});
  for (int64_t gy = 0; gy < grid; ++gy) {
    for (int64_t gx = 0; gx < grid; ++gx) {
      double* row = out.ptr() + (gy * grid + gx) * dim;
      for (int64_t i = 0; i < quarter; ++i) {
        const double omega = std::pow(
            10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
        row[i] = std::sin(static_cast<double>(gy) * omega);
        row[quarter + i] = std::cos(static_cast<double>(gy) * omega);
        row[2 * quarter + i] = std::sin(static_cast<double>(gx) * omega);
        row[3 * quarter + i] = std::cos(static_cast<double>(gx) * omega);
      }
    }
  }
  return out;
}

Tensor normalize_patches(const Tensor& patches) {
  const int64_t P = patches.shape().back();
  Tensor out = patches;
  for (int64_t r = 0; r < patches.numel() / P; ++r) {
    double* row = out.ptr() + r * P;
    double mean = 0.0;
    for (int64_t j = 0; j < P; ++j) mean += row[j];
    mean /= static_cast<double>(P);
    double var = 0.0;
    for (int64_t j = 0; j < P; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(P);
    const double rstd = 1.0 / std::sqrt(var + 1e-6);
    for (int64_t j = 0; j < P; ++j) row[j] = (row[j] - mean) * rstd;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

void MaeParams::refresh_constants() {
  encoder_pos = sincos_position_embedding(config.grid(), config.encoder_width);
  decoder_pos = sincos_position_embedding(config.grid(), config.decoder_width);
}

MaeParams init_params(const MaeConfig& config, uint64_t seed) {
  config.validate();
  MaeParams p;
  p.config = config;
  Rng rng(seed, SeedPurpose::kInit, 0);
  ParameterSet& w = p.weights;
  const int64_t D = config.encoder_width;
  const int64_t Dd = config.decoder_width;
  const int64_t P = config.patch_dim();

  auto weight = [&](const std::string& name, int64_t in, int64_t out) {
    Tensor t({in, out});
    for (auto& x : t.data()) x = rng.truncated_normal(kInitStd);
    w.add(name + ".w", std::move(t));
    w.add(name + ".b", Tensor({out}));
  };
  weight("patch_embed", P, D);
  for (int64_t i = 0; i < config.encoder_depth; ++i) {
    add_block_params(w, rng, "enc." + std::to_string(i) + ".", D,
                     D * config.mlp_ratio);
  }
  w.add("enc.norm.g", Tensor({D}, 1.0));
  w.add("enc.norm.b", Tensor({D}));
  weight("dec.embed", D, Dd);
  Tensor token({1, Dd});
  for (auto& x : token.data()) x = rng.truncated_normal(kInitStd);
  w.add("dec.mask_token", std::move(token));
  for (int64_t i = 0; i < config.decoder_depth; ++i) {
    add_block_params(w, rng, "dec." + std::to_string(i) + ".", Dd,
                     Dd * config.mlp_ratio);
  }
  w.add("dec.norm.g", Tensor({Dd}, 1.0));
  w.add("dec.norm.b", Tensor({Dd}));
  weight("dec.pred", Dd, P);
  p.refresh_constants();
  return p;
}

int64_t parameter_count(const MaeConfig& c) {
  auto block = [&](int64_t w) {
    const int64_t hidden = w * c.mlp_ratio;
    return 4 * w + 4 * (w * w + w) + (w * hidden + hidden) + (hidden * w + w);
  };
  const int64_t D = c.encoder_width;
  const int64_t Dd = c.decoder_width;
  const int64_t P = c.patch_dim();
  return (P * D + D) + c.encoder_depth * block(D) + 2 * D + (D * Dd + Dd) +
         Dd + c.decoder_depth * block(Dd) + 2 * Dd + (Dd * P + P);
}

MaeVars bind_weights(Graph& g, const ParameterSet& weights, bool trainable) {
  MaeVars vars;
  for (size_t i = 0; i < weights.size(); ++i) {
    const std::string& name = weights.names()[i];
    vars[name] = trainable ? g.parameter(name, weights.value(i))
                           : g.constant(weights.value(i));
  }
  return vars;
}

// ---------------------------------------------------------------------------
// Forward

Var encode_tokens(Graph& g, const MaeParams& params, const MaeVars& vars,
                  const Tensor& patches,
                  const std::vector<std::vector<int64_t>>& kept) {
  const MaeConfig& c = params.config;
  if (patches.rank() != 3 || patches.dim(1) != c.num_patches() ||
      patches.dim(2) != c.patch_dim()) {
    throw ShapeError("encoder expects patches [B, " +
                     std::to_string(c.num_patches()) + ", " +
                     std::to_string(c.patch_dim()) + "], got " +
                     shape_string(patches.shape()));
  }
  Var visible = g.gather_rows(g.sample_constant(patches), kept);
  Var x = linear(g, vars, "patch_embed", visible);
  x = g.add(x, g.gather_rows(g.constant(params.encoder_pos), kept));
  for (int64_t i = 0; i < c.encoder_depth; ++i) {
    x = block(g, vars, "enc." + std::to_string(i) + ".", x, c.encoder_heads);
  }
  return g.layer_norm(x, vars.at("enc.norm.g"), vars.at("enc.norm.b"));
}

MaeGraph build_mae(Graph& g, const MaeParams& params, const MaeVars& vars,
                   const Tensor& images, const std::vector<MaskSpec>& masks) {
  const MaeConfig& c = params.config;
  if (images.rank() != 4 || images.dim(1) != c.channels ||
      images.dim(2) != c.image_size || images.dim(3) != c.image_size) {
    throw ShapeError("expected images [B, " + std::to_string(c.channels) +
                     ", " + std::to_string(c.image_size) + ", " +
                     std::to_string(c.image_size) + "], got " +
                     shape_string(images.shape()));
  }
  const int64_t B = images.dim(0);
  if (static_cast<int64_t>(masks.size()) != B || g.batch_size() != B) {
    throw ShapeError("need one mask per image and a graph of batch size " +
                     std::to_string(B));
  }
  const int64_t L = c.num_patches();
  const int64_t P = c.patch_dim();
  std::vector<std::vector<int64_t>> kept(static_cast<size_t>(B));
  std::vector<std::vector<int64_t>> restore(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    const MaskSpec& m = masks[static_cast<size_t>(b)];
    if (static_cast<int64_t>(m.kept.size() + m.masked.size()) != L ||
        m.kept.size() != masks[0].kept.size()) {
      throw ShapeError("mask " + std::to_string(b) +
                       " does not partition the patches with the batch's "
                       "visible count");
    }
    kept[static_cast<size_t>(b)] = m.kept;
    const int64_t Lv = static_cast<int64_t>(m.kept.size());
    std::vector<int64_t> r(static_cast<size_t>(L), Lv);  // mask token row
    for (int64_t j = 0; j < Lv; ++j) r[static_cast<size_t>(m.kept[static_cast<size_t>(j)])] = j;
    restore[static_cast<size_t>(b)] = std::move(r);
  }

  const Tensor patches = patchify_batch(images, c.patch_size);
  Var enc = encode_tokens(g, params, vars, patches, kept);

  Var y = linear(g, vars, "dec.embed", enc);
  y = g.gather_rows(g.concat_rows(y, vars.at("dec.mask_token")), restore);
  y = g.add(y, g.constant(params.decoder_pos));
  for (int64_t i = 0; i < c.decoder_depth; ++i) {
    y = block(g, vars, "dec." + std::to_string(i) + ".", y, c.decoder_heads);
  }
  y = g.layer_norm(y, vars.at("dec.norm.g"), vars.at("dec.norm.b"));
  Var pred = linear(g, vars, "dec.pred", y);  // [B, L, P]

  const Tensor target =
      c.normalize_patch_targets ? normalize_patches(patches) : patches;
  Tensor weights({B, L, P});
  for (int64_t b = 0; b < B; ++b) {
    const MaskSpec& m = masks[static_cast<size_t>(b)];
    const bool all = !c.loss_on_masked_only || m.masked.empty();
    const std::vector<int64_t> every = all ? iota_list(L) : m.masked;
    const double w = std::sqrt(
        1.0 / (static_cast<double>(P) * static_cast<double>(every.size())));
    for (int64_t l : every) {
      std::fill_n(weights.ptr() + (b * L + l) * P, P, w);
    }
  }
  Var diff = g.mul(g.sub(pred, g.sample_constant(target)),
                   g.sample_constant(std::move(weights)));
  return {g.sum_sq(diff, Reduce::kPerSample), pred};
}

MaeOutput mae_forward(const MaeParams& params, const Tensor& images,
                      const std::vector<MaskSpec>& masks) {
  const MaeConfig& c = params.config;
  const int64_t B = images.rank() == 4 ? images.dim(0) : 0;
  Graph g(B);
  MaeVars vars = bind_weights(g, params.weights, false);
  MaeGraph out = build_mae(g, params, vars, images, masks);
  MaeOutput result;
  const Tensor& losses = g.value(out.losses);
  result.per_sample_losses.assign(losses.data().begin(), losses.data().end());
  const Tensor& pred = g.value(out.predictions);
  const int64_t L = c.num_patches();
  const int64_t P = c.patch_dim();
  result.reconstructions = Tensor(images.shape());
  const int64_t per = c.channels * c.image_size * c.image_size;
  for (int64_t b = 0; b < B; ++b) {
    Tensor img = unpatchify(pred.slice0(b, 1).reshaped({L, P}), c.patch_size,
                            c.channels, c.image_size);
    std::copy_n(img.ptr(), per, result.reconstructions.ptr() + b * per);
  }
  return result;
}

double reconstruction_loss(const Tensor& predicted, const Tensor& target,
                           const MaskSpec& mask, bool masked_only) {
  if (predicted.shape() != target.shape() || predicted.rank() != 2) {
    throw ShapeError("reconstruction_loss needs equal [L, P] operands: " +
                     shape_string(predicted.shape()) + " vs " +
                     shape_string(target.shape()));
  }
  const int64_t L = predicted.dim(0);
  const int64_t P = predicted.dim(1);
  const bool all = !masked_only || mask.masked.empty();
  const std::vector<int64_t> rows = all ? iota_list(L) : mask.masked;
  double total = 0.0;
  for (int64_t l : rows) {
    double sq = 0.0;
    for (int64_t j = 0; j < P; ++j) {
      const double d = predicted[l * P + j] - target[l * P + j];
      sq += d * d;
    }
    total += sq / static_cast<double>(P);
  }
  return total / static_cast<double>(rows.size());
}

Var encode_pooled(Graph& g, const MaeParams& params, const MaeVars& vars,
                  const Tensor& images) {
  const MaeConfig& c = params.config;
  if (images.rank() != 4 || images.dim(1) != c.channels ||
      images.dim(2) != c.image_size || images.dim(3) != c.image_size) {
    throw ShapeError("encoder expects images [B, " +
                     std::to_string(c.channels) + ", " +
                     std::to_string(c.image_size) + ", " +
                     std::to_string(c.image_size) + "], got " +
                     shape_string(images.shape()));
  }
  const int64_t B = images.dim(0);
  const Tensor patches = patchify_batch(images, c.patch_size);
  std::vector<std::vector<int64_t>> all(static_cast<size_t>(B),
                                        iota_list(c.num_patches()));
  return g.mean_axis(encode_tokens(g, params, vars, patches, all), 1);
}

Tensor encode_features(const MaeParams& params, const Tensor& images) {
  if (images.rank() != 4) {
    throw ShapeError("encode_features expects [B, C, H, W], got " +
                     shape_string(images.shape()));
  }
  const int64_t B = images.dim(0);
  const int64_t D = params.config.encoder_width;
  constexpr int64_t kChunk = 32;
  Tensor out({B, D});
  for (int64_t start = 0; start < B; start += kChunk) {
    const int64_t n = std::min(kChunk, B - start);
    Graph g(n);
    MaeVars vars = bind_weights(g, params.weights, false);
    Var pooled = encode_pooled(g, params, vars, images.slice0(start, n));
    std::copy_n(g.value(pooled).ptr(), n * D, out.ptr() + start * D);
  }
  return out;
}

}  // namespace dpmaes
