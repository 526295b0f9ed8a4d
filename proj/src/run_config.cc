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

#include "dpmaes/run_config.h"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "dpmaes/errors.h"

namespace dpmaes {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

int64_t to_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

uint64_t to_uint(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::set<std::string>& model_keys() {
  static const std::set<std::string> keys = {
      "image_size",    "channels",      "patch_size",
      "encoder_depth", "encoder_width", "encoder_heads",
      "decoder_depth", "decoder_width", "decoder_heads",
      "mlp_ratio",     "mask_ratio",    "loss_on_masked_only",
      "normalize_patch_targets"};
  return keys;
}

}  // namespace

DpOptimConfig RunConfig::default_optim() {
  DpOptimConfig o;
  o.clip_norm = 0.1;
  o.noise_multiplier = 0.5;
  o.optimizer = OptimizerKind::kAdamW;
  o.learning_rate = 3.84e-4;
  o.warmup_steps = 0;
  o.lr_floor_fraction = 0.1;
  o.beta1 = 0.9;
  o.beta2 = 0.95;
  o.weight_decay = 0.005;
  o.adam_epsilon = 1e-8;
  o.total_steps = 100;
  o.expected_batch_size = 16.0;
  return o;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  std::map<std::string, std::string> model_overrides;
  std::set<std::string> seen;

  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"run.seed", [&](auto& k, auto& v) { c.seed = to_uint(k, v); }},
      {"run.output_dir", [&](auto&, auto& v) { c.output_dir = v; }},
      {"run.checkpoint_every",
       [&](auto& k, auto& v) { c.checkpoint_every = to_int(k, v); }},
      {"model.preset", [&](auto&, auto& v) { c.preset = v; }},
      {"data.train", [&](auto&, auto& v) { c.train_data = v; }},
      {"optim.kind", [&](auto&, auto& v) { c.optim.optimizer = parse_optimizer(v); }},
      {"optim.clip_norm", [&](auto& k, auto& v) { c.optim.clip_norm = to_double(k, v); }},
      {"optim.noise_multiplier",
       [&](auto& k, auto& v) {
         c.optim.noise_multiplier = to_double(k, v);
         c.noise_multiplier_set = true;
       }},
      {"optim.lr", [&](auto& k, auto& v) { c.optim.learning_rate = to_double(k, v); }},
      {"optim.warmup_steps",
       [&](auto& k, auto& v) { c.optim.warmup_steps = to_int(k, v); }},
      {"optim.lr_floor_fraction",
       [&](auto& k, auto& v) { c.optim.lr_floor_fraction = to_double(k, v); }},
      {"optim.beta1", [&](auto& k, auto& v) { c.optim.beta1 = to_double(k, v); }},
      {"optim.beta2", [&](auto& k, auto& v) { c.optim.beta2 = to_double(k, v); }},
      {"optim.weight_decay",
       [&](auto& k, auto& v) { c.optim.weight_decay = to_double(k, v); }},
      {"optim.adam_epsilon",
       [&](auto& k, auto& v) { c.optim.adam_epsilon = to_double(k, v); }},
      {"optim.steps", [&](auto& k, auto& v) { c.optim.total_steps = to_int(k, v); }},
      {"optim.batch_size",
       [&](auto& k, auto& v) { c.optim.expected_batch_size = to_double(k, v); }},
      {"privacy.epsilon",
       [&](auto& k, auto& v) {
         if (v == "none") {
           c.epsilon.reset();
         } else {
           c.epsilon = to_double(k, v);
         }
       }},
      {"privacy.delta", [&](auto& k, auto& v) { c.delta = to_double(k, v); }},
      {"train.chunk_size", [&](auto& k, auto& v) { c.chunk_size = to_int(k, v); }},
      {"train.init", [&](auto&, auto& v) { c.init_checkpoint = v; }},
      {"pretrain.epochs", [&](auto& k, auto& v) { c.pretrain_epochs = to_int(k, v); }},
      {"pretrain.batch_size",
       [&](auto& k, auto& v) { c.pretrain_batch_size = to_int(k, v); }},
  };

  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected key = value, got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    if (!seen.insert(key).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                        "' given twice");
    }
    if (key.rfind("model.", 0) == 0 && key != "model.preset") {
      const std::string field = key.substr(6);
      if (!model_keys().count(field)) {
        throw ConfigError("line " + std::to_string(line_no) +
                          ": unknown key '" + key + "'");
      }
      model_overrides[field] = val;
      continue;
    }
    auto it = setters.find(key);
    if (it == setters.end()) {
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" +
                        key + "'");
    }
    it->second(key, val);
  }

  std::string model_text = MaeConfig::preset(c.preset).to_text();
  for (const auto& [k, v] : model_overrides) model_text += k + "=" + v + "\n";
  c.model = MaeConfig::from_text(model_text);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config file " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
}

void RunConfig::validate() const {
  model.validate();
  optim.validate();
  if (checkpoint_every < 0) throw ConfigError("run.checkpoint_every must be >= 0");
  if (chunk_size < 1) throw ConfigError("train.chunk_size must be >= 1");
  if (pretrain_epochs < 1) throw ConfigError("pretrain.epochs must be >= 1");
  if (pretrain_batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
  if (epsilon && !(*epsilon > 0.0)) throw ConfigError("privacy.epsilon must be > 0");
  if (delta && !(*delta > 0.0 && *delta < 1.0)) {
    throw ConfigError("privacy.delta must lie in (0, 1)");
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << "run.seed = " << seed << "\n"
      << "run.output_dir = " << output_dir.string() << "\n"
      << "run.checkpoint_every = " << checkpoint_every << "\n"
      << "model.preset = " << preset << "\n";
  std::istringstream m(model.to_text());
  std::string line;
  while (std::getline(m, line)) {
    const auto eq = line.find('=');
    out << "model." << line.substr(0, eq) << " = " << line.substr(eq + 1) << "\n";
  }
  out << "data.train = " << train_data.string() << "\n"
      << "optim.kind = " << optimizer_name(optim.optimizer) << "\n"
      << "optim.clip_norm = " << num(optim.clip_norm) << "\n";
  if (noise_multiplier_set) {
    out << "optim.noise_multiplier = " << num(optim.noise_multiplier) << "\n";
  }
  out << "optim.lr = " << num(optim.learning_rate) << "\n"
      << "optim.warmup_steps = " << optim.warmup_steps << "\n"
      << "optim.lr_floor_fraction = " << num(optim.lr_floor_fraction) << "\n"
      << "optim.beta1 = " << num(optim.beta1) << "\n"
      << "optim.beta2 = " << num(optim.beta2) << "\n"
      << "optim.weight_decay = " << num(optim.weight_decay) << "\n"
      << "optim.adam_epsilon = " << num(optim.adam_epsilon) << "\n"
      << "optim.steps = " << optim.total_steps << "\n"
      << "optim.batch_size = " << num(optim.expected_batch_size) << "\n"
      << "privacy.epsilon = " << (epsilon ? num(*epsilon) : "none") << "\n";
  if (delta) out << "privacy.delta = " << num(*delta) << "\n";
  out << "train.chunk_size = " << chunk_size << "\n";
  if (!init_checkpoint.empty()) {
    out << "train.init = " << init_checkpoint.string() << "\n";
  }
  out << "pretrain.epochs = " << pretrain_epochs << "\n"
      << "pretrain.batch_size = " << pretrain_batch_size << "\n";
  return out.str();
}

}  // namespace dpmaes
