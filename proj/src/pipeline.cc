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

#include "dpmaes/pipeline.h"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "dpmaes/accountant.h"
#include "dpmaes/data.h"
#include "dpmaes/errors.h"

namespace dpmaes {
namespace {

volatile std::sig_atomic_t g_stop = 0;

extern "C" void on_stop_signal(int) { g_stop = 1; }

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_num(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw IoError("bad number '" + s + "'");
  }
  return v;
}

int64_t parse_i64(const std::string& s) {
  int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw IoError("bad integer '" + s + "'");
  }
  return v;
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  const std::filesystem::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

// Keeps the header and every row whose step is below `step`.
void truncate_metrics(const std::filesystem::path& file, int64_t step,
                      const std::string& header) {
  std::string kept = header + "\n";
  std::ifstream in(file);
  std::string line;
  bool first = true;
  while (in && std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (parse_i64(line.substr(0, comma)) < step) kept += line + "\n";
  }
  write_text(file, kept);
}

class LineAppender {
 public:
  explicit LineAppender(const std::filesystem::path& file)
      : out_(file, std::ios::app) {
    if (!out_) throw IoError("cannot append to " + file.string());
  }
  void line(const std::string& s) {
    out_ << s << "\n";
    out_.flush();
    if (!out_) throw IoError("metrics write failed");
  }

 private:
  std::ofstream out_;
};

void require_paths(const RunConfig& c) {
  if (c.output_dir.empty()) throw ConfigError("run.output_dir is required");
  if (c.train_data.empty()) throw ConfigError("data.train is required");
  if (!std::filesystem::exists(c.train_data / "manifest")) {
    throw ConfigError("data.train: no dataset at " + c.train_data.string());
  }
}

MaeParams initial_params(const RunConfig& c, const std::filesystem::path& init) {
  if (init.empty()) return init_params(c.model, c.seed);
  MaeParams p = params_from_checkpoint(read_checkpoint(init));
  if (!(p.config == c.model)) {
    throw ConfigError("initial checkpoint " + init.string() +
                      " has a different model configuration");
  }
  return p;
}

std::map<std::string, std::string> base_metadata(const RunConfig& c,
                                                 const std::string& kind,
                                                 int64_t step) {
  return {{"kind", kind},
          {"model", c.model.to_text()},
          {"seed", std::to_string(c.seed)},
          {"step", std::to_string(step)}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Process plumbing

RunLock::RunLock(const std::filesystem::path& dir) : file_(dir / ".lock") {
  const int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw IoError("output directory " + dir.string() +
                  " is owned by another run (lock file " + file_.string() +
                  ")");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const ssize_t n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(file_, ec);
}

void install_stop_handlers() {
  std::signal(SIGINT, on_stop_signal);
  std::signal(SIGTERM, on_stop_signal);
}

bool stop_requested() { return g_stop != 0; }

void clear_stop_request() { g_stop = 0; }

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint make_checkpoint(const MaeParams& params, const OptimState* state,
                           std::map<std::string, std::string> metadata) {
  Checkpoint ck;
  ck.metadata = std::move(metadata);
  ck.metadata["model"] = params.config.to_text();
  ck.tensors = params.weights;
  if (state != nullptr) {
    ck.metadata["optim.step"] = std::to_string(state->step);
    if (!state->m.empty()) {
      const int64_t n = static_cast<int64_t>(state->m.size());
      ck.tensors.add("opt.m", Tensor({n}, state->m));
      ck.tensors.add("opt.v", Tensor({n}, state->v));
    }
  }
  return ck;
}

MaeParams params_from_checkpoint(const Checkpoint& ck) {
  auto it = ck.metadata.find("model");
  if (it == ck.metadata.end()) {
    throw IoError("checkpoint has no model configuration");
  }
  MaeParams p;
  p.config = MaeConfig::from_text(it->second);
  const MaeParams reference = init_params(p.config, 0);
  for (size_t i = 0; i < reference.weights.size(); ++i) {
    const std::string& name = reference.weights.names()[i];
    if (!ck.tensors.contains(name)) {
      throw IoError("checkpoint is missing weight '" + name + "'");
    }
    const Tensor& t = ck.tensors.get(name);
    if (t.shape() != reference.weights.value(i).shape()) {
      throw IoError("checkpoint weight '" + name + "' has shape " +
                    shape_string(t.shape()) + ", expected " +
                    shape_string(reference.weights.value(i).shape()));
    }
    p.weights.add(name, t);
  }
  p.refresh_constants();
  return p;
}

OptimState optim_state_from_checkpoint(const Checkpoint& ck) {
  OptimState s;
  auto it = ck.metadata.find("optim.step");
  if (it == ck.metadata.end()) return s;
  s.step = parse_i64(it->second);
  if (ck.tensors.contains("opt.m")) {
    const auto m = ck.tensors.get("opt.m").data();
    const auto v = ck.tensors.get("opt.v").data();
    s.m.assign(m.begin(), m.end());
    s.v.assign(v.begin(), v.end());
  }
  return s;
}

std::filesystem::path step_checkpoint_path(const std::filesystem::path& run_dir,
                                           int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08lld.ckpt", static_cast<long long>(step));
  return run_dir / "checkpoints" / buf;
}

std::optional<std::filesystem::path> latest_checkpoint(
    const std::filesystem::path& run_dir) {
  const std::filesystem::path dir = run_dir / "checkpoints";
  if (!std::filesystem::is_directory(dir)) return std::nullopt;
  std::optional<std::filesystem::path> best;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("step_", 0) != 0 || e.path().extension() != ".ckpt") continue;
    if (!best || name > best->filename().string()) best = e.path();
  }
  return best;
}

// ---------------------------------------------------------------------------
// Privacy statement

PrivacyStatement make_privacy_statement(std::string status, double sigma,
                                        double q, int64_t steps_completed,
                                        int64_t steps_planned, double delta) {
  PrivacyStatement s;
  s.status = std::move(status);
  s.sigma = sigma;
  s.sample_rate = q;
  s.steps_completed = steps_completed;
  s.steps_planned = steps_planned;
  s.delta = delta;
  const accountant::DpConversion c =
      realized_budget(sigma, q, steps_completed, delta);
  s.epsilon = c.epsilon;
  s.best_alpha = c.best_alpha;
  return s;
}

void write_privacy_statement(const std::filesystem::path& file,
                             const PrivacyStatement& s) {
  std::ostringstream out;
  out << "status=" << s.status << "\n"
      << "mechanism=poisson-subsampled-gaussian\n"
      << "accountant=rdp\n"
      << "sigma=" << num(s.sigma) << "\n"
      << "q=" << num(s.sample_rate) << "\n"
      << "steps_completed=" << s.steps_completed << "\n"
      << "steps_planned=" << s.steps_planned << "\n"
      << "delta=" << num(s.delta) << "\n"
      << "epsilon=" << num(s.epsilon) << "\n"
      << "best_alpha=" << num(s.best_alpha) << "\n";
  write_text(file, out.str());
}

PrivacyStatement read_privacy_statement(const std::filesystem::path& file) {
  auto kv = read_key_values(file);
  PrivacyStatement s;
  s.status = kv["status"];
  s.sigma = parse_num(kv["sigma"]);
  s.sample_rate = parse_num(kv["q"]);
  s.steps_completed = parse_i64(kv["steps_completed"]);
  s.steps_planned = parse_i64(kv["steps_planned"]);
  s.delta = parse_num(kv["delta"]);
  s.epsilon = parse_num(kv["epsilon"]);
  s.best_alpha = parse_num(kv["best_alpha"]);
  return s;
}

// ---------------------------------------------------------------------------
// Runs

RunOutcome run_pretrain(const RunConfig& c, bool resume, std::ostream& log) {
  c.validate();
  require_paths(c);
  const ImageDataset data = load_dataset(c.train_data);
  if (data.resolution() != c.model.image_size || data.channels() != c.model.channels) {
    throw ConfigError("data.train images do not match the model input size");
  }
  std::filesystem::create_directories(c.output_dir / "checkpoints");
  RunLock lock(c.output_dir);
  write_text(c.output_dir / "config.effective", c.to_text());

  MaeParams params = initial_params(c, c.init_checkpoint);
  OptimState state;
  const std::filesystem::path metrics = c.output_dir / "pretrain.csv";
  const std::string header = "step,epoch,loss,lr";
  if (resume) {
    if (auto ck = latest_checkpoint(c.output_dir)) {
      const Checkpoint k = read_checkpoint(*ck);
      params = params_from_checkpoint(k);
      state = optim_state_from_checkpoint(k);
      log << "resuming from " << ck->string() << " at step " << state.step << "\n";
    }
    truncate_metrics(metrics, state.step, header);
  } else {
    write_text(metrics, header + "\n");
  }

  PretrainOptions o;
  o.optim = c.optim;
  o.batch_size = c.pretrain_batch_size;
  o.epochs = c.pretrain_epochs;
  o.seed = c.seed;
  o.should_stop = stop_requested;
  const int64_t spe = pretrain_steps_per_epoch(data.size(), std::min(o.batch_size, data.size()));
  DpOptimConfig schedule = o.optim;
  schedule.total_steps = spe * o.epochs;
  LineAppender out(metrics);
  int64_t done = state.step;
  o.on_step = [&](int64_t step, int64_t epoch, double loss, const MaeParams& p,
                  const OptimState& s) {
    out.line(std::to_string(step) + "," + std::to_string(epoch) + "," + num(loss) +
             "," + num(schedule.learning_rate_at(step)));
    done = step + 1;
    if (c.checkpoint_every > 0 && done % c.checkpoint_every == 0) {
      write_checkpoint(step_checkpoint_path(c.output_dir, done),
                       make_checkpoint(p, &s, base_metadata(c, "pretrain", done)));
    }
  };
  PretrainResult r = pretrain(std::move(params), data, o, state);
  for (size_t e = 0; e < r.epoch_losses.size(); ++e) {
    log << "epoch " << e << " mean loss " << num(r.epoch_losses[e]) << "\n";
  }
  RunOutcome outcome;
  outcome.steps_completed = r.state.step;
  outcome.steps_planned = schedule.total_steps;
  outcome.interrupted = r.state.step < schedule.total_steps;
  const Checkpoint ck =
      make_checkpoint(r.params, &r.state, base_metadata(c, "pretrain", r.state.step));
  if (outcome.interrupted) {
    write_checkpoint(step_checkpoint_path(c.output_dir, r.state.step), ck);
  } else {
    write_checkpoint(c.output_dir / "checkpoints" / "final.ckpt", ck);
  }
  return outcome;
}

RunOutcome run_train_dp(const RunConfig& c, const std::filesystem::path& init_arg,
                        bool resume, std::ostream& log) {
  c.validate();
  require_paths(c);
  const DatasetManifest manifest = read_manifest(c.train_data);
  if (manifest.resolution != c.model.image_size || manifest.channels != c.model.channels) {
    throw ConfigError("data.train images are " + std::to_string(manifest.resolution) +
                      "px, model expects " + std::to_string(c.model.image_size) + "px");
  }
  TrainDpOptions o;
  o.optim = c.optim;
  o.seed = c.seed;
  o.chunk_size = c.chunk_size;
  o.delta = c.delta.value_or(accountant::default_delta(manifest.n));
  if (!c.noise_multiplier_set) {
    if (!c.epsilon) {
      throw ConfigError("give optim.noise_multiplier or privacy.epsilon");
    }
    o.target = accountant::PrivacyBudget{*c.epsilon, o.delta};
  }
  // Calibration (and its infeasibility error) happens before any image is read.
  const ResolvedNoise noise = resolve_noise(o, manifest.n);
  o.target.reset();
  o.optim.noise_multiplier = noise.sigma;
  o.sample_rate = noise.sample_rate;
  log << "sigma=" << num(noise.sigma) << " q=" << num(noise.sample_rate)
      << " delta=" << num(noise.delta) << "\n";

  std::filesystem::create_directories(c.output_dir / "checkpoints");
  RunLock lock(c.output_dir);
  write_text(c.output_dir / "config.effective", c.to_text());
  const std::filesystem::path statement_file = c.output_dir / "privacy.txt";
  const int64_t T = c.optim.total_steps;

  const std::filesystem::path init = init_arg.empty() ? c.init_checkpoint : init_arg;
  MaeParams params = initial_params(c, init);
  OptimState state;
  const std::filesystem::path metrics = c.output_dir / "metrics.csv";
  if (resume) {
    if (auto ck = latest_checkpoint(c.output_dir)) {
      const Checkpoint k = read_checkpoint(*ck);
      if (k.metadata.count("sigma") && parse_num(k.metadata.at("sigma")) != noise.sigma) {
        throw ConfigError("resume checkpoint was written with a different sigma");
      }
      params = params_from_checkpoint(k);
      state = optim_state_from_checkpoint(k);
      log << "resuming from " << ck->string() << " at step " << state.step << "\n";
    }
    truncate_metrics(metrics, state.step, metrics_header());
  } else {
    write_text(metrics, metrics_header() + "\n");
  }

  const ImageDataset data = load_dataset(c.train_data);
  auto metadata = [&](int64_t step) {
    auto m = base_metadata(c, "train-dp", step);
    m["sigma"] = num(noise.sigma);
    m["q"] = num(noise.sample_rate);
    m["delta"] = num(noise.delta);
    return m;
  };

  LineAppender out(metrics);
  int64_t done = state.step;
  o.should_stop = stop_requested;
  o.on_step = [&](const DpStepReport& r, const MaeParams& p, const OptimState& s) {
    out.line(metrics_line(r));
    done = r.step + 1;
    if (c.checkpoint_every > 0 && done % c.checkpoint_every == 0 && done < T) {
      write_checkpoint(step_checkpoint_path(c.output_dir, done),
                       make_checkpoint(p, &s, metadata(done)));
    }
  };

  TrainDpResult r;
  try {
    r = train_dp(std::move(params), data, o, state);
  } catch (...) {
    write_privacy_statement(statement_file,
                            make_privacy_statement("failed", noise.sigma,
                                                   noise.sample_rate, done, T,
                                                   noise.delta));
    throw;
  }
  RunOutcome outcome;
  outcome.steps_completed = r.steps_completed;
  outcome.steps_planned = T;
  outcome.interrupted = r.steps_completed < T;
  const Checkpoint ck = make_checkpoint(r.params, &r.state, metadata(r.steps_completed));
  if (outcome.interrupted) {
    write_checkpoint(step_checkpoint_path(c.output_dir, r.steps_completed), ck);
  } else {
    write_checkpoint(c.output_dir / "checkpoints" / "final.ckpt", ck);
  }
  outcome.privacy = make_privacy_statement(
      outcome.interrupted ? "interrupted" : "complete", noise.sigma,
      noise.sample_rate, r.steps_completed, T, noise.delta);
  write_privacy_statement(statement_file, *outcome.privacy);
  return outcome;
}

// ---------------------------------------------------------------------------
// Report

RunReport make_report(const std::filesystem::path& run_dir) {
  const std::filesystem::path metrics = run_dir / "metrics.csv";
  if (!std::filesystem::exists(metrics)) {
    throw IoError("no metrics.csv in " + run_dir.string());
  }
  std::ifstream in(metrics);
  std::string line;
  if (!std::getline(in, line) || line != metrics_header()) {
    throw IoError(metrics.string() + ": unexpected header");
  }
  RunReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw IoError(metrics.string() + ": malformed row '" + line + "'");
    r.steps.push_back(parse_i64(f[0]));
    r.loss.push_back(f[1] == "nan" ? std::numeric_limits<double>::quiet_NaN()
                                   : parse_num(f[1]));
    r.epsilon.push_back(parse_num(f[6]));
  }
  if (r.steps.empty()) throw IoError(metrics.string() + " has no rows");
  if (std::filesystem::exists(run_dir / "privacy.txt")) {
    r.privacy = read_privacy_statement(run_dir / "privacy.txt");
  }
  return r;
}

std::string RunReport::to_text() const {
  std::ostringstream out;
  out << "# steps " << steps.size();
  if (privacy) {
    out << ", status " << privacy->status << ", sigma " << num(privacy->sigma)
        << ", q " << num(privacy->sample_rate) << ", delta " << num(privacy->delta)
        << ", epsilon " << num(privacy->epsilon);
  }
  out << "\nstep,loss_mean,epsilon\n";
  for (size_t i = 0; i < steps.size(); ++i) {
    out << steps[i] << "," << num(loss[i]) << "," << num(epsilon[i]) << "\n";
  }
  return out.str();
}

}  // namespace dpmaes
