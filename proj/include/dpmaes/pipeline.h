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

#ifndef DPMAES_PIPELINE_H_
#define DPMAES_PIPELINE_H_

// Run orchestration behind the command-line tool: output-directory
// ownership, checkpoints with optimizer state, resume, the privacy
// statement, and the run report.
//
// A train-dp output directory holds
//
//   .lock                 present while a process owns the directory
//   config.effective      the parsed configuration with defaults filled in
//   metrics.csv           one row per completed step
//   checkpoints/step_NNNNNNNN.ckpt, checkpoints/final.ckpt
//   privacy.txt           sigma, q, steps, delta and the realized epsilon
//
// pretrain writes the same files except privacy.txt, with pretrain.csv
// (step, epoch, loss, lr) in place of metrics.csv.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "dpmaes/checkpoint.h"
#include "dpmaes/dp_optim.h"
#include "dpmaes/run_config.h"
#include "dpmaes/vit_mae.h"

namespace dpmaes {

// Exclusive ownership of an output directory through an O_EXCL lock file.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path file_;
};

// SIGINT / SIGTERM set a flag that training loops poll between steps.
void install_stop_handlers();
bool stop_requested();
void clear_stop_request();

// Keeps freed large blocks in the heap instead of returning them to the OS.
// Training allocates and frees the same large buffers every step; without
// this each step pays for fresh page faults.
void tune_allocator();

Checkpoint make_checkpoint(const MaeParams& params, const OptimState* state,
                           std::map<std::string, std::string> metadata);
MaeParams params_from_checkpoint(const Checkpoint& checkpoint);
// Empty state when the checkpoint carries none.
OptimState optim_state_from_checkpoint(const Checkpoint& checkpoint);

std::filesystem::path step_checkpoint_path(const std::filesystem::path& run_dir,
                                           int64_t step);
// Highest-step periodic checkpoint, or nothing.
std::optional<std::filesystem::path> latest_checkpoint(
    const std::filesystem::path& run_dir);

struct PrivacyStatement {
  std::string status;  // complete | interrupted | failed
  double sigma = 0.0;
  double sample_rate = 0.0;
  int64_t steps_completed = 0;
  int64_t steps_planned = 0;
  double delta = 0.0;
  double epsilon = 0.0;
  double best_alpha = 0.0;
};

// epsilon and best_alpha are recomputed here from the other fields.
PrivacyStatement make_privacy_statement(std::string status, double sigma,
                                        double q, int64_t steps_completed,
                                        int64_t steps_planned, double delta);
void write_privacy_statement(const std::filesystem::path& file,
                             const PrivacyStatement& statement);
PrivacyStatement read_privacy_statement(const std::filesystem::path& file);

struct RunOutcome {
  int64_t steps_completed = 0;
  int64_t steps_planned = 0;
  bool interrupted = false;
  std::optional<PrivacyStatement> privacy;
};

RunOutcome run_pretrain(const RunConfig& config, bool resume, std::ostream& log);

// init overrides train.init from the config; empty means random init.
RunOutcome run_train_dp(const RunConfig& config,
                        const std::filesystem::path& init, bool resume,
                        std::ostream& log);

// Per-step series from metrics.csv plus a summary. Throws IoError for a
// directory without metrics.
struct RunReport {
  std::vector<int64_t> steps;
  std::vector<double> loss;
  std::vector<double> epsilon;
  std::optional<PrivacyStatement> privacy;

  std::string to_text() const;
};

RunReport make_report(const std::filesystem::path& run_dir);

}  // namespace dpmaes

#endif  // DPMAES_PIPELINE_H_
