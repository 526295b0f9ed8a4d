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

// dpmaes: command-line entry point.
//
// Exit codes: 0 ok, 1 configuration / argument error, 2 runtime error
// (including an interrupted run), 3 infeasible privacy budget.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dpmaes/accountant.h"
#include "dpmaes/checkpoint.h"
#include "dpmaes/data.h"
#include "dpmaes/errors.h"
#include "dpmaes/evaluate.h"
#include "dpmaes/pipeline.h"
#include "dpmaes/run_config.h"

namespace fs = std::filesystem;
using namespace dpmaes;

namespace {

enum Exit { kOk = 0, kConfig = 1, kRuntime = 2, kInfeasible = 3 };

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.15g", v);
  return buf;
}

int finish(const RunOutcome& r) {
  if (r.privacy) {
    std::cout << "steps " << r.steps_completed << "/" << r.steps_planned
              << "  epsilon " << num(r.privacy->epsilon) << "  delta "
              << num(r.privacy->delta) << "\n";
  }
  if (r.interrupted) {
    std::cerr << "interrupted after " << r.steps_completed << " of "
              << r.steps_planned << " steps; resume with --resume\n";
    return kRuntime;
  }
  return kOk;
}

// Labeled data for probe / finetune: an explicit eval directory, or the
// fixed 4:1 split of --data.
void labeled_sets(const fs::path& data, const fs::path& eval_dir,
                  std::optional<ImageDataset>* train,
                  std::optional<ImageDataset>* eval) {
  ImageDataset all = load_dataset(data);
  if (!all.labeled()) throw ConfigError("--data: " + data.string() + " has no labels");
  if (!eval_dir.empty()) {
    ImageDataset e = load_dataset(eval_dir);
    if (!e.labeled()) throw ConfigError("--eval: " + eval_dir.string() + " has no labels");
    train->emplace(std::move(all));
    eval->emplace(std::move(e));
    return;
  }
  ImageDataset tr(all.resolution(), all.channels(), all.role());
  ImageDataset ev(all.resolution(), all.channels(), DatasetRole::kEval);
  split_labeled(all, &tr, &ev);
  train->emplace(std::move(tr));
  eval->emplace(std::move(ev));
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Differentially private masked-autoencoder pre-training"};
  app.require_subcommand(1);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "render a procedural image dataset");
  int64_t gen_count = 0, gen_res = 32, gen_classes = 0;
  uint64_t gen_seed = 0;
  std::string gen_out, gen_role = "synthetic-pretrain";
  gen->add_option("--count", gen_count, "number of images")->required();
  gen->add_option("--resolution", gen_res, "image side in pixels");
  gen->add_option("--seed", gen_seed, "master seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--role", gen_role, "synthetic-pretrain | private-train | eval");
  gen->add_option("--classes", gen_classes, "labeled grating task with K classes (0: unlabeled)");

  // pretrain / train-dp
  auto* pre = app.add_subcommand("pretrain", "non-private pre-training on synthetic data");
  std::string pre_config;
  bool pre_resume = false;
  pre->add_option("--config", pre_config, "run configuration")->required();
  pre->add_flag("--resume", pre_resume, "continue from the latest checkpoint");

  auto* tdp = app.add_subcommand("train-dp", "differentially private training");
  std::string tdp_config, tdp_init;
  bool tdp_resume = false;
  tdp->add_option("--config", tdp_config, "run configuration")->required();
  tdp->add_option("--init", tdp_init, "warm-start checkpoint");
  tdp->add_flag("--resume", tdp_resume, "continue from the latest checkpoint");

  // accountant
  auto* cal = app.add_subcommand("calibrate", "noise multiplier for a budget");
  double cal_eps = 0, cal_delta = 0, cal_q = 0;
  int64_t cal_steps = 0;
  cal->add_option("--epsilon", cal_eps)->required();
  cal->add_option("--delta", cal_delta)->required();
  cal->add_option("--q", cal_q)->required();
  cal->add_option("--steps", cal_steps)->required();

  auto* acc = app.add_subcommand("account", "realized budget of a mechanism");
  double acc_sigma = 0, acc_delta = 0, acc_q = 0;
  int64_t acc_steps = 0;
  acc->add_option("--sigma", acc_sigma)->required();
  acc->add_option("--delta", acc_delta)->required();
  acc->add_option("--q", acc_q)->required();
  acc->add_option("--steps", acc_steps)->required();

  // evaluation
  std::string ev_ckpt, ev_data, ev_eval, ev_log, ev_run_id;
  uint64_t ev_seed = 0;
  auto add_eval_options = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    sub->add_option("--data", ev_data, "labeled dataset")->required();
    sub->add_option("--eval", ev_eval, "separate labeled eval set (default: 4:1 split of --data)");
    sub->add_option("--seed", ev_seed);
    sub->add_option("--log", ev_log, "append a row to this eval-log CSV");
    sub->add_option("--run-id", ev_run_id, "run id for the eval log (default: checkpoint path)");
  };
  auto* probe = app.add_subcommand("probe", "linear probe on frozen features");
  add_eval_options(probe);
  auto* ft = app.add_subcommand("finetune", "few-shot fine-tuning");
  add_eval_options(ft);
  FewShotSpec spec;
  ft->add_option("--shots", spec.shots, "examples per class");
  ft->add_option("--epochs", spec.epochs);
  ft->add_option("--lr", spec.learning_rate);

  auto* rep = app.add_subcommand("report", "metrics table and series of a run");
  std::string rep_run;
  rep->add_option("--run", rep_run, "train-dp output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      if (gen_count < 1) throw ConfigError("--count must be positive");
      if (gen_res < 1) throw ConfigError("--resolution must be positive");
      if (gen_classes < 0) throw ConfigError("--classes must be >= 0");
      SynthOptions o;
      o.count = gen_count;
      o.resolution = gen_res;
      o.seed = gen_seed;
      o.num_classes = gen_classes;
      try {
        o.role = parse_role(gen_role);
      } catch (const Error& e) {
        throw ConfigError(std::string("--role: ") + e.what());
      }
      const DatasetManifest m = generate_synthetic(o, gen_out);
      std::cout << "n=" << m.n << " resolution=" << m.resolution
                << " digest=" << m.digest << "\n";
      return kOk;
    }
    if (*pre || *tdp) {
      install_stop_handlers();
      const RunConfig c = RunConfig::load(*pre ? pre_config : tdp_config);
      if (*pre) return finish(run_pretrain(c, pre_resume, std::cerr));
      return finish(run_train_dp(c, tdp_init, tdp_resume, std::cerr));
    }
    if (*cal) {
      if (cal_steps < 1) throw ConfigError("--steps must be >= 1");
      const accountant::PrivacyBudget target{cal_eps, cal_delta};
      const double sigma = accountant::calibrate_sigma(target, cal_q, cal_steps);
      const auto r = accountant::account({cal_q, sigma, cal_steps}, cal_delta);
      std::cout << "sigma=" << num(sigma) << "\n"
                << "epsilon=" << num(r.epsilon) << "\n"
                << "best_alpha=" << num(r.best_alpha) << "\n";
      return kOk;
    }
    if (*acc) {
      if (acc_steps < 1) throw ConfigError("--steps must be >= 1");
      const auto r = accountant::account({acc_q, acc_sigma, acc_steps}, acc_delta);
      std::cout << "epsilon=" << num(r.epsilon) << "\n"
                << "best_alpha=" << num(r.best_alpha) << "\n";
      return kOk;
    }
    if (*probe || *ft) {
      const MaeParams params = params_from_checkpoint(read_checkpoint(ev_ckpt));
      std::optional<ImageDataset> train, eval;
      labeled_sets(ev_data, ev_eval, &train, &eval);
      ProbeResult r;
      std::string k = "probe";
      if (*probe) {
        r = linear_probe(params, *train, *eval, ev_seed);
      } else {
        spec.validate();
        r = few_shot_finetune(params, spec, *train, *eval, ev_seed);
        k = std::to_string(spec.shots);
      }
      std::cout << "accuracy=" << num(r.accuracy) << "\n";
      if (!ev_log.empty()) {
        append_eval_log(ev_log, eval_log_line(ev_run_id.empty() ? ev_ckpt : ev_run_id,
                                              *probe ? "probe" : "finetune", k,
                                              r.accuracy, ev_seed));
      }
      return kOk;
    }
    if (*rep) {
      std::cout << make_report(rep_run).to_text();
      return kOk;
    }
  } catch (const InfeasibleBudgetError& e) {
    std::cerr << "infeasible budget: " << e.what() << "\n";
    return kInfeasible;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InvalidArgumentError& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
