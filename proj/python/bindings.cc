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

// Python bindings for the dpmaes core: accountant, synthetic data, clipping
// and optimizer steps, model evaluation, and the pipeline entry points.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dpmaes/accountant.h"
#include "dpmaes/checkpoint.h"
#include "dpmaes/data.h"
#include "dpmaes/dp_optim.h"
#include "dpmaes/errors.h"
#include "dpmaes/evaluate.h"
#include "dpmaes/pipeline.h"
#include "dpmaes/run_config.h"
#include "dpmaes/vit_mae.h"

namespace py = pybind11;
namespace fs = std::filesystem;

namespace dpmaes {
namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array ToNumpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor FromNumpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict StatementDict(const PrivacyStatement& s) {
  py::dict d;
  d["status"] = s.status;
  d["sigma"] = s.sigma;
  d["sample_rate"] = s.sample_rate;
  d["steps_completed"] = s.steps_completed;
  d["steps_planned"] = s.steps_planned;
  d["delta"] = s.delta;
  d["epsilon"] = s.epsilon;
  d["best_alpha"] = s.best_alpha;
  return d;
}

py::dict OutcomeDict(const RunOutcome& o) {
  py::dict d;
  d["steps_completed"] = o.steps_completed;
  d["steps_planned"] = o.steps_planned;
  d["interrupted"] = o.interrupted;
  d["privacy"] = o.privacy ? py::object(StatementDict(*o.privacy)) : py::none();
  return d;
}

ImageDataset Synthetic(int64_t count, int64_t resolution, uint64_t seed,
                       int64_t num_classes, const std::string& role) {
  SynthOptions o;
  o.count = count;
  o.resolution = resolution;
  o.seed = seed;
  o.num_classes = num_classes;
  o.role = parse_role(role);
  return generate_synthetic(o);
}

MaeParams LoadModel(const fs::path& checkpoint) {
  return params_from_checkpoint(read_checkpoint(checkpoint));
}

}  // namespace
}  // namespace dpmaes

PYBIND11_MODULE(_core, m) {
  using namespace dpmaes;
  namespace acc = dpmaes::accountant;
  m.doc() = "Differentially private MAE pretraining core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<InvalidArgumentError>(m, "InvalidArgumentError", base.ptr());
  py::register_exception<InfeasibleBudgetError>(m, "InfeasibleBudgetError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ProbeError>(m, "ProbeError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());

  // Accountant.
  m.def("rdp_subsampled_gaussian", &acc::rdp_subsampled_gaussian_any, py::arg("q"),
        py::arg("sigma"), py::arg("alpha"));
  m.def("default_delta", &acc::default_delta, py::arg("n"));
  m.def(
      "dp_guarantee",
      [](double q, double sigma, int64_t steps, double delta) {
        const acc::DpConversion c = acc::account({q, sigma, steps}, delta);
        return py::make_tuple(c.epsilon, c.best_alpha);
      },
      py::arg("q"), py::arg("sigma"), py::arg("steps"), py::arg("delta"),
      "Returns (epsilon, best_alpha) after `steps` compositions.");
  m.def(
      "calibrate_sigma",
      [](double epsilon, double delta, double q, int64_t steps) {
        return acc::calibrate_sigma({epsilon, delta}, q, steps);
      },
      py::arg("epsilon"), py::arg("delta"), py::arg("q"), py::arg("steps"));

  // Data.
  m.def(
      "synthetic_images",
      [](int64_t count, int64_t resolution, uint64_t seed, int64_t num_classes,
         const std::string& role) {
        const ImageDataset d = Synthetic(count, resolution, seed, num_classes, role);
        return py::make_tuple(ToNumpy(d.fetch_all()), d.labels());
      },
      py::arg("count"), py::arg("resolution") = 32, py::arg("seed") = 0,
      py::arg("num_classes") = 0, py::arg("role") = "synthetic-pretrain",
      "Returns (images [N, C, H, W] in [0, 1], labels).");
  m.def(
      "gen_synth",
      [](int64_t count, int64_t resolution, uint64_t seed, int64_t num_classes,
         const std::string& role, const fs::path& out) {
        SynthOptions o;
        o.count = count;
        o.resolution = resolution;
        o.seed = seed;
        o.num_classes = num_classes;
        o.role = parse_role(role);
        return generate_synthetic(o, out).digest;
      },
      py::arg("count"), py::arg("resolution"), py::arg("seed"), py::arg("num_classes"),
      py::arg("role"), py::arg("out"), "Writes a dataset directory; returns its digest.");
  m.def("poisson_sample", &poisson_sample, py::arg("n"), py::arg("q"), py::arg("step_seed"));

  // DP step pieces.
  m.def(
      "clip_rows",
      [](Array rows, double clip_norm) {
        if (rows.ndim() != 2) throw InvalidArgumentError("clip_rows expects a 2-d array");
        Array out(std::vector<py::ssize_t>{rows.shape(0), rows.shape(1)});
        std::copy(rows.data(), rows.data() + rows.size(), out.mutable_data());
        const ClipStats s = clip_rows(std::span<double>(out.mutable_data(), out.size()),
                                      rows.shape(1), clip_norm);
        return py::make_tuple(out, s.norms, s.clipped);
      },
      py::arg("rows"), py::arg("clip_norm"), "Returns (clipped, pre-clip norms, count).");
  m.def(
      "adamw_step",
      [](std::vector<double> params, std::vector<double> grad, double lr, double beta1,
         double beta2, double weight_decay, double eps) {
        DpOptimConfig c;
        c.beta1 = beta1;
        c.beta2 = beta2;
        c.weight_decay = weight_decay;
        c.adam_epsilon = eps;
        OptimState s;
        dp_adamw_step(params, s, grad, c, lr);
        return params;
      },
      py::arg("params"), py::arg("grad"), py::arg("lr"), py::arg("beta1") = 0.9,
      py::arg("beta2") = 0.95, py::arg("weight_decay") = 0.005, py::arg("eps") = 1e-8,
      "One step from a fresh optimizer state.");

  // Model.
  m.def(
      "parameter_count",
      [](const std::string& preset) { return parameter_count(MaeConfig::preset(preset)); },
      py::arg("preset") = "vip-micro");
  m.def(
      "reconstruction_loss",
      [](const fs::path& checkpoint, const fs::path& data, uint64_t seed, int64_t max_images) {
        return evaluate_reconstruction(LoadModel(checkpoint), load_dataset(data), seed,
                                       max_images);
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("seed") = 0, py::arg("max_images") = 0);
  m.def(
      "encode",
      [](const fs::path& checkpoint, Array images) {
        return ToNumpy(encode_features(LoadModel(checkpoint), FromNumpy(images)));
      },
      py::arg("checkpoint"), py::arg("images"), "Pooled encoder features [N, width].");
  m.def(
      "linear_probe",
      [](const fs::path& checkpoint, const fs::path& train, const fs::path& eval,
         uint64_t seed) {
        return linear_probe(LoadModel(checkpoint), load_dataset(train), load_dataset(eval),
                            seed)
            .accuracy;
      },
      py::arg("checkpoint"), py::arg("train"), py::arg("eval"), py::arg("seed") = 0);

  // Pipeline.
  m.def(
      "train_dp",
      [](const fs::path& config, const std::string& init, bool resume) {
        std::ostringstream log;
        const RunOutcome o =
            run_train_dp(RunConfig::load(config), fs::path(init), resume, log);
        return OutcomeDict(o);
      },
      py::arg("config"), py::arg("init") = "", py::arg("resume") = false);
  m.def(
      "pretrain",
      [](const fs::path& config, bool resume) {
        std::ostringstream log;
        return OutcomeDict(run_pretrain(RunConfig::load(config), resume, log));
      },
      py::arg("config"), py::arg("resume") = false);
  m.def(
      "report",
      [](const fs::path& run_dir) {
        const RunReport r = make_report(run_dir);
        py::dict d;
        d["steps"] = r.steps;
        d["loss"] = r.loss;
        d["epsilon"] = r.epsilon;
        d["privacy"] = r.privacy ? py::object(StatementDict(*r.privacy)) : py::none();
        return d;
      },
      py::arg("run_dir"));
}
