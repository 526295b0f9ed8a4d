#
# Copyright 2026 The dpmaes Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#

"""Differentially private masked-autoencoder pretraining.

Thin wrapper over the compiled core; see ``help(dpmaes._core)`` for the
full list of functions.
"""

from dpmaes._core import (
    ConfigError,
    Error,
    InfeasibleBudgetError,
    InvalidArgumentError,
    IoError,
    ProbeError,
    ShapeError,
    adamw_step,
    calibrate_sigma,
    clip_rows,
    default_delta,
    dp_guarantee,
    encode,
    gen_synth,
    linear_probe,
    parameter_count,
    poisson_sample,
    pretrain,
    rdp_subsampled_gaussian,
    reconstruction_loss,
    report,
    synthetic_images,
    train_dp,
)

__all__ = [
    "ConfigError",
    "Error",
    "InfeasibleBudgetError",
    "InvalidArgumentError",
    "IoError",
    "ProbeError",
    "ShapeError",
    "adamw_step",
    "calibrate_sigma",
    "clip_rows",
    "default_delta",
    "dp_guarantee",
    "encode",
    "gen_synth",
    "linear_probe",
    "parameter_count",
    "poisson_sample",
    "pretrain",
    "rdp_subsampled_gaussian",
    "reconstruction_loss",
    "report",
    "synthetic_images",
    "train_dp",
]
