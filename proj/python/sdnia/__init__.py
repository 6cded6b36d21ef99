"""Python bindings for the sdnia C++ core."""

import json as _json

import torch as _torch  # noqa: F401  loads libtorch before the extension

from ._sdnia import (  # noqa: F401
    ArgumentError,
    ConfigError,
    DataError,
    Model,
    ms_ssim,
    nia_parameter_count,
    stylize,
    synthesize_fog,
    synthesize_gamma,
)
from ._sdnia import run_command as _run_command
from ._sdnia import evaluate_detections as _evaluate_detections


def run(command, config):
    """Runs a CLI command in-process. Returns (exit_code, stdout, stderr)."""
    return _run_command(command, _json.dumps(config))


def evaluate_detections(manifest, detections):
    """mAP report for a detections JSONL file against a manifest."""
    return _json.loads(_evaluate_detections(str(manifest), str(detections)))
