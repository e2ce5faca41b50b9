"""Experiment harness: configs, presets, runners, and the command line."""

from .config import (
    DEFAULT_METRICS,
    SCHEMA_VERSION,
    ExperimentConfig,
    canonical_json,
    config_hash,
    load_config,
    parse_config,
)
from .experiment import gradient_diagnostic, run_ablation, run_experiment
from .presets import PRESETS, preset_config

__all__ = [
    "DEFAULT_METRICS",
    "SCHEMA_VERSION",
    "ExperimentConfig",
    "PRESETS",
    "canonical_json",
    "config_hash",
    "gradient_diagnostic",
    "load_config",
    "parse_config",
    "preset_config",
    "run_ablation",
    "run_experiment",
]
