"""Experiment harness: config parsing, pipeline runner, CLI."""

from .config import ExperimentConfig, load_config
from .runner import (ErrorReport, StageError, compare_refinement,
                     relative_errors, run_experiment, run_fine_only,
                     run_pipeline, write_artifacts)

__all__ = [
    "ExperimentConfig",
    "load_config",
    "ErrorReport",
    "StageError",
    "compare_refinement",
    "relative_errors",
    "run_experiment",
    "run_fine_only",
    "run_pipeline",
    "write_artifacts",
]
