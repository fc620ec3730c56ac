"""Experiment configuration, runner, plot data and CLI plumbing."""

from .config import ConfigError, ExperimentConfig, Mode, load_config, parse_config, preset_names
from .runner import RunArtifacts, RunResult, RunTimeout, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "Mode", "RunArtifacts", "RunResult", "RunTimeout",
           "load_config", "parse_config", "preset_names", "run_experiment"]
