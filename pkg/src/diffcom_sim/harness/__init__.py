"""Config parsing, preset experiments, CSV reporting and the CLI."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config, serialize
from .experiments import PRESETS, ExperimentError, run_experiment, sweep_points
from .report import ReportRow, write_csv

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "serialize", "PRESETS",
           "ExperimentError", "run_experiment", "sweep_points", "ReportRow", "write_csv"]
