"""Command line, CSV ingestion and experiment presets."""

from .experiments import ExperimentConfig, run_experiment
from .io import load_csv, write_csv

__all__ = ["ExperimentConfig", "run_experiment", "load_csv", "write_csv"]
