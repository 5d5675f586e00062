"""CLI, configuration and reporting for the attack and defense pipeline."""

from .cli import main, run_command
from .config import WORKERS_ENV, ExperimentConfig, StageError
from .report import ResultsTable, emit_report

__all__ = ["main", "run_command", "ExperimentConfig", "StageError", "WORKERS_ENV", "ResultsTable", "emit_report"]
