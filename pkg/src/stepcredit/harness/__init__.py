"""Experiment orchestration: configs, the staged pipeline, metrics and reports."""

from .config import RunConfig, load_config
from .metrics import MetricsRecord, evaluate
from .pipeline import run_pipeline
from .report import compare_runs

__all__ = ["RunConfig", "load_config", "MetricsRecord", "evaluate", "run_pipeline", "compare_runs"]
