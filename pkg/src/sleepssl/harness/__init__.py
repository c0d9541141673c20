"""Experiment harness: fine-tuning, evaluation, protocols, persistence and reports."""

from .config import ExperimentConfig, expand_grid, load_config
from .experiment import (IsolationError, ResultStore, RunResult, SubjectStore, run_experiment, run_fold,
                         run_grid, set_deterministic, transfer_experiment)
from .metrics import MetricsBundle, evaluate
from .report import aggregate_report
from .synthetic import ClassSpec, generate_synthetic
from .training import Budget, class_aware_weights, finetune, two_stage_train

__all__ = [
    "Budget", "ClassSpec", "ExperimentConfig", "IsolationError", "MetricsBundle", "ResultStore", "RunResult",
    "SubjectStore", "aggregate_report", "class_aware_weights", "evaluate", "expand_grid", "finetune",
    "generate_synthetic", "load_config", "run_experiment", "run_fold", "run_grid", "set_deterministic",
    "transfer_experiment", "two_stage_train",
]
