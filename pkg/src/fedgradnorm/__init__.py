"""Personalised federated multi-task learning with gradient-norm loss weighting."""

from .harness import ExperimentConfig, compare_strategies, load_config, run_experiment
from .numerics import MlpSpec, ParamVector
from .taskgen import TaskSpec

__all__ = [
    "ExperimentConfig",
    "MlpSpec",
    "ParamVector",
    "TaskSpec",
    "compare_strategies",
    "load_config",
    "run_experiment",
]
