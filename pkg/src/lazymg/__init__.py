"""Additive multigrid on k=3 spacetrees with delayed, compressed operator assembly."""
from .estimator import LazyMultigridSolver
from .experiments import ExperimentConfig, run_experiment

__version__ = "0.1.0"
__all__ = ["ExperimentConfig", "LazyMultigridSolver", "run_experiment"]
