"""Scikit-learn style front end to the solver.

``fit`` solves the configured problem; ``predict`` evaluates the composite
solution bilinearly at query points of the unit square. There is no training
data: ``X`` and ``y`` in ``fit`` are accepted for pipeline compatibility and
ignored.
"""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .experiments import ExperimentConfig, build_solver
from .solver import Status
from .spacetree import evaluate_composite


def _check_choice(name, value, allowed):
    if value not in allowed:
        raise ValueError(f"{name}={value!r}; expected one of {', '.join(map(str, allowed))}")


def _check_positive(name, value, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if not isinstance(value, kind) or isinstance(value, bool) or not value > 0:
        raise ValueError(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")


class LazyMultigridSolver(RegressorMixin, BaseEstimator):
    """Solve -div(eps grad u) = f with lazily assembled additive multigrid.

    Parameters mirror the experiment configuration keys. After ``fit`` the
    estimator exposes ``status_``, ``n_cycles_``, ``residuals_`` (normalised
    residual per cycle), ``reports_`` and ``solver_``.
    """

    def __init__(self, setup="quadrant", theta=1.0, eps_low=1e-3, rhs="zero", depth=3,
                 assembly="anarchic", transfer="boxmg", coarse_recompute="always",
                 solver="adafac-jac", omega=0.7, target=1e-10, max_cycles=200, gating=True,
                 termination_c=0.01, compression_threshold=1e-8, workers=1, throttle=None,
                 amr=False, amr_fraction=0.1, amr_max_level=5, seed=0):
        self.setup = setup
        self.theta = theta
        self.eps_low = eps_low
        self.rhs = rhs
        self.depth = depth
        self.assembly = assembly
        self.transfer = transfer
        self.coarse_recompute = coarse_recompute
        self.solver = solver
        self.omega = omega
        self.target = target
        self.max_cycles = max_cycles
        self.gating = gating
        self.termination_c = termination_c
        self.compression_threshold = compression_threshold
        self.workers = workers
        self.throttle = throttle
        self.amr = amr
        self.amr_fraction = amr_fraction
        self.amr_max_level = amr_max_level
        self.seed = seed

    def _validate_params(self):
        _check_choice("setup", self.setup, ("theta", "quadrant", "constant"))
        _check_choice("assembly", self.assembly, ("eager", "lazy", "adaptive", "anarchic"))
        _check_choice("transfer", self.transfer, ("geometric", "boxmg"))
        _check_choice("solver", self.solver, ("additive", "adafac-jac", "adafac-pi"))
        for name in ("depth", "max_cycles", "workers"):
            _check_positive(name, getattr(self, name), integer=True)
        for name in ("target", "termination_c", "compression_threshold", "eps_low"):
            _check_positive(name, getattr(self, name))
        if not 0 < self.omega < 1:
            raise ValueError(f"omega must lie in (0, 1), got {self.omega!r}")

    def config(self) -> ExperimentConfig:
        self._validate_params()
        return ExperimentConfig(
            setup=self.setup, theta=float(self.theta), eps_low=float(self.eps_low), rhs=self.rhs,
            depth=int(self.depth), seed=int(self.seed), assembly=self.assembly,
            termination_c=float(self.termination_c), transfer=self.transfer,
            coarse_recompute=self.coarse_recompute, gating=bool(self.gating),
            compression_threshold=float(self.compression_threshold), solver=self.solver,
            omega=float(self.omega), target=float(self.target), max_cycles=int(self.max_cycles),
            workers=int(self.workers), throttle=self.throttle, amr=bool(self.amr),
            amr_fraction=float(self.amr_fraction), amr_max_level=int(self.amr_max_level),
            output="-")

    def fit(self, X=None, y=None):
        solver = build_solver(self.config())
        try:
            solver.run()
        finally:
            solver.ops.finish()
        self.solver_ = solver
        self.reports_ = list(solver.reports)
        self.status_ = Status(solver.status)
        self.n_cycles_ = len(solver.reports)
        self.residuals_ = np.array([r.normalized for r in solver.reports])
        self.n_features_in_ = 2
        return self

    @property
    def converged_(self) -> bool:
        check_is_fitted(self, "status_")
        return self.status_ == Status.CONVERGED

    def predict(self, X):
        check_is_fitted(self, "solver_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        if X.shape[1] != 2:
            raise ValueError(f"X has {X.shape[1]} features; points need 2 coordinates")
        if ((X < 0) | (X > 1)).any():
            raise ValueError("query points must lie in the unit square")
        return evaluate_composite(self.solver_.mesh, self.solver_.solution(), X)
