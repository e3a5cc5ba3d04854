"""Material fields, right-hand sides and initial iterates for the benchmarks.

Both material fields are vectorised: they accept an ``(..., 2)`` array of
points and return an array of the leading shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DIM = 2
# Offset of the quadrant interface from the square's centre. 1/2 is never a
# cell face for k=3, but it is hit by midpoint samples; 1/(2*3^7) moves the
# jump off those while keeping it off every cell face up to level 6.
QUADRANT_OFFSET = 1.0 / (2 * 3 ** 7)
NOISE_HIGH = 4.0 / 3.0
RNG_ALGORITHM = "PCG64"


def epsilon_theta(x, theta: float):
    """Smooth-but-localised field ``1 + 0.3/d * prod_i exp(-theta x_i) cos(pi theta x_i)``."""
    x = np.asarray(x, dtype=float)
    if theta < 0:
        raise ValueError("theta must be non-negative")
    factors = np.exp(-theta * x) * np.cos(np.pi * theta * x)
    return 1.0 + (0.3 / DIM) * np.prod(factors, axis=-1)


def epsilon_quadrant(x, eps_low: float, centre: float = 0.5 + QUADRANT_OFFSET):
    """Two-valued checkerboard of four quadrants about an off-grid centre.

    The south-west and north-east quadrants carry 1, the other two ``eps_low``.
    Points on a dividing line belong to the upper/right side.
    """
    x = np.asarray(x, dtype=float)
    if eps_low <= 0:
        raise ValueError("eps_low must be positive")
    right = x[..., 0] >= centre
    upper = x[..., 1] >= centre
    return np.where(right == upper, 1.0, eps_low)


@dataclass(frozen=True)
class MaterialField:
    """Pure, deterministic scalar material parameter on the unit square."""

    variant: str = "theta"
    theta: float = 1.0
    eps_low: float = 1e-3

    def __post_init__(self):
        if self.variant not in ("theta", "quadrant", "constant"):
            raise ValueError(f"unknown material variant {self.variant!r}")
        if self.variant == "quadrant" and self.eps_low <= 0:
            raise ValueError("eps_low must be positive")
        if self.variant == "theta" and self.theta < 0:
            raise ValueError("theta must be non-negative")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.variant == "theta":
            return epsilon_theta(x, self.theta)
        if self.variant == "quadrant":
            return epsilon_quadrant(x, self.eps_low)
        # "constant" reuses theta as the value; handy for oracle tests
        return np.full(x.shape[:-1], float(self.theta))

    @classmethod
    def constant(cls, value: float = 1.0) -> "MaterialField":
        return cls(variant="constant", theta=value)

    def describe(self) -> str:
        if self.variant == "quadrant":
            return f"quadrant(eps_low={self.eps_low:g})"
        if self.variant == "constant":
            return f"constant({self.theta:g})"
        return f"theta({self.theta:g})"


def _zero(x):
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape[:-1])


@dataclass
class ProblemInstance:
    """-div(eps grad u) = f on the unit square with Dirichlet data."""

    material: MaterialField = field(default_factory=MaterialField)
    rhs: Callable = _zero
    boundary: Callable = _zero
    seed: int = 0

    @property
    def homogeneous(self) -> bool:
        return self.rhs is _zero and self.boundary is _zero


def _one(x):
    x = np.asarray(x, dtype=float)
    return np.ones(x.shape[:-1])


RHS_CHOICES = ("zero", "one", "material")


def make_problem(setup: str = "theta", theta: float = 1.0, eps_low: float = 1e-3,
                 seed: int = 0, rhs=None) -> ProblemInstance:
    """Build one of the benchmark problems by name.

    ``rhs`` is a callable or one of ``"zero"``, ``"one"`` and ``"material"``
    (f equal to the material parameter, which keeps the solution of order one
    for strongly varying materials).
    """
    if setup == "theta":
        material = MaterialField("theta", theta=theta)
    elif setup == "quadrant":
        material = MaterialField("quadrant", eps_low=eps_low)
    elif setup == "constant":
        material = MaterialField.constant(theta)
    else:
        raise ValueError(f"unknown setup {setup!r}")
    if rhs is None or rhs == "zero":
        rhs = _zero
    elif rhs == "one":
        rhs = _one
    elif rhs == "material":
        rhs = material
    elif not callable(rhs):
        raise ValueError(f"unknown right-hand side {rhs!r}")
    return ProblemInstance(material=material, rhs=rhs, seed=seed)


def init_noise(points, dirichlet_mask, seed: int, boundary: Callable = _zero):
    """Uniform noise in [0, 4/3] on free vertices, boundary data elsewhere.

    ``points`` is ``(n, 2)``; the draw order follows the row order, so callers
    pass vertices in a deterministic order.
    """
    points = np.asarray(points, dtype=float)
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.uniform(0.0, NOISE_HIGH, size=len(points))
    mask = np.asarray(dirichlet_mask, dtype=bool)
    if mask.any():
        u[mask] = boundary(points[mask])
    return u
