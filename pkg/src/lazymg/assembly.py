"""Element integration with subcell sampling and the per-cell marker protocol.

Element matrices use bilinear shape functions on a square cell with corner
order (SW, SE, NW, NE). The material parameter is sampled once per subsquare
of an ``n x n`` subdivision and taken as constant there; each subsquare's
contribution is then integrated in closed form. In two dimensions the
stiffness matrix does not depend on the cell width, so only the relative
sample positions and the sampled values matter.

Marker encoding used by the arrays in this module:

* ``p1``: ``BOTTOM`` (0, nothing integrated yet), ``TOP`` (-1, converged), or
  ``n >= 1``, the number of samples per axis behind the stored matrix.
* ``p2``: in-flight flag of a background task.
* ``p3``: storage bytes per surplus entry.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .problems import MaterialField

logger = logging.getLogger(__name__)

BOTTOM = 0
TOP = -1
DEFAULT_C = 0.01
DEFAULT_N_MAX = 64

# corner attributes: sign of d/dxi, sign of d/deta, which 1D factor in eta / xi
_SX = np.array([-1.0, 1.0, -1.0, 1.0])
_SY = np.array([-1.0, -1.0, 1.0, 1.0])
_GY = np.array([0, 0, 1, 1])   # SW,SE use (1-eta); NW,NE use eta
_GX = np.array([0, 1, 0, 1])   # SW,NW use (1-xi);  SE,NE use xi


class ProtocolError(RuntimeError):
    """An operator was requested in a state the assembly mode does not allow."""


def _moments(n: int) -> np.ndarray:
    """``(n, 2, 2)`` integrals of products of (1-t, t) over the n subintervals of [0, 1]."""
    t0 = np.arange(n) / n
    t1 = np.arange(1, n + 1) / n
    a = ((1 - t0) ** 3 - (1 - t1) ** 3) / 3.0
    c = (t1 ** 3 - t0 ** 3) / 3.0
    b = (t1 ** 2 - t0 ** 2) / 2.0 - c
    return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)


def sample_points(origins, h: float, n: int) -> np.ndarray:
    """Subsquare centres, ``(nc, n, n, 2)`` indexed ``[cell, x-slot, y-slot]``."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 2)
    t = (np.arange(n) + 0.5) / n * h
    px = origins[:, 0, None, None] + t[None, :, None]
    py = origins[:, 1, None, None] + t[None, None, :]
    px, py = np.broadcast_arrays(px, py)
    return np.stack([px, py], axis=-1)


def element_matrices_from_samples(eps: np.ndarray) -> np.ndarray:
    """Stiffness matrices for piecewise-constant material samples ``(nc, n, n)``."""
    eps = np.asarray(eps, dtype=float)
    n = eps.shape[-1]
    G = _moments(n)
    dt = 1.0 / n
    # x-derivative terms integrate exactly over xi, leaving moments in eta
    Mx = np.einsum("cb,bpq->cpq", eps.sum(axis=1) * dt, G)
    My = np.einsum("ca,apq->cpq", eps.sum(axis=2) * dt, G)
    Kx = _SX[:, None] * _SX[None, :] * Mx[:, _GY[:, None], _GY[None, :]]
    Ky = _SY[:, None] * _SY[None, :] * My[:, _GX[:, None], _GX[None, :]]
    return Kx + Ky


def integrate_elements(origins, h: float, material: MaterialField, n: int) -> np.ndarray:
    """Element matrices of a batch of cells with lower-left corners ``origins``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    origins = np.asarray(origins, dtype=float).reshape(-1, 2)
    if len(origins) == 0:
        return np.zeros((0, 4, 4))
    eps = material(sample_points(origins, h, n))
    return element_matrices_from_samples(eps)


def integrate_element(origin, h: float, material: MaterialField, n: int) -> np.ndarray:
    """4x4 element matrix of one cell with ``n x n`` samples of the material."""
    return integrate_elements(np.asarray(origin, dtype=float).reshape(1, 2), h, material, n)[0]


def relative_change(new, old) -> np.ndarray:
    """Entrywise max-norm change relative to ``old``; 0 where ``old`` vanishes."""
    new = np.asarray(new, dtype=float)
    old = np.asarray(old, dtype=float)
    axes = tuple(range(old.ndim - 2, old.ndim))
    num = np.abs(new - old).max(axis=axes)
    den = np.abs(old).max(axis=axes)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return ratio


@dataclass(frozen=True)
class CellMarker:
    """Integration state ``p1``, in-flight flag ``p2`` and precision ``p3`` of a cell."""

    p1: int = BOTTOM
    p2: bool = False
    p3: int = 0

    def __post_init__(self):
        if self.p1 == TOP and self.p2:
            raise ProtocolError("a converged cell cannot have a task in flight")
        if self.p1 < TOP:
            raise ProtocolError(f"invalid p1 {self.p1}")

    @property
    def converged(self) -> bool:
        return self.p1 == TOP

    @property
    def empty(self) -> bool:
        return self.p1 == BOTTOM

    def label(self) -> str:
        if self.p1 == TOP:
            return "T"
        if self.p1 == BOTTOM:
            return "_"
        return str(self.p1)


@dataclass(frozen=True)
class StepResult:
    matrix: Optional[np.ndarray]
    marker: CellMarker
    samples: int          # samples per axis behind ``matrix``
    ratio: float = 0.0
    integrated: bool = False


def adaptive_step(marker: CellMarker, old: Optional[np.ndarray], origin, h: float,
                  material: MaterialField, C: float = DEFAULT_C, n_max: int = DEFAULT_N_MAX,
                  samples: Optional[int] = None) -> StepResult:
    """One step of the adaptive integration rule for a single cell.

    ``p1 = TOP`` returns the stored matrix untouched. ``p1 = BOTTOM`` integrates
    with a single centre sample. ``p1 = n`` integrates with ``(n+1)^2`` samples
    and compares against the stored matrix in the entrywise max norm: below
    ``C`` the cell converges and keeps the stored ``n``-sample matrix,
    otherwise the new matrix replaces it and ``p1`` becomes ``n + 1``.
    """
    if C <= 0:
        raise ValueError("C must be positive")
    if marker.p1 == TOP:
        return StepResult(old, marker, samples if samples is not None else 0)
    if marker.p1 == BOTTOM:
        A = integrate_element(origin, h, material, 1)
        return StepResult(A, replace(marker, p1=1), 1, integrated=True)
    if old is None:
        raise ProtocolError("numeric marker without a stored matrix")
    n = marker.p1
    A_new = integrate_element(origin, h, material, n + 1)
    ratio = float(relative_change(A_new, old))
    if not np.abs(old).max() > 0:
        logger.info("zero operator accepted without refinement of the sampling")
    if ratio < C:
        return StepResult(old, replace(marker, p1=TOP, p2=False), n, ratio, True)
    if n + 1 >= n_max:
        logger.info("sampling cap %d reached; cell marked converged", n_max)
        return StepResult(A_new, replace(marker, p1=TOP, p2=False), n + 1, ratio, True)
    return StepResult(A_new, replace(marker, p1=n + 1), n + 1, ratio, True)


def adaptive_step_batch(p1: np.ndarray, old: np.ndarray, origins: np.ndarray, h: float,
                        material: MaterialField, C: float = DEFAULT_C,
                        n_max: int = DEFAULT_N_MAX):
    """Vectorised :func:`adaptive_step` for cells of one level.

    Returns ``(A, p1, samples, changed)`` where ``changed`` flags cells whose
    stored matrix was replaced. ``samples`` is -1 where nothing changed.
    """
    p1 = np.asarray(p1)
    A = np.array(old, dtype=float, copy=True)
    new_p1 = p1.copy()
    samples = np.full(len(p1), -1, dtype=np.int64)
    changed = np.zeros(len(p1), dtype=bool)
    first = np.flatnonzero(p1 == BOTTOM)
    if len(first):
        A[first] = integrate_elements(origins[first], h, material, 1)
        new_p1[first] = 1
        samples[first] = 1
        changed[first] = True
    for n in np.unique(p1[p1 > 0]):
        idx = np.flatnonzero(p1 == n)
        A_new = integrate_elements(origins[idx], h, material, int(n) + 1)
        ratio = relative_change(A_new, A[idx])
        accept = ratio < C
        capped = ~accept & (n + 1 >= n_max)
        replace_ = ~accept
        A[idx[replace_]] = A_new[replace_]
        samples[idx[replace_]] = n + 1
        changed[idx[replace_]] = True
        new_p1[idx[accept | capped]] = TOP
        new_p1[idx[replace_ & ~capped]] = n + 1
    return A, new_p1, samples, changed


# -- vertex stencils ------------------------------------------------------------

def assemble_stencils(corners: np.ndarray, A: np.ndarray, n_vertices: int) -> np.ndarray:
    """``(n_vertices, 3, 3)`` vertex stencils summed from element matrices.

    Entry ``[v, 1 + dx, 1 + dy]`` couples vertex ``v`` to its neighbour at
    lattice offset ``(dx, dy)``. Missing cells contribute nothing.
    """
    from .spacetree import CORNER_OFFSETS
    S = np.zeros((n_vertices, 9))
    for a in range(4):
        for b in range(4):
            off = CORNER_OFFSETS[b] - CORNER_OFFSETS[a]
            slot = 3 * (1 + off[0]) + (1 + off[1])
            S[:, slot] += np.bincount(corners[:, a], weights=A[:, a, b], minlength=n_vertices)
    return S.reshape(n_vertices, 3, 3)


def assemble_vertex_stencil(level, A: np.ndarray, vertex: int, p1: Optional[np.ndarray] = None,
                            allow_empty: bool = True) -> np.ndarray:
    """3x3 stencil of one vertex from the element matrices of its adjacent cells."""
    cells, local = np.nonzero(level.corners == vertex)
    if p1 is not None and not allow_empty and (np.asarray(p1)[cells] == BOTTOM).any():
        raise ProtocolError(f"vertex {vertex} touches a cell without an operator")
    return assemble_stencils(level.corners[cells], A[cells], level.n_vertices)[vertex]


def assemble_diagonal(corners: np.ndarray, A: np.ndarray, n_vertices: int) -> np.ndarray:
    diag = np.zeros(n_vertices)
    for a in range(4):
        diag += np.bincount(corners[:, a], weights=A[:, a, a], minlength=n_vertices)
    return diag


def apply_operator(corners: np.ndarray, A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix-free product of the assembled element matrices with ``x``."""
    local = np.einsum("cab,cb->ca", A, x[corners])
    return np.bincount(corners.ravel(), weights=local.ravel(), minlength=len(x))
