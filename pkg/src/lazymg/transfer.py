"""Inter-grid transfer blocks, Ritz-Galerkin coarse elements and ripple bookkeeping.

A refined cell owns a 16x4 prolongation block mapping its four corner values
onto the 4x4 lattice of fine vertices of its 3x3 children. Fine vertices in
the block are numbered ``q = 4 * px + py`` with lattice position
``(px, py)`` in ``0..3``. Restriction is always the transpose.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from .spacetree import (CORNER_OFFSETS, INTERIOR, K, Level, Spacetree,
                        geometric_weights)

logger = logging.getLogger(__name__)

PATCH = (K + 1) ** 2
_POS = np.array([[px, py] for px in range(K + 1) for py in range(K + 1)], dtype=np.int64)
# patch index of each child's four corners, children x-major
CHILD_Q = np.array([[4 * (dx + ox) + (dy + oy) for ox, oy in CORNER_OFFSETS]
                    for dx in range(K) for dy in range(K)], dtype=np.int64)
_EDGES = (  # (fixed axis, fixed lattice value, the two inner positions, end corners)
    ("x", 0, [(1, 0), (2, 0)], (0, 1)),
    ("x", 3, [(1, 3), (2, 3)], (2, 3)),
    ("y", 0, [(0, 1), (0, 2)], (0, 2)),
    ("y", 3, [(3, 1), (3, 2)], (1, 3)),
)
_INNER = [(1, 1), (2, 1), (1, 2), (2, 2)]


def _q(px, py):
    return 4 * px + py


def geometric_prolongation() -> np.ndarray:
    """Bilinear 16x4 block; weights are ninths stored in double precision."""
    return geometric_weights(_POS)


def patch_vertices(coarse: Level, fine: Level, cells: np.ndarray) -> np.ndarray:
    """``(len(cells), 16)`` fine vertex indices of the patches of refined coarse cells."""
    cells = np.asarray(cells, dtype=np.int64)
    out = np.full((len(cells), PATCH), -1, dtype=np.int64)
    children = coarse.children[cells]
    for k in range(K * K):
        out[:, CHILD_Q[k]] = fine.corners[children[:, k]]
    return out


def _edge_weights(S_a, S_b, along_x: bool):
    """Collapsed 1D solve for the two inner vertices of one coarse edge.

    Returns weights ``(m, 2, 2)``: row = inner vertex, column = edge end (low, high),
    and a mask of rows where the collapse was well posed.
    """
    if along_x:
        lo_a, c_a, hi_a = S_a[:, 0, :].sum(1), S_a[:, 1, :].sum(1), S_a[:, 2, :].sum(1)
        lo_b, c_b, hi_b = S_b[:, 0, :].sum(1), S_b[:, 1, :].sum(1), S_b[:, 2, :].sum(1)
    else:
        lo_a, c_a, hi_a = S_a[:, :, 0].sum(1), S_a[:, :, 1].sum(1), S_a[:, :, 2].sum(1)
        lo_b, c_b, hi_b = S_b[:, :, 0].sum(1), S_b[:, :, 1].sum(1), S_b[:, :, 2].sum(1)
    det = c_a * c_b - hi_a * lo_b
    scale = np.maximum(np.abs(c_a * c_b), np.finfo(float).tiny)
    ok = (c_a > 0) & (c_b > 0) & (np.abs(det) > 1e-12 * scale)
    det = np.where(ok, det, 1.0)
    w = np.empty((len(det), 2, 2))
    # low end = 1, high end = 0
    w[:, 0, 0] = -lo_a * c_b / det
    w[:, 1, 0] = lo_b * lo_a / det
    # low end = 0, high end = 1
    w[:, 0, 1] = hi_a * hi_b / det
    w[:, 1, 1] = -c_a * hi_b / det
    ok &= np.isfinite(w).all(axis=(1, 2))
    return w, ok


def boxmg_prolongation(stencils: np.ndarray, kinds: np.ndarray) -> np.ndarray:
    """Operator-dependent 16x4 blocks by stencil collapsing.

    ``stencils`` is ``(m, 16, 3, 3)``: the assembled fine stencils of the
    patch vertices; ``kinds`` is ``(m, 16)``. Coarse-coincident vertices copy
    their corner. Inner edge vertices solve the collapsed 1D equations along
    the edge. The four inner vertices solve their full stencils with the
    edge values as boundary data. Vertices that are not free unknowns, or
    whose local system is not well posed, fall back to bilinear weights.
    """
    stencils = np.asarray(stencils, dtype=float)
    kinds = np.asarray(kinds)
    m = len(stencils)
    G = geometric_prolongation()
    B = np.broadcast_to(G, (m, PATCH, 4)).copy()
    fallbacks = 0
    for axis, _, inner, ends in _EDGES:
        qa, qb = _q(*inner[0]), _q(*inner[1])
        w, ok = _edge_weights(stencils[:, qa], stencils[:, qb], axis == "x")
        ok &= (kinds[:, qa] == INTERIOR) & (kinds[:, qb] == INTERIOR)
        fallbacks += int((~ok & (kinds[:, qa] == INTERIOR)).sum())
        for r, q in enumerate((qa, qb)):
            row = np.zeros((m, 4))
            row[:, ends[0]] = w[:, r, 0]
            row[:, ends[1]] = w[:, r, 1]
            B[ok, q] = row[ok]
    # inner 2x2 block of fine vertices
    inner_q = [_q(*p) for p in _INNER]
    M = np.zeros((m, 4, 4))
    rhs = np.zeros((m, 4, 4))
    index = {q: i for i, q in enumerate(inner_q)}
    for i, (px, py) in enumerate(_INNER):
        S = stencils[:, _q(px, py)]
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                nq = _q(px + dx, py + dy)
                coef = S[:, dx + 1, dy + 1]
                if nq in index:
                    M[:, i, index[nq]] += coef
                else:
                    rhs[:, i, :] -= coef[:, None] * B[:, nq, :]
    centre = np.stack([M[:, i, i] for i in range(4)], axis=1)
    ok = (centre > 0).all(axis=1) & (kinds[:, inner_q] == INTERIOR).all(axis=1)
    with np.errstate(all="ignore"):
        cond_ok = np.abs(np.linalg.det(np.where(ok[:, None, None], M, np.eye(4)))) > 1e-14 * \
            np.maximum(np.prod(np.abs(centre), axis=1), np.finfo(float).tiny)
    ok &= cond_ok
    if ok.any():
        sol = np.linalg.solve(M[ok], rhs[ok])
        good = np.isfinite(sol).all(axis=(1, 2))
        idx = np.flatnonzero(ok)
        ok[idx[~good]] = False
        B[np.ix_(idx[good], inner_q)] = sol[good]
    fallbacks += int((~ok).sum())
    if fallbacks:
        logger.debug("boxmg: %d local systems fell back to bilinear weights", fallbacks)
    return B


def galerkin_coarse_elements(children_A: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """Coarse 4x4 element matrices ``sum_k Q_k^T A_k Q_k`` of refined cells.

    ``children_A`` is ``(m, 9, 4, 4)``, ``blocks`` is ``(m, 16, 4)``; ``Q_k``
    are the block rows of child ``k``'s corners.
    """
    Q = np.asarray(blocks)[:, CHILD_Q, :]           # (m, 9, 4, 4)
    return np.einsum("mkaj,mkab,mkbl->mjl", Q, children_A, Q, optimize=True)


def galerkin_coarse_element(children_A: np.ndarray, P: Optional[np.ndarray] = None,
                            R: Optional[np.ndarray] = None) -> np.ndarray:
    """Single-cell version of :func:`galerkin_coarse_elements` with explicit ``P``, ``R``."""
    P = geometric_prolongation() if P is None else np.asarray(P)
    R = P.T if R is None else np.asarray(R)
    out = np.zeros((4, 4))
    for k in range(K * K):
        rows = CHILD_Q[k]
        out += R[:, rows] @ children_A[k] @ P[rows, :]
    return out


def global_prolongation(coarse: Level, fine: Level, blocks: np.ndarray) -> sp.csr_matrix:
    """Sparse ``(n_fine_vertices, n_coarse_vertices)`` prolongation.

    ``blocks`` holds one 16x4 block per coarse cell (only refined cells are
    read). Each fine vertex takes its row from the refined cell recorded in
    ``fine.interp_cell``.
    """
    cell = fine.interp_cell
    q = 4 * fine.interp_pos[:, 0] + fine.interp_pos[:, 1]
    weights = blocks[cell, q, :]                    # (nvf, 4)
    cols = coarse.corners[cell]                     # (nvf, 4)
    rows = np.repeat(np.arange(fine.n_vertices), 4)
    mat = sp.csr_matrix((weights.ravel(), (rows, cols.ravel())),
                        shape=(fine.n_vertices, coarse.n_vertices))
    mat.eliminate_zeros()
    return mat


def injection(coarse: Level, fine: Level, u_fine: np.ndarray, u_coarse: np.ndarray) -> np.ndarray:
    """Coarse vector with fine values copied onto coincident vertices."""
    out = np.array(u_coarse, dtype=float, copy=True)
    fc = coarse.fine_coincident
    has = fc >= 0
    out[has] = u_fine[fc[has]]
    return out


def injection_matrix(coarse: Level, fine: Level) -> sp.csr_matrix:
    fc = coarse.fine_coincident
    has = np.flatnonzero(fc >= 0)
    return sp.csr_matrix((np.ones(len(has)), (has, fc[has])),
                         shape=(coarse.n_vertices, fine.n_vertices))


# -- rippling and gating ----------------------------------------------------------

@dataclass
class RippleFlags:
    """Per-cell change stamps and per-level gate state.

    ``changed[l][c]`` is the cycle in which cell ``c`` of level ``l`` last
    received a different operator; ``computed[l][c]`` is the cycle in which
    its coarse operator was last rebuilt. ``absorbed[l]`` is the mesh epoch
    that level ``l``'s coarse operators reflect.
    """

    changed: List[np.ndarray] = field(default_factory=list)
    computed: List[np.ndarray] = field(default_factory=list)
    absorbed: List[int] = field(default_factory=list)
    refinement_cycles: List[int] = field(default_factory=list)

    @classmethod
    def for_mesh(cls, mesh: Spacetree, epoch: int = 0) -> "RippleFlags":
        return cls(changed=[np.full(l.n_cells, -1, dtype=np.int64) for l in mesh.levels],
                   computed=[np.full(l.n_cells, -1, dtype=np.int64) for l in mesh.levels],
                   absorbed=[epoch] * len(mesh.levels))


def propagate_ripple(mesh: Spacetree, flags: RippleFlags, level: int,
                     include_neighbours: bool = False) -> np.ndarray:
    """Refined cells of ``level`` whose children changed since their last rebuild.

    Stamps are cycle numbers, and a child may change later in the same cycle
    its parent was rebuilt, so a tie counts as dirty.  The cost is at most one
    redundant rebuild, which publishes nothing new.
    """
    coarse = mesh.levels[level]
    if level + 1 >= len(mesh.levels):
        return np.zeros(coarse.n_cells, dtype=bool)
    fine = mesh.levels[level + 1]
    fresh = flags.changed[level + 1] >= flags.computed[level][fine.parent]
    dirty = np.zeros(coarse.n_cells, dtype=bool)
    parents = fine.parent[fresh]
    dirty[parents] = True
    if include_neighbours and len(parents):
        cells = coarse.cells[np.unique(parents)]
        offs = np.array([[dx, dy] for dx in (-1, 0, 1) for dy in (-1, 0, 1)])
        around = coarse.find_cells((cells[:, None, :] + offs[None]).reshape(-1, 2))
        dirty[around[around >= 0]] = True
    dirty &= coarse.refined
    return dirty


def gate_levels_after_refinement(flags: RippleFlags, mesh: Spacetree, enabled: bool = True) -> np.ndarray:
    """Per-level bits: True where a level's corrections may be applied.

    A level with refined cells is usable once its coarse operators have been
    rebuilt from inputs reflecting the latest refinement.
    """
    bits = np.ones(len(mesh.levels), dtype=bool)
    if not enabled:
        return bits
    for lvl, level in enumerate(mesh.levels):
        if level.refined.any():
            bits[lvl] = flags.absorbed[lvl] >= mesh.epoch
    return bits
