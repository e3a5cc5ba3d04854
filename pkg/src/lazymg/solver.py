"""Additive FAS multigrid on the generating system of a spacetree.

Every level holds a full approximation ``u_l``. One cycle computes, finest
level first, the right-hand sides

    b_l = (load of level-l leaves) + R r_hat_{l+1},   r_hat_l = b_l - A_l (u_l - P I u_l),

then updates all levels at once from ``r_l = b_l - A_l u_l``, adds the
prolongated coarse updates top-down, injects fine values into coincident
coarse vertices and re-interpolates hanging vertices.

Level updates (``S_l = omega * diag(A_l)^-1``):

``additive``    ``omega^(L-l+1) diag^-1 r_l``
``adafac-pi``   ``S_l r_l - P S_{l-1} I r_l``
``adafac-jac``  ``S_l r_l - P S_{l-1} R (r_l - omega A_l diag^-1 r_l)``
"""
from __future__ import annotations

import enum
import time
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional

import numpy as np

from .assembly import apply_operator, assemble_diagonal
from .operators import OperatorHierarchy
from .problems import ProblemInstance, init_noise
from .spacetree import (DIRICHLET, INTERIOR, Spacetree, interpolate_hanging,
                        refine_by_gradient)
from .transfer import injection

VARIANTS = ("additive", "adafac-jac", "adafac-pi")


class Status(str, enum.Enum):
    CONTINUE = "continue"
    CONVERGED = "converged"
    DIVERGED = "diverged"
    TIMEOUT = "timeout"


@dataclass
class SolverConfig:
    """Cycle variant, damping and termination thresholds."""

    variant: str = "adafac-jac"
    omega: float = 0.7
    target: float = 1e-10
    divergence: float = 1e2
    max_cycles: int = 200
    gating: bool = True
    # residual the auxiliary restriction of adafac-jac acts on: "update" restricts the
    # residual change omega A diag^-1 r of the level's own Jacobi step, "complement"
    # restricts the Jacobi-smoothed residual r - omega A diag^-1 r
    jac_form: str = "update"

    def __post_init__(self):
        if self.jac_form not in ("update", "complement"):
            raise ValueError(f"unknown jac_form {self.jac_form!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown solver variant {self.variant!r}")
        if not 0 < self.omega < 1:
            raise ValueError("omega must lie in (0, 1)")
        if self.target <= 0 or self.divergence <= 1:
            raise ValueError("target must be positive and divergence > 1")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")


@dataclass
class AMRConfig:
    fraction: float = 0.1
    max_level: int = 5
    every: int = 1
    until_cycle: int = 20
    max_dofs: int = 250_000


@dataclass
class LevelState:
    """Vertex vectors of one level."""

    u: np.ndarray
    f: np.ndarray
    r: np.ndarray
    r_hat: np.ndarray
    u_hat: np.ndarray
    diag: np.ndarray
    aux: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "LevelState":
        z = lambda: np.zeros(n)  # noqa: E731
        return cls(z(), z(), z(), z(), z(), z(), z())


@dataclass
class CycleReport:
    cycle: int
    residual: float
    normalized: float
    dof_updates: int
    cumulative_updates: int
    pending: int
    max_n: int
    avg_n: float
    compression: float
    compression_mean: float
    enabled: str
    unconverged: int
    interior_dofs: int
    grid_points: int
    status: str = Status.CONTINUE.value
    wall: float = 0.0

    def row(self) -> dict:
        return asdict(self)


def check_termination(history: List[float], config: SolverConfig, cycles_done: Optional[int] = None) -> Status:
    """Classify a residual history normalised by its first entry."""
    if not history:
        raise ValueError("need at least one residual")
    first = history[0]
    ratio = history[-1] / first if first > 0 else 0.0
    if not np.isfinite(ratio) or ratio >= config.divergence:
        return Status.DIVERGED
    if ratio <= config.target:
        return Status.CONVERGED
    done = len(history) if cycles_done is None else cycles_done
    if done >= config.max_cycles:
        return Status.TIMEOUT
    return Status.CONTINUE


def active_mask(mesh: Spacetree, lvl: int) -> np.ndarray:
    """Free unknowns of level ``lvl`` not represented on a finer level."""
    level = mesh.levels[lvl]
    mask = level.kind == INTERIOR
    if lvl + 1 < len(mesh.levels):
        fc = level.fine_coincident
        has = fc >= 0
        finer = np.zeros(level.n_vertices, dtype=bool)
        finer[has] = mesh.levels[lvl + 1].kind[fc[has]] == INTERIOR
        mask &= ~finer
    return mask


class AdditiveSolver:
    """Cycle driver tying mesh, operators and per-level vectors together."""

    def __init__(self, mesh: Spacetree, problem: ProblemInstance, config: SolverConfig,
                 hierarchy: OperatorHierarchy, amr: Optional[AMRConfig] = None,
                 record_time: bool = False):
        self.mesh = mesh
        self.problem = problem
        self.config = config
        self.ops = hierarchy
        self.amr = amr
        self.record_time = record_time
        self.history: List[float] = []
        self.reports: List[CycleReport] = []
        self.cumulative = 0
        self.gate_log: List[np.ndarray] = []
        self.gate_violations = 0
        self.status = Status.CONTINUE
        self._setup_levels()
        self.initialize()

    # -- state ---------------------------------------------------------------------------
    def _setup_levels(self):
        mesh = self.mesh
        self.state = [LevelState.zeros(l.n_vertices) for l in mesh.levels]
        self.keys = [l.vertex_keys.copy() for l in mesh.levels]
        self.active = [active_mask(mesh, l) for l in range(len(mesh.levels))]
        self.dof = [l.kind == INTERIOR for l in mesh.levels]
        self.dirichlet = [l.kind == DIRICHLET for l in mesh.levels]
        self.correction = [self.dof[l] & ~self.active[l] for l in range(len(mesh.levels))]
        self.load = [self._load(l) for l in mesh.levels]

    def _load(self, level) -> np.ndarray:
        leaf = np.flatnonzero(level.leaf)
        out = np.zeros(level.n_vertices)
        if self.problem.homogeneous or len(leaf) == 0:
            return out
        f = self.problem.rhs(level.centres()[leaf]) * level.h ** 2 / 4.0
        for a in range(4):
            out += np.bincount(level.corners[leaf, a], weights=f, minlength=level.n_vertices)
        return out

    def initialize(self):
        """Noise on free unknowns, boundary data on the boundary, consistent hierarchy."""
        mesh = self.mesh
        pts, mask, owner = [], [], []
        for lvl, level in enumerate(mesh.levels):
            sel = np.flatnonzero(self.active[lvl] | self.dirichlet[lvl])
            pts.append(level.points()[sel])
            mask.append(self.dirichlet[lvl][sel])
            owner.append((lvl, sel))
        values = init_noise(np.concatenate(pts), np.concatenate(mask), self.problem.seed,
                            self.problem.boundary)
        start = 0
        for lvl, sel in owner:
            self.state[lvl].u[sel] = values[start:start + len(sel)]
            start += len(sel)
        self._make_consistent()

    def _make_consistent(self):
        mesh = self.mesh
        for lvl in range(len(mesh.levels) - 2, -1, -1):
            coarse = mesh.levels[lvl]
            fc = coarse.fine_coincident
            take = fc >= 0
            take[take] = self.dof[lvl + 1][fc[take]]
            self.state[lvl].u[take] = self.state[lvl + 1].u[fc[take]]
        interpolate_hanging(mesh, [s.u for s in self.state])

    def solution(self, lvl: Optional[int] = None) -> List[np.ndarray]:
        if lvl is not None:
            return self.state[lvl].u
        return [s.u for s in self.state]

    def composite_max(self) -> float:
        return max(float(np.abs(s.u[self.active[l]]).max(initial=0.0)) for l, s in enumerate(self.state))

    # -- cycle steps ------------------------------------------------------------------------
    def compute_residuals(self, A: List[np.ndarray], P: List) -> float:
        """Residual pass from the finest level up; returns the composite residual norm."""
        mesh = self.mesh
        L = len(mesh.levels) - 1
        total = 0.0
        for lvl in range(L, -1, -1):
            level, st = mesh.levels[lvl], self.state[lvl]
            b = self.load[lvl].copy()
            if lvl < L:
                b += P[lvl + 1].T @ self.state[lvl + 1].r_hat
            st.f = b
            st.r = b - apply_operator(level.corners, A[lvl], st.u)
            st.r[~self.dof[lvl]] = 0.0
            if lvl > 0:
                Iu = injection(mesh.levels[lvl - 1], level, st.u, self.state[lvl - 1].u)
                st.u_hat = st.u - P[lvl] @ Iu
            else:
                st.u_hat = st.u.copy()
            st.r_hat = b - apply_operator(level.corners, A[lvl], st.u_hat)
            st.r_hat[self.dirichlet[lvl]] = 0.0
            st.diag = assemble_diagonal(level.corners, A[lvl], level.n_vertices)
            total += float((st.r[self.active[lvl]] ** 2).sum())
        return float(np.sqrt(total))

    def _inv_diag(self, lvl: int) -> np.ndarray:
        d = self.state[lvl].diag
        inv = np.zeros_like(d)
        ok = self.dof[lvl] & (d > 0)
        inv[ok] = 1.0 / d[ok]
        return inv

    def level_update(self, lvl: int, A: List[np.ndarray], P: List, enabled: np.ndarray) -> np.ndarray:
        """Update ``delta_l`` of one level from its residual (before coarse prolongation)."""
        cfg = self.config
        L = len(self.mesh.levels) - 1
        st = self.state[lvl]
        r = st.r
        inv = self._inv_diag(lvl)
        if cfg.variant == "additive":
            delta = cfg.omega ** (L - lvl + 1) * inv * r
        else:
            delta = cfg.omega * inv * r
            if lvl > 0 and enabled[lvl - 1] and self.mesh.levels[lvl - 1].refined.any():
                coarse = self.mesh.levels[lvl - 1]
                if cfg.variant == "adafac-pi":
                    rc = np.zeros(coarse.n_vertices)
                    fc = coarse.fine_coincident
                    has = fc >= 0
                    rc[has] = r[fc[has]]
                else:
                    change = cfg.omega * apply_operator(self.mesh.levels[lvl].corners, A[lvl], inv * r)
                    smooth = change if cfg.jac_form == "update" else r - change
                    smooth[~self.dof[lvl]] = 0.0
                    rc = P[lvl].T @ smooth
                rc[~self.correction[lvl - 1]] = 0.0
                aux = P[lvl] @ (cfg.omega * self._inv_diag(lvl - 1) * rc)
                st.aux = aux
                delta = delta - aux
        delta[~self.dof[lvl]] = 0.0
        if not enabled[lvl]:
            delta[self.correction[lvl]] = 0.0
        return delta

    def cycle(self) -> CycleReport:
        t0 = time.perf_counter()
        ops = self.ops
        c = len(self.history) + 1
        ops.begin_cycle(c)
        ops.request_fine()
        ops.recompute_coarse()
        snap = ops.snapshot()
        enabled = ops.gate_bits(self.config.gating)
        self._check_gate(enabled, snap.absorbed)
        A, P = snap.A, snap.P
        res = self.compute_residuals(A, P)
        self.history.append(res)
        L = len(self.mesh.levels) - 1
        deltas = [self.level_update(l, A, P, enabled) for l in range(L + 1)]
        for lvl in range(L + 1):
            if lvl > 0:
                deltas[lvl] = deltas[lvl] + P[lvl] @ deltas[lvl - 1]
                deltas[lvl][~self.dof[lvl]] = 0.0
            self.state[lvl].u += deltas[lvl]
        self._make_consistent()
        updates = int(sum(a.sum() for a in self.active))
        self.cumulative += updates
        ops.end_cycle()
        stats = ops.compression()
        counts = self.mesh.dof_counts() if c == 1 or self._mesh_changed else self._counts
        self._counts, self._mesh_changed = counts, False
        self.status = check_termination(self.history, self.config)
        report = CycleReport(
            cycle=c, residual=res, normalized=res / self.history[0] if self.history[0] > 0 else 0.0,
            dof_updates=updates, cumulative_updates=self.cumulative, pending=ops.pending(),
            max_n=stats.max_n, avg_n=stats.avg_n, compression=stats.factor,
            compression_mean=stats.mean_of_ratios,
            enabled="".join("1" if e else "0" for e in enabled),
            unconverged=ops.unconverged_leaves(), interior_dofs=counts["interior"],
            grid_points=counts["points"], status=self.status.value,
            wall=time.perf_counter() - t0 if self.record_time else 0.0)
        self.reports.append(report)
        if self.status == Status.CONTINUE and self.amr is not None:
            self._adapt(c)
        return report

    _mesh_changed = True
    _counts = None

    def _check_gate(self, enabled: np.ndarray, absorbed: List[int]):
        self.gate_log.append(enabled.copy())
        if not self.config.gating:
            return
        for lvl, level in enumerate(self.mesh.levels):
            if enabled[lvl] and level.refined.any() and absorbed[lvl] < self.mesh.epoch:
                self.gate_violations += 1

    def run(self, callback: Optional[Callable[[CycleReport], None]] = None) -> List[CycleReport]:
        self.ops.prepare()
        while self.status == Status.CONTINUE:
            report = self.cycle()
            if callback is not None:
                callback(report)
        return self.reports

    # -- adaptivity -------------------------------------------------------------------------
    def _adapt(self, c: int):
        amr = self.amr
        if c > amr.until_cycle or c % amr.every:
            return
        if self.reports[-1].interior_dofs >= amr.max_dofs:
            return
        delta = refine_by_gradient(self.mesh, self.solution(), amr.fraction, amr.max_level)
        if not delta:
            return
        self.remap()

    def remap(self):
        """Rebuild per-level vectors after the mesh was refined in place."""
        mesh = self.mesh
        old_state, old_keys = self.state, self.keys
        self._setup_levels()
        for lvl, level in enumerate(mesh.levels):
            st = self.state[lvl]
            if lvl < len(old_state):
                okeys = old_keys[lvl]
                order = np.argsort(okeys)
                pos = np.clip(np.searchsorted(okeys[order], level.vertex_keys), 0, len(okeys) - 1)
                hit = okeys[order[pos]] == level.vertex_keys
                st.u[hit] = old_state[lvl].u[order[pos[hit]]]
                missing = ~hit
            else:
                missing = np.ones(level.n_vertices, dtype=bool)
            if lvl > 0 and missing.any():
                from .spacetree import geometric_weights
                coarse = mesh.levels[lvl - 1]
                v = np.flatnonzero(missing)
                w = geometric_weights(level.interp_pos[v])
                st.u[v] = np.einsum("vk,vk->v", w, self.state[lvl - 1].u[coarse.corners[level.interp_cell[v]]])
        self.ops.remap(mesh)
        self._make_consistent()
        self._mesh_changed = True
