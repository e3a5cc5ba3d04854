"""Per-cell operator storage for the whole grid hierarchy.

Every cell of every level owns a 4x4 element matrix: leaves hold their
discretisation, refined cells their Ritz-Galerkin coarse operator. Refined
cells also own a 16x4 prolongation block. All of it is kept as the value
that reads back from the variable-precision cell stream: the geometric
baseline plus the decoded hierarchical surplus.

The hierarchy drives the four assembly modes:

``eager``     every leaf is integrated to convergence before the first cycle.
``lazy``      a leaf is integrated to convergence the first time it is used.
``adaptive``  one adaptive step per unconverged leaf and cycle, synchronously.
``anarchic``  a first one-sample matrix is computed inline; further steps run
              as background tasks and the solver uses whatever is stored.

Background tasks and the cycle driver interact only through :meth:`publish`
and :meth:`snapshot`, both serialised by one lock, so readers never observe
a partly written matrix.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import codec
from .assembly import (BOTTOM, DEFAULT_C, DEFAULT_N_MAX, TOP,
                       adaptive_step_batch, assemble_stencils, integrate_elements)
from .problems import MaterialField
from .scheduler import COARSE, INTEGRATE, LOW, Task, TaskPool
from .spacetree import Spacetree
from .transfer import (RippleFlags, boxmg_prolongation, galerkin_coarse_elements,
                       geometric_prolongation, global_prolongation, patch_vertices,
                       propagate_ripple)

logger = logging.getLogger(__name__)

MODES = ("eager", "lazy", "adaptive", "anarchic")
TRANSFERS = ("geometric", "boxmg")
COARSE_POLICIES = ("always", "ripple")
A_ENTRIES = 16
P_ENTRIES = 64

_MIX = (np.arange(1, 17, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15)) | np.uint64(1)


def matrix_checksum(A: np.ndarray) -> np.ndarray:
    """Order-sensitive 64-bit checksum of each 4x4 matrix in ``A``."""
    bits = np.ascontiguousarray(A, dtype=np.float64).reshape(-1, 16).view(np.uint64)
    with np.errstate(over="ignore"):
        return (bits * _MIX).sum(axis=1, dtype=np.uint64)


@dataclass
class LevelStore:
    """Operator state of all cells of one level, indexed like ``Level.cells``."""

    index: int
    h: float
    keys: np.ndarray
    refined: np.ndarray
    origins: np.ndarray
    baseline: np.ndarray
    A: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    samples: np.ndarray
    version: np.ndarray
    checksum: np.ndarray
    P: np.ndarray = None            # (nc, 16, 4), meaningful on refined cells
    P_p3: np.ndarray = None
    _key_order: np.ndarray = field(default=None, repr=False)

    @classmethod
    def empty(cls, level, material: MaterialField) -> "LevelStore":
        nc = level.n_cells
        origins = level.cells * level.h
        baseline = integrate_elements(origins, level.h, material, 1)
        refined = level.refined.copy()
        A = np.zeros((nc, 4, 4))
        A[refined] = baseline[refined]
        p1 = np.where(refined, TOP, BOTTOM).astype(np.int64)
        samples = np.where(refined, 1, 0).astype(np.int64)
        store = cls(index=level.index, h=level.h, keys=level.cell_keys.copy(), refined=refined,
                    origins=origins, baseline=baseline, A=A, p1=p1,
                    p2=np.zeros(nc, dtype=bool), p3=np.zeros(nc, dtype=np.int64),
                    samples=samples, version=np.zeros(nc, dtype=np.int64),
                    checksum=matrix_checksum(A),
                    P=np.broadcast_to(geometric_prolongation(), (nc, 16, 4)).copy(),
                    P_p3=np.zeros(nc, dtype=np.int64))
        store._key_order = np.argsort(store.keys, kind="stable")
        return store

    @property
    def n_cells(self) -> int:
        return len(self.keys)

    def lookup(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        pos = np.searchsorted(self.keys[self._key_order], keys)
        pos = np.clip(pos, 0, max(self.n_cells - 1, 0))
        idx = self._key_order[pos]
        return np.where(self.keys[idx] == keys, idx, -1)

    def record_lengths(self) -> np.ndarray:
        """Bytes of each cell's stream record."""
        leaf_len = np.where(self.p1 == BOTTOM, 1, 1 + self.p3 * A_ENTRIES)
        ref_len = 1 + self.p3 * (A_ENTRIES + P_ENTRIES)
        return np.where(self.refined, ref_len, leaf_len)


@dataclass
class CycleOperators:
    """Consistent copy of the operators a cycle works with."""

    A: List[np.ndarray]
    P: List[Optional[sp.csr_matrix]]   # P[l] maps level l-1 onto level l
    enabled: np.ndarray
    absorbed: List[int]


class OperatorHierarchy:
    """Operators of all levels plus the assembly-mode state machine."""

    def __init__(self, mesh: Spacetree, material: MaterialField, mode: str = "anarchic",
                 C: float = DEFAULT_C, n_max: int = DEFAULT_N_MAX,
                 threshold: float = codec.DEFAULT_THRESHOLD, transfer: str = "boxmg",
                 coarse_policy: str = "always", pool: Optional[TaskPool] = None,
                 integrator=None):
        if mode not in MODES:
            raise ValueError(f"unknown assembly mode {mode!r}")
        if transfer not in TRANSFERS:
            raise ValueError(f"unknown transfer {transfer!r}")
        if coarse_policy not in COARSE_POLICIES:
            raise ValueError(f"unknown coarse recompute policy {coarse_policy!r}")
        self.mesh = mesh
        self.material = material
        self.mode = mode
        self.C = C
        self.n_max = n_max
        self.threshold = threshold
        self.transfer = transfer
        self.coarse_policy = coarse_policy
        self.pool = pool if pool is not None else TaskPool(workers=1)
        self._own_pool = pool is None
        self.integrator = integrator or adaptive_step_batch
        self.lock = threading.RLock()
        self.cycle = 0
        self.stores = [LevelStore.empty(l, material) for l in mesh.levels]
        self.flags = RippleFlags.for_mesh(mesh, mesh.epoch)
        self.prolongations: List[Optional[sp.csr_matrix]] = [None] * len(mesh.levels)
        self.spawned_integrations = 0
        self.integration_steps = 0
        self.pool.register(INTEGRATE, self._run_integration_tasks)
        self.pool.register(COARSE, self._run_coarse_task)
        for lvl in range(1, len(mesh.levels)):
            self._rebuild_prolongation(lvl - 1)

    # -- publication --------------------------------------------------------------------
    def publish(self, level: int, idx, A_new: np.ndarray, p1=None, samples=None,
                clear_p2: bool = False, P_new: Optional[np.ndarray] = None,
                cycle: Optional[int] = None) -> np.ndarray:
        """Store operators as they read back from the stream; returns changed mask."""
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx) == 0:
            return np.zeros(0, dtype=bool)
        store = self.stores[level]
        A_new = np.asarray(A_new, dtype=float).reshape(len(idx), 4, 4)
        surplus = (A_new - store.baseline[idx]).reshape(len(idx), -1)
        if P_new is not None:
            P_new = np.asarray(P_new, dtype=float).reshape(len(idx), 16, 4)
            surplus = np.concatenate([surplus, (P_new - geometric_prolongation()).reshape(len(idx), -1)], 1)
        p3 = codec.choose_precision_rows(surplus, self.threshold)
        decoded = np.empty_like(surplus)
        for value in np.unique(p3):
            rows = p3 == value
            decoded[rows] = codec.roundtrip(surplus[rows], int(value))
        A_dec = store.baseline[idx] + decoded[:, :16].reshape(-1, 4, 4)
        P_dec = None
        if P_new is not None:
            P_dec = geometric_prolongation() + decoded[:, 16:].reshape(-1, 16, 4)
        stamp = self.cycle if cycle is None else cycle
        with self.lock:
            changed = (A_dec != store.A[idx]).any(axis=(1, 2))
            if P_dec is not None:
                changed |= (P_dec != store.P[idx]).any(axis=(1, 2))
                store.P[idx] = P_dec
            store.A[idx] = A_dec
            store.checksum[idx] = matrix_checksum(A_dec)
            store.version[idx] += 1
            store.p3[idx] = p3
            if p1 is not None:
                store.p1[idx] = p1
            if samples is not None:
                samples = np.broadcast_to(np.asarray(samples), idx.shape)
                keep = samples > 0
                store.samples[idx[keep]] = samples[keep]
            if clear_p2:
                store.p2[idx] = False
            self.flags.changed[level][idx[changed]] = stamp
        return changed

    def snapshot(self) -> CycleOperators:
        with self.lock:
            A = [s.A.copy() for s in self.stores]
            P = list(self.prolongations)
            enabled = None
            absorbed = list(self.flags.absorbed)
        return CycleOperators(A=A, P=P, enabled=enabled, absorbed=absorbed)

    def read_checked(self, level: int, idx: int) -> np.ndarray:
        """Copy of one stored matrix, verified against its published checksum."""
        with self.lock:
            store = self.stores[level]
            A = store.A[idx].copy()
            expected = store.checksum[idx]
        if matrix_checksum(A[None])[0] != expected:
            raise RuntimeError(f"torn read of cell {idx} on level {level}")
        return A

    # -- fine operators --------------------------------------------------------------------
    def _leaf_indices(self, level: int) -> np.ndarray:
        return np.flatnonzero(~self.stores[level].refined)

    def _step_cells(self, level: int, idx: np.ndarray, clear_p2: bool = False):
        """One adaptive step on the given leaves, published immediately."""
        store = self.stores[level]
        with self.lock:
            p1 = store.p1[idx].copy()
            old = store.A[idx].copy()
        A, new_p1, samples, _ = self.integrator(p1, old, store.origins[idx], store.h, self.material,
                                                self.C, self.n_max)
        self.integration_steps += int((p1 != TOP).sum())
        self.publish(level, idx, A, p1=new_p1, samples=samples, clear_p2=clear_p2)

    def integrate_to_convergence(self, level: int, idx: np.ndarray):
        idx = np.asarray(idx, dtype=np.int64)
        store = self.stores[level]
        while len(idx):
            self._step_cells(level, idx)
            idx = idx[store.p1[idx] != TOP]

    def prepare(self):
        """Work done before the first cycle; only eager mode has any."""
        if self.mode != "eager":
            return
        for level in range(len(self.stores)):
            self.integrate_to_convergence(level, self._leaf_indices(level))
        self.settle_coarse()

    def request_fine(self):
        """Make every leaf's operator usable for this cycle according to the mode."""
        for level, store in enumerate(self.stores):
            leaves = self._leaf_indices(level)
            if len(leaves) == 0:
                continue
            if self.mode in ("eager", "lazy"):
                pending = leaves[store.p1[leaves] != TOP]
                if len(pending):
                    self.integrate_to_convergence(level, pending)
            elif self.mode == "adaptive":
                if store.p2[leaves].any():
                    self.pool.wait_idle()
                pending = leaves[store.p1[leaves] != TOP]
                if len(pending):
                    self._step_cells(level, pending)
            else:
                self._request_anarchic(level, leaves)

    def _request_anarchic(self, level: int, leaves: np.ndarray):
        store = self.stores[level]
        fresh = leaves[store.p1[leaves] == BOTTOM]
        if len(fresh):
            with self.lock:
                # a task could not own a cell without a matrix
                fresh = fresh[~store.p2[fresh]]
            A = integrate_elements(store.origins[fresh], store.h, self.material, 1)
            self.integration_steps += len(fresh)
            self.publish(level, fresh, A, p1=np.ones(len(fresh), dtype=np.int64), samples=1)
        self.spawn_integrations(level, leaves)

    def spawn_integrations(self, level: int, cells: np.ndarray) -> int:
        """Test-and-set ``p2`` on unconverged cells and queue one task per winner."""
        store = self.stores[level]
        cells = np.asarray(cells, dtype=np.int64)
        with self.lock:
            want = cells[(store.p1[cells] != TOP) & (store.p1[cells] != BOTTOM) & ~store.p2[cells]]
            want = np.unique(want)
            store.p2[want] = True
            keys = store.keys[want]
        tasks = [Task(INTEGRATE, (level, int(k)), LOW, self.mesh.epoch) for k in keys.tolist()]
        accepted = self.pool.spawn_many(tasks)
        if accepted < len(tasks):
            with self.lock:
                store.p2[want] = False
            return 0
        self.spawned_integrations += accepted
        return accepted

    def _run_integration_tasks(self, payloads: Sequence):
        by_level: Dict[int, List[int]] = {}
        for level, key in payloads:
            by_level.setdefault(level, []).append(key)
        for level, keys in by_level.items():
            with self.lock:
                if level >= len(self.stores):
                    continue
                store = self.stores[level]
                idx = store.lookup(keys)
                idx = idx[idx >= 0]
                idx = idx[~store.refined[idx] & store.p2[idx]]
                p1 = store.p1[idx].copy()
                old = store.A[idx].copy()
            if len(idx) == 0:
                continue
            A, new_p1, samples, _ = self.integrator(p1, old, store.origins[idx], store.h,
                                                    self.material, self.C, self.n_max)
            with self.lock:
                if self.stores[level] is not store:
                    # the mesh changed while integrating; re-resolve the cells
                    new_store = self.stores[level]
                    nidx = new_store.lookup(store.keys[idx])
                    ok = (nidx >= 0)
                    ok[ok] = ~new_store.refined[nidx[ok]] & new_store.p2[nidx[ok]]
                    idx, A, new_p1, samples = nidx[ok], A[ok], new_p1[ok], samples[ok]
                self.integration_steps += len(idx)
                self.publish(level, idx, A, p1=new_p1, samples=samples, clear_p2=True)

    # -- coarse operators -------------------------------------------------------------------
    def _rebuild_prolongation(self, coarse_level: int):
        mesh = self.mesh
        coarse, fine = mesh.levels[coarse_level], mesh.levels[coarse_level + 1]
        self.prolongations[coarse_level + 1] = global_prolongation(
            coarse, fine, self.stores[coarse_level].P)

    def recompute_level(self, level: int, dirty: Optional[np.ndarray] = None,
                        cycle: Optional[int] = None) -> np.ndarray:
        """Rebuild transfer blocks and Galerkin operators of refined cells of ``level``."""
        mesh = self.mesh
        coarse, fine = mesh.levels[level], mesh.levels[level + 1]
        fstore = self.stores[level + 1]
        cells = np.flatnonzero(coarse.refined if dirty is None else dirty & coarse.refined)
        if len(cells) == 0:
            return np.zeros(0, dtype=np.int64)
        with self.lock:
            fineA = fstore.A.copy()
            fine_p1 = fstore.p1.copy()
        children = coarse.children[cells]
        ready = ~(fine_p1[children] == BOTTOM).any(axis=1)
        cells, children = cells[ready], children[ready]
        if len(cells) == 0:
            return cells
        if self.transfer == "boxmg":
            S = assemble_stencils(fine.corners, fineA, fine.n_vertices)
            pv = patch_vertices(coarse, fine, cells)
            B = boxmg_prolongation(S[pv], fine.kind[pv])
        else:
            B = np.broadcast_to(geometric_prolongation(), (len(cells), 16, 4))
        A_gal = galerkin_coarse_elements(fineA[children], B)
        stamp = self.cycle if cycle is None else cycle
        changed = self.publish(level, cells, A_gal, P_new=B, cycle=stamp)
        with self.lock:
            self.flags.computed[level][cells] = stamp
        if self.transfer == "boxmg" and changed.any():
            self._rebuild_prolongation(level)
        return cells

    def _run_coarse_task(self, payloads):
        for level, dirty in payloads:
            self.recompute_level(level, dirty)

    def recompute_coarse(self):
        """Coarse operator pass of one cycle, coarsest level first.

        Each level reads the operators its children held before this pass,
        so a change needs one cycle per level to reach the coarse grids.
        """
        mesh = self.mesh
        old_absorbed = list(self.flags.absorbed)
        for level in range(len(mesh.levels) - 1):
            if not mesh.levels[level].refined.any():
                continue
            if self.coarse_policy == "ripple":
                dirty = propagate_ripple(mesh, self.flags, level,
                                         include_neighbours=self.transfer == "boxmg")
                if not dirty.any():
                    self.flags.absorbed[level] = old_absorbed[level + 1]
                    continue
            else:
                dirty = None
            self.pool.run_priority(COARSE, (level, dirty))
            self.flags.absorbed[level] = old_absorbed[level + 1]
        for level, lv in enumerate(mesh.levels):
            if not lv.refined.any():
                self.flags.absorbed[level] = mesh.epoch

    def settle_coarse(self):
        """Rebuild all coarse operators finest first, so they are consistent at once."""
        for level in range(len(self.mesh.levels) - 2, -1, -1):
            if self.mesh.levels[level].refined.any():
                self.recompute_level(level)
        self.flags.absorbed = [self.mesh.epoch] * len(self.mesh.levels)

    def gate_bits(self, gating: bool) -> np.ndarray:
        from .transfer import gate_levels_after_refinement
        return gate_levels_after_refinement(self.flags, self.mesh, gating)

    # -- cycle hooks ---------------------------------------------------------------------------
    def begin_cycle(self, cycle: int):
        self.cycle = cycle
        self.pool.begin_cycle()

    def end_cycle(self):
        """Cooperative execution of background work when running single-threaded."""
        if self.pool.workers == 1:
            self.pool.drain()

    def pending(self) -> int:
        return self.pool.in_flight()

    def finish(self):
        if self._own_pool:
            self.pool.shutdown()

    # -- mesh changes ------------------------------------------------------------------------
    def remap(self, mesh: Spacetree):
        """Carry operator state over to a refined mesh."""
        with self.lock:
            old_stores = self.stores
            old_flags = self.flags
            new_stores = [LevelStore.empty(l, self.material) for l in mesh.levels]
            flags = RippleFlags.for_mesh(mesh, 0)
            for lvl, store in enumerate(new_stores):
                if lvl >= len(old_stores):
                    continue
                old = old_stores[lvl]
                oidx = old.lookup(store.keys)
                hit = np.flatnonzero(oidx >= 0)
                src = oidx[hit]
                same = store.refined[hit] == old.refined[src]
                keep, ksrc = hit[same], src[same]
                for name in ("A", "p1", "p2", "p3", "samples", "version", "checksum", "P", "P_p3"):
                    getattr(store, name)[keep] = getattr(old, name)[ksrc]
                flags.changed[lvl][keep] = old_flags.changed[lvl][ksrc]
                flags.computed[lvl][keep] = old_flags.computed[lvl][ksrc]
                # leaves that became refined start from their discretisation
                grown, gsrc = hit[~same], src[~same]
                store.A[grown] = old.A[gsrc]
                store.checksum[grown] = matrix_checksum(store.A[grown])
                store.p3[grown] = old.p3[gsrc]
                flags.changed[lvl][grown] = self.cycle
            for lvl in range(len(mesh.levels)):
                flags.absorbed[lvl] = old_flags.absorbed[lvl] if lvl < len(old_flags.absorbed) else 0
            self.mesh = mesh
            self.stores = new_stores
            self.flags = flags
            self.prolongations = [None] * len(mesh.levels)
            for lvl in range(1, len(mesh.levels)):
                self._rebuild_prolongation(lvl - 1)
            for lvl, level in enumerate(mesh.levels):
                if not level.refined.any():
                    flags.absorbed[lvl] = mesh.epoch

    # -- stream and statistics ----------------------------------------------------------------
    def marker(self, level: int, idx: int):
        s = self.stores[level]
        p1 = s.p1[idx]
        label = "T" if p1 == TOP else ("_" if p1 == BOTTOM else str(int(p1)))
        return label, int(s.p2[idx]), int(s.p3[idx])

    def build_stream(self) -> codec.CellStream:
        """Serialise all cells in traversal order."""
        stream = codec.CellStream()
        G = geometric_prolongation().ravel()
        for lvl, i, j in self.mesh.traverse():
            level = self.mesh.levels[lvl]
            store = self.stores[lvl]
            idx = int(store.lookup([i * level.n + j])[0])
            p1 = store.p1[idx]
            cls = codec.P1_BOTTOM if p1 == BOTTOM else (codec.P1_TOP if p1 == TOP else codec.P1_NUMERIC)
            surplus = (store.A[idx] - store.baseline[idx]).ravel()
            if store.refined[idx]:
                surplus = np.concatenate([surplus, store.P[idx].ravel() - G])
            record, _ = codec.write_cell_record(cls, bool(store.p2[idx]), surplus,
                                                self.threshold, p3=int(store.p3[idx]))
            stream.append(record, len(surplus))
        return stream

    def compression(self) -> codec.CompressionStats:
        """Compression statistics over all leaf cells."""
        lengths, p3s, ns = [], [], []
        for store in self.stores:
            leaf = ~store.refined
            lengths.append(store.record_lengths()[leaf])
            p3s.append(store.p3[leaf])
            ns.append(store.samples[leaf])
        lengths = np.concatenate(lengths)
        ns = np.concatenate(ns)
        return codec.compression_stats(lengths, np.concatenate(p3s), ns[ns > 0])

    def unconverged_leaves(self) -> int:
        return int(sum(((s.p1 != TOP) & ~s.refined).sum() for s in self.stores))
