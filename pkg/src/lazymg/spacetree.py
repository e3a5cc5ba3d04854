"""Tripartitioned spacetree over the unit square.

Every refined cell is cut into 3x3 children. Level ``l`` therefore lives on
the lattice ``(i / 3**l, j / 3**l)``; cells and vertices are addressed by
integer lattice coordinates. All per-level data is held in flat numpy
arrays so that the solver can work level by level without Python loops.

Corner order inside a cell is (SW, SE, NW, NE) throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

K = 3
DIM = 2
CHILDREN = K ** DIM
MAX_SUPPORTED_LEVEL = 15
# resource guard on the total number of vertices of a mesh
MAX_VERTICES = 20_000_000

INTERIOR, DIRICHLET, HANGING = 0, 1, 2
KIND_NAMES = {INTERIOR: "interior", DIRICHLET: "dirichlet", HANGING: "hanging"}

# lattice offsets of the four corners, (SW, SE, NW, NE)
CORNER_OFFSETS = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.int64)


class MeshResourceError(RuntimeError):
    """Raised when a requested mesh would exceed the configured size limits."""


@dataclass
class Level:
    """Cells and vertices of one grid level, in traversal order."""

    index: int
    cells: np.ndarray            # (nc, 2) lattice coordinates
    refined: np.ndarray          # (nc,) bool
    slot: np.ndarray = None      # (nc,) global stream slot
    parent: np.ndarray = None    # (nc,) index into level-1 cells
    children: np.ndarray = None  # (nc, 9) index into level+1 cells, -1 if leaf
    vertices: np.ndarray = None  # (nv, 2)
    corners: np.ndarray = None   # (nc, 4) vertex indices
    kind: np.ndarray = None      # (nv,) int8
    adjacent: np.ndarray = None  # (nv,) same-level adjacent cell count
    coarse_coincident: np.ndarray = None  # (nv,) vertex on level-1 or -1
    fine_coincident: np.ndarray = None    # (nv,) vertex on level+1 or -1
    interp_cell: np.ndarray = None        # (nv,) refined level-1 cell holding the vertex
    interp_pos: np.ndarray = None         # (nv, 2) position in that cell's 4x4 lattice

    @property
    def n(self) -> int:
        return 3 ** self.index

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def cell_keys(self) -> np.ndarray:
        return self.cells[:, 0] * self.n + self.cells[:, 1]

    @property
    def vertex_keys(self) -> np.ndarray:
        return self.vertices[:, 0] * (self.n + 1) + self.vertices[:, 1]

    @property
    def leaf(self) -> np.ndarray:
        return ~self.refined

    @property
    def dof(self) -> np.ndarray:
        return self.kind == INTERIOR

    def points(self) -> np.ndarray:
        return self.vertices * self.h

    def centres(self) -> np.ndarray:
        return (self.cells + 0.5) * self.h

    def find_cells(self, coords) -> np.ndarray:
        """Indices of cells with the given lattice coordinates, -1 where absent."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        return _lookup(self.cell_keys, coords[:, 0] * self.n + coords[:, 1], coords, self.n)

    def find_vertices(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        return _lookup(self.vertex_keys, coords[:, 0] * (self.n + 1) + coords[:, 1],
                       coords, self.n + 1)


def _lookup(keys, query, coords, extent):
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    pos = np.searchsorted(sorted_keys, query)
    pos = np.clip(pos, 0, max(len(keys) - 1, 0))
    valid = (coords >= 0).all(axis=1) & (coords < extent).all(axis=1)
    if len(keys) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    found = valid & (sorted_keys[pos] == query)
    return np.where(found, order[pos], -1)


@dataclass
class RefinementDelta:
    """Cells to refine, cells to coarsen, and ancestors whose operators go stale."""

    refine: List[Tuple[int, int, int]] = field(default_factory=list)
    coarsen: List[Tuple[int, int, int]] = field(default_factory=list)
    stale: List[Tuple[int, int, int]] = field(default_factory=list)

    def __bool__(self):
        return bool(self.refine or self.coarsen)


class Spacetree:
    """Adaptive k=3 spacetree; topology is the set of refined cells per level."""

    def __init__(self, refined_per_level: Sequence[Sequence[Tuple[int, int]]] = ((),),
                 max_vertices: int = MAX_VERTICES):
        self.max_vertices = max_vertices
        self._refined: List[set] = [set(map(tuple, r)) for r in refined_per_level]
        self.epoch = 0
        self._build()

    # -- construction -----------------------------------------------------
    def _build(self):
        levels: List[Level] = []
        cells = np.zeros((1, 2), dtype=np.int64)
        total_vertices = 0
        for lvl in range(MAX_SUPPORTED_LEVEL + 1):
            refined_set = self._refined[lvl] if lvl < len(self._refined) else set()
            refined = np.array([tuple(c) in refined_set for c in cells.tolist()], dtype=bool) \
                if refined_set else np.zeros(len(cells), dtype=bool)
            level = Level(lvl, cells, refined)
            levels.append(level)
            total_vertices += (len(cells) * 4)
            if total_vertices > 4 * self.max_vertices:
                raise MeshResourceError("mesh exceeds the configured vertex limit")
            if not refined.any():
                break
            parents = cells[refined]
            offs = np.array([[dx, dy] for dx in range(K) for dy in range(K)], dtype=np.int64)
            cells = (K * parents[:, None, :] + offs[None, :, :]).reshape(-1, 2)
        else:
            raise MeshResourceError(f"spacetree deeper than {MAX_SUPPORTED_LEVEL} levels")
        self._refined = self._refined[:len(levels)]
        while len(self._refined) < len(levels):
            self._refined.append(set())
        self.levels = levels
        self._order_cells()
        for level in levels:
            self._build_vertices(level)
        if sum(l.n_vertices for l in levels) > self.max_vertices:
            raise MeshResourceError("mesh exceeds the configured vertex limit")
        for lvl in range(1, len(levels)):
            self._link(levels[lvl - 1], levels[lvl])

    def _order_cells(self):
        # depth-first pre-order, children x-major: sort by a base-10 digit path
        depth = len(self.levels) - 1
        all_keys = []
        for level in self.levels:
            key = np.zeros(level.n_cells, dtype=np.int64)
            for m in range(1, level.index + 1):
                shift = 3 ** (level.index - m)
                dx = (level.cells[:, 0] // shift) % K
                dy = (level.cells[:, 1] // shift) % K
                key += (K * dx + dy + 1) * 10 ** (depth - m)
            order = np.argsort(key, kind="stable")
            level.cells = level.cells[order]
            level.refined = level.refined[order]
            all_keys.append(key[order])
        flat = np.concatenate(all_keys)
        rank = np.empty(len(flat), dtype=np.int64)
        rank[np.argsort(flat, kind="stable")] = np.arange(len(flat))
        start = 0
        for level, key in zip(self.levels, all_keys):
            level.slot = rank[start:start + len(key)]
            start += len(key)

    @staticmethod
    def _build_vertices(level: Level):
        n = level.n
        corner_coords = level.cells[:, None, :] + CORNER_OFFSETS[None, :, :]
        keys = corner_coords[..., 0] * (n + 1) + corner_coords[..., 1]
        uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
        level.vertices = np.stack([uniq // (n + 1), uniq % (n + 1)], axis=1)
        level.corners = inverse.reshape(-1, 4)
        level.adjacent = np.bincount(inverse, minlength=len(uniq))
        on_boundary = ((level.vertices == 0) | (level.vertices == n)).any(axis=1)
        kind = np.full(len(uniq), INTERIOR, dtype=np.int8)
        kind[level.adjacent < 4] = HANGING
        kind[on_boundary] = DIRICHLET
        level.kind = kind
        level.coarse_coincident = np.full(len(uniq), -1, dtype=np.int64)
        level.fine_coincident = np.full(len(uniq), -1, dtype=np.int64)
        level.children = np.full((level.n_cells, CHILDREN), -1, dtype=np.int64)

    @staticmethod
    def _link(coarse: Level, fine: Level):
        fine.parent = coarse.find_cells(fine.cells // K)
        ref_idx = np.flatnonzero(coarse.refined)
        base = K * coarse.cells[ref_idx]
        for k, (dx, dy) in enumerate((dx, dy) for dx in range(K) for dy in range(K)):
            coarse.children[ref_idx, k] = fine.find_cells(base + [dx, dy])

        v = fine.vertices
        on_lattice = (v % K == 0).all(axis=1)
        cc = np.full(fine.n_vertices, -1, dtype=np.int64)
        cc[on_lattice] = coarse.find_vertices(v[on_lattice] // K)
        fine.coarse_coincident = cc
        coarse.fine_coincident[cc[on_lattice]] = np.flatnonzero(on_lattice)

        # a refined coarse cell whose closure holds the vertex
        refined_lookup = np.where(coarse.refined, np.arange(coarse.n_cells), -1)
        interp = np.full(fine.n_vertices, -1, dtype=np.int64)
        for sx in (0, 1):
            for sy in (0, 1):
                px = (v[:, 0] - sx) // K
                py = (v[:, 1] - sy) // K
                cand = coarse.find_cells(np.stack([px, py], axis=1))
                ok = (cand >= 0)
                ok[ok] = refined_lookup[cand[ok]] >= 0
                take = ok & (interp < 0)
                interp[take] = cand[take]
        assert (interp >= 0).all(), "fine vertex without refined parent"
        fine.interp_cell = interp
        fine.interp_pos = v - K * coarse.cells[interp]

    # -- queries ------------------------------------------------------------
    @property
    def max_level(self) -> int:
        return len(self.levels) - 1

    @property
    def refined_sets(self) -> List[set]:
        return [set(s) for s in self._refined]

    def n_cells(self) -> int:
        return sum(l.n_cells for l in self.levels)

    def leaf_count(self) -> int:
        return int(sum(l.leaf.sum() for l in self.levels))

    def dof_counts(self) -> Dict[str, int]:
        """Interior unknowns of the composite mesh and all distinct grid points."""
        active = 0
        points = set()
        for lvl, level in enumerate(self.levels):
            fine_dof = np.zeros(level.n_vertices, dtype=bool)
            if lvl + 1 < len(self.levels):
                fc = level.fine_coincident
                has = fc >= 0
                fine_dof[has] = self.levels[lvl + 1].kind[fc[has]] == INTERIOR
            active += int((level.dof & ~fine_dof).sum())
        scale = 3 ** self.max_level
        for level in self.levels:
            f = scale // level.n
            points.update(map(tuple, (level.vertices * f).tolist()))
        return {"interior": active, "points": len(points)}

    def traverse(self) -> List[Tuple[int, int, int]]:
        """Cell visits ``(level, i, j)`` in depth-first pre-order."""
        visits = []
        for level in self.levels:
            for slot, (i, j) in zip(level.slot.tolist(), level.cells.tolist()):
                visits.append((slot, level.index, i, j))
        visits.sort()
        return [v[1:] for v in visits]

    def dump(self, markers=None) -> str:
        """One line per cell: ``level x y refined p1 p2 p3``."""
        lines = []
        for lvl, i, j in self.traverse():
            level = self.levels[lvl]
            idx = int(level.find_cells([(i, j)])[0])
            p = markers(lvl, idx) if markers is not None else ("-", "-", "-")
            lines.append(f"{lvl} {i} {j} {int(level.refined[idx])} {p[0]} {p[1]} {p[2]}")
        return "\n".join(lines) + "\n"

    # -- mutation -------------------------------------------------------------
    def refine(self, cells: Sequence[Tuple[int, int, int]]) -> RefinementDelta:
        """Refine the given leaf cells ``(level, i, j)``; returns the applied delta."""
        delta = RefinementDelta()
        for lvl, i, j in cells:
            if lvl >= MAX_SUPPORTED_LEVEL:
                continue
            while len(self._refined) <= lvl:
                self._refined.append(set())
            if (i, j) in self._refined[lvl]:
                continue
            if lvl > 0 and (i // K, j // K) not in self._refined[lvl - 1]:
                raise ValueError(f"cell {(lvl, i, j)} is not part of the mesh")
            self._refined[lvl].add((i, j))
            delta.refine.append((lvl, i, j))
        stale = set()
        for lvl, i, j in delta.refine:
            stale.add((lvl, i, j))
            for up in range(1, lvl + 1):
                stale.add((lvl - up, i // K ** up, j // K ** up))
        delta.stale = sorted(stale)
        if delta:
            self.epoch += 1
            self._build()
        return delta

    def coarsen(self, cells) -> RefinementDelta:
        """Coarsening is not supported; meshes only grow."""
        return RefinementDelta()


def build_initial_mesh(depth: int, max_vertices: int = MAX_VERTICES) -> Spacetree:
    """Regular spacetree with ``3**depth`` cells per axis on the finest level."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if depth > MAX_SUPPORTED_LEVEL or (3 ** depth + 1) ** 2 > max_vertices:
        raise MeshResourceError(f"depth {depth} exceeds the configured vertex limit")
    refined = []
    for lvl in range(depth):
        n = 3 ** lvl
        refined.append([(i, j) for i in range(n) for j in range(n)])
    return Spacetree(refined, max_vertices=max_vertices)


def geometric_weights(pos) -> np.ndarray:
    """Bilinear weights of lattice positions ``pos`` (0..3) w.r.t. (SW, SE, NW, NE)."""
    pos = np.asarray(pos, dtype=float)
    xi = pos[..., 0] / K
    eta = pos[..., 1] / K
    return np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta], axis=-1)


def interpolate_hanging(mesh: Spacetree, u: List[np.ndarray], level: int = None) -> int:
    """Overwrite hanging vertices with the d-linear interpolant of their coarse parents.

    Works top-down so that hanging coarse parents are settled first. Returns
    the number of vertices written.
    """
    levels = range(1, mesh.max_level + 1) if level is None else [level]
    count = 0
    for lvl in levels:
        fine, coarse = mesh.levels[lvl], mesh.levels[lvl - 1]
        hang = np.flatnonzero(fine.kind == HANGING)
        if len(hang) == 0:
            continue
        w = geometric_weights(fine.interp_pos[hang])
        corners = coarse.corners[fine.interp_cell[hang]]
        u[lvl][hang] = np.einsum("vk,vk->v", w, u[lvl - 1][corners])
        count += len(hang)
    return count


def hanging_count_bruteforce(mesh: Spacetree, level: int) -> int:
    """Count hanging vertices by explicit neighbourhood enumeration (test oracle)."""
    lv = mesh.levels[level]
    cells = set(map(tuple, lv.cells.tolist()))
    n = lv.n
    seen = set()
    count = 0
    for i, j in cells:
        for a, b in ((i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)):
            if (a, b) in seen:
                continue
            seen.add((a, b))
            if a in (0, n) or b in (0, n):
                continue
            around = sum((a - dx, b - dy) in cells for dx in (0, 1) for dy in (0, 1))
            if around < 4:
                count += 1
    return count


def vertex_gradient(level: Level, u: np.ndarray) -> np.ndarray:
    """Per-vertex max over incident leaf-cell edges of ``|du| / h``."""
    grad = np.zeros(level.n_vertices)
    leaf = np.flatnonzero(level.leaf)
    if len(leaf) == 0:
        return grad
    c = level.corners[leaf]
    for a, b in ((0, 1), (2, 3), (0, 2), (1, 3)):
        g = np.abs(u[c[:, a]] - u[c[:, b]]) / level.h
        np.maximum.at(grad, c[:, a], g)
        np.maximum.at(grad, c[:, b], g)
    return grad


def refine_by_gradient(mesh: Spacetree, solution: List[np.ndarray], fraction: float,
                       max_level: int = MAX_SUPPORTED_LEVEL, apply: bool = True) -> RefinementDelta:
    """Refine leaves around the vertices carrying the top ``fraction`` of gradients."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    per_level = []
    for level in mesh.levels:
        if not level.leaf.any():
            continue
        g = vertex_gradient(level, solution[level.index])
        touched = np.zeros(level.n_vertices, dtype=bool)
        touched[level.corners[level.leaf].ravel()] = True
        touched &= level.kind != DIRICHLET
        per_level.append((level, g, touched))
    if not per_level:
        return RefinementDelta()
    values = np.concatenate([g[t] for _, g, t in per_level])
    if len(values) == 0 or values.max() <= 0:
        return RefinementDelta()
    k = max(1, int(np.ceil(fraction * len(values))))
    threshold = max(np.sort(values)[::-1][k - 1], np.finfo(float).tiny)
    chosen = []
    for level, g, touched in per_level:
        if level.index >= max_level:
            continue
        picked = touched & (g >= threshold)
        if not picked.any():
            continue
        cells = np.flatnonzero(picked[level.corners].any(axis=1) & level.leaf)
        chosen.extend((level.index, int(i), int(j)) for i, j in level.cells[cells])
    if not chosen:
        return RefinementDelta()
    chosen = sorted(chosen)
    if not apply:
        return RefinementDelta(refine=chosen)
    return mesh.refine(chosen)


def evaluate_composite(mesh: Spacetree, u: List[np.ndarray], points) -> np.ndarray:
    """Bilinear interpolant of the composite solution at ``points`` (``(m, 2)``).

    Each point is evaluated in the finest leaf that contains it. Points on a
    cell face may take either neighbour; the interpolant is continuous there.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if ((points < 0) | (points > 1)).any():
        raise ValueError("points must lie in the unit square")
    out = np.full(len(points), np.nan)
    remaining = np.ones(len(points), dtype=bool)
    for level in mesh.levels:
        if not remaining.any():
            break
        n = level.n
        lattice = np.minimum((points * n).astype(np.int64), n - 1)
        idx = level.find_cells(lattice)
        hit = remaining & (idx >= 0)
        hit[hit] = level.leaf[idx[hit]]
        if not hit.any():
            continue
        local = points[hit] * n - lattice[hit]
        w = geometric_weights(local * K)
        out[hit] = np.einsum("pk,pk->p", w, u[level.index][level.corners[idx[hit]]])
        remaining &= ~hit
    return out
