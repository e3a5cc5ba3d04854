"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import itertools
import threading
import time

import numpy as np
import pytest

from lazymg import codec
from lazymg.assembly import TOP, assemble_stencils, integrate_element, integrate_elements
from lazymg.operators import OperatorHierarchy
from lazymg.problems import MaterialField, make_problem
from lazymg.scheduler import INTEGRATE, TaskPool
from lazymg.solver import AdditiveSolver, AMRConfig, SolverConfig, Status
from lazymg.spacetree import INTERIOR, build_initial_mesh
from lazymg.transfer import (boxmg_prolongation, galerkin_coarse_elements, geometric_prolongation,
                             global_prolongation, patch_vertices)

GAUSS_X, GAUSS_W = np.polynomial.legendre.leggauss(64)
GAUSS_X, GAUSS_W = (GAUSS_X + 1) / 2, GAUSS_W / 2
UNIT = np.array([[4, -1, -1, -2], [-1, 4, -2, -1], [-1, -2, 4, -1], [-2, -1, -1, 4]]) / 6.0


@pytest.fixture
def verdict(capsys, request):
    def emit(ok: bool, detail: str):
        name = request.node.name
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail
    return emit


def dense_quadrature_unit_element(h):
    """Bilinear stiffness matrix of an h-cell with eps = 1 from 64x64 Gauss points."""
    XI, ETA = np.meshgrid(GAUSS_X, GAUSS_X, indexing="ij")
    W = np.outer(GAUSS_W, GAUSS_W)
    dx = np.stack([-(1 - ETA), 1 - ETA, -ETA, ETA]) / h
    dy = np.stack([-(1 - XI), -XI, 1 - XI, XI]) / h
    return (np.einsum("aij,bij,ij->ab", dx, dx, W) + np.einsum("aij,bij,ij->ab", dy, dy, W)) * h * h


def dense_matrix(level, A):
    M = np.zeros((level.n_vertices, level.n_vertices))
    for c, local in zip(level.corners, A):
        M[np.ix_(c, c)] += local
    return M


def test_criterion_01_codec_round_trip(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 10 ** 6
    x = rng.choice([-1.0, 1.0], n) * np.ldexp(rng.uniform(1.0, 2.0, n), rng.integers(-100, 101, n))
    worst = {}
    for p3 in range(2, 8):
        back = codec.roundtrip(x, p3)
        worst[p3] = float(np.max(np.abs(back - x) / np.abs(x)) * 2.0 ** (8 * (p3 - 1) - 1))
    exact = np.array_equal(codec.roundtrip(x, 8).view(np.uint64), x.view(np.uint64))
    elapsed = time.perf_counter() - t0
    ok = all(w <= 1.0 for w in worst.values()) and exact and elapsed < 10
    detail = ", ".join(f"p3={p}: err/bound={w:.3f}" for p, w in worst.items())
    verdict(ok, f"{detail}; p3=8 bit-exact={exact}; {elapsed:.2f} s")


def test_criterion_02_stencil_oracle(verdict):
    h = 1 / 27
    oracle = dense_quadrature_unit_element(h)
    analytic = UNIT
    A = integrate_element((0.0, 0.0), h, MaterialField.constant(1.0), 1)
    err_elem = max(np.abs(A - analytic).max(), np.abs(A - oracle).max())
    level = build_initial_mesh(3).levels[-1]
    A_all = integrate_elements(level.cells * level.h, level.h, MaterialField.constant(1.0), 1)
    S = assemble_stencils(level.corners, A_all, level.n_vertices)
    S_oracle = assemble_stencils(level.corners, np.broadcast_to(oracle, A_all.shape), level.n_vertices)
    expected = np.full((3, 3), -1.0)
    expected[1, 1] = 8.0
    expected /= 3.0
    interior = level.kind == INTERIOR
    err_stencil = max(np.abs(S[interior] - expected).max(), np.abs(S_oracle[interior] - expected).max())
    ok = err_elem <= 1e-12 and err_stencil <= 1e-12
    verdict(ok, f"element error {err_elem:.1e}, interior stencil error {err_stencil:.1e} "
                f"over {interior.sum()} vertices")


def test_criterion_03_rap_equivalence(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    checks = 0
    for depth in (1, 2, 3):
        mesh = build_initial_mesh(depth)
        coarse, fine = mesh.levels[-2], mesh.levels[-1]
        pv = patch_vertices(coarse, fine, np.arange(coarse.n_cells))
        for transfer in ("geometric", "boxmg"):
            for _ in range(100):
                X = rng.standard_normal((fine.n_cells, 4, 4))
                A = X + np.swapaxes(X, 1, 2)
                if transfer == "boxmg":
                    # operator-dependent P needs operator-like input: random symmetric
                    # perturbations of randomly scaled stiffness matrices
                    A = 0.05 * A + UNIT * rng.uniform(0.5, 2.0, (fine.n_cells, 1, 1))
                    B = boxmg_prolongation(assemble_stencils(fine.corners, A, fine.n_vertices)[pv],
                                           fine.kind[pv])
                else:
                    B = np.broadcast_to(geometric_prolongation(), (coarse.n_cells, 16, 4))
                P = global_prolongation(coarse, fine, B).toarray()
                Ac = galerkin_coarse_elements(A[coarse.children], B)
                err = np.abs(dense_matrix(coarse, Ac) - P.T @ dense_matrix(fine, A) @ P).max()
                worst = max(worst, float(err))
                checks += 1
    verdict(worst <= 1e-12, f"{checks} random symmetric inputs (geometric and BoxMG P) up to "
                            f"27x27, max |RAP error| {worst:.1e}")


def test_criterion_04_constant_material_collapse(verdict):
    worst_block, worst_stencil = 0.0, 0.0
    for value in (1.0, 3.7, 1e-3):
        material = MaterialField.constant(value)
        mesh = build_initial_mesh(4)
        ops = OperatorHierarchy(mesh, material, mode="eager", transfer="boxmg")
        ops.prepare()
        for lvl in range(4):
            coarse, fine = mesh.levels[lvl], mesh.levels[lvl + 1]
            A_fine = ops.stores[lvl + 1].A
            cells = np.arange(coarse.n_cells)
            pv = patch_vertices(coarse, fine, cells)
            B = boxmg_prolongation(assemble_stencils(fine.corners, A_fine, fine.n_vertices)[pv],
                                   fine.kind[pv])
            worst_block = max(worst_block, float(np.abs(B - geometric_prolongation()).max()))
            redisc = integrate_elements(coarse.cells * coarse.h, coarse.h, material, 1)
            S_gal = assemble_stencils(coarse.corners, ops.stores[lvl].A, coarse.n_vertices)
            S_red = assemble_stencils(coarse.corners, redisc, coarse.n_vertices)
            worst_stencil = max(worst_stencil, float(np.abs(S_gal - S_red).max()) / value)
    ok = worst_block <= 1e-10 and worst_stencil <= 1e-10
    verdict(ok, f"BoxMG vs geometric block {worst_block:.1e}, Galerkin vs rediscretised "
                f"stencil {worst_stencil:.1e} (relative to eps)")


TABLE_FACTORS = {16: 118.00, 64: 22.64}


def test_criterion_05_memory_footprint_table(verdict):
    t0 = time.perf_counter()
    rows = {}
    for theta in (1, 16, 64):
        mesh = build_initial_mesh(3)
        problem = make_problem("theta", theta=theta)
        ops = OperatorHierarchy(mesh, problem.material, mode="adaptive", C=0.01, threshold=1e-8)
        solver = AdditiveSolver(mesh, problem, SolverConfig(max_cycles=10, target=1e-30), ops)
        solver.run()
        rows[theta] = solver.reports
    elapsed = time.perf_counter() - t0
    failures = []
    for r in rows[1]:
        if (r.max_n, f"{r.avg_n:.2f}", f"{r.compression:.2f}") != (1, "1.00", "128.00"):
            failures.append(f"theta=1 cycle {r.cycle}: {r.max_n}/{r.avg_n:.2f}/{r.compression:.2f}")
    for theta, expected in TABLE_FACTORS.items():
        max_n = [r.max_n for r in rows[theta]]
        if max_n != list(range(1, 11)):
            failures.append(f"theta={theta} max n {max_n}")
        # either averaging convention may match: bytes ratio or mean of per-cell ratios
        off = [r for r in rows[theta][1:]
               if min(abs(r.compression - expected), abs(r.compression_mean - expected))
               > 0.15 * expected]
        if off:
            r = off[0]
            failures.append(f"theta={theta} factor {r.compression:.2f} / mean "
                            f"{r.compression_mean:.2f} vs {expected} from cycle {r.cycle}")
    if elapsed >= 60:
        failures.append(f"runtime {elapsed:.1f} s")
    summary = "; ".join(f"theta={t}: max n {[r.max_n for r in rows[t]]}, final factor "
                        f"{rows[t][-1].compression:.2f}" for t in rows)
    verdict(not failures, (summary if not failures else "; ".join(failures)) + f"; {elapsed:.1f} s")


def test_criterion_06_mode_equivalence(verdict):
    t0 = time.perf_counter()
    finals = {}
    statuses = {}
    for eps in (1.0, 1e-3):
        problem = make_problem("quadrant", eps_low=eps)
        for mode in ("eager", "lazy", "adaptive", "anarchic"):
            mesh = build_initial_mesh(4)
            ops = OperatorHierarchy(mesh, problem.material, mode=mode)
            solver = AdditiveSolver(mesh, problem, SolverConfig(target=1e-10, max_cycles=400), ops)
            solver.run()
            ops.finish()
            statuses[eps, mode] = (solver.status, len(solver.reports))
            finals[eps, mode] = np.concatenate(solver.solution())
    elapsed = time.perf_counter() - t0
    converged = all(s == Status.CONVERGED for s, _ in statuses.values())
    pair = max(np.abs(finals[a] - finals[b]).max()
               for a, b in itertools.combinations(finals, 2) if a[0] == b[0])
    exact = max(np.abs(u).max() for u in finals.values())
    ok = converged and pair <= 1e-8 and exact <= 1e-6 and elapsed < 300
    cycles = ", ".join(f"{m}@{e:g}:{n}" for (e, m), (_, n) in statuses.items())
    verdict(ok, f"all converged={converged} ({cycles} cycles), pairwise {pair:.1e}, "
                f"vs u=0 {exact:.1e}, {elapsed:.1f} s")


def test_criterion_07_starvation(verdict):
    mesh = build_initial_mesh(2)
    problem = make_problem("quadrant", eps_low=1e-5, rhs="material")
    pool = TaskPool(workers=1, throttle=1)
    ops = OperatorHierarchy(mesh, problem.material, mode="anarchic", pool=pool)
    solver = AdditiveSolver(mesh, problem, SolverConfig(max_cycles=8000), ops)
    solver.run()
    reports = solver.reports
    res = np.array([r.normalized for r in reports])
    pending = np.array([r.pending for r in reports])
    stall = next((i for i in range(len(reports) - 10)
                  if (pending[i:i + 11] > 0).all() and res[i + 10] > res[i] / 10), None)
    drained = None
    if stall is not None:
        drained = next((i for i in range(stall + 10, len(reports)) if pending[i] == 0), None)
    converged = solver.status == Status.CONVERGED
    ok = stall is not None and drained is not None and converged
    verdict(ok, f"stall window from cycle {None if stall is None else stall + 1} "
                f"(pending {None if stall is None else pending[stall]}), pending=0 at cycle "
                f"{None if drained is None else drained + 1}, {solver.status.value} at cycle "
                f"{len(reports)}")


def test_criterion_08_ripple_latency(verdict):
    outcome = {}
    for policy in ("ripple", "always"):
        mesh = build_initial_mesh(5)
        ops = OperatorHierarchy(mesh, MaterialField("theta", theta=16), mode="eager",
                                coarse_policy=policy)
        ops.prepare()
        for c in (1, 2):
            ops.begin_cycle(c)
            ops.recompute_coarse()
        before = [int(f.max()) for f in ops.flags.changed]
        store = ops.stores[5]
        i = int(np.flatnonzero(~store.refined)[1000])
        perturbed_at = 2
        ops.publish(5, [i], store.A[i] * 1.01, cycle=perturbed_at)
        seen = {}
        for c in range(3, 9):
            ops.begin_cycle(c)
            ops.recompute_coarse()
            for lvl in range(5):
                if lvl not in seen and int(ops.flags.changed[lvl].max()) > before[lvl]:
                    seen[lvl] = c - perturbed_at
        outcome[policy] = seen
    expected = {lvl: 5 - lvl for lvl in range(5)}
    ok = all(seen == expected for seen in outcome.values())
    verdict(ok, f"latency per level {outcome} expected {expected}")


def test_criterion_09_gating_under_amr(verdict):
    t0 = time.perf_counter()
    results = {}
    for eps in (1.0, 1e-5):
        mesh = build_initial_mesh(2)
        # f = eps keeps a nonzero solution, so the residual floors instead of reaching
        # zero and all 500 cycles run
        problem = make_problem("quadrant", eps_low=eps, rhs="material")
        ops = OperatorHierarchy(mesh, problem.material, mode="anarchic")
        solver = AdditiveSolver(mesh, problem,
                                SolverConfig(max_cycles=500, target=1e-30, gating=True), ops,
                                amr=AMRConfig(fraction=0.1, max_level=5, until_cycle=20))
        solver.run()
        ops.finish()
        res = np.array([r.normalized for r in solver.reports])
        results[eps] = (solver.status, len(res), float(res.max()), solver.mesh.max_level,
                        solver.gate_violations)
    elapsed = time.perf_counter() - t0
    ok = all(s != Status.DIVERGED and n == 500 and peak < 100 and depth <= 5 and v == 0
             for s, n, peak, depth, v in results.values())
    text = "; ".join(f"eps={e:g}: {s.value} after {n} cycles, peak normalized {p:.2f}, depth {d}, "
                     f"gate violations {v}" for e, (s, n, p, d, v) in results.items())
    verdict(ok, f"{text}; {elapsed:.1f} s")


class _CountingPool(TaskPool):
    """Task pool that records every accepted integration task per cell key."""

    def __init__(self, **kw):
        super().__init__(**kw)
        self.count_lock = threading.Lock()
        self.spawned = {}
        self.in_flight_cells = {}
        self.max_in_flight = 0

    def spawn_many(self, tasks):
        with self.count_lock:
            for t in tasks:
                key = t.payload[1]
                self.spawned[key] = self.spawned.get(key, 0) + 1
                depth = self.in_flight_cells.get(key, 0) + 1
                self.in_flight_cells[key] = depth
                self.max_in_flight = max(self.max_in_flight, depth)
        return super().spawn_many(tasks)

    def finished(self, payloads):
        with self.count_lock:
            for _, key in payloads:
                self.in_flight_cells[key] -= 1


def _converging_stub(p1, old, origins, h, material, C, n_max):
    """Cheap stand-in for the integrator: new matrix, converged marker."""
    A = old + 1e-3 * np.arange(1, 17).reshape(4, 4)
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    return A, np.full(len(p1), TOP), np.full(len(p1), -1), np.ones(len(p1), dtype=bool)


def test_criterion_10_concurrency_soundness(verdict):
    workers, repetitions, n_cells = 4, 100, 10 ** 4
    contenders = 4 * workers
    mesh = build_initial_mesh(5)
    pool = _CountingPool(workers=workers)
    ops = OperatorHierarchy(mesh, MaterialField("theta", theta=16), mode="anarchic", pool=pool,
                            integrator=_converging_stub)
    handler = pool._handlers[INTEGRATE]

    def counted(payloads):
        handler(payloads)
        pool.finished(payloads)

    pool.register(INTEGRATE, counted)
    store = ops.stores[5]
    cells = np.flatnonzero(~store.refined)[:n_cells]
    ops.publish(5, cells, store.baseline[cells], p1=np.ones(len(cells), dtype=np.int64), cycle=0)
    versions0 = store.version[cells].copy()
    torn = [0]
    reads = [0]
    stop = threading.Event()
    duplicate_rounds = []

    def reader(seed):
        rng = np.random.default_rng(seed)
        while not stop.is_set():
            for i in rng.choice(cells, 64):
                try:
                    ops.read_checked(5, int(i))
                except RuntimeError:
                    torn[0] += 1
                reads[0] += 1

    readers = [threading.Thread(target=reader, args=(s,)) for s in range(2)]
    for t in readers:
        t.start()
    t0 = time.perf_counter()
    try:
        for rep in range(repetitions):
            with ops.lock:
                store.p1[cells] = 1
            pool.spawned.clear()
            barrier = threading.Barrier(contenders)

            def contend(seed):
                order = np.random.default_rng(seed).permutation(cells)
                barrier.wait()
                for chunk in np.array_split(order, 8):
                    ops.spawn_integrations(5, chunk)

            threads = [threading.Thread(target=contend, args=(rep * contenders + k,))
                       for k in range(contenders)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert pool.wait_idle(timeout=120)
            counts = np.array([pool.spawned.get(int(k), 0) for k in store.keys[cells]])
            if not (counts == 1).all() or len(pool.spawned) != n_cells:
                duplicate_rounds.append(rep)
    finally:
        stop.set()
        for t in readers:
            t.join()
        pool.shutdown()
    elapsed = time.perf_counter() - t0
    versions = store.version[cells] - versions0
    leftover = int(store.p2[cells].sum())
    ok = (not duplicate_rounds and pool.max_in_flight == 1 and torn[0] == 0
          and (versions == repetitions).all() and leftover == 0 and pool.stats.failed == 0)
    verdict(ok, f"{contenders} contenders x {n_cells} cells x {repetitions} repetitions: "
                f"rounds with duplicate tasks {len(duplicate_rounds)}, max in-flight per cell "
                f"{pool.max_in_flight}, publishes per cell {versions.min()}..{versions.max()}, "
                f"torn reads {torn[0]} of {reads[0]}, {elapsed:.1f} s")
