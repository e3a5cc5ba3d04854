"""Experiment drivers: configuration files, telemetry CSVs and reports.

A run is fully described by an :class:`ExperimentConfig`, stored as a flat
``key = value`` file. With ``workers = 1`` and wall-clock recording off, the
telemetry of a run is byte-for-byte reproducible.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from . import codec
from .assembly import DEFAULT_C, DEFAULT_N_MAX, apply_operator, integrate_elements
from .operators import COARSE_POLICIES, MODES, TRANSFERS, OperatorHierarchy
from .problems import RHS_CHOICES, make_problem
from .scheduler import INTEGRATE, Task, TaskPool
from .solver import VARIANTS, AdditiveSolver, AMRConfig, CycleReport, SolverConfig, Status
from .spacetree import build_initial_mesh

logger = logging.getLogger(__name__)

EXIT_CODES = {Status.CONVERGED: 0, Status.TIMEOUT: 2, Status.DIVERGED: 3}
TELEMETRY_COLUMNS = ("problem", "cycle", "normalized", "residual", "dof_updates",
                     "cumulative_updates", "pending", "max_n", "avg_n", "compression",
                     "compression_mean", "enabled", "unconverged", "interior_dofs",
                     "grid_points", "status", "wall")
SWEEP_COLUMNS = ("sweep", "wall", "workers", "forced_cells", "tasks_done", "pending",
                 "per_worker")
TRUE_WORDS = {"1", "true", "on", "yes"}
FALSE_WORDS = {"0", "false", "off", "no"}


class ConfigError(ValueError):
    """A configuration file or override could not be parsed or is inconsistent."""


@dataclass
class ExperimentConfig:
    """Everything that determines a run."""

    experiment: str = "solve"           # "solve" or "sweep"
    setup: str = "quadrant"
    theta: float = 1.0
    eps_low: float = 1e-3
    rhs: str = "zero"
    depth: int = 3
    seed: int = 0
    assembly: str = "anarchic"
    termination_c: float = DEFAULT_C
    n_max: int = DEFAULT_N_MAX
    transfer: str = "boxmg"
    coarse_recompute: str = "always"
    gating: bool = True
    compression_threshold: float = codec.DEFAULT_THRESHOLD
    solver: str = "adafac-jac"
    omega: float = 0.7
    target: float = 1e-10
    divergence: float = 1e2
    max_cycles: int = 200
    jac_form: str = "update"
    workers: int = 1
    throttle: Optional[int] = None
    amr: bool = False
    amr_fraction: float = 0.1
    amr_max_level: int = 5
    amr_until: int = 20
    forced_task_fraction: float = 0.0
    forced_n: int = 8
    sweeps: int = 10
    record_time: bool = False
    output: str = "telemetry.csv"

    def __post_init__(self):
        self.validate()

    def validate(self):
        choices = {"experiment": ("solve", "sweep"), "setup": ("theta", "quadrant", "constant"),
                   "rhs": RHS_CHOICES, "assembly": MODES, "transfer": TRANSFERS,
                   "coarse_recompute": COARSE_POLICIES, "solver": VARIANTS,
                   "jac_form": ("update", "complement")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.throttle is not None and self.throttle < 0:
            raise ConfigError("throttle must be >= 0")
        if not 0.0 <= self.forced_task_fraction <= 1.0:
            raise ConfigError("forced_task_fraction must lie in [0, 1]")
        if self.termination_c <= 0 or self.compression_threshold <= 0:
            raise ConfigError("termination_c and compression_threshold must be positive")

    # -- serialisation ---------------------------------------------------------------
    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: Optional["ExperimentConfig"] = None):
        """Build a config from string values, starting from ``base`` or the defaults."""
        kwargs = dataclasses.asdict(base) if base is not None else {}
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        for raw_key, raw in values.items():
            key = raw_key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown configuration key {raw_key!r}")
            kwargs[key] = _convert(key, raw, hints[key])
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        values = parse_key_values(text.splitlines(), source="config")
        values.update(parse_key_values(overrides, source="override"))
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), overrides)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                value = "inf"
            elif isinstance(value, bool):
                value = "on" if value else "off"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    # -- factories ---------------------------------------------------------------------
    def problem(self):
        return make_problem(self.setup, theta=self.theta, eps_low=self.eps_low, seed=self.seed,
                            rhs=self.rhs)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(variant=self.solver, omega=self.omega, target=self.target,
                            divergence=self.divergence, max_cycles=self.max_cycles,
                            gating=self.gating, jac_form=self.jac_form)

    def amr_config(self) -> Optional[AMRConfig]:
        if not self.amr:
            return None
        return AMRConfig(fraction=self.amr_fraction, max_level=self.amr_max_level,
                         until_cycle=self.amr_until)


def _convert(key: str, raw, hint):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    optional = typing.get_origin(hint) is typing.Union
    if optional:
        if text.lower() in ("inf", "none", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in TRUE_WORDS:
                return True
            if low in FALSE_WORDS:
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None
    return text


def parse_key_values(lines: Iterable[str], source: str = "config") -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: Dict[str, str] = {}
    for number, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source} line {number}: expected key = value, got {line!r}")
        key, value = body.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source} line {number}: empty key")
        out[key] = value.strip()
    return out


# -- solve runs ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: ExperimentConfig
    status: Status
    reports: List[CycleReport]
    problem: str
    solver: Optional[AdditiveSolver] = field(default=None, repr=False)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    def rows(self) -> List[dict]:
        return [dict(problem=self.problem, **r.row()) for r in self.reports]


def build_solver(config: ExperimentConfig, pool: Optional[TaskPool] = None) -> AdditiveSolver:
    """Mesh, operators and cycle driver for ``config``."""
    mesh = build_initial_mesh(config.depth)
    problem = config.problem()
    if pool is None:
        pool = TaskPool(workers=config.workers, throttle=config.throttle)
    ops = OperatorHierarchy(mesh, problem.material, mode=config.assembly, C=config.termination_c,
                            n_max=config.n_max, threshold=config.compression_threshold,
                            transfer=config.transfer, coarse_policy=config.coarse_recompute,
                            pool=pool)
    return AdditiveSolver(mesh, problem, config.solver_config(), ops, amr=config.amr_config(),
                          record_time=config.record_time)


def run_experiment(config: ExperimentConfig, output: Optional[str] = None,
                   callback=None) -> RunResult:
    """Run one configuration and write its telemetry CSV.

    ``output`` overrides ``config.output``; pass ``"-"`` to skip writing.
    """
    if config.experiment == "sweep":
        raise ConfigError("use run_sweep for experiment = sweep")
    solver = build_solver(config)
    try:
        solver.run(callback)
    finally:
        solver.ops.finish()
    result = RunResult(config, solver.status, solver.reports,
                       solver.problem.material.describe(), solver)
    path = config.output if output is None else output
    if path and path != "-":
        write_csv(path, result.rows(), TELEMETRY_COLUMNS)
    logger.info("%s after %d cycles", result.status.value, len(result.reports))
    return result


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def write_csv(path, rows: Sequence[Mapping], columns: Sequence[str]):
    text = csv_text(rows, columns)
    Path(path).write_text(text)


def csv_text(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format(row[c]) for c in columns])
    return buf.getvalue()


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: no telemetry rows")
    return rows


# -- memory-footprint report --------------------------------------------------------------

def table_config(theta: float, depth: int = 3, cycles: int = 10, **overrides) -> ExperimentConfig:
    """Configuration of one column block of the memory-footprint table."""
    values = dict(setup="theta", theta=theta, depth=depth, assembly="adaptive",
                  max_cycles=cycles, target=1e-30, output="-")
    values.update(overrides)
    return ExperimentConfig(**values)


def run_table(thetas: Sequence[float] = (1, 16, 64), depth: int = 3, cycles: int = 10,
              **overrides) -> Dict[float, List[CycleReport]]:
    out = {}
    for theta in thetas:
        out[theta] = run_experiment(table_config(theta, depth, cycles, **overrides), output="-").reports
    return out


def emit_table(runs: Mapping[float, Sequence], mean_column: bool = True) -> str:
    """Per-cycle max n, avg n and compression factor for each theta.

    ``runs`` maps theta to reports or telemetry rows. The factor column uses
    total uncompressed over total stored bytes; ``mean`` is the mean of the
    per-cell ratios.
    """
    thetas = list(runs)
    header = ["cycle"]
    for t in thetas:
        tag = f"theta={t:g}" if isinstance(t, (int, float)) else str(t)
        header += [f"max n {tag}", f"avg n {tag}", f"factor {tag}"]
        if mean_column:
            header.append(f"mean {tag}")
    rows = []
    length = max(len(runs[t]) for t in thetas)
    for i in range(length):
        row = [str(i + 1)]
        for t in thetas:
            seq = runs[t]
            if i >= len(seq):
                row += [""] * (4 if mean_column else 3)
                continue
            r = _as_row(seq[i])
            row += [str(int(r["max_n"])), f"{float(r['avg_n']):.2f}", f"{float(r['compression']):.2f}"]
            if mean_column:
                row.append(f"{float(r['compression_mean']):.2f}")
        rows.append(row)
    widths = [max(len(header[c]), *(len(r[c]) for r in rows)) for c in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def _as_row(item) -> Mapping:
    return item.row() if isinstance(item, CycleReport) else item


# -- comparison -----------------------------------------------------------------------------

@dataclass
class RunSummary:
    problem: str
    cycles: int
    cycles_to_target: Optional[int]
    updates_to_target: Optional[int]
    time_to_target: Optional[float]
    final_residual: float
    status: str


def summarize(rows: Sequence[Mapping], target: float = 1e-10) -> RunSummary:
    hit = next((r for r in rows if float(r["normalized"]) <= target), None)
    wall = np.cumsum([float(r["wall"]) for r in rows])
    timed = wall[-1] > 0
    k = rows.index(hit) if hit is not None else None
    return RunSummary(
        problem=rows[0]["problem"], cycles=len(rows),
        cycles_to_target=int(hit["cycle"]) if hit is not None else None,
        updates_to_target=int(hit["cumulative_updates"]) if hit is not None else None,
        time_to_target=float(wall[k]) if hit is not None and timed else None,
        final_residual=float(rows[-1]["normalized"]), status=rows[-1]["status"])


def compare_runs(path_a, path_b, target: float = 1e-10) -> Dict[str, dict]:
    """Cycles, DoF updates and time to ``target`` for two telemetry files."""
    rows_a, rows_b = read_csv(path_a), read_csv(path_b)
    if rows_a[0]["problem"] != rows_b[0]["problem"]:
        raise ConfigError(f"runs solve different problems: {rows_a[0]['problem']} vs "
                          f"{rows_b[0]['problem']}")
    a, b = summarize(rows_a, target), summarize(rows_b, target)
    out = {"a": dataclasses.asdict(a), "b": dataclasses.asdict(b)}
    diff = {}
    for key in ("cycles_to_target", "updates_to_target", "time_to_target"):
        va, vb = out["a"][key], out["b"][key]
        diff[key] = None if va is None or vb is None else vb - va
    diff["final_residual_ratio"] = (b.final_residual / a.final_residual
                                    if a.final_residual > 0 else None)
    out["b_minus_a"] = diff
    return out


# -- sweep benchmark ------------------------------------------------------------------------

def forced_cells(level, fraction: float) -> np.ndarray:
    """Leaves nearest to the coordinate axes, ``fraction`` of all leaves."""
    leaves = np.flatnonzero(level.leaf)
    k = int(round(fraction * len(leaves)))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    centres = level.centres()[leaves]
    dist = centres.min(axis=1)
    order = np.lexsort((np.arange(len(leaves)), dist))
    return np.sort(leaves[order[:k]])


def partition(cells: np.ndarray, parts: int) -> List[np.ndarray]:
    """Split cells in stream order into ``parts`` contiguous chunks of near-equal length."""
    return [c for c in np.array_split(np.asarray(cells), parts)]


@dataclass
class SweepResult:
    config: ExperimentConfig
    rows: List[dict]
    forced: int


def run_sweep(config: ExperimentConfig, output: Optional[str] = None) -> SweepResult:
    """Matrix-free grid sweeps with a fixed fraction of cells spawning heavy integrations.

    The finest level is split into contiguous chunks, one per worker. Cells in
    the forced set integrate their element matrix with ``forced_n`` samples per
    axis. Under ``anarchic`` assembly this work goes to the task pool and any
    worker that finished its chunk helps draining it; otherwise the owning
    worker integrates inline before it continues. Timings are informational.
    """
    mesh = build_initial_mesh(config.depth)
    level = mesh.levels[-1]
    material = config.problem().material
    A = integrate_elements(level.cells * level.h, level.h, material, 1)
    x = np.random.Generator(np.random.PCG64(config.seed)).uniform(size=level.n_vertices)
    forced = forced_cells(level, config.forced_task_fraction)
    is_forced = np.zeros(level.n_cells, dtype=bool)
    is_forced[forced] = True
    chunks = partition(np.flatnonzero(level.leaf), config.workers)
    pool = TaskPool(workers=1, throttle=config.throttle)
    sink = np.zeros(level.n_cells)

    def integrate(cells):
        cells = np.asarray(cells, dtype=np.int64)
        M = integrate_elements(level.cells[cells] * level.h, level.h, material, config.forced_n)
        sink[cells] = M[:, 0, 0]

    pool.register(INTEGRATE, lambda payloads: integrate(payloads))
    asynchronous = config.assembly == "anarchic"
    rows = []

    def traverse(worker: int, cells: np.ndarray):
        y = apply_operator(level.corners[cells], A[cells], x)
        heavy = cells[is_forced[cells]]
        if asynchronous:
            pool.spawn_many([Task(INTEGRATE, int(c)) for c in heavy])
        else:
            for c in heavy:
                integrate([c])
        pool.drain(worker=worker)
        return float(y.sum())

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        for s in range(1, config.sweeps + 1):
            pool.begin_cycle()
            before = pool.stats.completed
            t0 = time.perf_counter()
            futures = [executor.submit(traverse, w + 1, c) for w, c in enumerate(chunks)]
            for f in futures:
                f.result()
            elapsed = time.perf_counter() - t0
            counts = [pool.stats.per_worker.get(w + 1, 0) for w in range(config.workers)]
            rows.append(dict(sweep=s, wall=elapsed if config.record_time else 0.0,
                             workers=config.workers, forced_cells=len(forced),
                             tasks_done=pool.stats.completed - before,
                             pending=pool.pending_count(),
                             per_worker=";".join(map(str, counts))))
    pool.shutdown()
    path = config.output if output is None else output
    if path and path != "-":
        write_csv(path, rows, SWEEP_COLUMNS)
    return SweepResult(config, rows, len(forced))
