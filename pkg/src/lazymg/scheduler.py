"""Priority task pool for background operator work.

Tasks are ordered by priority class and then by spawn order. Integration
tasks run at ``LOW`` priority and are subject to a per-cycle throttle;
coarse-operator rebuilds run at ``HIGH`` priority and are never throttled.

With ``workers=1`` no threads are started: the driver calls :meth:`TaskPool.drain`
between cycles, which keeps single-worker runs bit-reproducible. With more
workers, background threads pick tasks up as soon as they are queued.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

logger = logging.getLogger(__name__)

LOW, HIGH = 0, 1
INTEGRATE = "integrate"
COARSE = "coarse-recompute"
DEFAULT_BATCH = 512


@dataclass(frozen=True)
class Task:
    kind: str
    payload: Any
    priority: int = LOW
    epoch: int = 0
    done: Optional[threading.Event] = field(default=None, compare=False, repr=False)


@dataclass
class PoolStats:
    spawned: int = 0
    completed: int = 0
    rejected: int = 0
    failed: int = 0
    per_worker: Counter = field(default_factory=Counter)
    per_kind: Counter = field(default_factory=Counter)


class TaskPool:
    """Thread-safe priority queue plus optional worker threads."""

    def __init__(self, workers: int = 1, throttle: Optional[int] = None,
                 batch: int = DEFAULT_BATCH):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        if throttle is not None and throttle < 0:
            raise ValueError("throttle must be >= 0")
        self.workers = workers
        self.throttle = throttle
        self.batch = max(1, int(batch))
        self.stats = PoolStats()
        self._handlers: Dict[str, Callable[[List[Any]], None]] = {}
        self._heap: list = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._budget = throttle
        self._running = 0
        self._closed = False
        self._threads: List[threading.Thread] = []
        if workers > 1:
            for w in range(workers):
                t = threading.Thread(target=self._worker, args=(w + 1,), daemon=True,
                                     name=f"lazymg-worker-{w + 1}")
                t.start()
                self._threads.append(t)

    # -- registration and submission --------------------------------------------
    def register(self, kind: str, handler: Callable[[List[Any]], None]):
        """``handler`` receives a list of payloads of one kind and runs them."""
        self._handlers[kind] = handler

    def spawn(self, task: Task) -> bool:
        """Queue ``task``; returns False if the pool is shutting down."""
        with self._cond:
            if self._closed:
                self.stats.rejected += 1
                return False
            heapq.heappush(self._heap, (-task.priority, next(self._seq), task))
            self.stats.spawned += 1
            self._cond.notify()
        return True

    def spawn_many(self, tasks: List[Task]) -> int:
        with self._cond:
            if self._closed:
                self.stats.rejected += len(tasks)
                return 0
            for task in tasks:
                heapq.heappush(self._heap, (-task.priority, next(self._seq), task))
            self.stats.spawned += len(tasks)
            self._cond.notify_all()
        return len(tasks)

    def pending_count(self, kind: Optional[str] = None) -> int:
        """Tasks queued but not yet started."""
        with self._cond:
            if kind is None:
                return len(self._heap)
            return sum(1 for _, _, t in self._heap if t.kind == kind)

    def in_flight(self) -> int:
        """Queued plus currently executing tasks."""
        with self._cond:
            return len(self._heap) + self._running

    # -- cycle interaction ----------------------------------------------------------
    def begin_cycle(self):
        """Reset the throttle budget for background tasks."""
        with self._cond:
            self._budget = self.throttle
            self._cond.notify_all()

    def _take(self, high_only: bool, cap: Optional[int] = None) -> List[Task]:
        # caller holds the lock
        cap = self.batch if cap is None else min(cap, self.batch)
        if not self._heap or cap <= 0:
            return []
        top = self._heap[0][2]
        if top.priority < HIGH:
            if high_only or self._budget == 0:
                return []
        taken = []
        kind = top.kind
        while self._heap and len(taken) < cap:
            nxt = self._heap[0][2]
            if nxt.kind != kind or nxt.priority != top.priority:
                break
            if nxt.priority < HIGH:
                if self._budget == 0:
                    break
                if self._budget is not None:
                    self._budget -= 1
            heapq.heappop(self._heap)
            taken.append(nxt)
        self._running += len(taken)
        return taken

    def _execute(self, tasks: List[Task], worker: int):
        groups: Dict[str, List[Task]] = defaultdict(list)
        for t in tasks:
            groups[t.kind].append(t)
        try:
            for kind, group in groups.items():
                handler = self._handlers.get(kind)
                if handler is None:
                    raise KeyError(f"no handler registered for task kind {kind!r}")
                handler([t.payload for t in group])
        finally:
            for t in tasks:
                if t.done is not None:
                    t.done.set()
            with self._cond:
                self._running -= len(tasks)
                self.stats.completed += len(tasks)
                self.stats.per_worker[worker] += len(tasks)
                for t in tasks:
                    self.stats.per_kind[t.kind] += 1
                self._cond.notify_all()

    def drain(self, limit: Optional[int] = None, high_only: bool = False, worker: int = 0) -> int:
        """Run queued tasks on the calling thread, respecting priority and throttle.

        Several threads may drain concurrently; ``worker`` labels the caller in
        the per-worker execution counters.
        """
        done = 0
        while limit is None or done < limit:
            with self._cond:
                tasks = self._take(high_only, None if limit is None else limit - done)
            if not tasks:
                break
            self._execute(tasks, worker)
            done += len(tasks)
        return done

    def run_priority(self, kind: str, payload: Any):
        """Queue a high-priority task and return once it has executed."""
        done = threading.Event()
        task = Task(kind, payload, priority=HIGH, done=done)
        with self._cond:
            if self._closed:
                raise RuntimeError("task pool is shut down")
            heapq.heappush(self._heap, (-HIGH, next(self._seq), task))
            self.stats.spawned += 1
            self._cond.notify_all()
        if not self._threads:
            while not done.is_set():
                if not self.drain(high_only=True):
                    break
        done.wait()

    def wait_idle(self, timeout: Optional[float] = None) -> bool:
        """Block until nothing is queued or running (ignores the throttle)."""
        if not self._threads:
            saved = self._budget
            self._budget = None
            self.drain()
            self._budget = saved
            return True
        with self._cond:
            saved = self._budget
            self._budget = None
            self._cond.notify_all()
            ok = self._cond.wait_for(lambda: not self._heap and self._running == 0, timeout)
            self._budget = saved
            return ok

    def quiesce(self, timeout: Optional[float] = None) -> bool:
        """Wait for running tasks to finish without starting queued ones."""
        with self._cond:
            return self._cond.wait_for(lambda: self._running == 0, timeout)

    def shutdown(self, wait: bool = True):
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        if wait:
            for t in self._threads:
                t.join()

    def _worker(self, worker: int):
        while True:
            with self._cond:
                while True:
                    if self._closed:
                        return
                    tasks = self._take(high_only=False)
                    if tasks:
                        break
                    self._cond.wait()
            try:
                self._execute(tasks, worker)
            except Exception:
                # a failing task must not take the worker down with it
                logger.exception("background task failed on worker %d", worker)
                with self._cond:
                    self.stats.failed += len(tasks)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
