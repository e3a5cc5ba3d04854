import threading
import time

import pytest

from lazymg.scheduler import COARSE, HIGH, INTEGRATE, LOW, Task, TaskPool


def recording_pool(**kw):
    pool = TaskPool(**kw)
    log = []
    lock = threading.Lock()

    def handler(payloads):
        with lock:
            log.extend(payloads)

    pool.register(INTEGRATE, handler)
    pool.register(COARSE, handler)
    return pool, log


def test_empty_pool_and_spawn_counts():
    pool, _ = recording_pool()
    assert pool.pending_count() == 0
    for i in range(5):
        assert pool.spawn(Task(INTEGRATE, i))
    assert pool.pending_count() == 5
    assert pool.pending_count(COARSE) == 0


def test_single_worker_drain_is_fifo_within_priority():
    pool, log = recording_pool()
    pool.spawn_many([Task(INTEGRATE, i) for i in range(10)])
    assert pool.drain() == 10
    assert log == list(range(10))
    assert pool.pending_count() == 0


def test_high_priority_first():
    pool, log = recording_pool()
    pool.spawn_many([Task(INTEGRATE, f"low{i}") for i in range(3)])
    pool.spawn(Task(COARSE, "high", priority=HIGH))
    pool.drain()
    assert log[0] == "high"
    assert log[1:] == ["low0", "low1", "low2"]


def test_throttle_limits_background_tasks_per_cycle():
    pool, log = recording_pool(throttle=2)
    pool.spawn_many([Task(INTEGRATE, i) for i in range(5)])
    pool.spawn(Task(COARSE, "c", priority=HIGH))
    pool.begin_cycle()
    pool.drain()
    assert log == ["c", 0, 1]
    pool.drain()
    assert len(log) == 3
    pool.begin_cycle()
    pool.drain()
    assert log[3:] == [2, 3]


def test_throttle_zero_starves_low_but_not_high():
    pool, log = recording_pool(throttle=0)
    pool.spawn(Task(INTEGRATE, "low"))
    pool.begin_cycle()
    pool.run_priority(COARSE, "coarse")
    pool.drain()
    assert log == ["coarse"]
    assert pool.pending_count() == 1


def test_drain_limit_keeps_order():
    pool, log = recording_pool()
    pool.spawn_many([Task(INTEGRATE, i) for i in range(6)])
    assert pool.drain(limit=2) == 2
    assert pool.drain() == 4
    assert log == list(range(6))


def test_multi_worker_completes_everything():
    with TaskPool(workers=4) as pool:
        done = []
        lock = threading.Lock()

        def handler(payloads):
            time.sleep(0.0005)
            with lock:
                done.extend(payloads)

        pool.register(INTEGRATE, handler)
        pool.spawn_many([Task(INTEGRATE, i) for i in range(1000)])
        assert pool.wait_idle(timeout=30)
        assert sorted(done) == list(range(1000))
        assert pool.pending_count() == 0
        stats = pool.stats
        assert stats.spawned == stats.completed + pool.in_flight() == 1000
        assert sum(stats.per_worker.values()) == 1000


def test_run_priority_returns_after_execution_with_threads():
    with TaskPool(workers=2) as pool:
        seen = []
        pool.register(COARSE, lambda p: seen.extend(p))
        pool.run_priority(COARSE, "x")
        assert seen == ["x"]


def test_shutdown_rejects_new_tasks():
    pool, _ = recording_pool()
    pool.shutdown()
    assert not pool.spawn(Task(INTEGRATE, 1))
    assert pool.spawn_many([Task(INTEGRATE, 2)]) == 0
    assert pool.stats.rejected == 2
    with pytest.raises(RuntimeError):
        pool.run_priority(COARSE, 1)


def test_handler_errors_do_not_lose_accounting():
    pool = TaskPool()

    def boom(payloads):
        raise RuntimeError("boom")

    pool.register(INTEGRATE, boom)
    pool.spawn(Task(INTEGRATE, 1))
    with pytest.raises(RuntimeError):
        pool.drain()
    assert pool.in_flight() == 0 and pool.stats.completed == 1


def test_invalid_configuration():
    with pytest.raises(ValueError):
        TaskPool(workers=0)
    with pytest.raises(ValueError):
        TaskPool(throttle=-1)
    assert LOW < HIGH


def test_worker_survives_failing_task():
    with TaskPool(workers=2) as pool:
        seen = []

        def handler(payloads):
            if "bad" in payloads:
                raise RuntimeError("bad payload")
            seen.extend(payloads)

        pool.register(INTEGRATE, handler)
        pool.spawn(Task(INTEGRATE, "bad"))
        assert pool.wait_idle(timeout=10)
        pool.spawn_many([Task(INTEGRATE, i) for i in range(20)])
        assert pool.wait_idle(timeout=10)
        assert sorted(seen) == list(range(20))
        assert pool.stats.failed == 1
