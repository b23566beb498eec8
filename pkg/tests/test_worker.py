import random
from dataclasses import dataclass

import pytest

from agentserve.worker import (
    WorkerQueue, effective_priority, form_batch, select_preemption_victim,
)


@dataclass
class R:
    request_id: str
    base_priority: float = 0.0
    enqueue_time: float = 0.0
    cost: int = 1


def test_effective_priority():
    assert effective_priority(R("a", 1.0, 10.0), 10.0) == 1.0
    assert effective_priority(R("a", 1.0, 0.0), 50.0, aging_rate=0.01) == pytest.approx(1.5)


def test_older_request_wins_on_equal_base():
    old, new = R("b", 1.0, 0.0), R("a", 1.0, 5.0)
    assert effective_priority(old, 10.0) > effective_priority(new, 10.0)


def test_empty_pool():
    q = WorkerQueue()
    assert form_batch(q, 0.0, 100, lambda r: r.cost) == [] and not q.active


def test_greedy_prefix():
    q = WorkerQueue()
    for r in (R("a", 0.9, 0, 40), R("b", 0.5, 0, 40), R("c", 0.1, 0, 40)):
        q.push(r)
    got = q.form_batch(0.0, 100, lambda r: r.cost)
    assert [r.request_id for r in got] == ["a", "b"]
    assert [r.request_id for r in q.pool] == ["c"] and set(q.active) == {"a", "b"}


def test_head_of_queue_not_overtaken():
    q = WorkerQueue()
    for r in (R("big", 0.9, 0, 90), R("small", 0.1, 0, 5)):
        q.push(r)
    assert q.form_batch(0.0, 50, lambda r: r.cost) == []


def test_near_terminal_admitted_first():
    q = WorkerQueue()
    for i in range(10):
        q.push(R(f"early{i}", 1 / 20, float(i), 10))
    q.push(R("verifier", 1.0, 10.0, 10))
    got = q.form_batch(10.0, 10, lambda r: r.cost)
    assert [r.request_id for r in got] == ["verifier"]


def test_fcfs_mode_ignores_priority():
    q = WorkerQueue(fcfs=True)
    for r in (R("late", 5.0, 2.0), R("early", 0.0, 1.0)):
        q.push(r)
    assert [r.request_id for r in q.ordered(3.0)] == ["early", "late"]


def test_eligibility_filter():
    q = WorkerQueue()
    for r in (R("a", 1.0, 0.0), R("b", 0.5, 0.04)):
        q.push(r)
    got = q.form_batch(0.05, 10, lambda r: r.cost, eligible=lambda r: r.enqueue_time < 0.01)
    assert [r.request_id for r in got] == ["a"]


def test_batch_never_exceeds_budget_randomized():
    rng = random.Random(0)
    for _ in range(500):
        q = WorkerQueue()
        for i in range(rng.randint(0, 8)):
            q.push(R(f"r{i}", rng.random(), rng.random(), rng.randint(1, 50)))
        budget = rng.randint(0, 120)
        expected, left = [], budget
        for r in q.ordered(1.0):
            if r.cost > left:
                break
            left -= r.cost
            expected.append(r.request_id)
        got = q.form_batch(1.0, budget, lambda r: r.cost)
        assert [r.request_id for r in got] == expected
        assert sum(r.cost for r in got) <= budget


def test_victim_examples():
    only = R("x", 0.3)
    assert select_preemption_victim([only], 0.0) is only
    lo, hi = R("lo", 0.1), R("hi", 0.9)
    assert select_preemption_victim([hi, lo], 0.0) is lo


def test_victim_argmin_randomized():
    rng = random.Random(1)
    for _ in range(500):
        active = [R(f"r{i}", rng.choice([0.1, 0.2, 0.5]), rng.choice([0.0, 1.0, 2.0]))
                  for i in range(rng.randint(1, 6))]
        v = select_preemption_victim(active, 3.0)
        assert effective_priority(v, 3.0) == min(effective_priority(r, 3.0) for r in active)


def test_victim_fcfs_is_latest():
    a, b = R("a", 9.0, 1.0), R("b", 0.0, 0.5)
    assert select_preemption_victim([a, b], 2.0, fcfs=True) is a


def test_victim_requires_active():
    with pytest.raises(ValueError):
        select_preemption_victim([], 0.0)


def test_aging_is_unbounded():
    waiting, fresh = R("w", 0.0, 0.0), R("f", 10.0, 1e4)
    assert effective_priority(waiting, 1e4, 0.02) > 0
    assert effective_priority(waiting, 1e3 + 1e4, 0.02) > effective_priority(fresh, 1e3 + 1e4, 0.02)
