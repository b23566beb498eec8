"""Per-replica batch formation with priority aging and preemption victims."""

from __future__ import annotations

from dataclasses import dataclass, field

DEFAULT_WINDOW_S = 0.05
DEFAULT_AGING_RATE = 0.02


def effective_priority(req, now, aging_rate=DEFAULT_AGING_RATE) -> float:
    return req.base_priority + aging_rate * (now - req.enqueue_time)


def _order_key(req, now, aging_rate, fcfs):
    if fcfs:
        return (req.enqueue_time, req.request_id)
    return (-effective_priority(req, now, aging_rate), req.enqueue_time, req.request_id)


@dataclass
class WorkerQueue:
    aging_rate: float = DEFAULT_AGING_RATE
    window: float = DEFAULT_WINDOW_S
    fcfs: bool = False
    pool: list = field(default_factory=list)
    active: dict = field(default_factory=dict)

    def push(self, req):
        self.pool.append(req)

    def ordered(self, now):
        return sorted(self.pool, key=lambda r: _order_key(r, now, self.aging_rate, self.fcfs))

    def form_batch(self, now, budget, cost, eligible=None):
        """Greedy prefix of the ordered pool whose summed ``cost`` fits ``budget``.

        Stops at the first request that does not fit, so a large request at
        the head is never overtaken. ``eligible`` filters the pool first
        (e.g. requests that arrived after the current window started).
        Admitted requests move to ``active``.
        """
        admitted = []
        for req in self.ordered(now):
            if eligible is not None and not eligible(req):
                continue
            c = cost(req)
            if c > budget:
                break
            budget -= c
            admitted.append(req)
        if admitted:
            ids = {id(r) for r in admitted}
            self.pool = [r for r in self.pool if id(r) not in ids]
            for r in admitted:
                self.active[r.request_id] = r
        return admitted

    def select_preemption_victim(self, now):
        return select_preemption_victim(list(self.active.values()), now, self.aging_rate,
                                        self.fcfs)


def form_batch(queue: WorkerQueue, now, budget, cost, eligible=None):
    return queue.form_batch(now, budget, cost, eligible)


def select_preemption_victim(active, now, aging_rate=DEFAULT_AGING_RATE, fcfs=False):
    """Lowest effective priority (latest arrival in FCFS mode)."""
    if not active:
        raise ValueError("no active request to preempt")
    if fcfs:
        return max(active, key=lambda r: (r.enqueue_time, r.request_id))
    return min(active, key=lambda r: (effective_priority(r, now, aging_rate),
                                      -r.enqueue_time, _neg(r.request_id)))


def _neg(s):
    # later ids lose ties: invert lexical order
    return tuple(-ord(c) for c in s)
