"""Per-role output-length statistics and high-confidence bounds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

LOW_QUANTILE = 0.05


def nearest_rank(sorted_values, q):
    """The ceil(q*n)-th order statistic (1-based) of an ascending sequence."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("no samples")
    k = max(1, math.ceil(q * n - 1e-9))
    return sorted_values[min(k, n) - 1]


def counter_quantile(counter, q):
    """Nearest-rank quantile of a {value: count} multiset."""
    total = sum(counter.values())
    k = max(1, math.ceil(q * total - 1e-9))
    acc = 0
    for v in sorted(counter):
        acc += counter[v]
        if acc >= k:
            return v
    raise ValueError("empty multiset")


@dataclass(frozen=True)
class AgentProfile:
    role_id: str
    mean_len: float
    cv: float
    lo: int
    u: int
    alpha: float
    sample_count: int
    unprofiled: bool = False

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def length_interval(samples, confidence: float = 0.99, role_id: str = "") -> AgentProfile:
    """Distribution-free interval [p5, u] with u the nearest-rank quantile."""
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must be in (0, 1)")
    xs = np.sort(np.asarray(samples, dtype=np.float64))
    if xs.size == 0:
        raise ValueError("length_interval needs at least one sample; use cold_start_profile")
    mean = float(xs.mean())
    cv = float(xs.std() / mean) if mean > 0 else 0.0
    return AgentProfile(role_id, mean, cv, int(nearest_rank(xs, LOW_QUANTILE)),
                        int(nearest_rank(xs, confidence)), 1.0 - confidence, int(xs.size))


def cold_start_profile(role_id: str, max_len: int, confidence: float = 0.99) -> AgentProfile:
    """Placeholder for a role with no history: reserve the global maximum."""
    return AgentProfile(role_id, float(max_len), 0.0, 0, int(max_len), 1.0 - confidence, 0,
                        unprofiled=True)
