"""Run metrics: accumulation during simulation and the serializable report."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

from ..profiler.intervals import nearest_rank


def mean(xs):
    return float(sum(xs) / len(xs)) if xs else 0.0


def p95(xs):
    return float(nearest_rank(sorted(xs), 0.95)) if xs else 0.0


class DepthTracker:
    """Time-weighted queue depth per model plus a per-second sampled series."""

    def __init__(self, models):
        self.models = sorted(models)
        self.waiting = {m: 0.0 for m in self.models}
        self.outstanding = {m: 0.0 for m in self.models}
        self.series = []  # (second, model, waiting, outstanding)
        self.last = 0.0
        self.next_sample = 0

    def advance(self, t, counts):
        """Account for the interval [last, t) during which ``counts()`` held."""
        if t <= self.last:
            return
        snap = counts()
        dt = t - self.last
        for m in self.models:
            w, o = snap.get(m, (0, 0))
            self.waiting[m] += w * dt
            self.outstanding[m] += o * dt
        while self.next_sample < t:
            if self.next_sample >= self.last:
                for m in self.models:
                    w, o = snap.get(m, (0, 0))
                    self.series.append((self.next_sample, m, w, o))
            self.next_sample += 1
        self.last = t

    def means(self, horizon):
        """Time averages over ``horizon`` plus the raw integrals (request-seconds)."""
        h = horizon if horizon > 0 else 1.0
        return {m: {"waiting": self.waiting[m] / h, "outstanding": self.outstanding[m] / h,
                    "waiting_area": self.waiting[m], "outstanding_area": self.outstanding[m]}
                for m in self.models}


@dataclass
class MetricsReport:
    summary: dict
    queue_series: list = field(default_factory=list)
    jct_samples: list = field(default_factory=list)

    def to_json(self):
        return self.summary

    def dumps(self):
        return json.dumps(self.summary, sort_keys=True, indent=1, allow_nan=False)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps() + "\n")

    def write_queue_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["second", "model", "waiting", "outstanding"])
            w.writerows(self.queue_series)

    def write_jct_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["workflow_id", "jct_s"])
            w.writerows(self.jct_samples)

    def __getitem__(self, key):
        return self.summary[key]


def clean(x):
    """Recursively replace non-finite floats so reports stay strict JSON."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [clean(v) for v in x]
    return x
