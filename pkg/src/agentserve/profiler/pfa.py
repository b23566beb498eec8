"""Trace records and the probabilistic automaton mined from them."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

START = "START"
TERMINAL = "TERMINAL"


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    workflow_type_id: str
    workflow_id: str
    step_index: int
    parent_step: int | None
    role_id: str
    prompt_len: int
    output_len: int
    start_time: float
    end_time: float

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        parent = d.get("parent_step")
        return cls(str(d["workflow_type_id"]), str(d["workflow_id"]), int(d["step_index"]),
                   None if parent is None else int(parent), str(d["role_id"]),
                   int(d["prompt_len"]), int(d["output_len"]),
                   float(d["start_time"]), float(d["end_time"]))


def validate_trace(records):
    if not records:
        raise TraceError("empty trace")
    wid = records[0].workflow_id
    prev = None
    for r in records:
        if r.workflow_id != wid:
            raise TraceError(f"mixed workflows in one trace: {wid!r} and {r.workflow_id!r}")
        if prev is not None and r.step_index <= prev:
            raise TraceError(f"step_index not strictly increasing at {r.step_index}")
        if r.parent_step is not None and r.parent_step >= r.step_index:
            raise TraceError(f"parent_step {r.parent_step} does not precede step {r.step_index}")
        prev = r.step_index


def collapse_groups(records):
    """Visits as (role, size): concurrent same-role siblings form one visit."""
    visits = []
    cur = None  # [role, parent, end, size]
    for r in records:
        if (cur is not None and r.role_id == cur[0] and r.parent_step is not None
                and r.parent_step == cur[1] and r.start_time < cur[2]):
            cur[2] = max(cur[2], r.end_time)
            cur[3] += 1
            continue
        if cur is not None:
            visits.append((cur[0], cur[3]))
        cur = [r.role_id, r.parent_step, r.end_time, 1]
    if cur is not None:
        visits.append((cur[0], cur[3]))
    return visits


def runs(roles):
    """Run-length encode a role sequence: [(role, run_length), ...]."""
    out = []
    for role in roles:
        if out and out[-1][0] == role:
            out[-1][1] += 1
        else:
            out.append([role, 1])
    return [(r, n) for r, n in out]


@dataclass
class Pfa:
    transition_counts: Counter = field(default_factory=Counter)
    repetition_stats: dict = field(default_factory=lambda: defaultdict(Counter))
    fanout_stats: dict = field(default_factory=lambda: defaultdict(Counter))
    group_sizes: dict = field(default_factory=lambda: defaultdict(Counter))
    path_counts: Counter = field(default_factory=Counter)  # run-collapsed visit sequences
    n_traces: int = 0
    degraded: bool = False

    @property
    def states(self):
        out = {START, TERMINAL}
        for s, t in self.transition_counts:
            out.add(s)
            out.add(t)
        return out

    def successors(self, state):
        return {t: c for (s, t), c in self.transition_counts.items() if s == state and c > 0}

    def probabilities(self):
        totals = Counter()
        for (s, _), c in self.transition_counts.items():
            totals[s] += c
        return {(s, t): c / totals[s] for (s, t), c in self.transition_counts.items() if c > 0}

    def copy(self):
        return Pfa(Counter(self.transition_counts),
                   _copy_stats(self.repetition_stats), _copy_stats(self.fanout_stats),
                   _copy_stats(self.group_sizes), Counter(self.path_counts),
                   self.n_traces, self.degraded)

    def ingest(self, records):
        """Add one completed workflow's records."""
        validate_trace(records)
        visits = collapse_groups(records)
        roles = [r for r, _ in visits]
        for role, size in visits:
            self.group_sizes[role][size] += 1
            if size >= 2:
                self.fanout_stats[role][size] += 1
        seq = [START] + roles + [TERMINAL]
        for a, b in zip(seq, seq[1:]):
            self.transition_counts[(a, b)] += 1
        encoded = runs(roles)
        for role, n in encoded:
            self.repetition_stats[role][n] += 1
        self.path_counts[tuple(r for r, _ in encoded)] += 1
        self.n_traces += 1
        return self

    def to_json(self):
        return {
            "transitions": [[s, t, c] for (s, t), c in sorted(self.transition_counts.items())],
            "repetition_stats": _stats_json(self.repetition_stats),
            "fanout_stats": _stats_json(self.fanout_stats),
            "group_sizes": _stats_json(self.group_sizes),
            "paths": [[list(p), c] for p, c in sorted(self.path_counts.items())],
            "n_traces": self.n_traces,
            "degraded": self.degraded,
        }

    @classmethod
    def from_json(cls, d):
        p = cls()
        for s, t, c in d["transitions"]:
            p.transition_counts[(s, t)] = int(c)
        p.repetition_stats = _stats_from(d["repetition_stats"])
        p.fanout_stats = _stats_from(d["fanout_stats"])
        p.group_sizes = _stats_from(d["group_sizes"])
        p.path_counts = Counter({tuple(path): int(c) for path, c in d["paths"]})
        p.n_traces = int(d["n_traces"])
        p.degraded = bool(d.get("degraded", False))
        return p


def _copy_stats(stats):
    out = defaultdict(Counter)
    for k, v in stats.items():
        out[k] = Counter(v)
    return out


def _stats_json(stats):
    return {k: {str(n): c for n, c in sorted(v.items())} for k, v in sorted(stats.items()) if v}


def _stats_from(d):
    out = defaultdict(Counter)
    for k, v in d.items():
        out[k] = Counter({int(n): int(c) for n, c in v.items()})
    return out


def ingest_trace(records, pfa: Pfa | None = None) -> Pfa:
    pfa = pfa if pfa is not None else Pfa()
    return pfa.ingest(list(records))


def _reaches(edges, src, dst):
    adj = defaultdict(list)
    for s, t in edges:
        adj[s].append(t)
    seen, stack = {src}, [src]
    while stack:
        for t in adj[stack.pop()]:
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return dst in seen


def _drop_orphans(counts):
    while True:
        targets = {t for (s, t) in counts}
        orphans = {s for (s, _) in counts if s != START and s not in targets}
        if not orphans:
            return counts
        counts = Counter({(s, t): c for (s, t), c in counts.items() if s not in orphans})


def filter_pfa(pfa: Pfa, theta: float = 0.05) -> Pfa:
    """Drop transitions with probability below ``theta`` and orphaned states.

    If that disconnects TERMINAL from START the most probable removed edges
    are restored one at a time and the result is flagged degraded.
    """
    if not 0.0 <= theta < 1.0:
        raise ValueError("theta must be in [0, 1)")
    probs = pfa.probabilities()
    kept = Counter({e: c for e, c in pfa.transition_counts.items() if c > 0 and probs[e] >= theta})
    removed = sorted((e for e in probs if probs[e] < theta), key=lambda e: (-probs[e], e))
    out = pfa.copy()
    degraded = pfa.degraded
    if pfa.n_traces and not _reaches(kept, START, TERMINAL):
        for e in removed:
            kept[e] = pfa.transition_counts[e]
            degraded = True
            if _reaches(kept, START, TERMINAL):
                break
    out.transition_counts = _drop_orphans(kept)
    out.degraded = degraded
    return out


def read_traces(path):
    """Parse an NDJSON trace file.

    Returns (records, errors) where errors are (line number, message) for
    lines that could not be parsed; those lines are skipped.
    """
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(TraceRecord.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                errors.append((lineno, str(exc)))
    return records, errors


def write_traces(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def group_by_workflow(records):
    """Split records into per-workflow traces sorted by step_index."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.workflow_type_id, r.workflow_id)].append(r)
    return [sorted(g, key=lambda r: r.step_index) for _, g in sorted(groups.items())]
