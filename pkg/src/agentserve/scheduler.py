"""Cluster ingress: statistical capacity routing and base-priority assignment."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .workflow.analysis import expected_distance, expected_remaining, reachable_roles

DEFAULT_EPSILON = 0.05
DEFAULT_IDLE_THRESHOLD = 2


@dataclass(frozen=True)
class RoutingDecision:
    target: int | None  # replica id, None = wait at ingress
    headroom: float = 0.0
    oom_bound: float = 0.0
    cache_tiebreak_used: bool = False


@dataclass(frozen=True)
class PriorityScore:
    s_completion: float
    s_unblock: float
    omega1: float = 1.0
    omega2: float = 1.0

    @property
    def base_priority(self):
        return self.omega1 * self.s_completion + self.omega2 * self.s_unblock


def output_bound(req, default_max: int) -> int:
    """Upper output-length estimate u; unprofiled requests get the global max."""
    return int(req.sys_annotations.u) if req.annotated else int(default_max)


def exceedance(req) -> float:
    return float(req.sys_annotations.alpha) if req.annotated else 0.0


def reservation(req, default_max: int) -> int:
    return int(req.prompt_len) + output_bound(req, default_max)


def capacity_holds(node, req) -> bool:
    """Reservations of everything assigned to ``node`` plus ``req`` fit its KV capacity."""
    return node.reserved_tokens + reservation(req, node.max_output_len) <= node.kv_capacity


def oom_bound(node, req) -> float:
    """Union bound on the chance that any assigned request outgrows its reservation."""
    return node.alpha_sum + exceedance(req)


def route(req, nodes, epsilon: float = DEFAULT_EPSILON, prompt_tokens=None) -> RoutingDecision:
    """Safest replica with the most headroom; ties go to the best L2 staging."""
    safe = []
    for node in nodes:
        if not capacity_holds(node, req):
            continue
        bound = oom_bound(node, req)
        if bound > epsilon + 1e-12:
            continue
        headroom = node.kv_capacity - node.reserved_tokens - reservation(req, node.max_output_len)
        safe.append((headroom, node, bound))
    if not safe:
        return RoutingDecision(None)
    top = max(h for h, _, _ in safe)
    tied = [(n, b) for h, n, b in safe if h == top]
    used = False
    if len(tied) > 1 and prompt_tokens is not None:
        staged = [(n.cache.staged_prefix(prompt_tokens), -n.replica_id, n, b) for n, b in tied]
        best = max(staged, key=lambda x: (x[0], x[1]))
        node, bound, used = best[2], best[3], best[0] > 0
    else:
        node, bound = min(tied, key=lambda nb: nb[0].replica_id)
    return RoutingDecision(node.replica_id, float(top), float(bound), used)


def route_least_outstanding(req, nodes) -> RoutingDecision:
    """Reactive baseline: fewest outstanding requests, lowest id on ties."""
    if not nodes:
        return RoutingDecision(None)
    node = min(nodes, key=lambda n: (n.outstanding, n.replica_id))
    return RoutingDecision(node.replica_id)


def expected_remaining_distance(req) -> float:
    if not req.annotated:
        return 1.0
    return expected_remaining(req.position)


def downstream_idle_risk(queues, req, role_models, idle_threshold=DEFAULT_IDLE_THRESHOLD):
    """Sum of 1/E[D_a] over future roles whose model queue is nearly empty."""
    if not req.annotated:
        return 0.0
    risk = 0.0
    for role in sorted(reachable_roles(req.position)):
        model = role_models.get(role)
        if model is None or queues.get(model, 0) >= idle_threshold:
            continue
        d = expected_distance(req.position, role)
        if d:
            risk += 1.0 / d
    return risk


def set_priority(req, queues, role_models, omega1=1.0, omega2=1.0,
                 idle_threshold=DEFAULT_IDLE_THRESHOLD) -> PriorityScore:
    if not req.annotated:
        score = PriorityScore(0.0, 0.0, omega1, omega2)
    else:
        d = max(1.0, expected_remaining_distance(req))
        score = PriorityScore(1.0 / d, downstream_idle_risk(queues, req, role_models,
                                                            idle_threshold), omega1, omega2)
    req.base_priority = score.base_priority
    return score


class RoutingLog:
    """JSON-lines record of routing decisions."""

    def __init__(self):
        self.entries = []

    def record(self, now, req, decision: RoutingDecision):
        self.entries.append({"time": now, "request_id": req.request_id,
                             "target": decision.target, "headroom": decision.headroom,
                             "oom_bound": decision.oom_bound,
                             "tiebreak": decision.cache_tiebreak_used})

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


__all__ = ["RoutingDecision", "PriorityScore", "capacity_holds", "oom_bound", "route",
           "route_least_outstanding", "downstream_idle_risk", "set_priority",
           "expected_remaining_distance", "reservation", "output_bound", "RoutingLog"]
