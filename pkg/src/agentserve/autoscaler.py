"""Look-ahead demand estimation and replica planning."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

from .workflow.analysis import project_graph

DEFAULT_HORIZON = 2
SCALE_DOWN = "ScaleDownOnIdle"
SCALE_UP = "ScaleUp"


@dataclass
class ScalePlan:
    targets: dict = field(default_factory=dict)  # model -> R'
    actions: list = field(default_factory=list)  # (kind, model, count), downs first
    deferred: dict = field(default_factory=dict)  # model -> replicas not granted

    @property
    def empty(self):
        return not self.actions


@dataclass
class ClusterSnapshot:
    """What the planner needs to know about the cluster at one instant."""

    replicas: dict  # model -> provisioned replicas (ready + loading, not draining)
    demand: dict  # model -> tokens
    capacity: dict  # model -> per-replica KV tokens
    service_factor: dict = field(default_factory=dict)
    slot_cost: dict = field(default_factory=dict)
    min_replicas: int = 1
    draining_slots: int = 0  # slots still held by draining replicas


def estimate_imminent_demand(active, horizon, role_models, role_load,
                             include_current=True) -> dict:
    """Expected token demand per model over the next ``horizon`` steps.

    ``role_load`` maps a role to its mean prompt plus output tokens. Every
    annotated request is projected; running invocations add their own load
    when ``include_current``.
    """
    demand = defaultdict(float)
    annotated = sorted((r for r in active if r.annotated), key=lambda r: r.request_id)
    for req in annotated:
        proj = project_graph(req.sys_annotations.predicted_path_regex, req.position, horizon)
        for role, count in proj.items():
            model = role_models.get(role)
            if model is not None:
                demand[model] += count * role_load.get(role, 0.0)
    if include_current:
        for req in annotated:
            model = role_models.get(req.role)
            if model is not None:
                demand[model] += role_load.get(req.role, 0.0)
    for m in set(role_models.values()):
        demand.setdefault(m, 0.0)
    return dict(sorted(demand.items()))


def estimate_replicas(demand, per_replica_capacity, service_factor=1.0) -> int:
    if per_replica_capacity <= 0:
        raise ValueError("per_replica_capacity must be positive")
    if demand <= 0:
        return 0
    return max(0, math.ceil(demand / (per_replica_capacity * max(service_factor, 1e-12)) - 1e-9))


def service_factor(horizon, mean_step_s, mean_service_s) -> float:
    """Request turnovers per horizon, floored at 1."""
    if mean_service_s <= 0:
        return 1.0
    return max(1.0, horizon * mean_step_s / mean_service_s)


def autoscale_cluster(snapshot: ClusterSnapshot, budget: int) -> ScalePlan:
    models = sorted(snapshot.replicas)
    cost = {m: snapshot.slot_cost.get(m, 1) for m in models}
    want = {}
    for m in models:
        need = estimate_replicas(snapshot.demand.get(m, 0.0), snapshot.capacity[m],
                                 snapshot.service_factor.get(m, 1.0))
        want[m] = max(snapshot.min_replicas, need)
    plan = ScalePlan()
    for m in models:
        cur = snapshot.replicas[m]
        if want[m] < cur:
            plan.actions.append((SCALE_DOWN, m, cur - want[m]))
    used = sum(min(snapshot.replicas[m], want[m]) * cost[m] for m in models)
    free = budget - used
    final = {m: min(snapshot.replicas[m], want[m]) for m in models}
    ups = sorted((m for m in models if want[m] > snapshot.replicas[m]),
                 key=lambda m: (-snapshot.demand.get(m, 0.0), m))
    for m in ups:
        extra = want[m] - snapshot.replicas[m]
        grant = max(0, min(extra, free // cost[m]))
        if grant:
            plan.actions.append((SCALE_UP, m, grant))
            free -= grant * cost[m]
        final[m] = snapshot.replicas[m] + grant
        if grant < extra:
            plan.deferred[m] = extra - grant
    plan.targets = final
    return plan
