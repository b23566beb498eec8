"""Workflow definitions, arrival processes and synthetic warm-up traces.

Template placeholders may name ``system.<role>`` (a fixed per-role system
prompt shared by every workflow), ``task`` (the workflow's input) or a
selector such as ``last.engineer``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from ..profiler.pfa import TraceRecord
from ..workflow.pathexpr import PathExpr, expr_from_json, parse_path_expr
from ..workflow.prompt import parse_template
from ..workflow.sampling import sample_steps
from .config import ConfigError, _need


@dataclass(frozen=True)
class Dist:
    kind: str = "lognormal"  # lognormal | fixed
    mean: float = 1.0
    cv: float = 0.0

    def sample(self, rng):
        if self.kind == "fixed" or self.cv <= 0:
            return self.mean
        s2 = math.log(1.0 + self.cv ** 2)
        return float(rng.lognormal(math.log(self.mean) - s2 / 2, math.sqrt(s2)))

    def quantile(self, q):
        """Exact quantile (used to build truthful profiles)."""
        if self.kind == "fixed" or self.cv <= 0:
            return self.mean
        from statistics import NormalDist

        s2 = math.log(1.0 + self.cv ** 2)
        z = NormalDist().inv_cdf(q)
        return math.exp(math.log(self.mean) - s2 / 2 + math.sqrt(s2) * z)


@dataclass(frozen=True)
class RoleDef:
    model: str
    output: Dist
    tool_delay: Dist | None = None
    template: str = ""
    followup: str | None = None
    system_len: int = 300


@dataclass(frozen=True)
class WorkflowDef:
    type_id: str
    expression: PathExpr
    roles: dict
    task_len: int = 1000
    weight: float = 1.0


@dataclass(frozen=True)
class ArrivalSpec:
    rate: float = 1.0  # workflows per second
    cv: float = 1.0
    cron_period: float | None = None
    cron_batch: int | None = None

    def release_times(self, n, rng):
        if self.cron_period:
            batch = self.cron_batch or n
            return [float((i // batch) * self.cron_period) for i in range(n)]
        if n == 0:
            return []
        mean = 1.0 / self.rate
        cv = self.cv
        if cv <= 0:
            gaps = np.full(n, mean)
        elif abs(cv - 1.0) < 1e-12:
            gaps = rng.exponential(mean, n)
        elif cv < 1.0:
            k = 1.0 / cv ** 2
            gaps = rng.gamma(k, mean / k, n)
        else:
            # balanced-means two-phase hyperexponential
            c2 = cv ** 2
            p = 0.5 * (1.0 + math.sqrt((c2 - 1.0) / (c2 + 1.0)))
            fast = rng.random(n) < p
            gaps = np.where(fast, rng.exponential(mean / (2 * p), n),
                            rng.exponential(mean / (2 * (1 - p)), n))
        times = np.concatenate([[0.0], np.cumsum(gaps[:-1])])
        return [float(t) for t in times]


@dataclass
class WorkloadSpec:
    name: str
    workflows: list
    n_workflows: int = 64
    concurrency: int = 64
    warmup_workflows: int = 200
    arrival: ArrivalSpec = field(default_factory=ArrivalSpec)

    def role_models(self):
        return {role: r.model for wf in self.workflows for role, r in wf.roles.items()}

    def workflow(self, type_id):
        for wf in self.workflows:
            if wf.type_id == type_id:
                return wf
        raise KeyError(type_id)


# -- built-in definitions -----------------------------------------------------------

_TOOL = {"dist": "lognormal", "mean": 10.0, "cv": 1.0}


def _ln(mean, cv):
    return {"dist": "lognormal", "mean": mean, "cv": cv}


CODING_ASSISTANT = {
    "type_id": "coding_assistant",
    "expression": "planner -> (explorer)^{||3,4} -> chronicler -> architect -> (engineer)^{3,6}"
                  " -> reviewer -> (engineer^{2-4} -> reviewer)? -> verifier -> terminal",
    "task_len": 1200,
    "roles": {
        "planner": {"model": "reasoning", "output": _ln(60, 0.15), "system_len": 400,
                    "template": "${system.planner:request:[0,400]} ${task:request:[0,1200]} plan"},
        "explorer": {"model": "code", "output": _ln(1924, 0.45), "tool_delay": _TOOL,
                     "template": "${system.explorer:request:[0,300]} ${task:request:[0,600]}"
                                 " ${last.planner:response:[0,200]} explore"},
        "chronicler": {"model": "reasoning", "output": _ln(912, 0.26),
                       "template": "${system.chronicler:request:[0,300]}"
                                   " ${first.explorer:response:[0,1500]}"
                                   " ${last.explorer:response:[0,1500]} record"},
        "architect": {"model": "reasoning", "output": _ln(1194, 0.22),
                      "template": "${system.architect:request:[0,300]} ${task:request:[0,1200]}"
                                  " ${last.chronicler:response:[0,1200]} design"},
        "engineer": {"model": "code", "output": _ln(3152, 0.45), "tool_delay": _TOOL,
                     "system_len": 400,
                     "template": "${system.engineer:request:[0,400]} ${task:request:[0,1200]}"
                                 " ${last.architect:response:[0,1500]} implement",
                     "followup": "${last.engineer:request:[0,5000]}"
                                 " ${last.engineer:response:[0,2500]} continue"},
        "reviewer": {"model": "reasoning", "output": _ln(2620, 0.18),
                     "template": "${system.reviewer:request:[0,300]} ${task:request:[0,1200]}"
                                 " ${last.engineer:response:[0,3000]} review"},
        "verifier": {"model": "reasoning", "output": _ln(65, 0.16), "tool_delay": _TOOL,
                     "system_len": 200,
                     "template": "${system.verifier:request:[0,200]}"
                                 " ${last.reviewer:response:[0,1500]} verify"},
    },
}

DEEP_RESEARCH = {
    "type_id": "deep_research",
    "expression": "(decomposer -> (researcher)^{||2,4} -> summarizer)^{2,4} -> terminal",
    "task_len": 1500,
    "roles": {
        "decomposer": {"model": "reasoning", "output": _ln(500, 0.3), "system_len": 500,
                       "template": "${system.decomposer:request:[0,500]}"
                                   " ${task:request:[0,1500]} decompose",
                       "followup": "${last.decomposer:request:[0,8000]}"
                                   " ${last.decomposer:response:[0,1000]}"
                                   " ${last.summarizer:response:[0,1200]} next"},
        "researcher": {"model": "worker", "output": _ln(1500, 0.4), "tool_delay": _TOOL,
                       "template": "${system.researcher:request:[0,300]}"
                                   " ${last.decomposer:response:[0,600]} research"},
        "summarizer": {"model": "reasoning", "output": _ln(1000, 0.3),
                       "template": "${system.summarizer:request:[0,300]}"
                                   " ${last.researcher:response:[0,2500]} summarize"},
    },
}

FANOUT_BURST = {
    "type_id": "fanout_burst",
    "expression": "planner -> (explorer)^{||10} -> summarizer -> terminal",
    "task_len": 800,
    "roles": {
        "planner": {"model": "planner_llm", "output": _ln(1500, 0.2),
                    "template": "${system.planner:request:[0,300]} ${task:request:[0,800]} plan"},
        "explorer": {"model": "explorer_llm", "output": _ln(800, 0.3),
                     "template": "${system.explorer:request:[0,300]}"
                                 " ${last.planner:response:[0,300]} explore"},
        "summarizer": {"model": "summarizer_llm", "output": _ln(300, 0.3),
                       "template": "${system.summarizer:request:[0,300]}"
                                   " ${last.explorer:response:[0,800]} summarize"},
    },
}

BUILTINS = {
    "coding_assistant": {"workflows": [CODING_ASSISTANT]},
    "deep_research": {"workflows": [DEEP_RESEARCH]},
    "fanout_burst": {"workflows": [FANOUT_BURST], "arrival": {"cron_period": 300.0,
                                                              "cron_batch": 40}},
}


# -- parsing ----------------------------------------------------------------------


def _dist(d, where):
    if d is None:
        return None
    if isinstance(d, (int, float)):
        return Dist("fixed", float(d), 0.0)
    _need(d, "mean", where)
    kind = d.get("dist", "lognormal")
    if kind not in ("lognormal", "fixed"):
        raise ConfigError(f"{where}.dist must be lognormal or fixed")
    return Dist(kind, float(d["mean"]), float(d.get("cv", 0.0)))


def _workflow(d, where):
    for key in ("type_id", "expression", "roles"):
        _need(d, key, where)
    expr = d["expression"]
    try:
        expr = expr_from_json(expr) if isinstance(expr, dict) else parse_path_expr(expr)
    except ValueError as exc:
        raise ConfigError(f"{where}.expression: {exc}") from exc
    roles = {}
    for role, r in sorted(d["roles"].items()):
        w = f"{where}.roles.{role}"
        for key in ("model", "output", "template"):
            _need(r, key, w)
        try:
            parse_template(r["template"])
            if r.get("followup"):
                parse_template(r["followup"])
        except ValueError as exc:
            raise ConfigError(f"{w}: {exc}") from exc
        roles[role] = RoleDef(r["model"], _dist(r["output"], f"{w}.output"),
                              _dist(r.get("tool_delay"), f"{w}.tool_delay"), r["template"],
                              r.get("followup"), int(r.get("system_len", 300)))
    missing = sorted(set(expr.roles()) - set(roles))
    if missing:
        raise ConfigError(f"{where}: expression roles without definitions: {missing}")
    return WorkflowDef(d["type_id"], expr, roles, int(d.get("task_len", 1000)),
                       float(d.get("weight", 1.0)))


def workload_from(d) -> WorkloadSpec:
    if isinstance(d, WorkloadSpec):
        return d
    if not isinstance(d, dict):
        raise ConfigError("workload must be a mapping")
    merged = {}
    name = d.get("builtin")
    if name is not None:
        if name not in BUILTINS:
            raise ConfigError(f"unknown builtin workload {name!r}; choose from {sorted(BUILTINS)}")
        merged = copy.deepcopy(BUILTINS[name])
    for k, v in d.items():
        if k == "arrival" and isinstance(v, dict):
            merged.setdefault("arrival", {}).update(v)
        elif k != "builtin":
            merged[k] = v
    _need(merged, "workflows", "workload")
    flows = [_workflow(w, f"workload.workflows[{i}]") for i, w in enumerate(merged["workflows"])]
    a = merged.get("arrival", {}) or {}
    arrival = ArrivalSpec(float(a.get("rate", 1.0)), float(a.get("cv", 1.0)),
                          a.get("cron_period"), a.get("cron_batch"))
    return WorkloadSpec(name or flows[0].type_id, flows, int(merged.get("n_workflows", 64)),
                        int(merged.get("concurrency", 64)),
                        int(merged.get("warmup_workflows", 200)), arrival)


# -- synthetic traces ---------------------------------------------------------------


def choose_workflow(spec: WorkloadSpec, rng) -> WorkflowDef:
    if len(spec.workflows) == 1:
        return spec.workflows[0]
    w = np.array([wf.weight for wf in spec.workflows], dtype=float)
    return spec.workflows[int(rng.choice(len(w), p=w / w.sum()))]


def synthetic_trace(wf: WorkflowDef, workflow_id: str, rng, decode_rate=50.0):
    """Records for one execution drawn from the ground-truth definition."""
    records = []
    t = 0.0
    idx = 0
    parent = None
    for role, k in sample_steps(wf.expression, rng):
        rd = wf.roles[role]
        end = t
        for _ in range(k):
            out = max(1, int(round(rd.output.sample(rng))))
            dur = out / decode_rate
            records.append(TraceRecord(wf.type_id, workflow_id, idx, parent, role, 0, out,
                                       t, t + dur))
            end = max(end, t + dur)
            idx += 1
        parent = idx - 1
        t = end + (rd.tool_delay.sample(rng) if rd.tool_delay else 0.0)
    return records
