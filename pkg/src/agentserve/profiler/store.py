"""Per-workflow-type profiles and request annotation."""

from __future__ import annotations

import json
import random
import threading
import zlib
from collections import defaultdict
from dataclasses import dataclass, field

from ..workflow.analysis import locate, locate_loose, next_role_probs
from ..workflow.envelope import RequestEnvelope, SysAnnotations
from ..workflow.pathexpr import PathExpr, expr_from_json, expr_to_json
from ..workflow.prompt import (
    PromptTemplate, bind_template, format_template, parse_template,
)
from .intervals import AgentProfile, cold_start_profile, length_interval
from .pfa import Pfa, filter_pfa
from .synthesis import synthesize_regex

RESERVOIR_CAP = 10_000
REFRESH_EVERY = 50


@dataclass
class RoleTemplates:
    first: PromptTemplate
    followup: PromptTemplate | None = None

    def to_json(self):
        return {"first": format_template(self.first),
                "followup": format_template(self.followup) if self.followup else None}

    @classmethod
    def from_json(cls, d):
        return cls(parse_template(d["first"]),
                   parse_template(d["followup"]) if d.get("followup") else None)


@dataclass
class WorkflowProfile:
    pfa: Pfa = field(default_factory=Pfa)
    synthesized: PathExpr | None = None
    profiles: dict = field(default_factory=dict)
    templates: dict = field(default_factory=dict)
    reservoirs: dict = field(default_factory=lambda: defaultdict(list))
    seen: dict = field(default_factory=lambda: defaultdict(int))
    since_refresh: int = 0


class ProfileStore:
    """Profiles keyed by workflow type.

    Writes (ingest, refresh, template registration) are serialized by a lock;
    annotation reads a snapshot taken under the same lock.
    """

    def __init__(self, theta: float = 0.05, confidence: float = 0.99,
                 max_output_len: int = 8192, refresh_every: int = REFRESH_EVERY,
                 reservoir_cap: int = RESERVOIR_CAP):
        self.theta = theta
        self.confidence = confidence
        self.max_output_len = max_output_len
        self.refresh_every = refresh_every
        self.reservoir_cap = reservoir_cap
        self.workflows: dict[str, WorkflowProfile] = {}
        self._live: dict = defaultdict(list)  # workflow_id -> [(request_id, role)]
        self._lock = threading.RLock()

    # -- writes -------------------------------------------------------------

    def _wf(self, wtype):
        wf = self.workflows.get(wtype)
        if wf is None:
            wf = self.workflows[wtype] = WorkflowProfile()
        return wf

    def register_template(self, wtype, role, first: str, followup: str | None = None):
        with self._lock:
            self._wf(wtype).templates[role] = RoleTemplates(
                parse_template(first), parse_template(followup) if followup else None)

    def ingest(self, records):
        records = list(records)
        if not records:
            return
        wtype = records[0].workflow_type_id
        with self._lock:
            wf = self._wf(wtype)
            wf.pfa.ingest(records)
            rng = random.Random(zlib.crc32(wtype.encode()) + wf.pfa.n_traces)
            for r in records:
                res = wf.reservoirs[r.role_id]
                wf.seen[r.role_id] += 1
                if len(res) < self.reservoir_cap:
                    res.append(r.output_len)
                else:
                    j = rng.randrange(wf.seen[r.role_id])
                    if j < self.reservoir_cap:
                        res[j] = r.output_len
            wf.since_refresh += 1
            if wf.synthesized is None or wf.since_refresh >= self.refresh_every:
                self._refresh(wf)

    def refresh(self, wtype=None):
        with self._lock:
            for name, wf in self.workflows.items():
                if wtype is None or name == wtype:
                    self._refresh(wf)

    def _refresh(self, wf):
        if wf.pfa.n_traces:
            wf.synthesized = synthesize_regex(filter_pfa(wf.pfa, self.theta))
        wf.profiles = {role: length_interval(xs, self.confidence, role)
                       for role, xs in sorted(wf.reservoirs.items()) if xs}
        wf.since_refresh = 0

    def set_expression(self, wtype, expr: PathExpr):
        with self._lock:
            self._wf(wtype).synthesized = expr

    def set_profile(self, wtype, profile: AgentProfile):
        with self._lock:
            self._wf(wtype).profiles[profile.role_id] = profile

    # -- reads --------------------------------------------------------------

    def expression(self, wtype):
        wf = self.workflows.get(wtype)
        return wf.synthesized if wf else None

    def profile(self, wtype, role) -> AgentProfile:
        wf = self.workflows.get(wtype)
        prof = wf.profiles.get(role) if wf else None
        return prof or cold_start_profile(role, self.max_output_len, self.confidence)

    def annotate(self, env: RequestEnvelope) -> RequestEnvelope:
        """Inject length bound, path expression, position and the next template."""
        meta = env.app_metadata
        with self._lock:
            live = self._live[meta.workflow_id]
            live.append((env.request_id, meta.agent_id))
            history = list(live)
            wf = self.workflows.get(meta.workflow_type_id)
            expr = wf.synthesized if wf else None
            if expr is None:
                env.sys_annotations = None
                env.unprofiled = True
                return env
            prof = self.profile(meta.workflow_type_id, meta.agent_id)
            templates = dict(wf.templates)
        roles = tuple(r for _, r in history)
        pos = locate(expr, roles)
        if pos is None:
            pos = locate_loose(expr, meta.agent_id)
        composition = {}
        nxt = [(p, r) for r, p in next_role_probs(pos).items() if r is not None]
        if nxt:
            _, role = max(nxt, key=lambda pr: (pr[0], pr[1]))
            tpl = templates.get(role)
            if tpl is not None:
                use = tpl.followup if (tpl.followup and role in roles) else tpl.first
                composition[role] = bind_template(use, history, task_id(meta.workflow_id))
        env.sys_annotations = SysAnnotations((prof.lo, prof.u), prof.alpha, expr, composition)
        env.unprofiled = False
        env.position = pos
        return env

    def finish_workflow(self, workflow_id):
        with self._lock:
            self._live.pop(workflow_id, None)

    # -- persistence --------------------------------------------------------

    def to_json(self):
        with self._lock:
            out = {}
            for name, wf in sorted(self.workflows.items()):
                out[name] = {
                    "pfa": wf.pfa.to_json(),
                    "synthesized": expr_to_json(wf.synthesized) if wf.synthesized else None,
                    "profiles": {r: p.to_json() for r, p in sorted(wf.profiles.items())},
                    "templates": {r: t.to_json() for r, t in sorted(wf.templates.items())},
                    "reservoirs": {r: list(v) for r, v in sorted(wf.reservoirs.items())},
                    "seen": dict(sorted(wf.seen.items())),
                    "since_refresh": wf.since_refresh,
                }
            return {"version": 1, "theta": self.theta, "confidence": self.confidence,
                    "max_output_len": self.max_output_len, "workflows": out}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, d):
        store = cls(theta=d.get("theta", 0.05), confidence=d.get("confidence", 0.99),
                    max_output_len=d.get("max_output_len", 8192))
        for name, w in d.get("workflows", {}).items():
            wf = store._wf(name)
            wf.pfa = Pfa.from_json(w["pfa"])
            wf.synthesized = expr_from_json(w["synthesized"]) if w.get("synthesized") else None
            wf.profiles = {r: AgentProfile.from_json(p) for r, p in w.get("profiles", {}).items()}
            wf.templates = {r: RoleTemplates.from_json(t) for r, t in w.get("templates", {}).items()}
            wf.reservoirs = defaultdict(list, {r: list(v) for r, v in w.get("reservoirs", {}).items()})
            wf.seen = defaultdict(int, w.get("seen", {}))
            wf.since_refresh = int(w.get("since_refresh", 0))
        return store

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def task_id(workflow_id):
    """Request id under which a workflow's initial task input is stored."""
    return f"{workflow_id}/task"
