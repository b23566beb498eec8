"""Per-iteration reference simulator for the baseline (FCFS + LRU, static replicas).

Written independently of ``agentserve.sim.engine`` and kept deliberately
naive: one event per decode iteration, prompts as tuples of symbolic tokens,
and each replica's cache as the list of sequences it has seen. It is only
valid for hand-built scenarios where every length is fixed and nothing is
ever evicted, which ``run_reference`` asserts.

Baseline semantics mirrored here:
  * requests are routed on submission to the replica of their model with
    the fewest outstanding requests (lowest id on ties);
  * a request becomes eligible for admission at the next 50 ms window
    boundary after it is queued;
  * whenever a replica is between work items it admits, in arrival order,
    the longest prefix of eligible queued requests whose reservations
    (prompt plus the cluster's maximum output length) fit next to the
    reservations already admitted;
  * a prefill batch pauses decoding; it costs the uncached prompt tokens at
    the prefill rate; every running request then gains one token per
    decode iteration of (1 + penalty * (n - 1)) / decode_rate seconds.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

WINDOW = 0.05
EPS = 1e-9
RANK = {"prefill_done": 2, "iteration_done": 3, "tool_done": 4, "arrival": 5, "window": 6}


@dataclass
class Role:
    model: str
    out: int
    template: str
    tool: float = 0.0
    followup: str | None = None
    system_len: int = 100


@dataclass
class Scenario:
    name: str
    models: dict  # model -> replica count
    roles: dict  # role -> Role
    steps: list  # [(role, fan-out width)]
    n: int
    gap: float  # release spacing in seconds; 0 releases everything at t=0
    task_len: int = 200
    concurrency: int = 64
    kv: int = 200_000
    max_out: int = 60_000
    prefill_rate: float = 5000.0
    decode_rate: float = 50.0
    penalty: float = 0.05

    def expression(self):
        parts = [r if k == 1 else f"({r})^{{||{k}}}" for r, k in self.steps]
        return " -> ".join(parts + ["terminal"])

    def engine_config(self):
        """Equivalent workload and cluster mappings for the real simulator."""
        roles = {}
        for name, r in self.roles.items():
            d = {"model": r.model, "output": {"dist": "fixed", "mean": r.out},
                 "template": r.template, "system_len": r.system_len}
            if r.tool:
                d["tool_delay"] = {"dist": "fixed", "mean": r.tool}
            if r.followup:
                d["followup"] = r.followup
            roles[name] = d
        arrival = ({"rate": 1.0 / self.gap, "cv": 0.0} if self.gap > 0
                   else {"cron_period": 1e9, "cron_batch": self.n})
        workload = {"workflows": [{"type_id": self.name, "expression": self.expression(),
                                   "task_len": self.task_len, "roles": roles}],
                    "n_workflows": self.n, "concurrency": self.concurrency,
                    "arrival": arrival}
        cluster = {"models": {m: {"replicas": k, "kv_capacity": self.kv,
                                  "prefill_rate": self.prefill_rate,
                                  "decode_rate": self.decode_rate,
                                  "batch_penalty": self.penalty}
                              for m, k in self.models.items()},
                   "max_output_len": self.max_out}
        return workload, cluster


# -- prompts ----------------------------------------------------------------------


def _segments(template):
    """Split "${id:source:[a,b]}" placeholders from literal words."""
    out, i = [], 0
    while i < len(template):
        j = template.find("${", i)
        if j < 0:
            out.extend(("lit", w) for w in template[i:].split())
            break
        out.extend(("lit", w) for w in template[i:j].split())
        k = template.index("}", j)
        ref, source, rng = template[j + 2:k].split(":")
        a, b = rng.strip("[]").split(",")
        out.append(("ref", ref, source, int(a), int(b)))
        i = k + 1
    return out


def _build_prompt(template, wf, scenario):
    toks = []
    for seg in _segments(template):
        if seg[0] == "lit":
            toks.append(("lit", seg[1]))
            continue
        _, ref, source, a, b = seg
        if ref == "task":
            entry = {"request": [("task", wf.wid, i) for i in range(scenario.task_len)],
                     "response": []}
        elif ref.startswith("system."):
            role = ref.split(".", 1)[1]
            n = scenario.roles[role].system_len
            entry = {"request": [("sys", role, i) for i in range(n)], "response": []}
        else:
            kind, role = ref.split(".", 1)
            ids = [rid for rid, r in wf.invocations if r == role]
            assert ids, f"unresolvable selector {ref}"
            entry = wf.history[ids[-1] if kind == "last" else ids[0]]
        toks.extend(entry[source][a:b])
    return tuple(toks)


def _common(a, b):
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


# -- state ----------------------------------------------------------------------


@dataclass(eq=False)
class Req:
    rid: str
    wf: object
    role: str
    model: str
    prompt: tuple
    true_len: int
    tool: float
    arrival: float
    generated: int = 0
    admit_at: float = 0.0

    @property
    def reservation(self):
        return len(self.prompt) + self.wf.scenario.max_out

    def response(self):
        return tuple(("resp", self.rid, i) for i in range(self.true_len))


@dataclass(eq=False)
class Workflow:
    idx: int
    wid: str
    scenario: Scenario
    step: int = 0
    pending: int = 0
    invocations: list = field(default_factory=list)
    history: dict = field(default_factory=dict)
    seen: set = field(default_factory=set)
    start: float = 0.0
    count: int = 0


@dataclass(eq=False)
class Replica:
    rid: int
    model: str
    kv: int
    pool: list = field(default_factory=list)
    prefilling: list = field(default_factory=list)
    running: dict = field(default_factory=dict)
    busy: bool = False
    tick_at: float | None = None
    seen: list = field(default_factory=list)  # cached sequences

    @property
    def outstanding(self):
        return len(self.pool) + len(self.prefilling) + len(self.running)

    def occupancy(self):
        return sum(len(r.prompt) + r.generated for r in self.prefilling + list(self.running.values()))

    def cached_tokens(self):
        return sum(len(s) for s in self.seen)

    def hit(self, seq):
        return max((_common(seq, s) for s in self.seen), default=0)


class Reference:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.now = 0.0
        self.heap = []
        self.seq = itertools.count()
        self.trace = []
        self.deferred = []
        self.ingress = []
        self.active = 0
        self.backlog = []
        self.jct = {}
        self.replicas = []
        for model in sorted(scenario.models):
            for _ in range(scenario.models[model]):
                self.replicas.append(Replica(len(self.replicas), model, scenario.kv))

    def at(self, t, kind, payload):
        heapq.heappush(self.heap, (t, RANK[kind], next(self.seq), kind, payload))

    def log(self, kind, req, rep):
        self.trace.append((self.now, kind, req.rid, None if rep is None else rep.rid))

    # workflows

    def start(self, wf):
        self.active += 1
        wf.start = self.now
        self.issue(wf)

    def issue(self, wf):
        if wf.step >= len(self.sc.steps):
            self.jct[wf.wid] = self.now - wf.start
            self.active -= 1
            if self.backlog:
                self.start(self.backlog.pop(0))
            return
        role, k = self.sc.steps[wf.step]
        spec = self.sc.roles[role]
        wf.pending = k
        for _ in range(k):
            rid = f"{wf.wid}/r{wf.count:03d}"
            wf.count += 1
            text = spec.followup if (spec.followup and role in wf.seen) else spec.template
            prompt = _build_prompt(text, wf, self.sc)
            req = Req(rid, wf, role, spec.model, prompt, min(spec.out, self.sc.max_out),
                      spec.tool, self.now)
            wf.invocations.append((rid, role))
            wf.history[rid] = {"request": list(prompt), "response": []}
            self.log("arrive", req, None)
            self.ingress.append(req)
        wf.seen.add(role)

    def part_done(self, wf):
        wf.pending -= 1
        if wf.pending == 0:
            wf.step += 1
            self.issue(wf)

    # replicas

    def route(self):
        queue = sorted(self.ingress, key=lambda r: (r.arrival, r.rid))
        self.ingress = []
        for req in queue:
            rep = min((x for x in self.replicas if x.model == req.model),
                      key=lambda x: (x.outstanding, x.rid))
            req.admit_at = math.ceil(self.now / WINDOW - EPS) * WINDOW
            rep.pool.append(req)
            if not rep.busy:
                self.boundary(rep)

    def boundary(self, rep):
        rep.busy = False
        if rep.pool:
            budget = rep.kv - sum(r.reservation for r in rep.prefilling)
            budget -= sum(r.reservation for r in rep.running.values())
            batch = []
            for r in sorted(rep.pool, key=lambda r: (r.arrival, r.rid)):
                if r.admit_at > self.now + EPS:
                    continue
                if r.reservation > budget:
                    break
                budget -= r.reservation
                batch.append(r)
            if batch:
                dur = 0.0
                for r in batch:
                    rep.pool.remove(r)
                    seq = r.prompt + r.response()[:r.generated]
                    dur += (len(seq) - min(len(seq), rep.hit(seq))) / self.sc.prefill_rate
                    self.log("admit", r, rep)
                rep.prefilling = batch
                rep.busy = True
                self.at(self.now + dur, "prefill_done", rep)
                return
        if rep.running:
            n = len(rep.running)
            rep.busy = True
            self.at(self.now + (1 + self.sc.penalty * (n - 1)) / self.sc.decode_rate,
                    "iteration_done", rep)
            return
        if rep.pool:
            t = min(r.admit_at for r in rep.pool)
            if rep.tick_at is None or abs(rep.tick_at - t) > EPS:
                rep.tick_at = t
                self.at(t, "window", rep)

    def progress(self, rep):
        assert rep.occupancy() <= rep.kv, "reference scenarios must not exhaust KV"
        for r in sorted((r for r in rep.running.values() if r.generated >= r.true_len),
                        key=lambda r: r.rid):
            del rep.running[r.rid]
            resp = r.response()
            rep.seen.append(r.prompt + resp)
            r.wf.history[r.rid] = {"request": list(r.prompt), "response": list(resp)}
            self.log("complete", r, rep)
            if r.tool > 0:
                self.at(self.now + r.tool, "tool_done", r.wf)
            else:
                self.deferred.append(r.wf)
        assert rep.cached_tokens() + rep.occupancy() <= rep.kv, \
            "reference scenarios must never evict"
        self.boundary(rep)

    def run(self):
        for i in range(self.sc.n):
            self.at(i * self.sc.gap, "arrival", Workflow(i, f"wf{i:04d}", self.sc))
        while self.heap:
            t, _, _, kind, payload = heapq.heappop(self.heap)
            self.now = t
            if kind == "arrival":
                if self.active >= self.sc.concurrency:
                    self.backlog.append(payload)
                else:
                    self.start(payload)
            elif kind == "prefill_done":
                rep = payload
                batch, rep.prefilling = rep.prefilling, []
                for r in batch:
                    rep.seen.append(r.prompt + r.response()[:r.generated])
                    r.generated += 1
                    rep.running[r.rid] = r
                    self.log("first_token", r, rep)
                self.progress(rep)
            elif kind == "iteration_done":
                for r in payload.running.values():
                    r.generated += 1
                self.progress(payload)
            elif kind == "tool_done":
                self.part_done(payload)
            elif kind == "window":
                rep = payload
                if rep.tick_at is not None and abs(rep.tick_at - t) <= EPS:
                    rep.tick_at = None
                if not rep.busy:
                    self.boundary(rep)
            while self.deferred or self.ingress:
                while self.deferred:
                    self.part_done(self.deferred.pop(0))
                self.route()
        assert len(self.jct) == self.sc.n, "reference run left workflows unfinished"
        return self.trace


def run_reference(scenario):
    ref = Reference(scenario)
    return ref.run(), ref.jct


def canonical(trace, digits=6):
    """Order-insensitive view of simultaneous events."""
    return sorted((round(t, digits), kind, rid, rep) for t, kind, rid, rep in trace)


# -- hand-built scenarios ---------------------------------------------------------------


SCENARIOS = [
    # One replica, staggered single-path workflows: window alignment, admission
    # blocked by reservations (three fit), shared system-prompt prefixes.
    Scenario(
        name="chain",
        models={"m": 1},
        roles={
            "a": Role("m", 40, "${system.a:request:[0,100]} go ${task:request:[0,200]}"),
            "b": Role("m", 25, "${system.b:request:[0,50]} ${last.a:response:[0,40]}"
                               " ${task:request:[0,100]}"),
        },
        steps=[("a", 1), ("b", 1)],
        n=6, gap=0.437, kv=200_000, max_out=60_000,
    ),
    # Two replicas and a fan-out with tool calls: least-outstanding routing and
    # batches that change size mid-decode.
    Scenario(
        name="fanout",
        models={"m": 2},
        roles={
            "p": Role("m", 30, "${system.p:request:[0,80]} ${task:request:[0,150]}"),
            "x": Role("m", 55, "${system.x:request:[0,60]} ${last.p:response:[0,30]} explore",
                      tool=0.3731),
            "s": Role("m", 20, "${system.s:request:[0,40]} ${last.x:response:[0,55]}"),
        },
        steps=[("p", 1), ("x", 3), ("s", 1)],
        n=4, gap=0.8123, kv=150_000, max_out=30_000,
    ),
    # Two models, a concurrency cap with backlog, repeated steps with a
    # follow-up template that reuses the previous prompt as a prefix.
    Scenario(
        name="two_models",
        models={"r": 1, "c": 2},
        roles={
            "plan": Role("r", 35, "${system.plan:request:[0,120]} ${task:request:[0,180]}"),
            "code": Role("c", 45, "${system.code:request:[0,90]} ${last.plan:response:[0,35]}",
                         tool=0.2179,
                         followup="${last.code:request:[0,400]} ${last.code:response:[0,45]} again"),
            "review": Role("r", 15, "${task:request:[0,180]} ${last.code:response:[0,45]}"),
        },
        steps=[("plan", 1), ("code", 1), ("code", 1), ("review", 1)],
        n=5, gap=0.0, concurrency=2, kv=120_000, max_out=40_000,
    ),
]
