"""Deterministic discrete-event simulation of an agentic serving cluster.

Each replica alternates between prefill batches (decoding paused) and
decode spans. A span covers consecutive decode iterations with a fixed
batch; it ends at the first completion, KV exhaustion, staging trigger or
admission opportunity, so per-token events are never materialized.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import math
import zlib
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field

import numpy as np

from ..autoscaler import (
    SCALE_DOWN, SCALE_UP, ClusterSnapshot, autoscale_cluster, estimate_imminent_demand,
    service_factor,
)
from ..cache import (
    BLOCK_SIZE, BackgroundPrefill, CacheHierarchy, PromoteToHost, SharedStore, Skip, Tier,
    on_prefetch_requested, on_request_complete,
)
from ..profiler.intervals import AgentProfile
from ..profiler.pfa import TraceRecord
from ..profiler.store import ProfileStore, task_id
from ..scheduler import (
    RoutingLog, exceedance, reservation, route, route_least_outstanding, set_priority,
)
from ..worker import WorkerQueue, effective_priority, select_preemption_victim
from ..workflow.analysis import future_nodes
from ..workflow.envelope import AppMetadata, RequestEnvelope, RequestState
from ..workflow.prompt import assemble_prompt, bind_template, parse_template
from ..workflow.sampling import sample_steps
from .config import ClusterConfig, PolicyConfig
from .costmodel import decode_dt, prefill_time, promote_time
from .metrics import DepthTracker, MetricsReport, clean, mean, p95
from .replica import DRAINING, LOADING, OFF, READY, ReplicaState
from .workloads import WorkloadSpec, choose_workflow, synthetic_trace

EPS = 1e-9
RANK = {"load_done": 0, "transfer_done": 1, "prefill_done": 2, "decode_tick": 3,
        "tool_call_done": 4, "arrival": 5, "window_tick": 6, "scale_eval": 7}
PERIODIC = frozenset({"scale_eval"})
ARRIVAL_STREAM = 1_000_003
WARMUP_STREAM = 2_000_003


class SimulationError(RuntimeError):
    pass


class Deadlock(SimulationError):
    pass


@dataclass(eq=False)
class SimRequest(RequestEnvelope):
    tokens: np.ndarray = None
    response: np.ndarray = None
    true_len: int = 1
    tool_delay: float = 0.0
    run: object = None
    step: int = 0
    replica: object = None
    reservation: int = 0
    alpha: float = 0.0
    routed_exh: int = 0
    push_time: float = 0.0
    admit_at: float = 0.0
    resumed: bool = False
    prefetched: bool = False
    first_admit: float | None = None
    first_token: float | None = None
    done_time: float | None = None

    __eq__ = object.__eq__
    __hash__ = object.__hash__

    def seq(self):
        """Tokens whose KV must be resident: prompt plus output so far."""
        if self.tokens_generated:
            return np.concatenate([self.tokens, self.response[:self.tokens_generated]])
        return self.tokens


@dataclass(eq=False)
class WorkflowRun:
    idx: int
    wid: str
    wdef: object
    steps: list
    rng: np.random.Generator
    release: float
    history: dict = field(default_factory=dict)
    invocations: list = field(default_factory=list)
    seen_roles: set = field(default_factory=set)
    requests: list = field(default_factory=list)
    start: float | None = None
    end: float | None = None
    step_idx: int = 0
    pending: int = 0


def system_tokens(type_id, role, n):
    rng = np.random.default_rng(zlib.crc32(f"{type_id}/{role}".encode()))
    return rng.integers(1, 2 ** 31 - 1, n, dtype=np.int64)


def build_store(workload: WorkloadSpec, cluster: ClusterConfig, seed: int,
                profiles: str = "warmup", alpha: float = 0.01) -> ProfileStore:
    """Profiler state before measurement begins.

    ``warmup`` trains on synthetic executions of the workload; ``truthful``
    installs the ground-truth expression and exact length quantiles.
    """
    store = ProfileStore(max_output_len=cluster.max_output_len, confidence=1.0 - alpha)
    for wf in workload.workflows:
        for role, rd in sorted(wf.roles.items()):
            store.register_template(wf.type_id, role, rd.template, rd.followup)
    if profiles == "truthful":
        for wf in workload.workflows:
            store.set_expression(wf.type_id, wf.expression)
            for role, rd in sorted(wf.roles.items()):
                d = rd.output
                store.set_profile(wf.type_id, AgentProfile(
                    role, d.mean, d.cv, int(math.floor(d.quantile(0.05))),
                    int(math.ceil(d.quantile(1.0 - alpha))), alpha, 0))
    elif profiles == "warmup":
        rng = np.random.default_rng([seed, WARMUP_STREAM])
        for i in range(workload.warmup_workflows):
            wf = choose_workflow(workload, rng)
            store.ingest(synthetic_trace(wf, f"warmup-{i:04d}", rng))
        store.refresh()
    else:
        raise ValueError(f"unknown profile mode {profiles!r}")
    return store


def workload_id(workload: WorkloadSpec) -> str:
    from ..workflow.pathexpr import path_expr_to_text

    desc = {"name": workload.name, "n": workload.n_workflows,
            "concurrency": workload.concurrency, "arrival": asdict(workload.arrival),
            "workflows": [{"type": wf.type_id, "expr": path_expr_to_text(wf.expression),
                           "task_len": wf.task_len, "weight": wf.weight,
                           "roles": {r: [d.model, asdict(d.output),
                                         asdict(d.tool_delay) if d.tool_delay else None,
                                         d.template, d.followup, d.system_len]
                                     for r, d in sorted(wf.roles.items())}}
                          for wf in workload.workflows]}
    blob = json.dumps(desc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Simulation:
    def __init__(self, workload: WorkloadSpec, cluster: ClusterConfig, policy: PolicyConfig,
                 seed: int = 1, store: ProfileStore | None = None, profiles: str = "warmup",
                 record_trace: bool = False, check_cache: bool = False,
                 record_cache_log: bool = False):
        self.workload = workload
        self.cluster = cluster
        self.policy = policy
        self.seed = seed
        self.role_models = workload.role_models()
        self.window = policy.window_ms / 1000.0
        self.uses_profiles = policy.proactive or policy.autoscale
        if self.uses_profiles and store is None:
            store = build_store(workload, cluster, seed, profiles)
        self.store = store if self.uses_profiles else None
        self.l3 = SharedStore(cluster.l3_capacity)
        self.cache_log = [] if record_cache_log else None
        self.trace = [] if record_trace else None
        self.check_cache = check_cache
        self.routing_log = RoutingLog()
        self.scale_log = []
        self.replicas = []
        self._ids = itertools.count()
        for name in sorted(cluster.models):
            for _ in range(cluster.models[name].replicas):
                self._new_replica(name, READY)
        self.ingress = defaultdict(list)
        self.heap = []
        self._seq = itertools.count()
        self.nonperiodic = 0
        self.now = 0.0
        self._deferred = deque()
        self._dirty = set()
        self._live = None
        self.inflight = {}
        self.active_runs = {}
        self.backlog = deque()
        self.runs = []
        self.finished = 0
        self.depth = DepthTracker(cluster.models)
        self._templates = {}
        self._system = {}
        self._idle_evals = 0
        # statistics
        self.generated = 0
        self.jct = []
        self.ttft = defaultdict(list)
        self.qdelay = defaultdict(list)
        self.prompt_tokens = 0
        self.hits = {"L1": 0, "L2": 0, "L3": 0}
        self.staging = defaultdict(int)
        self.preemptions = 0
        self.ooms = 0
        self.decisions = 0
        self.flagged = 0
        self.inv_checks = 0
        self.inv_violations = 0
        self.prompt_stats = defaultdict(lambda: [0, 0])
        self.step_stats = [0.0, 0]
        self.svc_stats = defaultdict(lambda: [0.0, 0])

    # -- plumbing -------------------------------------------------------------

    def _new_replica(self, model_name, status):
        m = self.cluster.models[model_name]
        rep = ReplicaState(next(self._ids), m, None,
                           WorkerQueue(self.policy.aging_rate, self.window,
                                       fcfs=not self.policy.priority),
                           status=status, max_output_len=self.cluster.max_output_len)
        rep.cache = CacheHierarchy(lambda r=rep: max(0, r.kv_capacity - r.occupancy),
                                   m.l2_capacity, self.l3, BLOCK_SIZE, m.pcie_rate, m.l3_rate,
                                   lineage_aware=self.policy.lineage_cache,
                                   liveness=self._liveness, replica_id=rep.replica_id,
                                   log=self.cache_log)
        rep.routed = {}
        self.replicas.append(rep)
        return rep

    def _at(self, t, kind, payload):
        if t < self.now - EPS:
            raise SimulationError(f"event {kind} scheduled in the past ({t} < {self.now})")
        if kind not in PERIODIC:
            self.nonperiodic += 1
        heapq.heappush(self.heap, (t, RANK[kind], next(self._seq), kind, payload))

    def _tick(self, t):
        return math.ceil(t / self.window - EPS) * self.window

    def _log(self, kind, req, rep):
        if self.trace is not None:
            self.trace.append((self.now, kind, req.request_id,
                               rep.replica_id if rep is not None else None))

    def _liveness(self):
        if self._live is None:
            live = set()
            for run in self.active_runs.values():
                for req in reversed(run.requests):
                    if req.annotated:
                        live |= future_nodes(req.sys_annotations.predicted_path_regex,
                                             req.position)
                        break
            live |= {r.role for r in self.inflight.values()}
            self._live = frozenset(live)
        return self._live

    def _counts(self):
        out = {}
        for m in self.cluster.models:
            out[m] = [len(self.ingress[m]), len(self.ingress[m])]
        for rep in self.replicas:
            if rep.status == OFF:
                continue
            c = out[rep.model_id]
            c[0] += len(rep.worker.pool)
            c[1] += rep.outstanding
        return {m: tuple(v) for m, v in out.items()}

    # -- main loop ------------------------------------------------------------

    def run(self) -> MetricsReport:
        wl = self.workload
        rng = np.random.default_rng([self.seed, ARRIVAL_STREAM])
        releases = wl.arrival.release_times(wl.n_workflows, rng)
        for i, t in enumerate(releases):
            wrng = np.random.default_rng([self.seed, i])
            wdef = choose_workflow(wl, wrng)
            run = WorkflowRun(i, f"wf{i:04d}", wdef, sample_steps(wdef.expression, wrng), wrng, t)
            self.runs.append(run)
            self._at(t, "arrival", run)
        if self.policy.autoscale:
            self._at(self.policy.eval_period_s, "scale_eval", None)
        handlers = {"arrival": self._on_arrival, "prefill_done": self._on_prefill_done,
                    "decode_tick": self._on_decode_tick, "tool_call_done": self._on_tool_done,
                    "transfer_done": self._on_transfer_done, "load_done": self._on_load_done,
                    "window_tick": self._on_window_tick, "scale_eval": self._on_scale_eval}
        while self.heap and self.finished < wl.n_workflows:
            t, _, _, kind, payload = heapq.heappop(self.heap)
            if kind not in PERIODIC:
                self.nonperiodic -= 1
            self.depth.advance(t, self._counts)
            self.now = t
            handlers[kind](payload)
            self._drain()
            if (self.nonperiodic == 0 and self.finished < wl.n_workflows
                    and not self.policy.autoscale):
                self._deadlock()
        if self.finished < wl.n_workflows:
            self._deadlock()
        return self._report()

    def _drain(self):
        while self._deferred or self._dirty:
            while self._deferred:
                self._deferred.popleft()()
            for m in sorted(self._dirty):
                self._dirty.discard(m)
                self._route_model(m)

    def _deadlock(self):
        waiting = {m: [r.request_id for r in q] for m, q in sorted(self.ingress.items()) if q}
        reps = {r.replica_id: (r.model_id, r.status, r.mode, len(r.worker.pool),
                               len(r.running)) for r in self.replicas if r.status != OFF}
        raise Deadlock(f"no progress possible at t={self.now:.3f}: "
                       f"{self.workload.n_workflows - self.finished} workflows unfinished; "
                       f"ingress={waiting}; replicas={reps}")

    # -- workflows ------------------------------------------------------------

    def _on_arrival(self, run):
        if len(self.active_runs) >= self.workload.concurrency:
            self.backlog.append(run)
            return
        self._start(run)

    def _start(self, run):
        run.start = self.now
        self.active_runs[run.idx] = run
        wd = run.wdef
        run.history[task_id(run.wid)] = {"request": run.rng.integers(
            1, 2 ** 31 - 1, wd.task_len, dtype=np.int64), "response": np.zeros(0, np.int64)}
        for role, rd in sorted(wd.roles.items()):
            key = (wd.type_id, role)
            if key not in self._system:
                self._system[key] = {"request": system_tokens(wd.type_id, role, rd.system_len),
                                     "response": np.zeros(0, np.int64)}
            run.history[f"system.{role}"] = self._system[key]
        self._issue_step(run)

    def _issue_step(self, run):
        if run.step_idx >= len(run.steps):
            self._finish(run)
            return
        role, k = run.steps[run.step_idx]
        reqs = [self._make_request(run, role) for _ in range(k)]
        run.seen_roles.add(role)
        run.pending = k
        for r in reqs:
            self._submit(r)

    def _template(self, text):
        tpl = self._templates.get(text)
        if tpl is None:
            tpl = self._templates[text] = parse_template(text)
        return tpl

    def _make_request(self, run, role):
        rd = run.wdef.roles[role]
        rid = f"{run.wid}/r{len(run.requests):03d}"
        text = rd.followup if (rd.followup and role in run.seen_roles) else rd.template
        bound = bind_template(self._template(text), run.invocations, task_id(run.wid))
        tokens = assemble_prompt(bound, run.history)
        true_len = min(self.cluster.max_output_len,
                       max(1, int(round(rd.output.sample(run.rng)))))
        response = run.rng.integers(1, 2 ** 31 - 1, true_len, dtype=np.int64)
        tool = rd.tool_delay.sample(run.rng) if rd.tool_delay else 0.0
        req = SimRequest(request_id=rid,
                         app_metadata=AppMetadata(run.wdef.type_id, run.wid, role),
                         prompt_len=int(len(tokens)), model=rd.model, arrival_time=self.now,
                         enqueue_time=self.now, tokens=tokens, response=response,
                         true_len=true_len, tool_delay=tool, run=run, step=run.step_idx)
        run.invocations.append((rid, role))
        run.history[rid] = {"request": tokens, "response": response[:0], "partial": True}
        run.requests.append(req)
        if self.store is not None:
            self.store.annotate(req)
        return req

    def _submit(self, req):
        st = self.prompt_stats[req.role]
        st[0] += req.prompt_len
        st[1] += 1
        self.inflight[req.request_id] = req
        self._live = None
        self._log("arrive", req, None)
        if self.policy.priority:
            set_priority(req, self._model_outstanding(), self.role_models, self.policy.omega1,
                         self.policy.omega2, self.policy.idle_threshold)
        self.ingress[req.model].append(req)
        self._dirty.add(req.model)

    def _model_outstanding(self):
        return {m: c[1] for m, c in self._counts().items()}

    def _step_part_done(self, req):
        run = req.run
        run.pending -= 1
        if run.pending == 0:
            run.step_idx += 1
            self._issue_step(run)

    def _finish(self, run):
        run.end = self.now
        self.jct.append((run.wid, run.end - run.start))
        del self.active_runs[run.idx]
        self._live = None
        self.finished += 1
        if self.store is not None:
            self.store.finish_workflow(run.wid)
            if self.policy.online_profiling:
                self.store.ingest(self._records(run))
        if self.backlog:
            self._start(self.backlog.popleft())

    def _records(self, run):
        last_of_step = {}
        for i, r in enumerate(run.requests):
            last_of_step[r.step] = i
        out = []
        for i, r in enumerate(run.requests):
            parent = last_of_step.get(r.step - 1)
            out.append(TraceRecord(run.wdef.type_id, run.wid, i, parent, r.role, r.prompt_len,
                                   r.true_len, r.arrival_time, r.done_time))
        return out

    def _on_tool_done(self, req):
        self._step_part_done(req)

    # -- routing --------------------------------------------------------------

    def _route_model(self, model):
        q = self.ingress[model]
        if not q:
            return
        nodes = [r for r in self.replicas if r.model_id == model and r.routable]
        if not nodes:
            return
        if self.policy.priority:
            order = sorted(q, key=lambda r: (-effective_priority(r, self.now,
                                                                 self.policy.aging_rate),
                                             r.enqueue_time, r.request_id))
        else:
            order = sorted(q, key=lambda r: (r.enqueue_time, r.request_id))
        placed = set()
        for req in order:
            if self.policy.capacity_routing:
                dec = route(req, nodes, self.policy.epsilon, req.tokens)
            else:
                dec = route_least_outstanding(req, nodes)
            if dec.target is None:
                continue
            self.routing_log.record(self.now, req, dec)
            rep = next(n for n in nodes if n.replica_id == dec.target)
            self._place(rep, req)
            placed.add(id(req))
        if placed:
            self.ingress[model] = [r for r in q if id(r) not in placed]

    def _place(self, rep, req):
        req.replica = rep
        req.reservation = reservation(req, self.cluster.max_output_len)
        req.alpha = exceedance(req)
        rep.reserved_tokens += req.reservation
        rep.routed[req.request_id] = req
        rep.alpha_sum = math.fsum(r.alpha for r in rep.routed.values())
        req.routed_exh = rep.exhaustions
        self.decisions += 1
        self._push(rep, req)

    def _push(self, rep, req):
        req.push_time = self.now
        req.admit_at = self._tick(self.now)
        req.state = RequestState.QUEUED
        rep.worker.push(req)
        if rep.mode == "background":
            self._cancel_background(rep)
        if rep.mode == "idle":
            self._boundary(rep)
        elif rep.mode == "decode":
            self._replan_cut(rep)

    # -- replica execution ----------------------------------------------------

    def _cost(self, req):
        return req.reservation

    def _budget(self, rep):
        used = sum(r.reservation for r in rep.prefilling)
        used += sum(r.reservation for r in rep.running.values())
        return rep.kv_capacity - used

    def _boundary(self, rep):
        """Decide what a replica does next; it has no prefill or span in flight."""
        rep.mode = "idle"
        rep.span = None
        if rep.worker.pool:
            now = self.now
            batch = rep.worker.form_batch(now, self._budget(rep), self._cost,
                                          lambda r: r.admit_at <= now + EPS)
            if batch:
                self._start_prefill(rep, batch)
                return
        if rep.running:
            self._start_span(rep)
            return
        if rep.worker.pool:
            later = [r.admit_at for r in rep.worker.pool if r.admit_at > self.now + EPS]
            if later:
                t = min(later)
                if rep.tick_at is None or not (self.now - EPS <= rep.tick_at <= t + EPS):
                    rep.tick_at = t
                    self._at(t, "window_tick", rep)
        elif rep.status == DRAINING:
            self._deprovision(rep)

    def _on_window_tick(self, rep):
        if rep.tick_at is not None and abs(rep.tick_at - self.now) <= EPS:
            rep.tick_at = None
        if rep.serving and rep.mode == "idle":
            self._boundary(rep)

    def _start_prefill(self, rep, batch):
        dur = 0.0
        for r in batch:
            seq = r.seq()
            hits = rep.cache.lookup(seq)
            n = len(seq)
            self.prompt_tokens += n
            self.hits["L1"] += min(n, hits["L1"])
            self.hits["L2"] += min(n, hits["L2"]) - min(n, hits["L1"])
            self.hits["L3"] += min(n, hits["L3"]) - min(n, hits["L2"])
            rep.cache.pin_prefix(r.request_id, seq, self.now)
            dur += prefill_time(n, hits, rep.model)
            r.state = RequestState.PREFILLING
            if r.first_admit is None:
                r.first_admit = self.now
                self.qdelay[r.model].append(self.now - r.arrival_time)
            self._log("admit", r, rep)
        rep.prefilling = list(batch)
        rep.mode = "prefill"
        self._at(self.now + dur, "prefill_done", (rep, rep.invalidate()))
        rep.cache.enforce(self.now)

    def _on_prefill_done(self, payload):
        rep, version = payload
        if version != rep.version or not rep.serving:
            return
        if rep.mode == "background":
            self._finish_background(rep)
            return
        batch, rep.prefilling = rep.prefilling, []
        for r in batch:
            seq = r.seq()
            rep.cache.unpin(r.request_id)
            rep.cache.insert(seq, (r.workflow_id, r.role), self.now)
            rep.cache.pin_prefix(r.request_id, seq, self.now)
            r.tokens_generated += 1
            r.state = RequestState.DECODING
            rep.running[r.request_id] = r
            if r.first_token is None:
                r.first_token = self.now
                self.ttft[r.role].append(self.now - r.arrival_time)
            self._log("first_token", r, rep)
        self._after_progress(rep)

    def _start_span(self, rep):
        n = len(rep.running)
        dt = decode_dt(n, rep.model)
        occ = rep.occupancy
        k = min(r.true_len - r.tokens_generated for r in rep.running.values())
        if n >= 2:
            k = min(k, (rep.kv_capacity - occ) // n + 1)
        if self.policy.staging:
            for r in rep.running.values():
                if r.annotated and not r.prefetched:
                    k = min(k, max(1, self._trigger(r) - r.tokens_generated))
        cut = self._cut(rep, self.now, dt, n, occ, k)
        if cut is not None:
            k = cut
        rep.span = (self.now, dt, n, k)
        rep.mode = "decode"
        self._at(self.now + k * dt, "decode_tick", (rep, rep.invalidate()))

    def _cut(self, rep, start, dt, n, occ, k_max):
        """First iteration boundary before ``k_max`` at which a batch could be admitted."""
        times = sorted({r.admit_at for r in rep.worker.pool if r.admit_at > start + EPS})
        for t in times:
            k = max(1, math.ceil((t - start) / dt - EPS))
            if k >= k_max:
                break
            at = start + k * dt
            head = next((r for r in rep.worker.ordered(at) if r.admit_at <= at + EPS), None)
            if head is not None and self._cost(head) <= self._budget(rep):
                return k
        return None

    def _replan_cut(self, rep):
        start, dt, n, k_end = rep.span
        cut = self._cut(rep, start, dt, n, rep.occupancy, k_end)
        if cut is not None and cut < k_end:
            rep.span = (start, dt, n, cut)
            self._at(start + cut * dt, "decode_tick", (rep, rep.invalidate()))

    def _on_decode_tick(self, payload):
        rep, version = payload
        if version != rep.version or not rep.serving:
            return
        k = rep.span[3]
        for r in rep.running.values():
            r.tokens_generated += k
        rep.span = None
        self._after_progress(rep)

    def _trigger(self, req):
        return max(1, math.ceil(self.policy.prefetch_fraction * req.sys_annotations.lo - EPS))

    def _after_progress(self, rep):
        done = sorted((r for r in rep.running.values() if r.tokens_generated >= r.true_len),
                      key=lambda r: r.request_id)
        for r in done:
            self._complete(rep, r)
        if rep.occupancy > rep.kv_capacity:
            self._exhaust(rep)
        if self.policy.staging:
            for rid in sorted(rep.running):
                r = rep.running[rid]
                if r.annotated and not r.prefetched and r.tokens_generated >= self._trigger(r):
                    self._prefetch(r)
        rep.cache.enforce(self.now)
        self._boundary(rep)

    def _exhaust(self, rep):
        rep.exhaustions += 1
        self.ooms += 1
        while rep.occupancy > rep.kv_capacity and len(rep.running) > 1:
            victim = select_preemption_victim(list(rep.running.values()), self.now,
                                              self.policy.aging_rate, not self.policy.priority)
            self._preempt(rep, victim)
        self._dirty.add(rep.model_id)

    def _preempt(self, rep, r):
        rep.cache.unpin(r.request_id)
        del rep.running[r.request_id]
        rep.worker.active.pop(r.request_id, None)
        r.state = RequestState.PREEMPTED
        r.resumed = True
        self.preemptions += 1
        self._log("preempt", r, rep)
        r.push_time = self.now
        r.admit_at = self._tick(self.now)
        rep.worker.push(r)

    def _complete(self, rep, r):
        del rep.running[r.request_id]
        rep.worker.active.pop(r.request_id, None)
        rep.cache.unpin(r.request_id)
        rep.cache.insert(np.concatenate([r.tokens, r.response]), (r.workflow_id, r.role),
                         self.now)
        r.state = RequestState.COMPLETE
        r.done_time = self.now
        r.run.history[r.request_id] = {"request": r.tokens, "response": r.response}
        del self.inflight[r.request_id]
        self._live = None
        if self.policy.lineage_cache and r.annotated:
            rep.cache.apply(on_request_complete(r, rep.cache), self.now)
            if self.check_cache:
                self._check_invariant(rep, r)
        rep.routed.pop(r.request_id, None)
        rep.reserved_tokens -= r.reservation
        rep.alpha_sum = math.fsum(x.alpha for x in rep.routed.values())
        if rep.exhaustions > r.routed_exh:
            self.flagged += 1
        self.generated += r.tokens_generated
        svc = self.svc_stats[r.model]
        svc[0] += self.now - r.first_admit
        svc[1] += 1
        self.step_stats[0] += self.now - r.first_admit + r.tool_delay
        self.step_stats[1] += 1
        self._log("complete", r, rep)
        self._dirty.add(r.model)
        if r.tool_delay > 0:
            self._at(self.now + r.tool_delay, "tool_call_done", r)
        else:
            self._deferred.append(lambda r=r: self._step_part_done(r))

    def _check_invariant(self, rep, r):
        future = future_nodes(r.sys_annotations.predicted_path_regex, r.position)
        self.inv_checks += 1
        for b in rep.cache.workflow_blocks(r.workflow_id):
            if not b.pinned and b.lineage[1] not in future:
                self.inv_violations += 1

    # -- staging --------------------------------------------------------------

    def _prefetch(self, r):
        r.prefetched = True
        comp = r.sys_annotations.prompt_composition
        if not comp:
            self.staging["skip:no-template"] += 1
            return
        role = sorted(comp)[0]
        model = self.role_models.get(role)
        targets = [x for x in self.replicas if x.model_id == model and x.routable]
        if not targets:
            self.staging["skip:no-target"] += 1
            return
        if self.policy.capacity_routing:
            target = max(targets, key=lambda x: (x.kv_capacity - x.reserved_tokens,
                                                 -x.replica_id))
        else:
            target = min(targets, key=lambda x: (x.outstanding, x.replica_id))
        history = r.run.history
        history[r.request_id] = {"request": r.tokens,
                                 "response": r.response[:r.tokens_generated], "partial": True}
        for a in on_prefetch_requested(r, target.cache, target.idle, history):
            if isinstance(a, PromoteToHost):
                self.staging["promote"] += 1
                have = target.cache.lookup(a.tokens[:a.length])["L2"]
                self._at(self.now + promote_time(a.length - have, target.model),
                         "transfer_done", (target, a.tokens[:a.length], a.lineage))
            elif isinstance(a, BackgroundPrefill):
                self.staging["background"] += 1
                self._start_background(target, a)
            elif isinstance(a, Skip):
                self.staging[f"skip:{a.reason}"] += 1

    def _on_transfer_done(self, payload):
        target, tokens, lineage = payload
        if target.status == OFF:
            return
        target.cache.insert(tokens, lineage, self.now, "L2")
        target.cache.enforce(self.now)

    def _start_background(self, rep, a):
        base = min(a.length, rep.cache.lookup(a.tokens)["L2"])
        rep.background = (self.now, a.tokens, a.length, base, a.lineage)
        rep.mode = "background"
        dur = (a.length - base) / rep.model.prefill_rate
        self._at(self.now + dur, "prefill_done", (rep, rep.invalidate()))

    def _finish_background(self, rep):
        _, tokens, length, _, lineage = rep.background
        rep.cache.insert(tokens[:length], lineage, self.now, "L2")
        self.staging["background_done"] += 1
        rep.background = None
        rep.cache.enforce(self.now)
        self._boundary(rep)

    def _cancel_background(self, rep):
        start, tokens, length, base, lineage = rep.background
        done = base + (self.now - start) * rep.model.prefill_rate
        keep = int(min(done, length)) // BLOCK_SIZE * BLOCK_SIZE
        if keep > 0:
            rep.cache.insert(tokens[:keep], lineage, self.now, "L2")
        self.staging["background_cancelled"] += 1
        rep.background = None
        rep.mode = "idle"
        rep.invalidate()

    # -- autoscaling ----------------------------------------------------------

    def _role_load(self):
        load = {}
        for wf in self.workload.workflows:
            for role in sorted(wf.roles):
                if role in load:
                    continue
                s, n = self.prompt_stats.get(role, (0, 0))
                load[role] = (s / n if n else 0.0) + self.store.profile(wf.type_id,
                                                                        role).mean_len
        return load

    def _demand(self):
        load = self._role_load()
        reps = [r for r in self.inflight.values() if r.annotated]
        waiting_tool = {r.run.idx for r in reps}
        for run in self.active_runs.values():
            if run.idx not in waiting_tool and run.requests and run.requests[-1].annotated:
                reps.append(run.requests[-1])
        demand = estimate_imminent_demand(reps, self.policy.horizon_steps, self.role_models,
                                          load, include_current=False)
        for r in self.inflight.values():
            if r.annotated:
                demand[r.model] = demand.get(r.model, 0.0) + load.get(r.role, 0.0)
        for m in self.cluster.models:
            demand.setdefault(m, 0.0)
        return dict(sorted(demand.items()))

    def _on_scale_eval(self, _):
        if self.finished >= self.workload.n_workflows:
            return
        models = sorted(self.cluster.models)
        provisioned = {m: sum(1 for r in self.replicas if r.model_id == m
                              and r.status in (LOADING, READY)) for m in models}
        step = self.step_stats[0] / self.step_stats[1] if self.step_stats[1] else 0.0
        factor = {}
        for m in models:
            s, n = self.svc_stats.get(m, (0.0, 0))
            factor[m] = service_factor(self.policy.horizon_steps, step, s / n if n else 0.0)
        cm = self.cluster.models
        snap = ClusterSnapshot(provisioned, self._demand(),
                               {m: cm[m].kv_capacity for m in models}, factor,
                               {m: cm[m].slot_cost for m in models}, self.cluster.min_replicas)
        draining = sum(r.model.slot_cost for r in self.replicas if r.status == DRAINING)
        plan = autoscale_cluster(snap, self.cluster.gpu_budget - draining)
        for kind, model, count in plan.actions:
            if kind == SCALE_DOWN:
                self._scale_down(model, count)
            elif kind == SCALE_UP:
                for _ in range(count):
                    rep = self._new_replica(model, LOADING)
                    self._scale_event(model, SCALE_UP, rep)
                    self._at(self.now + self.cluster.model_load_s, "load_done",
                             (rep, rep.invalidate()))
        if self.nonperiodic == 0 and plan.empty:
            self._idle_evals += 1
            if self._idle_evals >= 2:
                self._deadlock()
        else:
            self._idle_evals = 0
        self._at(self.now + self.policy.eval_period_s, "scale_eval", None)

    def _scale_event(self, model, action, rep):
        self.scale_log.append({"time": self.now, "model": model, "action": action,
                               "replica_id": rep.replica_id})

    def _scale_down(self, model, count):
        cands = sorted((r for r in self.replicas
                        if r.model_id == model and r.status in (LOADING, READY)),
                       key=lambda r: (r.status != LOADING, r.outstanding, -r.replica_id))
        for rep in cands[:count]:
            self._scale_event(model, SCALE_DOWN, rep)
            if rep.status == LOADING:
                self._deprovision(rep)
                continue
            rep.status = DRAINING
            if rep.mode == "background":
                self._cancel_background(rep)
            if rep.outstanding == 0 and rep.mode == "idle":
                self._deprovision(rep)

    def _deprovision(self, rep):
        rep.status = OFF
        rep.mode = "idle"
        rep.invalidate()
        rep.cache.l1 = Tier("L1", rep.cache.l1.capacity)
        rep.cache.l2 = Tier("L2", rep.cache.l2.capacity)
        self._scale_event(rep.model_id, "Deprovision", rep)

    def _on_load_done(self, payload):
        rep, version = payload
        if version != rep.version or rep.status != LOADING:
            return
        rep.status = READY
        self._scale_event(rep.model_id, "Ready", rep)
        self._dirty.add(rep.model_id)

    # -- report ---------------------------------------------------------------

    def _report(self) -> MetricsReport:
        makespan = max((r.end for r in self.runs if r.end is not None), default=0.0)
        jcts = [j for _, j in self.jct]
        all_ttft = [x for role in sorted(self.ttft) for x in self.ttft[role]]
        all_q = [x for m in sorted(self.qdelay) for x in self.qdelay[m]]
        pt = self.prompt_tokens or 1
        scale_counts = defaultdict(int)
        for e in self.scale_log:
            scale_counts[e["action"]] += 1
        summary = {
            "policy": self.policy.name,
            "policy_config": asdict(self.policy),
            "seed": self.seed,
            "workload": self.workload.name,
            "workload_id": workload_id(self.workload),
            "n_workflows": self.workload.n_workflows,
            "concurrency": self.workload.concurrency,
            "makespan_s": makespan,
            "generated_tokens": self.generated,
            "throughput_tok_s": self.generated / makespan if makespan > 0 else 0.0,
            "jct": {"mean": mean(jcts), "p95": p95(jcts)},
            "ttft": {"mean": mean(all_ttft), "p95": p95(all_ttft),
                     "by_role": {r: mean(v) for r, v in sorted(self.ttft.items())}},
            "queuing_delay": {"mean": mean(all_q), "p95": p95(all_q),
                              "by_model": {m: mean(v) for m, v in sorted(self.qdelay.items())}},
            "queue_depth": self.depth.means(makespan),
            "cache": {"prompt_tokens": self.prompt_tokens,
                      "hit_ratio": {t: self.hits[t] / pt for t in ("L1", "L2", "L3")},
                      "staging": dict(sorted(self.staging.items())),
                      "invariant_checks": self.inv_checks,
                      "invariant_violations": self.inv_violations},
            "preemptions": self.preemptions,
            "ooms": self.ooms,
            "routing": {"decisions": self.decisions, "flagged": self.flagged,
                        "oom_fraction": self.flagged / self.decisions if self.decisions else 0.0},
            "scale_events": scale_counts.get(SCALE_UP, 0) + scale_counts.get(SCALE_DOWN, 0),
            "scale_actions": dict(sorted(scale_counts.items())),
        }
        return MetricsReport(clean(summary), list(self.depth.series), list(self.jct))


def run(spec: WorkloadSpec, cluster: ClusterConfig, policy: PolicyConfig, seed: int = 1,
        **kw) -> MetricsReport:
    """Simulate one (workload, cluster, policy, seed) combination."""
    return Simulation(spec, cluster, policy, seed, **kw).run()
