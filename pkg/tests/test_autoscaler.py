import copy
import random

import pytest

from agentserve.autoscaler import (
    SCALE_DOWN, SCALE_UP, ClusterSnapshot, autoscale_cluster, estimate_imminent_demand,
    estimate_replicas, service_factor,
)
from agentserve.sim.config import cluster_from, policy_from
from agentserve.sim.engine import Simulation
from agentserve.sim.workloads import FANOUT_BURST, workload_from
from agentserve.workflow.analysis import locate
from agentserve.workflow.envelope import AppMetadata, RequestEnvelope, SysAnnotations
from agentserve.workflow.pathexpr import parse_path_expr

FAN = parse_path_expr("planner -> (explorer)^{||10} -> terminal")


def active(expr, history, i=0, unprofiled=False):
    r = RequestEnvelope(f"r{i:03d}", AppMetadata("t", f"w{i}", history[-1]),
                        unprofiled=unprofiled)
    if not unprofiled:
        r.sys_annotations = SysAnnotations((0, 100), 0.01, expr)
        r.position = locate(expr, history)
    return r


def test_no_active_requests():
    d = estimate_imminent_demand([], 2, {"planner": "p", "explorer": "e"}, {})
    assert d == {"e": 0.0, "p": 0.0}


def test_worked_example_500_explorers():
    reqs = [active(FAN, ["planner"], i) for i in range(50)]
    d = estimate_imminent_demand(reqs, 2, {"planner": "p", "explorer": "e"},
                                 {"planner": 0.0, "explorer": 2000.0}, include_current=False)
    assert d["e"] == pytest.approx(1_000_000)


def test_current_load_added():
    reqs = [active(FAN, ["planner"])]
    d = estimate_imminent_demand(reqs, 2, {"planner": "p", "explorer": "e"},
                                 {"planner": 300.0, "explorer": 2000.0})
    assert d == {"e": pytest.approx(20_000), "p": pytest.approx(300)}


def test_unprofiled_contribute_nothing():
    reqs = [active(FAN, ["planner"], unprofiled=True)]
    d = estimate_imminent_demand(reqs, 2, {"planner": "p", "explorer": "e"},
                                 {"planner": 300.0, "explorer": 2000.0})
    assert d == {"e": 0.0, "p": 0.0}


def test_demand_is_additive_across_models():
    e1 = parse_path_expr("a -> b^{1,3} -> terminal")
    e2 = parse_path_expr("c -> d? -> terminal")
    models = {"a": "m1", "b": "m1", "c": "m2", "d": "m2"}
    load = {"a": 10.0, "b": 20.0, "c": 30.0, "d": 40.0}
    r1 = [active(e1, ["a"], i) for i in range(3)]
    r2 = [active(e2, ["c"], i + 10) for i in range(4)]
    both = estimate_imminent_demand(r1 + r2, 2, models, load)
    only1 = estimate_imminent_demand(r1, 2, models, load)
    only2 = estimate_imminent_demand(r2, 2, models, load)
    assert both["m1"] == pytest.approx(only1["m1"]) and both["m2"] == pytest.approx(only2["m2"])


def test_estimate_replicas_examples():
    assert estimate_replicas(0, 200_000, 2) == 0
    assert estimate_replicas(1_000_000, 200_000, 2) == 3
    with pytest.raises(ValueError):
        estimate_replicas(1, 0)


def test_estimate_replicas_monotone():
    prev = 0
    for d in range(0, 2_000_000, 10_007):
        n = estimate_replicas(d, 64_000, 1.5)
        assert n >= prev
        prev = n


def test_service_factor_floor():
    assert service_factor(2, 1.0, 10.0) == 1.0
    assert service_factor(2, 10.0, 5.0) == 4.0


def snap(replicas, demand, cap=100, **kw):
    return ClusterSnapshot(replicas, demand, {m: cap for m in replicas}, **kw)


def test_steady_state_empty_plan():
    plan = autoscale_cluster(snap({"a": 2, "b": 1}, {"a": 200, "b": 100}), budget=3)
    assert plan.empty and plan.targets == {"a": 2, "b": 1}


def test_downs_precede_ups():
    plan = autoscale_cluster(snap({"planner": 3, "explorer": 1},
                                  {"planner": 50, "explorer": 400}), budget=4)
    kinds = [k for k, _, _ in plan.actions]
    assert kinds == [SCALE_DOWN, SCALE_UP]
    assert plan.targets == {"explorer": 3, "planner": 1}


def test_budget_caps_by_demand():
    plan = autoscale_cluster(snap({"a": 1, "b": 1, "c": 1},
                                  {"a": 300, "b": 500, "c": 200}), budget=8)
    assert sum(plan.targets.values()) == 8
    assert plan.targets == {"a": 2, "b": 5, "c": 1}
    assert plan.deferred == {"a": 1, "c": 1}
    ups = [m for k, m, _ in plan.actions if k == SCALE_UP]
    assert ups == ["b", "a"]


def test_budget_respected_randomized():
    rng = random.Random(0)
    for _ in range(500):
        models = {m: rng.randint(1, 4) for m in "abcd"[:rng.randint(1, 4)]}
        cost = {m: rng.randint(1, 2) for m in models}
        budget = sum(models[m] * cost[m] for m in models) + rng.randint(0, 4)
        demand = {m: rng.uniform(0, 900) for m in models}
        plan = autoscale_cluster(snap(models, demand, slot_cost=cost), budget)
        assert sum(plan.targets[m] * cost[m] for m in models) <= budget
        assert plan == autoscale_cluster(snap(models, demand, slot_cost=cost), budget)


def test_warms_explorers_before_fanout():
    wf = copy.deepcopy(FANOUT_BURST)
    wf["roles"]["planner"]["output"] = {"dist": "fixed", "mean": 2000}
    wl = workload_from({"workflows": [wf], "n_workflows": 40,
                        "arrival": {"cron_period": 300, "cron_batch": 40}})
    cl = cluster_from({"models": {m: {"replicas": 2}
                                  for m in ("planner_llm", "explorer_llm", "summarizer_llm")}})
    sim = Simulation(wl, cl, policy_from("pythia"), 1)
    sim.run()
    first_fanout = min(r.arrival_time for run in sim.runs for r in run.requests
                       if r.role == "explorer")
    ready = [e["time"] for e in sim.scale_log
             if e["model"] == "explorer_llm" and e["action"] == "Ready"]
    assert ready and ready[0] < first_fanout
    downs = [e for e in sim.scale_log if e["action"] == SCALE_DOWN]
    assert any(e["model"] == "planner_llm" for e in downs)
