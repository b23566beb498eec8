from dataclasses import dataclass, field

import numpy as np
import pytest

from agentserve.scheduler import (
    RoutingLog, capacity_holds, downstream_idle_risk, expected_remaining_distance, oom_bound,
    route, route_least_outstanding, set_priority,
)
from agentserve.workflow.analysis import locate
from agentserve.workflow.envelope import AppMetadata, RequestEnvelope, SysAnnotations
from agentserve.workflow.pathexpr import parse_path_expr


@dataclass
class FakeCache:
    staged: int = 0

    def staged_prefix(self, tokens):
        return min(self.staged, len(tokens))


@dataclass
class Node:
    replica_id: int
    kv_capacity: int = 1000
    reserved_tokens: int = 0
    alpha_sum: float = 0.0
    max_output_len: int = 4096
    outstanding: int = 0
    cache: FakeCache = field(default_factory=FakeCache)


def req(u=100, prompt=0, alpha=0.01, expr="a -> terminal", history=("a",), rid="r"):
    e = parse_path_expr(expr)
    r = RequestEnvelope(rid, AppMetadata("t", "w", history[-1]), prompt_len=prompt)
    r.sys_annotations = SysAnnotations((0, u), alpha, e)
    r.position = locate(e, list(history))
    return r


# -- capacity and the union bound ------------------------------------------------------


def test_capacity_empty_node():
    assert capacity_holds(Node(0), req(u=900, prompt=100))
    assert not capacity_holds(Node(0), req(u=901, prompt=100))


@pytest.mark.parametrize("new, ok", [(300, False), (200, True)])
def test_capacity_arithmetic(new, ok):
    assert capacity_holds(Node(0, reserved_tokens=800), req(u=new)) is ok


def test_unprofiled_reserves_global_max():
    r = RequestEnvelope("r", AppMetadata("t", "w", "a"), prompt_len=10, unprofiled=True)
    assert not capacity_holds(Node(0, kv_capacity=4000, max_output_len=4096), r)
    assert capacity_holds(Node(0, kv_capacity=4106, max_output_len=4096), r)


def test_oom_bound_sums_alphas():
    assert oom_bound(Node(0), req()) == pytest.approx(0.01)
    assert oom_bound(Node(0, alpha_sum=0.02), req()) == pytest.approx(0.03)


def test_union_bound_monte_carlo():
    rng = np.random.default_rng(0)
    mu, sigma, alpha = np.log(500), 0.5, 0.01
    u = float(np.exp(mu + sigma * 2.3263478740408408))  # true 0.99 quantile
    lengths = rng.lognormal(mu, sigma, size=(10_000, 3))
    oom = (lengths.sum(axis=1) > 3 * u).mean()
    assert oom <= 3 * alpha


# -- routing ---------------------------------------------------------------------------------


def test_route_single_node():
    d = route(req(), [Node(3)])
    assert d.target == 3 and d.oom_bound == pytest.approx(0.01)


def test_route_prefers_headroom():
    d = route(req(u=100), [Node(0, reserved_tokens=600), Node(1, reserved_tokens=400)])
    assert d.target == 1 and d.headroom == 500


def test_route_cache_tiebreak():
    a, b = Node(0), Node(1, cache=FakeCache(400))
    d = route(req(), [a, b], prompt_tokens=np.arange(600))
    assert d.target == 1 and d.cache_tiebreak_used
    d = route(req(), [Node(0), Node(1)], prompt_tokens=np.arange(600))
    assert d.target == 0 and not d.cache_tiebreak_used


def test_route_respects_epsilon():
    nodes = [Node(0, alpha_sum=0.045), Node(1, reserved_tokens=950)]
    assert route(req(alpha=0.01), nodes, epsilon=0.05).target is None
    assert route(req(alpha=0.005), nodes, epsilon=0.05).target == 0


def test_route_never_violates_bound_randomized():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        nodes = [Node(i, kv_capacity=1000, reserved_tokens=int(rng.integers(0, 1000)),
                      alpha_sum=float(rng.choice([0.0, 0.01, 0.02, 0.04, 0.05])))
                 for i in range(int(rng.integers(1, 5)))]
        r = req(u=int(rng.integers(1, 400)), alpha=float(rng.choice([0.0, 0.01, 0.02])))
        d = route(r, nodes, epsilon=0.05)
        safe = [n for n in nodes if capacity_holds(n, r) and oom_bound(n, r) <= 0.05 + 1e-12]
        if not safe:
            assert d.target is None
            continue
        best = max(n.kv_capacity - n.reserved_tokens for n in safe)
        chosen = next(n for n in nodes if n.replica_id == d.target)
        assert chosen in safe and d.oom_bound <= 0.05 + 1e-12
        assert chosen.kv_capacity - chosen.reserved_tokens == best


def test_least_outstanding():
    assert route_least_outstanding(req(), [Node(0, outstanding=2), Node(1, outstanding=1),
                                           Node(2, outstanding=1)]).target == 1


def test_routing_log_lines(tmp_path):
    log = RoutingLog()
    log.record(1.5, req(rid="x"), route(req(), [Node(2)]))
    log.dump(tmp_path / "r.jsonl")
    line = (tmp_path / "r.jsonl").read_text().strip()
    assert '"request_id": "x"' in line and '"target": 2' in line


# -- priorities -------------------------------------------------------------------------------


def test_remaining_distance_examples():
    assert expected_remaining_distance(req(expr="verifier -> terminal",
                                           history=("verifier",))) == 1.0
    assert expected_remaining_distance(req(expr="a -> b? -> terminal")) == pytest.approx(1.5)


MODELS = {"a": "busy", "b": "m1", "c": "m2", "x": "busy", "y": "busy"}


def test_idle_risk_all_busy():
    r = req(expr="a -> b -> c -> terminal")
    assert downstream_idle_risk({"busy": 5, "m1": 5, "m2": 5}, r, MODELS) == 0.0


def test_idle_risk_distance_weighting():
    near = req(expr="a -> b -> terminal")
    far = req(expr="a -> x^{8,8} -> y -> b -> terminal")
    q = {"busy": 5}
    assert downstream_idle_risk(q, near, MODELS) == pytest.approx(1.0)
    assert downstream_idle_risk(q, far, MODELS) == pytest.approx(0.1)


def test_idle_risk_sum():
    r = req(expr="a -> x -> b -> y -> c -> terminal")
    assert downstream_idle_risk({"busy": 5}, r, MODELS) == pytest.approx(0.75)


def test_priority_terminal_adjacent():
    r = req(expr="verifier -> terminal", history=("verifier",))
    assert set_priority(r, {}, {"verifier": "m"}).base_priority == pytest.approx(1.0)
    assert r.base_priority == pytest.approx(1.0)


def test_priority_late_beats_early():
    early = req(expr="planner -> worker^{19,19} -> terminal", history=("planner",))
    late = req(expr="planner -> worker^{19,19} -> terminal",
               history=("planner",) + ("worker",) * 18)
    models = {"planner": "m", "worker": "m"}
    assert expected_remaining_distance(early) == pytest.approx(20)
    assert expected_remaining_distance(late) == pytest.approx(2)
    q = {"m": 10}
    assert set_priority(late, q, models).base_priority > set_priority(early, q, models).base_priority


def test_priority_linear_in_omega2():
    r = req(expr="a -> x -> b -> y -> c -> terminal")
    s1 = set_priority(r, {"busy": 5}, MODELS, omega1=1.0, omega2=1.0)
    s2 = set_priority(r, {"busy": 5}, MODELS, omega1=1.0, omega2=2.0)
    assert s2.base_priority - s1.base_priority == pytest.approx(s1.s_unblock)


def test_idle_model_never_lowers_priority():
    r = req(expr="a -> x -> b -> y -> c -> terminal")
    busy = set_priority(r, {"busy": 5, "m1": 5, "m2": 5}, MODELS).base_priority
    one_idle = set_priority(r, {"busy": 5, "m1": 0, "m2": 5}, MODELS).base_priority
    assert one_idle >= busy


def test_unprofiled_priority_zero():
    r = RequestEnvelope("r", AppMetadata("t", "w", "a"), unprofiled=True)
    assert set_priority(r, {}, {}).base_priority == 0.0
