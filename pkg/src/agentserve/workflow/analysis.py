"""Positions inside a path expression and the expectations computed from them.

A position is the posterior over *residual* programs after consuming a
history of invocations. Residuals are tuples of nodes (the remainder of
the root sequence), computed by probabilistic Brzozowski derivatives: each
derivative step consumes one role and records the weight of the branch
choices it had to make. Siblings of a parallel fan-out are issued together,
so once the first sibling is consumed the rest of the group is held in an
``_Absorb`` item that matches the remaining siblings of the same group but
is invisible to every look-ahead quantity.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache

from .pathexpr import Atom, Opt, ParallelFanout, PathExpr, Repeat, Seq, Terminal


@dataclass(frozen=True)
class _Absorb:
    role: str
    n: int


def _rep(child, lo, hi, p):
    return () if hi == 0 else (Repeat(child, lo, hi, p),)


def _merge(pairs):
    acc = {}
    for items, w in pairs:
        if w > 0.0:
            acc[items] = acc.get(items, 0.0) + w
    return list(acc.items())


@lru_cache(maxsize=200_000)
def _derive(items, role):
    """Residuals (with branch weight) after consuming ``role`` next."""
    if not items:
        return ()
    head, rest = items[0], items[1:]
    if isinstance(head, Atom):
        return ((rest, 1.0),) if head.role == role else ()
    if isinstance(head, Terminal):
        return ()
    if isinstance(head, Seq):
        return _derive(head.children + rest, role)
    if isinstance(head, _Absorb):
        if head.role != role:
            return ()
        left = (_Absorb(role, head.n - 1),) if head.n > 1 else ()
        return ((left + rest, 1.0),)
    out = []
    if isinstance(head, Opt):
        if head.p > 0.0:
            out += [(r, w * head.p) for r, w in _derive((head.child,) + rest, role)]
        if head.p < 1.0:
            out += [(r, w * (1.0 - head.p)) for r, w in _derive(rest, role)]
    elif isinstance(head, Repeat):
        c, lo, hi, p = head.child, head.min, head.max, head.p_continue
        if hi == 0:
            return _derive(rest, role)
        if lo > 0:
            out += _derive((c,) + _rep(c, lo - 1, hi - 1, p) + rest, role)
        else:
            if p > 0.0:
                out += [(r, w * p) for r, w in _derive((c,) + _rep(c, 0, hi - 1, p) + rest, role)]
            if p < 1.0:
                out += [(r, w * (1.0 - p)) for r, w in _derive(rest, role)]
    elif isinstance(head, ParallelFanout):
        for k, pk in head.count_probs():
            if k == 0:
                out += [(r, w * pk) for r, w in _derive(rest, role)]
            elif head.child.role == role:
                left = (_Absorb(role, k - 1),) if k > 1 else ()
                out.append((left + rest, pk))
    else:
        raise TypeError(head)
    return tuple(_merge(out))


@lru_cache(maxsize=100_000)
def _nullable(items):
    for node in items:
        if isinstance(node, Terminal):
            return True
        if not _nullable_node(node):
            return False
    return True


def _nullable_node(node):
    if isinstance(node, Atom):
        return False
    if isinstance(node, Seq):
        return _nullable(node.children)
    if isinstance(node, Opt):
        return node.p < 1.0 or _nullable((node.child,))
    if isinstance(node, Repeat):
        if node.max == 0 or (node.min == 0 and node.p_continue < 1.0):
            return True
        # every taken iteration must itself be skippable
        return _nullable((node.child,))
    if isinstance(node, ParallelFanout):
        return any(k == 0 for k, _ in node.count_probs())
    if isinstance(node, _Absorb):
        return False
    return True


def match_trace(expr: PathExpr, trace) -> bool:
    """True iff the role sequence is in the language of ``expr``.

    Branches with zero probability (``p`` of 0 or 1) are degenerate and do
    not contribute words.
    """
    configs = [(expr.items, 1.0)]
    for role in trace:
        configs = _merge(pair for items, w in configs for pair in
                         ((r, w * x) for r, x in _derive(items, role)))
        if not configs:
            return False
    return any(_nullable(items) for items, _ in configs)


@dataclass(frozen=True)
class Position:
    """Normalized distribution over residual programs."""

    configs: tuple  # ((residual items, weight), ...)

    def residuals(self):
        for items, w in self.configs:
            yield tuple(x for x in items if not isinstance(x, _Absorb)), w


def _position(configs):
    total = sum(w for _, w in configs)
    if total <= 0.0:
        return None
    ordered = sorted(configs, key=lambda c: (-c[1], repr(c[0])))
    return Position(tuple((items, w / total) for items, w in ordered))


@lru_cache(maxsize=50_000)
def _locate(items, history):
    configs = [(items, 1.0)]
    for role in history:
        configs = _merge((r, w * x) for it, w in configs for r, x in _derive(it, role))
        if not configs:
            return None
    return _position(configs)


def locate(expr: PathExpr, history) -> Position | None:
    """Position after the invocations in ``history`` (the last one is current)."""
    history = tuple(history)
    if not history:
        raise ValueError("history must contain at least the current invocation")
    return _locate(expr.items, history)


@lru_cache(maxsize=10_000)
def _locate_loose(items, role):
    # forward pass over the (acyclic) derivative graph, all alphabets
    roles = sorted({n.role for n in _walk_items(items) if isinstance(n, Atom)})
    frontier = {items: 1.0}
    hits = defaultdict(float)
    while frontier:
        nxt = defaultdict(float)
        for it, w in frontier.items():
            for r in roles:
                for res, x in _derive(it, r):
                    nxt[res] += w * x
                    if r == role:
                        hits[res] += w * x
        frontier = nxt
    return _position(list(hits.items()))


def _walk_items(items):
    stack = list(items)
    while stack:
        n = stack.pop()
        yield n
        if isinstance(n, Seq):
            stack.extend(n.children)
        elif isinstance(n, (Repeat, Opt, ParallelFanout)):
            stack.append(n.child)


def locate_loose(expr: PathExpr, role: str) -> Position | None:
    """Position given only that ``role`` is the current invocation.

    Used when the recorded history has left the language (a deviant run):
    the posterior averages over every occurrence of the role.
    """
    return _locate_loose(expr.items, role)


def start_position(expr: PathExpr) -> Position:
    """Position before the first invocation (nothing pending)."""
    return Position(((expr.items, 1.0),))


# -- look-ahead quantities ---------------------------------------------------


@lru_cache(maxsize=100_000)
def _expected_len(node):
    if isinstance(node, Atom):
        return 1.0
    if isinstance(node, (Terminal, _Absorb)):
        return 0.0
    if isinstance(node, Seq):
        return sum(_expected_len(c) for c in node.children)
    if isinstance(node, Opt):
        return node.p * _expected_len(node.child)
    if isinstance(node, Repeat):
        return node.expected_count() * _expected_len(node.child)
    if isinstance(node, ParallelFanout):
        return node.expected_count()
    raise TypeError(node)


def expected_remaining(position: Position | None) -> float:
    """Expected invocations still to run, counting the current one."""
    if position is None:
        return 1.0
    return 1.0 + sum(w * sum(_expected_len(n) for n in items)
                     for items, w in position.residuals())


@lru_cache(maxsize=100_000)
def _reachable(node):
    if isinstance(node, Atom):
        return frozenset((node.role,))
    if isinstance(node, (Terminal, _Absorb)):
        return frozenset()
    if isinstance(node, Seq):
        out = frozenset()
        for c in node.children:
            out |= _reachable(c)
        return out
    if isinstance(node, Opt):
        return _reachable(node.child) if node.p > 0.0 else frozenset()
    if isinstance(node, Repeat):
        return _reachable(node.child) if max(n for n, _ in node.count_probs()) > 0 else frozenset()
    if isinstance(node, ParallelFanout):
        return frozenset((node.child.role,)) if any(k > 0 for k, _ in node.count_probs()) else frozenset()
    raise TypeError(node)


def reachable_roles(position: Position | None) -> frozenset:
    if position is None:
        return frozenset()
    out = frozenset()
    for items, w in position.residuals():
        for n in items:
            out |= _reachable(n)
    return out


def _fold(parts):
    nq, b_acc, a_acc = 1.0, 0.0, 0.0
    for q, a, b in parts:
        a_acc += b_acc * q + nq * a
        b_acc = b_acc * (1.0 - q) + nq * b
        nq *= 1.0 - q
    return 1.0 - nq, a_acc, b_acc


@lru_cache(maxsize=200_000)
def _first(node, role):
    """(P(role occurs), E[atoms before first; occurs], E[len; not occurs])."""
    if isinstance(node, Atom):
        return (1.0, 0.0, 0.0) if node.role == role else (0.0, 0.0, 1.0)
    if isinstance(node, (Terminal, _Absorb)):
        return (0.0, 0.0, 0.0)
    if isinstance(node, Seq):
        return _fold([_first(c, role) for c in node.children])
    if isinstance(node, Opt):
        q, a, b = _first(node.child, role)
        return (node.p * q, node.p * a, node.p * b)
    if isinstance(node, (Repeat, ParallelFanout)):
        part = _first(node.child, role)
        q = a = b = 0.0
        for n, w in node.count_probs():
            qn, an, bn = _fold([part] * n)
            q, a, b = q + w * qn, a + w * an, b + w * bn
        return (q, a, b)
    raise TypeError(node)


def expected_distance(position: Position | None, role: str) -> float | None:
    """E[invocations until the next ``role``], given that it occurs.

    The immediate successor is at distance 1. None when unreachable.
    """
    if position is None:
        return None
    num = den = 0.0
    for items, w in position.residuals():
        q, a, _ = _fold([_first(n, role) for n in items])
        num += w * (a + q)
        den += w * q
    if den <= 0.0:
        return None
    return num / den


@lru_cache(maxsize=100_000)
def _outcomes(items, budget):
    """{(steps, counts): prob} for the first ``budget`` steps of ``items``."""
    if budget == 0 or not items:
        return {(0, ()): 1.0}
    head, rest = items[0], items[1:]
    out = defaultdict(float)
    for (s, counts), p in _node_outcomes(head, budget).items():
        if s >= budget:
            out[(budget, counts)] += p
            continue
        for (s2, c2), p2 in _outcomes(rest, budget - s).items():
            out[(s + s2, _add_counts(counts, c2))] += p * p2
    return dict(out)


def _add_counts(a, b):
    if not a:
        return b
    if not b:
        return a
    d = dict(a)
    for k, v in b:
        d[k] = d.get(k, 0) + v
    return tuple(sorted(d.items()))


@lru_cache(maxsize=100_000)
def _node_outcomes(node, budget):
    if isinstance(node, Atom):
        return {(1, ((node.role, 1),)): 1.0}
    if isinstance(node, (Terminal, _Absorb)):
        return {(0, ()): 1.0}
    if isinstance(node, Seq):
        return _outcomes(node.children, budget)
    out = defaultdict(float)
    if isinstance(node, Opt):
        if node.p > 0.0:
            for k, v in _outcomes((node.child,), budget).items():
                out[k] += node.p * v
        if node.p < 1.0:
            out[(0, ())] += 1.0 - node.p
    elif isinstance(node, Repeat):
        for n, w in node.count_probs():
            for k, v in _outcomes((node.child,) * n, budget).items():
                out[k] += w * v
    elif isinstance(node, ParallelFanout):
        for n, w in node.count_probs():
            key = (1, ((node.child.role, n),)) if n > 0 else (0, ())
            out[key] += w
    else:
        raise TypeError(node)
    return dict(out)


def project_steps(position: Position | None, horizon: int) -> dict:
    """Expected invocations per role within the next ``horizon`` steps.

    A fan-out group is one step carrying all its siblings.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    result = defaultdict(float)
    if position is None:
        return {}
    for items, w in position.residuals():
        for (_, counts), p in _outcomes(items, horizon).items():
            for role, c in counts:
                result[role] += w * p * c
    return dict(sorted(result.items()))


def next_role_probs(position: Position | None) -> dict:
    """Distribution of the next invocation's role (None key = workflow ends)."""
    if position is None:
        return {}
    out = defaultdict(float)
    for items, w in position.residuals():
        for (s, counts), p in _outcomes(items, 1).items():
            if not counts:
                out[None] += w * p
            for role, _ in counts:
                out[role] += w * p
    return dict(out)


# -- expression-level entry points --------------------------------------------


def future_nodes(expr: PathExpr, position: Position | None) -> frozenset:
    """Roles that can still be invoked (with positive probability) after ``position``."""
    return reachable_roles(position)


def expected_remaining_distance(expr: PathExpr, position: Position | None) -> float:
    return expected_remaining(position)


def project_graph(expr: PathExpr, position: Position | None, horizon: int) -> dict:
    return project_steps(position, horizon)
