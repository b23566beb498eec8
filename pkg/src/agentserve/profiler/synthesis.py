"""Turn a filtered automaton into a bounded path expression.

Nodes are laid out in a topological order of the forward edges found by a
probability-ordered DFS from START. Each role becomes an atom (or a
parallel fan-out), wrapped in a bounded repeat when it self-loops and in an
optional when a forward edge can skip it. A backward edge x -> y wraps the
segment y..x in an optional (taken at most once per run) or a bounded
repeat, placed right after x. Segments that nest or overlap fall back to a
flat most-likely chain and the result is flagged degraded.
"""

from __future__ import annotations

from collections import Counter, defaultdict

from ..workflow.pathexpr import Atom, Opt, ParallelFanout, PathExpr, Repeat, Seq, Terminal
from .intervals import counter_quantile
from .pfa import START, TERMINAL, Pfa

FANOUT_SHARE = 0.5
RUN_LO_Q = 0.05
RUN_HI_Q = 0.95


def _dfs_order(pfa: Pfa):
    probs = pfa.probabilities()
    adj = defaultdict(list)
    for (s, t), p in probs.items():
        if s != t:
            adj[s].append((t, p))
    for s in adj:
        adj[s].sort(key=lambda tp: (-tp[1], tp[0]))
    post, back = [], []
    state = {}

    def visit(v):
        state[v] = 1
        for t, _ in adj[v]:
            if state.get(t) == 1:
                back.append((v, t))
            elif t not in state:
                visit(t)
        state[v] = 2
        post.append(v)

    visit(START)
    order = [v for v in reversed(post) if v not in (START, TERMINAL)]
    forward = [(s, t) for (s, t) in probs if s != t and (s, t) not in back
               and s in state and t in state]
    return order, forward, back


def _bounded_repeat(counts: Counter, lo: int, hi: int):
    """(p_continue) maximum-likelihood estimate for counts clipped to [lo, hi]."""
    cont = stop = 0
    for n, c in counts.items():
        n = min(max(n, lo), hi)
        cont += (n - lo) * c
        if n < hi:
            stop += c
    return cont / (cont + stop) if cont + stop else 0.5


def _clamp_p(p, n):
    # strictly inside (0, 1) keeps both branches in the language
    upper = n / (n + 1.0) if n else 0.5
    return min(max(p, 1.0 / (n + 1.0) if n else 0.5), upper)


def _role_node(pfa: Pfa, role):
    sizes = pfa.group_sizes.get(role, Counter())
    visits = sum(sizes.values())
    fan = sum(c for s, c in sizes.items() if s >= 2)
    if visits and fan / visits >= FANOUT_SHARE:
        lo, hi = min(sizes), max(sizes)
        probs = tuple(sizes.get(k, 0) / visits for k in range(lo, hi + 1))
        base = ParallelFanout(Atom(role), lo, hi, probs)
    else:
        base = Atom(role)
    reps = pfa.repetition_stats.get(role, Counter())
    if not reps:
        return base
    lo, hi = counter_quantile(reps, RUN_LO_Q), counter_quantile(reps, RUN_HI_Q)
    if (lo, hi) == (1, 1):
        return base
    return Repeat(base, lo, hi, _bounded_repeat(reps, lo, hi))


def _visit_fraction(pfa, role):
    hit = sum(c for path, c in pfa.path_counts.items() if role in path)
    return hit / pfa.n_traces if pfa.n_traces else 0.0


def _edge_counts_per_trace(pfa, edge):
    counts = Counter()
    for path, c in pfa.path_counts.items():
        k = sum(1 for a, b in zip(path, path[1:]) if (a, b) == edge)
        counts[k] += c
    return counts


def _flat_chain(pfa: Pfa):
    probs = pfa.probabilities()
    chain, cur, seen = [], START, {START}
    while True:
        nxt = sorted(((p, t) for (s, t), p in probs.items() if s == cur and t not in seen),
                     key=lambda pt: (-pt[0], pt[1]))
        if not nxt or nxt[0][1] == TERMINAL:
            break
        cur = nxt[0][1]
        seen.add(cur)
        chain.append(_role_node(pfa, cur))
    return PathExpr(Seq(tuple(chain) + (Terminal(),)), degraded=True)


def synthesize_regex(pfa: Pfa) -> PathExpr:
    order, forward, back = _dfs_order(pfa)
    if not order:
        return PathExpr(Seq((Terminal(),)), degraded=pfa.degraded)
    rank = {v: i for i, v in enumerate(order)}
    rank[START], rank[TERMINAL] = -1, len(order)

    nodes = {}
    for v in order:
        node = _role_node(pfa, v)
        if any(rank[s] < rank[v] < rank[t] for s, t in forward):
            node = Opt(node, _clamp_p(_visit_fraction(pfa, v), pfa.n_traces))
        nodes[v] = node

    segments = []
    for x, y in back:
        lo, hi = rank[y], rank[x]
        segments.append((lo, hi, (x, y)))
    segments.sort()
    for (a_lo, a_hi, _), (b_lo, b_hi, _) in zip(segments, segments[1:]):
        if b_lo <= a_hi:
            return _flat_chain(pfa)

    loops = {}
    for lo, hi, edge in segments:
        body = [nodes[v] for v in order[lo:hi + 1]]
        inner = body[0] if len(body) == 1 else Seq(tuple(body))
        per_trace = _edge_counts_per_trace(pfa, edge)
        k95 = max(1, counter_quantile(per_trace, RUN_HI_Q))
        n = pfa.n_traces
        if k95 == 1:
            taken = sum(c for k, c in per_trace.items() if k >= 1) / n if n else 0.5
            loops[hi] = Opt(inner, _clamp_p(taken, n))
        else:
            loops[hi] = Repeat(inner, 0, k95, _bounded_repeat(per_trace, 0, k95))

    items = []
    for i, v in enumerate(order):
        items.append(nodes[v])
        if i in loops:
            items.append(loops[i])
    return PathExpr(Seq(tuple(items) + (Terminal(),)), degraded=pfa.degraded)
