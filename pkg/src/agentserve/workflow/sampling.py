"""Draw executions from a path expression."""

from __future__ import annotations

import numpy as np

from .pathexpr import Atom, Opt, ParallelFanout, PathExpr, Repeat, Seq, Terminal


def _choose(rng, pairs):
    values = [v for v, _ in pairs]
    probs = np.array([w for _, w in pairs], dtype=float)
    return values[int(rng.choice(len(values), p=probs / probs.sum()))]


def _steps(node, rng, out):
    if isinstance(node, Atom):
        out.append((node.role, 1))
    elif isinstance(node, Terminal):
        return
    elif isinstance(node, Seq):
        for c in node.children:
            _steps(c, rng, out)
    elif isinstance(node, Opt):
        if rng.random() < node.p:
            _steps(node.child, rng, out)
    elif isinstance(node, Repeat):
        for _ in range(_choose(rng, node.count_probs())):
            _steps(node.child, rng, out)
    elif isinstance(node, ParallelFanout):
        k = _choose(rng, node.count_probs())
        if k:
            out.append((node.child.role, k))
    else:
        raise TypeError(node)


def sample_steps(expr: PathExpr, rng: np.random.Generator):
    """One execution as a list of steps (role, group size)."""
    out = []
    _steps(expr.root, rng, out)
    return out


def serialize_steps(steps):
    return [r for r, k in steps for _ in range(k)]
