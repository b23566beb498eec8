"""Bounded probabilistic path expressions over agent roles.

Text form::

    planner -> (explorer)^{||3,4} -> (engineer)^{3,6} -> reviewer
        -> (engineer^{2-4} -> reviewer)? -> verifier -> terminal

``^{a,b}`` (or ``^{a-b}``) bounds a sequential repeat, ``^{||a,b}`` a
parallel fan-out of siblings and ``?`` marks an optional group. Branch
probabilities are not part of the text; parsed expressions get 0.5 for
both repeat continuation and optional branches.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Union

DEFAULT_P = 0.5
TERMINAL = "terminal"
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_INT = re.compile(r"[0-9]+")


class PathExprError(ValueError):
    """Malformed path expression."""


class PathExprSyntaxError(PathExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def _check_prob(p, what):
    if not 0.0 <= p <= 1.0:
        raise PathExprError(f"{what} must be in [0, 1], got {p}")


@dataclass(frozen=True)
class Atom:
    role: str

    def __post_init__(self):
        if not self.role or self.role == TERMINAL:
            raise PathExprError(f"invalid role name {self.role!r}")


@dataclass(frozen=True)
class Terminal:
    pass


@dataclass(frozen=True)
class Seq:
    children: tuple

    def __post_init__(self):
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise PathExprError("empty sequence")


@dataclass(frozen=True)
class Repeat:
    child: "Node"
    min: int
    max: int
    p_continue: float = DEFAULT_P

    def __post_init__(self):
        if not 0 <= self.min <= self.max:
            raise PathExprError(f"repeat bounds need 0 <= min <= max, got {self.min},{self.max}")
        _check_prob(self.p_continue, "p_continue")

    def count_probs(self):
        """(n, P(N = n)) for the iteration count: min, then truncated geometric."""
        span = self.max - self.min
        p = self.p_continue
        out = []
        for j in range(span + 1):
            w = p ** j * ((1.0 - p) if j < span else 1.0)
            if w > 0.0:
                out.append((self.min + j, w))
        return out

    def expected_count(self):
        return self.min + sum(self.p_continue ** j for j in range(1, self.max - self.min + 1))


@dataclass(frozen=True)
class ParallelFanout:
    child: Atom
    min: int
    max: int
    size_probs: Union[tuple, None] = None

    def __post_init__(self):
        if not isinstance(self.child, Atom):
            raise PathExprError("parallel fan-out applies to a single role")
        if not 0 <= self.min <= self.max:
            raise PathExprError(f"fan-out bounds need 0 <= min <= max, got {self.min},{self.max}")
        if self.size_probs is not None:
            probs = tuple(float(x) for x in self.size_probs)
            object.__setattr__(self, "size_probs", probs)
            if len(probs) != self.max - self.min + 1:
                raise PathExprError("size_probs must cover every size in [min, max]")
            if any(x < 0 for x in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise PathExprError("size_probs must be a probability vector")

    def count_probs(self):
        n = self.max - self.min + 1
        probs = self.size_probs or (1.0 / n,) * n
        return [(self.min + i, w) for i, w in enumerate(probs) if w > 0.0]

    def expected_count(self):
        return sum(k * w for k, w in self.count_probs())


@dataclass(frozen=True)
class Opt:
    child: "Node"
    p: float = DEFAULT_P

    def __post_init__(self):
        _check_prob(self.p, "optional probability")


Node = Union[Atom, Terminal, Seq, Repeat, ParallelFanout, Opt]


@dataclass(frozen=True)
class PathExpr:
    """Root of an expression; ``root`` is a sequence ending in Terminal."""

    root: Seq
    degraded: bool = field(default=False, compare=False)

    def __post_init__(self):
        kids = self.root.children
        if not kids or not isinstance(kids[-1], Terminal):
            raise PathExprError("expression must end with terminal")
        for k in kids[:-1]:
            if _contains_terminal(k):
                raise PathExprError("terminal may only appear once, at the end")

    @property
    def items(self):
        return self.root.children

    def roles(self):
        """Roles in order of first appearance."""
        seen = {}
        for node in walk(self.root):
            if isinstance(node, Atom):
                seen.setdefault(node.role, None)
        return list(seen)

    def __str__(self):
        return path_expr_to_text(self)


def _contains_terminal(node):
    return any(isinstance(n, Terminal) for n in walk(node))


def walk(node):
    yield node
    if isinstance(node, Seq):
        for c in node.children:
            yield from walk(c)
    elif isinstance(node, (Repeat, Opt, ParallelFanout)):
        yield from walk(node.child)


def seq_of(*nodes) -> PathExpr:
    """Convenience constructor: ``seq_of(Atom('a'), ...)`` appends Terminal."""
    return PathExpr(Seq(tuple(nodes) + (Terminal(),)))


# -- parsing -----------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg):
        raise PathExprSyntaxError(msg, len(self.text[: self.pos].encode("utf-8")))

    def peek(self, s):
        return self.text.startswith(s, self.pos)

    def expect(self, s):
        if not self.peek(s):
            self.error(f"expected {s!r}")
        self.pos += len(s)

    def integer(self):
        m = _INT.match(self.text, self.pos)
        if not m:
            self.error("expected integer")
        self.pos = m.end()
        return int(m.group())

    def seq(self):
        items = [self.term()]
        while self.peek(" -> "):
            self.pos += 4
            items.append(self.term())
        return items

    def term(self):
        start = self.pos
        if self.peek("("):
            self.pos += 1
            inner = _flatten(self.seq())
            self.expect(")")
            if any(isinstance(x, Terminal) for x in inner):
                self.pos = start
                self.error("terminal inside a group")
            node = inner[0] if len(inner) == 1 else Seq(tuple(inner))
            grouped = True
        else:
            m = _IDENT.match(self.text, self.pos)
            if not m:
                self.error("expected role name or '('")
            self.pos = m.end()
            name = m.group()
            node = Terminal() if name == TERMINAL else Atom(name)
            grouped = False
        quant = self.quant()
        if quant is None:
            # an unquantified group splices into the enclosing sequence
            if grouped and isinstance(node, Seq):
                return _Splice(node.children)
            return node
        if isinstance(node, Terminal):
            self.pos = start
            self.error("terminal cannot be quantified")
        kind, lo, hi = quant
        if lo > hi:
            self.pos = start
            self.error(f"min {lo} exceeds max {hi}")
        if kind == "?":
            return Opt(node)
        if kind == "||":
            if not isinstance(node, Atom):
                self.pos = start
                self.error("parallel fan-out applies to a single role")
            return ParallelFanout(node, lo, hi)
        return Repeat(node, lo, hi)

    def quant(self):
        if self.peek("?"):
            self.pos += 1
            return ("?", 0, 1)
        if not self.peek("^{"):
            return None
        self.pos += 2
        kind = "rep"
        if self.peek("||"):
            self.pos += 2
            kind = "||"
        lo = self.integer()
        hi = lo
        if self.peek(",") or (kind == "rep" and self.peek("-")):
            self.pos += 1
            hi = self.integer()
        self.expect("}")
        return (kind, lo, hi)


@dataclass(frozen=True)
class _Splice:
    children: tuple


def _flatten(items):
    out = []
    for x in items:
        if isinstance(x, _Splice):
            out.extend(_flatten(x.children))
        else:
            out.append(x)
    return out


def _normalize(node):
    if isinstance(node, Seq):
        kids = tuple(_normalize(c) for c in _flatten(node.children))
        return kids[0] if len(kids) == 1 else Seq(kids)
    if isinstance(node, Repeat):
        return Repeat(_normalize(node.child), node.min, node.max, node.p_continue)
    if isinstance(node, Opt):
        return Opt(_normalize(node.child), node.p)
    return node


def parse_path_expr(text: str) -> PathExpr:
    p = _Parser(text)
    items = p.seq()
    if p.pos != len(text):
        p.error("unexpected trailing input")
    items = [_normalize(x) for x in _flatten(items)]
    items = _flatten(items)
    if not any(isinstance(x, Terminal) for x in items):
        raise PathExprError("expression is missing the terminal node")
    if not isinstance(items[-1], Terminal) or sum(isinstance(x, Terminal) for x in items) > 1:
        raise PathExprError("terminal must appear exactly once, as the last element")
    return PathExpr(Seq(tuple(items)))


# -- printing ----------------------------------------------------------------


def _text(node, top):
    if isinstance(node, Atom):
        return node.role
    if isinstance(node, Terminal):
        return TERMINAL
    if isinstance(node, Seq):
        return " -> ".join(_text(c, False) for c in node.children)
    if isinstance(node, Repeat):
        return f"{_base(node.child, top)}^{{{node.min},{node.max}}}"
    if isinstance(node, ParallelFanout):
        return f"{_base(node.child, top)}^{{||{node.min},{node.max}}}"
    if isinstance(node, Opt):
        return f"{_base(node.child, top)}?"
    raise TypeError(f"not a path-expression node: {node!r}")


def _base(child, top):
    if isinstance(child, Atom):
        return f"({child.role})" if top else child.role
    return f"({_text(child, False)})"


def path_expr_to_text(expr: PathExpr) -> str:
    return " -> ".join(_text(c, True) for c in expr.items)


# -- lossless JSON tree form (keeps probabilities) ---------------------------


def node_to_json(node):
    if isinstance(node, Atom):
        return {"atom": node.role}
    if isinstance(node, Terminal):
        return {"terminal": True}
    if isinstance(node, Seq):
        return {"seq": [node_to_json(c) for c in node.children]}
    if isinstance(node, Repeat):
        return {"repeat": node_to_json(node.child), "min": node.min, "max": node.max,
                "p_continue": node.p_continue}
    if isinstance(node, ParallelFanout):
        d = {"fanout": node.child.role, "min": node.min, "max": node.max}
        if node.size_probs is not None:
            d["size_probs"] = list(node.size_probs)
        return d
    if isinstance(node, Opt):
        return {"optional": node_to_json(node.child), "p": node.p}
    raise TypeError(node)


def node_from_json(d):
    if "atom" in d:
        return Atom(d["atom"])
    if "terminal" in d:
        return Terminal()
    if "seq" in d:
        return Seq(tuple(node_from_json(c) for c in d["seq"]))
    if "repeat" in d:
        return Repeat(node_from_json(d["repeat"]), d["min"], d["max"], d["p_continue"])
    if "fanout" in d:
        probs = d.get("size_probs")
        return ParallelFanout(Atom(d["fanout"]), d["min"], d["max"],
                              tuple(probs) if probs is not None else None)
    if "optional" in d:
        return Opt(node_from_json(d["optional"]), d["p"])
    raise PathExprError(f"unrecognised node {d!r}")


def expr_to_json(expr: PathExpr):
    return {"text": path_expr_to_text(expr), "tree": node_to_json(expr.root),
            "degraded": expr.degraded}


def expr_from_json(d) -> PathExpr:
    return PathExpr(node_from_json(d["tree"]), degraded=bool(d.get("degraded", False)))
