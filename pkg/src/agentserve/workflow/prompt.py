"""Prompt-composition templates and prompt assembly.

Template strings interleave literal text with references to earlier
requests of the same workflow::

    You are a helpful engineer. Base code: ${req_12:request:[0,250]}

The range ``[a,b]`` is a half-open token slice. Workload definitions use
*selectors* in place of concrete request ids (``prev``, ``last.<role>``,
``first.<role>``, ``task``); :func:`bind_template` turns those into ids
once the workflow's invocation history is known.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import numpy as np

SOURCES = ("request", "response")
_REF = re.compile(r"\$\{([^:}]+):(request|response):\[(\d+),(\d+)\]\}")


class TemplateError(ValueError):
    pass


class UnresolvedReference(LookupError):
    """A template names a request that is not (yet) in the history."""

    def __init__(self, request_id):
        super().__init__(f"unresolved request reference {request_id!r}")
        self.request_id = request_id


@dataclass(frozen=True)
class Literal:
    text: str


@dataclass(frozen=True)
class Ref:
    request_id: str
    source: str
    start: int
    end: int

    def __post_init__(self):
        if self.source not in SOURCES:
            raise TemplateError(f"source must be request or response, got {self.source!r}")
        if not 0 <= self.start < self.end:
            raise TemplateError(f"token range needs 0 <= start < end, got [{self.start},{self.end})")


@dataclass(frozen=True)
class PromptTemplate:
    segments: tuple

    def refs(self):
        return [s for s in self.segments if isinstance(s, Ref)]


def parse_template(text: str) -> PromptTemplate:
    segments = []
    pos = 0
    for m in _REF.finditer(text):
        if m.start() > pos:
            segments.append(Literal(text[pos:m.start()]))
        segments.append(Ref(m.group(1), m.group(2), int(m.group(3)), int(m.group(4))))
        pos = m.end()
    if pos < len(text):
        segments.append(Literal(text[pos:]))
    if any("${" in s.text for s in segments if isinstance(s, Literal)):
        raise TemplateError(f"malformed placeholder in template {text!r}")
    return PromptTemplate(tuple(segments))


def format_template(template: PromptTemplate) -> str:
    parts = []
    for s in template.segments:
        if isinstance(s, Literal):
            parts.append(s.text)
        else:
            parts.append(f"${{{s.request_id}:{s.source}:[{s.start},{s.end}]}}")
    return "".join(parts)


def tokenize(text: str) -> np.ndarray:
    """One token per whitespace-delimited word; ids are stable across runs."""
    words = text.split()
    return np.fromiter((zlib.crc32(w.encode("utf-8")) for w in words),
                       dtype=np.int64, count=len(words))


def assemble_prompt(template: PromptTemplate, history, stop_at_partial: bool = False) -> np.ndarray:
    """Concatenate literal tokens and referenced slices (ranges are clamped).

    ``history`` maps request id to a mapping with ``request`` and
    ``response`` token arrays. An entry may carry ``partial=True`` while
    its response is still being generated; with ``stop_at_partial`` the
    result is cut at the first reference into such a response, which is
    the longest prefix known to be exact.
    """
    parts = []
    for seg in template.segments:
        if isinstance(seg, Literal):
            parts.append(tokenize(seg.text))
            continue
        entry = history.get(seg.request_id)
        if entry is None:
            raise UnresolvedReference(seg.request_id)
        toks = entry[seg.source]
        if toks is None:
            raise UnresolvedReference(seg.request_id)
        parts.append(np.asarray(toks[seg.start:seg.end], dtype=np.int64))
        if stop_at_partial and seg.source == "response" and entry.get("partial"):
            break
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(parts)


def resolve_selector(selector: str, invocations, task_id: str):
    """Map a selector to a request id.

    ``invocations`` is the ordered list of (request_id, role) already issued
    by the workflow. Returns None when the selector has no target yet.
    """
    if selector == "task":
        return task_id
    if selector == "prev":
        return invocations[-1][0] if invocations else None
    if selector.startswith("last."):
        role = selector[5:]
        for rid, r in reversed(invocations):
            if r == role:
                return rid
        return None
    if selector.startswith("first."):
        role = selector[6:]
        for rid, r in invocations:
            if r == role:
                return rid
        return None
    return selector  # already a concrete id


def bind_template(template: PromptTemplate, invocations, task_id: str) -> PromptTemplate:
    """Replace selectors by concrete request ids.

    Selectors without a target keep their text, so assembly later reports
    them as unresolved.
    """
    segs = []
    for s in template.segments:
        if isinstance(s, Ref):
            rid = resolve_selector(s.request_id, invocations, task_id)
            s = Ref(rid if rid is not None else s.request_id, s.source, s.start, s.end)
        segs.append(s)
    return PromptTemplate(tuple(segs))
