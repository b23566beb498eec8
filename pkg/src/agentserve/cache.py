"""Tiered prefix cache with lineage-aware eviction and forward staging.

Prompts are cut into fixed-size token blocks keyed by a chained hash, so a
key identifies a block together with everything before it. Each replica
owns an L1 (accelerator memory) and an L2 (host memory) tier; L3 is shared
by all replicas. L1 and L2 are exclusive (a block moves between them);
L3 may hold copies of blocks that are also resident above it.

L1 room is whatever KV memory running requests leave free, so its
capacity is supplied as a callable. Blocks in use by a running request
are pinned: they are never evicted and do not count against the cache
budget (their memory is accounted to the request).
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import block_keys, common_prefix_len
from .workflow.analysis import future_nodes
from .workflow.prompt import UnresolvedReference, assemble_prompt

BLOCK_SIZE = 64
ROOT = 0
TIERS = ("L1", "L2", "L3")


class AllocationFailure(RuntimeError):
    """Not enough unpinned space could be freed."""


@dataclass(eq=False)
class CacheBlock:
    block_id: int
    key: int
    parent: int
    tokens: np.ndarray
    start: int
    lineage: tuple  # (workflow_id, role_id)
    tier: str
    last_access: float = 0.0
    pins: int = 0

    @property
    def size(self):
        return int(self.tokens.shape[0])

    @property
    def pinned(self):
        return self.pins > 0

    @property
    def token_span(self):
        return (self.start, self.start + self.size)


# -- actions ------------------------------------------------------------------


@dataclass(frozen=True)
class Free:
    key: int


@dataclass(frozen=True)
class RetainAndWriteL3:
    key: int


@dataclass(frozen=True)
class PromoteToHost:
    tokens: np.ndarray = field(compare=False)
    length: int  # tokens to copy from L3
    lineage: tuple


@dataclass(frozen=True)
class BackgroundPrefill:
    tokens: np.ndarray = field(compare=False)
    length: int
    lineage: tuple


@dataclass(frozen=True)
class Skip:
    reason: str


# -- tiers --------------------------------------------------------------------


class Tier:
    def __init__(self, name, capacity=None):
        self.name = name
        self.capacity = capacity  # tokens, callable returning tokens, or None
        self.blocks: dict[int, CacheBlock] = {}
        self.children: dict[int, dict] = {}
        self.by_workflow: dict[str, set] = {}
        self.by_role: dict[str, set] = {}
        self.used = 0  # unpinned tokens
        self._lru = []  # heap of (last_access, -start, block_id, key); stale entries skipped

    def limit(self):
        c = self.capacity
        return c() if callable(c) else c

    def __contains__(self, key):
        return key in self.blocks

    def __len__(self):
        return len(self.blocks)

    def get(self, key):
        return self.blocks.get(key)

    def _index(self, block):
        self.by_workflow.setdefault(block.lineage[0], set()).add(block.key)
        self.by_role.setdefault(block.lineage[1], set()).add(block.key)

    def _unindex(self, block):
        for idx, name in ((self.by_workflow, block.lineage[0]), (self.by_role, block.lineage[1])):
            keys = idx.get(name)
            if keys is not None:
                keys.discard(block.key)
                if not keys:
                    del idx[name]

    def _push_lru(self, block):
        heapq.heappush(self._lru, (block.last_access, -block.start, block.block_id, block.key))
        if len(self._lru) > 4 * len(self.blocks) + 64:
            self._lru = [(b.last_access, -b.start, b.block_id, b.key)
                         for b in self.blocks.values()]
            heapq.heapify(self._lru)

    def add(self, block: CacheBlock):
        block.tier = self.name
        self.blocks[block.key] = block
        self.children.setdefault(block.parent, {})[block.key] = block
        self._index(block)
        self._push_lru(block)
        if not block.pinned:
            self.used += block.size

    def remove(self, key):
        block = self.blocks.pop(key)
        kids = self.children.get(block.parent)
        if kids is not None:
            kids.pop(key, None)
            if not kids:
                del self.children[block.parent]
        self._unindex(block)
        if not block.pinned:
            self.used -= block.size
        return block

    def touch(self, block, now):
        if block.last_access != now:
            block.last_access = now
            if self.blocks.get(block.key) is block:
                self._push_lru(block)

    def relabel(self, block, lineage):
        if block.lineage == lineage:
            return
        self._unindex(block)
        block.lineage = lineage
        self._index(block)

    def pin(self, block):
        if block.pins == 0:
            self.used -= block.size
        block.pins += 1

    def unpin(self, block):
        block.pins -= 1
        if block.pins == 0:
            self.used += block.size

    def overflow(self):
        lim = self.limit()
        return 0 if lim is None else max(0, self.used - lim)

    def lru_victims(self):
        """Unpinned blocks in (last_access, -start, block_id) order.

        Lazy: the caller is expected to remove each yielded block before
        asking for the next one.
        """
        held = []
        try:
            while self._lru:
                e = heapq.heappop(self._lru)
                b = self.blocks.get(e[3])
                if b is None or b.block_id != e[2] or b.last_access != e[0]:
                    continue
                if b.pinned:
                    held.append(e)
                    continue
                yield b
        finally:
            for e in held:
                heapq.heappush(self._lru, e)


class SharedStore(Tier):
    """Cross-replica L3 tier; also hands out block ids."""

    def __init__(self, capacity=None):
        super().__init__("L3", capacity)
        self._ids = itertools.count()

    def next_id(self):
        return next(self._ids)


class CacheHierarchy:
    """L1/L2 of one replica plus a handle on the shared L3.

    ``liveness`` returns the set of roles still ahead of any active
    workflow; it drives dead-lineage-first eviction when ``lineage_aware``.
    """

    def __init__(self, l1_capacity, l2_capacity, l3: SharedStore | None = None,
                 block_size: int = BLOCK_SIZE, pcie_rate: float = 20_000.0,
                 l3_rate: float = 5_000.0, lineage_aware: bool = False,
                 liveness=None, replica_id=0, log=None):
        self.l1 = Tier("L1", l1_capacity)
        self.l2 = Tier("L2", l2_capacity)
        self.l3 = l3 if l3 is not None else SharedStore()
        self.block_size = block_size
        self.pcie_rate = pcie_rate
        self.l3_rate = l3_rate
        self.lineage_aware = lineage_aware
        self.liveness = liveness or (lambda: frozenset())
        self.replica_id = replica_id
        self.log = log  # list receiving event dicts, or None
        self.now = 0.0
        self._pinned: dict = {}  # owner -> [blocks]

    # -- helpers --------------------------------------------------------------

    def tier(self, name) -> Tier:
        return {"L1": self.l1, "L2": self.l2, "L3": self.l3}[name]

    def _emit(self, action, block, tier):
        if self.log is not None:
            self.log.append({"time": self.now, "replica": self.replica_id, "action": action,
                             "block_id": block.block_id, "lineage": list(block.lineage),
                             "tier": tier})

    def keys(self, tokens):
        return [int(k) for k in block_keys(np.ascontiguousarray(tokens, dtype=np.int64),
                                           self.block_size)]

    def _prefix(self, tokens, keys, tiers):
        n = len(tokens)
        i = 0
        while i < len(keys) and any(keys[i] in t for t in tiers):
            i += 1
        if i == len(keys):
            return n
        bs = self.block_size
        parent = keys[i - 1] if i else ROOT
        chunk = tokens[i * bs:(i + 1) * bs]
        best = 0
        for t in tiers:
            for b in t.children.get(parent, {}).values():
                best = max(best, common_prefix_len(chunk, b.tokens))
        return i * bs + best

    # -- queries --------------------------------------------------------------

    def lookup(self, tokens, keys=None):
        """Longest cached prefix reachable using each tier and the faster ones.

        ``{"L1": a, "L2": b, "L3": c}`` with a <= b <= c: ``b`` counts a prefix
        whose blocks sit in L1 or L2, ``c`` one spread over all three.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        keys = self.keys(tokens) if keys is None else keys
        return {"L1": self._prefix(tokens, keys, (self.l1,)),
                "L2": self._prefix(tokens, keys, (self.l1, self.l2)),
                "L3": self._prefix(tokens, keys, (self.l1, self.l2, self.l3))}

    def staged_prefix(self, tokens):
        """Prefix held in this replica's L2 alone (routing tie-break)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        return self._prefix(tokens, self.keys(tokens), (self.l2,))

    def workflow_blocks(self, workflow_id):
        out = []
        for t in (self.l1, self.l2, self.l3):
            for k in sorted(t.by_workflow.get(workflow_id, ())):
                out.append(t.blocks[k])
        return out

    # -- request lifecycle ----------------------------------------------------

    def pin_prefix(self, owner, tokens, now):
        """Pin the L1-resident prefix blocks a starting request reuses."""
        self.now = now
        held = []
        for k in self.keys(tokens):
            b = self.l1.get(k)
            if b is None:
                break
            self.l1.pin(b)
            self.l1.touch(b, now)
            held.append(b)
        self._pinned[owner] = held

    def unpin(self, owner):
        for b in self._pinned.pop(owner, ()):
            self.l1.unpin(b)

    def insert(self, tokens, lineage, now, tier="L1"):
        """Cache the blocks of ``tokens`` in ``tier`` (L1 or L2).

        Existing copies are refreshed and take the new lineage. Moving into
        L1 pulls a block out of L2 and vice versa. Returns inserted blocks.
        """
        self.now = now
        tokens = np.asarray(tokens, dtype=np.int64)
        dst = self.tier(tier)
        other = self.l2 if tier == "L1" else self.l1
        out = []
        parent = ROOT
        bs = self.block_size
        for i, k in enumerate(self.keys(tokens)):
            b = dst.get(k)
            if b is None:
                b = other.get(k)
                if b is not None and tier == "L2":
                    parent = k
                    continue  # already resident above; staging never demotes
                if b is not None:
                    other.remove(k)
                else:
                    b = CacheBlock(self.l3.next_id(), k, parent, tokens[i * bs:(i + 1) * bs],
                                   i * bs, lineage, tier)
                b.lineage = lineage
                b.last_access = now
                dst.add(b)
                self._emit("insert", b, tier)
            else:
                dst.relabel(b, lineage)
                dst.touch(b, now)
            out.append(b)
            parent = k
        return out

    def write_l3(self, block, now):
        self._write_l3(block)
        self._fit(self.l3)

    def _write_l3(self, block):
        if block.key in self.l3:
            self.l3.relabel(self.l3.get(block.key), block.lineage)
            return
        copy = CacheBlock(block.block_id, block.key, block.parent, block.tokens, block.start,
                          block.lineage, "L3", self.now)
        self.l3.add(copy)
        self._emit("write_l3", copy, "L3")

    def insert_l3(self, tokens, lineage, now):
        tokens = np.asarray(tokens, dtype=np.int64)
        bs = self.block_size
        parent = ROOT
        for i, k in enumerate(self.keys(tokens)):
            b = self.l3.get(k)
            if b is None:
                b = CacheBlock(self.l3.next_id(), k, parent, tokens[i * bs:(i + 1) * bs],
                               i * bs, lineage, "L3", now)
                self.l3.add(b)
            else:
                self.l3.relabel(b, lineage)
                self.l3.touch(b, now)
            parent = k
        self._fit(self.l3)

    def drop(self, tier: Tier, key):
        b = tier.remove(key)
        self._emit("free", b, tier.name)
        return b

    # -- eviction -------------------------------------------------------------

    def victim_order(self, tier: Tier):
        """Unpinned blocks in eviction order."""
        cands = [b for b in tier.blocks.values() if not b.pinned]
        if self.lineage_aware:
            live = self.liveness()
            return sorted(cands, key=lambda b: (b.lineage[1] in live, b.last_access,
                                                -b.start, b.block_id))
        return sorted(cands, key=lambda b: (b.last_access, -b.start, b.block_id))

    def _victims(self, tier):
        if self.lineage_aware:
            live = self.liveness()
            dead = [tier.blocks[k] for role, keys in tier.by_role.items() if role not in live
                    for k in keys]
            dead = sorted((b for b in dead if not b.pinned),
                          key=lambda b: (b.last_access, -b.start, b.block_id))
            yield from dead
        yield from tier.lru_victims()

    def evict_for_space(self, tier_name, needed):
        """Free unpinned blocks of a tier until ``needed`` more tokens fit.

        Victims leave L1 for L2 and L2 for L3 (write-back); L3 victims are
        discarded. Raises AllocationFailure if unpinned space is too small.
        """
        tier = self.tier(tier_name)
        lim = tier.limit()
        if lim is None:
            return []
        excess = tier.used + needed - lim
        if excess <= 0:
            return []
        freed = []
        victims = self._victims(tier)
        try:
            for b in victims:
                self.drop(tier, b.key)
                excess -= b.size
                freed.append(b)
                if excess <= 0:
                    break
        finally:
            victims.close()
        self._demote(tier, freed)
        if excess > 0:
            raise AllocationFailure(f"{tier_name}: {excess} tokens short")
        return freed

    def _demote(self, tier, blocks):
        if not blocks or tier is self.l3:
            return
        if tier is self.l1 and (self.l2.limit() or 0) > 0:
            for b in blocks:
                if b.key not in self.l2:
                    self.l2.add(b)
                    self._emit("demote", b, "L2")
            self._fit(self.l2)
        else:
            for b in blocks:
                self._write_l3(b)
            self._fit(self.l3)

    def _fit(self, tier):
        if tier.overflow() > 0:
            try:
                self.evict_for_space(tier.name, 0)
            except AllocationFailure:
                pass

    def enforce(self, now):
        """Restore every tier's budget (called at event boundaries)."""
        self.now = now
        for t in (self.l1, self.l2, self.l3):
            self._fit(t)

    # -- actions ---------------------------------------------------------------

    def apply(self, actions, now):
        self.now = now
        for a in actions:
            if isinstance(a, Free):
                for t in (self.l1, self.l2, self.l3):
                    b = t.get(a.key)
                    if b is not None and not b.pinned:
                        self.drop(t, a.key)
            elif isinstance(a, RetainAndWriteL3):
                for t in (self.l1, self.l2):
                    b = t.get(a.key)
                    if b is not None:
                        self.write_l3(b, now)
                        break

    def dump_log(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.log or ():
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


# -- policy functions ---------------------------------------------------------


def _future(req):
    ann = req.sys_annotations
    return future_nodes(ann.predicted_path_regex, req.position)


def on_request_complete(req, cache: CacheHierarchy):
    """Free dead-lineage blocks of the request's workflow, retain the rest in L3."""
    if not req.annotated:
        return []
    future = _future(req)
    actions, seen = [], set()
    for b in cache.workflow_blocks(req.workflow_id):
        if b.pinned or b.key in seen:
            continue
        seen.add(b.key)
        actions.append(RetainAndWriteL3(b.key) if b.lineage[1] in future else Free(b.key))
    return actions


def on_prefetch_requested(req, cache: CacheHierarchy, gpu_idle: bool, history):
    """Decide how to stage the successor's prompt prefix.

    Only the part of the successor prompt that is already determined is
    staged (references into a response still being generated end it).
    """
    if not req.annotated or not req.sys_annotations.prompt_composition:
        return [Skip("no-template")]
    actions = []
    for role, template in sorted(req.sys_annotations.prompt_composition.items()):
        try:
            tokens = assemble_prompt(template, history, stop_at_partial=True)
        except UnresolvedReference:
            actions.append(Skip("unresolved"))
            continue
        n = len(tokens)
        if n == 0:
            actions.append(Skip("empty"))
            continue
        hit = cache.lookup(tokens)
        lineage = (req.workflow_id, role)
        if hit["L2"] >= n:
            actions.append(Skip("already-staged"))
        elif hit["L3"] > hit["L2"]:
            actions.append(PromoteToHost(tokens, hit["L3"], lineage))
        elif gpu_idle:
            actions.append(BackgroundPrefill(tokens, n, lineage))
        else:
            actions.append(Skip("busy"))
    return actions
