"""Per-replica simulation state."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..cache import CacheHierarchy
from ..worker import WorkerQueue
from .config import ModelConfig

LOADING, READY, DRAINING, OFF = "loading", "ready", "draining", "off"


@dataclass(eq=False)
class ReplicaState:
    replica_id: int
    model: ModelConfig
    cache: CacheHierarchy
    worker: WorkerQueue
    status: str = READY
    max_output_len: int = 16_384
    mode: str = "idle"  # idle | prefill | decode | background
    version: int = 0  # bumps invalidate scheduled span/prefill events
    prefilling: list = field(default_factory=list)
    running: dict = field(default_factory=dict)
    span: tuple | None = None  # (start, dt, n, k_end)
    background: tuple | None = None  # (start, tokens, length, base, lineage)
    reserved_tokens: int = 0
    alpha_sum: float = 0.0
    exhaustions: int = 0
    tick_at: float | None = None

    @property
    def model_id(self):
        return self.model.name

    @property
    def kv_capacity(self):
        return self.model.kv_capacity

    @property
    def serving(self):
        return self.status in (READY, DRAINING)

    @property
    def routable(self):
        return self.status == READY

    @property
    def outstanding(self):
        return len(self.worker.pool) + len(self.prefilling) + len(self.running)

    @property
    def occupancy(self):
        """KV tokens held by admitted requests (prompt plus generated)."""
        occ = 0
        for r in self.prefilling:
            occ += r.prompt_len + r.tokens_generated
        for r in self.running.values():
            occ += r.prompt_len + r.tokens_generated
        return occ

    @property
    def idle(self):
        return (self.mode == "idle" and not self.worker.pool and not self.running
                and not self.prefilling)

    def invalidate(self):
        self.version += 1
        return self.version
