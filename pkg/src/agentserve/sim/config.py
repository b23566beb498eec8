"""Declarative experiment configuration (YAML or JSON).

Schema (keys marked * are required)::

    workload*:                    # mapping, or a path to a YAML/JSON file holding one
      builtin: coding_assistant | deep_research | fanout_burst
      workflows: [...]            # inline definitions (instead of builtin)
      n_workflows: 64
      concurrency: 64             # workflows in flight at once
      warmup_workflows: 200       # profiler training set, not measured
      arrival: {rate: 1.0, cv: 1.0, cron_period: null, cron_batch: null}
    cluster*:                     # mapping or file path
      models*: {<model>: {replicas*: 2, kv_capacity: ..., ...}}
      defaults: {kv_capacity, l2_capacity, prefill_rate, decode_rate,
                 batch_penalty, pcie_rate, l3_rate}
      l3_capacity: null
      gpu_budget: null            # defaults to the initial replica count
      model_load_s: 30
      max_output_len: 16384
    policy*: pythia | fcfs | lru_only | static_scale | {preset: ..., <toggle>: ...}
                                  # or a list of those (one report per policy and seed)
    seeds: [1]
    output_dir: results
    sweep: {concurrency: [8, 16, 32, 64]}   # optional; reports go to concurrency_<c>/
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, fields, replace

import yaml


class ConfigError(ValueError):
    pass


# -- policies -------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyConfig:
    name: str = "custom"
    capacity_routing: bool = True  # reservation routing + ingress queue
    priority: bool = True  # graph-derived priorities (else FCFS)
    lineage_cache: bool = True  # early eviction + dead-first eviction
    staging: bool = True  # forward staging into L2
    autoscale: bool = True
    online_profiling: bool = True
    epsilon: float = 0.05
    omega1: float = 1.0
    omega2: float = 1.0
    idle_threshold: int = 2
    window_ms: float = 50.0
    aging_rate: float = 0.02
    horizon_steps: int = 2
    eval_period_s: float = 1.0
    prefetch_fraction: float = 0.5

    @property
    def proactive(self):
        return self.capacity_routing or self.priority or self.lineage_cache or self.staging


_OFF = dict(capacity_routing=False, priority=False, lineage_cache=False, staging=False,
            autoscale=False)
PRESETS = {
    "pythia": PolicyConfig(name="pythia"),
    "fcfs": PolicyConfig(name="fcfs", **_OFF),
    "lru_only": PolicyConfig(name="lru_only", lineage_cache=False, staging=False),
    "static_scale": PolicyConfig(name="static_scale", autoscale=False),
}
PRESETS["proactive"] = replace(PRESETS["pythia"], name="proactive")
_POLICY_KEYS = {f.name for f in fields(PolicyConfig)}


def policy_from(value) -> PolicyConfig:
    if isinstance(value, PolicyConfig):
        return value
    if isinstance(value, str):
        if value not in PRESETS:
            raise ConfigError(f"unknown policy preset {value!r}; choose from {sorted(PRESETS)}")
        return PRESETS[value]
    if isinstance(value, dict):
        d = dict(value)
        preset = d.pop("preset", None)
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown policy preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset] if preset else PolicyConfig()
        unknown = set(d) - _POLICY_KEYS
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        if "name" not in d and preset:
            d["name"] = f"{base.name}_custom" if d else base.name
        return replace(base, **d)
    raise ConfigError("policy must be a preset name or a mapping")


# -- cluster ----------------------------------------------------------------------

MODEL_DEFAULTS = dict(kv_capacity=64_000, l2_capacity=256_000, prefill_rate=5_000.0,
                      decode_rate=50.0, batch_penalty=0.05, pcie_rate=20_000.0,
                      l3_rate=5_000.0, slot_cost=1)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    replicas: int
    kv_capacity: int
    l2_capacity: int
    prefill_rate: float
    decode_rate: float
    batch_penalty: float
    pcie_rate: float
    l3_rate: float
    slot_cost: int = 1


@dataclass(frozen=True)
class ClusterConfig:
    models: dict  # name -> ModelConfig
    gpu_budget: int
    l3_capacity: int | None = None
    model_load_s: float = 30.0
    max_output_len: int = 16_384
    min_replicas: int = 1


def cluster_from(d) -> ClusterConfig:
    _need(d, "models", "cluster")
    defaults = dict(MODEL_DEFAULTS)
    defaults.update(d.get("defaults") or {})
    models = {}
    for name, m in sorted(d["models"].items()):
        _need(m, "replicas", f"cluster.models.{name}")
        merged = dict(defaults)
        merged.update(m)
        unknown = set(merged) - set(MODEL_DEFAULTS) - {"replicas"}
        if unknown:
            raise ConfigError(f"unknown keys in cluster.models.{name}: {sorted(unknown)}")
        models[name] = ModelConfig(name=name, **merged)
    initial = sum(m.replicas * m.slot_cost for m in models.values())
    budget = d.get("gpu_budget")
    budget = initial if budget is None else int(budget)
    if budget < initial:
        raise ConfigError(f"cluster.gpu_budget {budget} is below the initial allocation {initial}")
    return ClusterConfig(models, budget, d.get("l3_capacity"), float(d.get("model_load_s", 30.0)),
                         int(d.get("max_output_len", 16_384)), int(d.get("min_replicas", 1)))


# -- experiments --------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    workload: object  # WorkloadSpec
    cluster: ClusterConfig
    policies: list  # [PolicyConfig]
    seeds: list = field(default_factory=lambda: [1])
    output_dir: str = "results"
    concurrency: list = field(default_factory=list)  # empty: no sweep
    raw: dict = field(default_factory=dict)


def _need(d, key, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    if key not in d:
        raise ConfigError(f"missing required key: {where}.{key}" if where else
                          f"missing required key: {key}")


def _section(value, key, base_dir):
    if isinstance(value, str):
        path = os.path.join(base_dir, value) if base_dir else value
        if not os.path.exists(path):
            raise ConfigError(f"{key}: referenced file not found: {value}")
        return load_config_file(path)
    return value


def _int_list(value, key):
    if isinstance(value, int) and not isinstance(value, bool):
        return [value]
    if not isinstance(value, list) or not value or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in value):
        raise ConfigError(f"{key} must be an integer or a non-empty list of integers")
    return list(value)


def experiment_from(d, base_dir=None) -> ExperimentConfig:
    """Validate a whole experiment before anything runs."""
    from .workloads import workload_from  # workloads import this module

    for key in ("workload", "cluster", "policy"):
        _need(d, key, "")
    raw = copy.deepcopy(d)
    workload = workload_from(_section(d["workload"], "workload", base_dir))
    cluster = cluster_from(_section(d["cluster"], "cluster", base_dir))
    missing = sorted({r.model for wf in workload.workflows for r in wf.roles.values()}
                     - set(cluster.models))
    if missing:
        raise ConfigError(f"workload uses models missing from cluster.models: {missing}")
    pol = d["policy"]
    policies = [policy_from(p) for p in (pol if isinstance(pol, list) else [pol])]
    if not policies:
        raise ConfigError("policy list is empty")
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ConfigError(f"policy names must be distinct: {names}")
    seeds = _int_list(d.get("seeds", [1]), "seeds")
    sweep = d.get("sweep") or {}
    if not isinstance(sweep, dict) or set(sweep) - {"concurrency"}:
        raise ConfigError("sweep accepts only a concurrency list")
    conc = _int_list(sweep["concurrency"], "sweep.concurrency") if "concurrency" in sweep else []
    if any(c < 1 for c in conc):
        raise ConfigError("sweep.concurrency values must be positive")
    return ExperimentConfig(workload, cluster, policies, seeds,
                            str(d.get("output_dir", "results")), conc, raw)


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_experiment(path) -> ExperimentConfig:
    return experiment_from(load_config_file(path), os.path.dirname(os.path.abspath(path)))
