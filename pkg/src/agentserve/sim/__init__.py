"""Discrete-event cluster simulator."""

from .config import (
    ClusterConfig, ConfigError, ExperimentConfig, PolicyConfig, PRESETS, cluster_from,
    experiment_from, load_experiment, policy_from,
)
from .engine import Deadlock, Simulation, SimulationError, build_store, run
from .metrics import MetricsReport
from .workloads import BUILTINS, WorkloadSpec, workload_from

__all__ = ["ClusterConfig", "ConfigError", "ExperimentConfig", "PolicyConfig", "PRESETS",
           "cluster_from", "experiment_from", "load_experiment", "policy_from", "Deadlock",
           "Simulation", "SimulationError", "build_store", "run", "MetricsReport", "BUILTINS",
           "WorkloadSpec", "workload_from"]
