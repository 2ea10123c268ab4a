"""Marked edge walk: MCMC over balanced connected graph partitions.

A state is a spanning tree plus ``d - 1`` marked tree edges; deleting the
marks leaves ``d`` connected parts. The chain moves the tree by edge swaps
and slides marks along it, targeting ``exp(J(P)) / tau(P)**gamma`` on lifted
states so that partitions carry mass proportional to
``exp(J(P)) * tau(P)**(1 - gamma)``.
"""

__version__ = "0.1.0"

from ._accel import backend
from .chain import (
    Chain,
    ChainConfig,
    ChainFailure,
    ChainRun,
    ConfigError,
    EnsembleRecord,
    EnsembleRun,
    mh_step,
    read_jsonl,
    run_chain,
    run_ensemble,
)
from .diagnostics import KsCurve, ks, ks_1d, ks_2d, pairwise_curves, sweep, tilt_prediction, toy_tilt
from .energy import EnergySpec, EnergyTerm, Observable, evaluate, log_partition_weight, log_target_ratio
from .enumeration import (
    PartitionCatalog,
    WorkLimitExceeded,
    enumerate_lifted_states,
    enumerate_partitions,
    enumerate_spanning_trees,
    exact_target_distribution,
    recom2_baseline,
    total_variation,
)
from .graph import (
    DualGraph,
    GraphError,
    dump_dual_graph,
    grid_graph,
    load_dual_graph,
    log_spanning_tree_count,
)
from .rng import Stream, derive_seed
from .state import BalanceSpec, InitializationError, MarkedTreeState, Partition, initial_state, is_balanced
from .walk import Proposal, RejectReason, apply, propose, propose_single_step, transition_ratio

__all__ = [
    "__version__", "backend",
    "Chain", "ChainConfig", "ChainFailure", "ChainRun", "ConfigError", "EnsembleRecord", "EnsembleRun",
    "mh_step", "read_jsonl", "run_chain", "run_ensemble",
    "KsCurve", "ks", "ks_1d", "ks_2d", "pairwise_curves", "sweep", "tilt_prediction", "toy_tilt",
    "EnergySpec", "EnergyTerm", "Observable", "evaluate", "log_partition_weight", "log_target_ratio",
    "PartitionCatalog", "WorkLimitExceeded", "enumerate_lifted_states", "enumerate_partitions",
    "enumerate_spanning_trees", "exact_target_distribution", "recom2_baseline", "total_variation",
    "DualGraph", "GraphError", "dump_dual_graph", "grid_graph", "load_dual_graph", "log_spanning_tree_count",
    "Stream", "derive_seed",
    "BalanceSpec", "InitializationError", "MarkedTreeState", "Partition", "initial_state", "is_balanced",
    "Proposal", "RejectReason", "apply", "propose", "propose_single_step", "transition_ratio",
]
