"""Metropolis-Hastings chains over lifted states, single and in ensembles.

A step draws a proposal and holds the current state on a marked-edge
collision, on a move whose reverse is impossible, or on an unbalanced forest.
Otherwise it accepts iff ``ln u <= min(0, Δ ln p + ln ratio)`` with ``u``
uniform on (0, 1]. Held steps still count and are recorded.

Chain ``i`` of an ensemble seeded ``s`` draws from ``Stream(derive_seed(s, i))``;
``run_chain`` is chain 0.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator

import numpy as np

from . import _kernels as K
from ._accel import backend, new_logt_cache, quiet_wraparound
from .energy import EnergySpec, Observable, compile_params, observable_table, validate_for_graph
from .graph import SCHEMA_VERSION, DualGraph
from .rng import Stream, derive_seed
from .state import BalanceSpec, MarkedTreeState, initial_state
from .walk import Proposal, RejectReason, STATUS_REASON, read_proposal

_MODE_ALIASES = {
    "composite": "composite",
    "metropolis_composite": "composite",
    "single": "single",
    "uniform_single_step": "single",
}


class ConfigError(ValueError):
    pass


class ChainFailure(RuntimeError):
    def __init__(self, chain_index: int, cause: BaseException):
        super().__init__(f"chain {chain_index} failed: {cause}")
        self.chain_index = chain_index
        self.cause = cause


@dataclass(frozen=True)
class ChainConfig:
    """Everything that determines a chain's output besides the graph.

    ``ratio`` selects the transition ratio: ``"exact"`` sums every selection
    tuple linking two states, ``"pathwise"`` uses the drawn path only.
    ``observables`` names extra recorded observables; ``cut_edges`` and the
    energy's own observables are always recorded.
    """

    steps: int
    d: int
    seed: int
    energy: EnergySpec = field(default_factory=EnergySpec.uniform)
    balance: BalanceSpec = field(default_factory=BalanceSpec)
    burn_in: int = 0
    record_every: int = 1
    mode: str = "composite"
    p_cycle: float = 0.5
    record_assignments: bool = False
    ratio: str = "exact"
    observables: tuple[str, ...] = ()
    max_init_attempts: int = 1000
    cache_limit: int = 1 << 16

    def __post_init__(self):
        object.__setattr__(self, "observables", tuple(self.observables))
        mode = _MODE_ALIASES.get(self.mode)
        if mode is None:
            raise ConfigError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 1:
            raise ConfigError("steps must be a positive integer")
        if self.burn_in < 0 or self.burn_in > self.steps:
            raise ConfigError("burn_in must lie in [0, steps]")
        if self.record_every < 1 or self.record_every > self.steps:
            raise ConfigError("record_every must lie in [1, steps]")
        if self.d < 2:
            raise ConfigError("d must be at least 2")
        if self.ratio not in ("exact", "pathwise"):
            raise ConfigError("ratio must be 'exact' or 'pathwise'")
        if not (0.0 <= self.p_cycle <= 1.0):
            raise ConfigError("p_cycle must lie in [0, 1]")
        if self.max_init_attempts < 1 or self.cache_limit < 1:
            raise ConfigError("max_init_attempts and cache_limit must be positive")
        for name in self.observables:
            Observable.parse(name)

    @property
    def record_count(self) -> int:
        return (self.steps - self.burn_in) // self.record_every

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "d": self.d,
            "seed": self.seed,
            "energy": self.energy.to_dict(),
            "balance": self.balance.to_dict(),
            "burn_in": self.burn_in,
            "record_every": self.record_every,
            "mode": self.mode,
            "p_cycle": self.p_cycle,
            "record_assignments": self.record_assignments,
            "ratio": self.ratio,
            "observables": list(self.observables),
            "max_init_attempts": self.max_init_attempts,
            "cache_limit": self.cache_limit,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ChainConfig":
        doc = dict(doc)
        doc["energy"] = EnergySpec.from_dict(doc.get("energy", EnergySpec.uniform().to_dict()))
        doc["balance"] = BalanceSpec(**doc.get("balance", {}))
        doc["observables"] = tuple(doc.get("observables", ()))
        return cls(**doc)


@dataclass(frozen=True)
class EnsembleRecord:
    step: int
    observables: dict
    accepted: bool
    assignment: tuple[int, ...] | None = None

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "step": self.step,
            "accepted": self.accepted,
            "observables": self.observables,
        }
        if self.assignment is not None:
            doc["assignment"] = list(self.assignment)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, line: str) -> "EnsembleRecord":
        doc = json.loads(line)
        a = doc.get("assignment")
        return cls(int(doc["step"]), dict(doc["observables"]), bool(doc["accepted"]), None if a is None else tuple(a))


@dataclass(frozen=True)
class StepInfo:
    """What one MH step saw: enough to recompute its decision."""

    status: int
    proposal: Proposal | None
    log_target: float
    ratio: float
    log_u: float
    log_accept: float

    @property
    def accepted(self) -> bool:
        return self.status == K.ACCEPTED

    @property
    def reason(self) -> RejectReason | None:
        return STATUS_REASON.get(self.status)


class Chain:
    """A lifted state plus the kernel context needed to step it."""

    def __init__(self, g: DualGraph, config: ChainConfig, rng: Stream, state: MarkedTreeState | None = None):
        self.graph = g
        self.config = config
        self.rng = rng
        if g.edge_count < g.vertex_count:
            raise ConfigError("the graph is a tree; the walk needs at least one cycle")
        spec = config.energy
        self.table = observable_table(spec, [Observable.parse(n) for n in config.observables])
        validate_for_graph(spec, self.table, g, config.d)
        lo, hi = config.balance.bounds(g, config.d)
        self.params = compile_params(
            spec, self.table, config.d, lo, hi,
            exact=config.ratio == "exact", single=config.mode == "single",
            p_cycle=config.p_cycle, cache_limit=config.cache_limit,
        )
        if state is None:
            state = initial_state(
                g, config.d, config.balance, rng, config.max_init_attempts, tilt_seed=spec.weights_seed
            )
        elif state.d != config.d:
            raise ConfigError("initial state has the wrong part count")
        self.state = state
        self.scratch = K.new_scratch(g.vertex_count, g.edge_count, config.d, len(self.table.observables))
        self.cache = new_logt_cache()
        self.counters = np.zeros(K.N_COUNTERS, dtype=np.int64)
        self.steps_done = 0
        self.refresh()

    def refresh(self) -> None:
        """Recompute tree counts and the energy of the current state from scratch."""
        with quiet_wraparound():
            K.refresh_target(self.state.kgraph, self.state.arrays, self.params, self.scratch, self.cache, self.counters)

    @property
    def names(self) -> list[str]:
        return self.table.names

    @property
    def energy(self) -> float:
        return float(self.state.arrays.floats[K.WF_J])

    @property
    def log_tau(self) -> float:
        return float(self.state.arrays.floats[K.WF_LOGTAU])

    def observables(self) -> dict:
        out = np.empty(len(self.table.observables))
        K.current_observables(self.params, self.state.arrays, self.config.d, out, self.counters)
        return dict(zip(self.names, out.tolist()))

    def step(self, trace: bool = False) -> StepInfo:
        st = self.state
        before = (st.tree_edges, st.marked) if trace else None
        with quiet_wraparound():
            status = K.mh_step(st.kgraph, st.arrays, self.params, self.scratch, self.cache, self.rng.state, self.counters)
        self.counters[status] += 1
        self.steps_done += 1
        S = self.scratch
        proposal = None
        if trace and status != K.COLLISION:
            proposal = read_proposal(S, before[0], before[1], self.config.d, status != K.UNBALANCED)
        evaluated = status in (K.ACCEPTED, K.MH_REJECT)
        return StepInfo(
            status=int(status),
            proposal=proposal,
            log_target=float(S.pf[K.PF_LOG_TARGET]) if evaluated else math.nan,
            ratio=float(S.pf[K.PF_RATIO]) if evaluated else math.nan,
            log_u=float(S.pf[K.PF_LOG_U]) if evaluated else math.nan,
            log_accept=float(S.pf[K.PF_LOG_ACCEPT]) if evaluated else math.nan,
        )

    def record(self, step: int, accepted: bool) -> EnsembleRecord:
        assignment = tuple(self.state.part_of.tolist()) if self.config.record_assignments else None
        return EnsembleRecord(step, self.observables(), accepted, assignment)

    def run(self, steps: int, burn_in: int = 0, record_every: int = 1):
        """Advance ``steps`` steps in the compiled loop; returns recorded arrays."""
        n_rec = (steps - burn_in) // record_every if steps > burn_in else 0
        n_obs = len(self.table.observables)
        n = self.graph.vertex_count
        rec_step = np.zeros(n_rec, dtype=np.int64)
        rec_acc = np.zeros(n_rec, dtype=np.bool_)
        rec_obs = np.zeros((n_rec, n_obs), dtype=np.float64)
        keep = self.config.record_assignments
        rec_assign = np.zeros((n_rec if keep else 1, n), dtype=np.int64)
        st = self.state
        with quiet_wraparound():
            r = K.run_steps(
                st.kgraph, st.arrays, self.params, self.scratch, self.cache, self.rng.state, self.counters,
                steps, burn_in, record_every, rec_step, rec_acc, rec_obs, rec_assign, keep,
            )
        if r != n_rec:  # pragma: no cover - defensive
            raise RuntimeError("record count mismatch")
        rec_step += self.steps_done
        self.steps_done += steps
        return rec_step, rec_acc, rec_obs, (rec_assign if keep else None)

    def rejection_counts(self) -> dict:
        return {
            "collision": int(self.counters[K.COLLISION]),
            "reverse_impossible": int(self.counters[K.REVERSE_IMPOSSIBLE]),
            "unbalanced": int(self.counters[K.UNBALANCED]),
            "mh_reject": int(self.counters[K.MH_REJECT]),
        }


def mh_step(chain: Chain, trace: bool = False) -> tuple[MarkedTreeState, EnsembleRecord, StepInfo]:
    """One Metropolis-Hastings step of ``chain``; the state is updated in place."""
    info = chain.step(trace)
    return chain.state, chain.record(chain.steps_done, info.accepted), info


@dataclass
class ChainRun:
    """Recorded output and summary of one chain."""

    config: ChainConfig
    chain_index: int
    seed: int
    names: list[str]
    steps: np.ndarray
    accepted: np.ndarray
    values: np.ndarray
    assignments: np.ndarray | None
    counters: dict
    runtime: float
    final_state: MarkedTreeState

    def __len__(self) -> int:
        return len(self.steps)

    def series(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise KeyError(f"observable {name!r} was not recorded") from None

    @property
    def acceptance_rate(self) -> float:
        return self.counters["accepted"] / self.config.steps

    def records(self) -> Iterator[EnsembleRecord]:
        for i in range(len(self.steps)):
            a = None if self.assignments is None else tuple(self.assignments[i].tolist())
            yield EnsembleRecord(int(self.steps[i]), dict(zip(self.names, self.values[i].tolist())), bool(self.accepted[i]), a)

    def write_jsonl(self, fh: IO[str]) -> None:
        for rec in self.records():
            fh.write(rec.to_json())
            fh.write("\n")

    def summary(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "chain_index": self.chain_index,
            "seed": self.seed,
            "steps": self.config.steps,
            "records": len(self),
            "acceptance_rate": self.acceptance_rate,
            "counters": self.counters,
            "runtime_seconds": self.runtime,
            "steps_per_second": self.config.steps / self.runtime if self.runtime > 0 else None,
            "backend": backend(),
            "observables": self.names,
        }


def _run_one(g: DualGraph, config: ChainConfig, index: int, state: MarkedTreeState | None = None) -> ChainRun:
    seed = derive_seed(config.seed, index)
    t0 = time.perf_counter()
    chain = Chain(g, config, Stream(seed), state)
    steps, acc, vals, assign = chain.run(config.steps, config.burn_in, config.record_every)
    counters = {"accepted": int(chain.counters[K.ACCEPTED]), **chain.rejection_counts(),
                "clamp_events": int(chain.counters[K.CLAMP])}
    return ChainRun(config, index, seed, chain.names, steps, acc, vals, assign, counters,
                    time.perf_counter() - t0, chain.state)


def run_chain(g: DualGraph, config: ChainConfig, initial: MarkedTreeState | None = None) -> ChainRun:
    """Run one chain (index 0); bit-identical output for identical inputs."""
    return _run_one(g, config, 0, initial)


@dataclass
class EnsembleRun:
    config: ChainConfig
    chains: list[ChainRun]

    def __iter__(self):
        return iter(self.chains)

    def __len__(self) -> int:
        return len(self.chains)

    def series(self, name: str) -> list[np.ndarray]:
        return [c.series(name) for c in self.chains]

    def summary(self) -> dict:
        steps = sum(c.config.steps for c in self.chains)
        acc = sum(c.counters["accepted"] for c in self.chains)
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "chain_count": len(self.chains),
            "acceptance_rate": acc / steps,
            "chains": [c.summary() for c in self.chains],
        }


def run_ensemble(g: DualGraph, config: ChainConfig, chain_count: int, threads: int | None = None) -> EnsembleRun:
    """Run ``chain_count`` independent chains, possibly concurrently; ordered by index."""
    if chain_count < 1:
        raise ConfigError("chain_count must be at least 1")
    threads = threads or min(chain_count, os.cpu_count() or 1)

    def job(i: int) -> ChainRun:
        try:
            return _run_one(g, config, i)
        except Exception as exc:
            raise ChainFailure(i, exc) from exc

    if threads <= 1 or chain_count == 1:
        chains = [job(i) for i in range(chain_count)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chains = list(pool.map(job, range(chain_count)))
    return EnsembleRun(config, chains)


def read_jsonl(lines: Iterable[str]) -> list[EnsembleRecord]:
    return [EnsembleRecord.from_json(line) for line in lines if line.strip()]


def replace_config(config: ChainConfig, **changes) -> ChainConfig:
    return replace(config, **changes)
