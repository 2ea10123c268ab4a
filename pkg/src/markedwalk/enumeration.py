"""Exact oracles for small graphs and the d = 2 independent baseline sampler.

``enumerate_partitions`` grows part 1 from the smallest unassigned vertex
through connected vertex sets, pruning by weight, and recurses on the
remainder. ``enumerate_partitions_by_labeling`` reaches the same catalog by
filtering every labelling; the two share no code and cross-check each other.
Both refuse to run past a node budget (``WorkLimitExceeded``).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np
from scipy.special import logsumexp

from . import _kernels as K
from ._accel import quiet_wraparound
from .energy import EnergySpec, log_degeneracy, log_partition_weight
from .graph import SCHEMA_VERSION, DualGraph, is_connected_subset
from .rng import Stream
from .state import BalanceSpec, MarkedTreeState, Partition, kernel_graph

DEFAULT_WORK_LIMIT = 5_000_000


class WorkLimitExceeded(RuntimeError):
    def __init__(self, limit: int, what: str):
        super().__init__(f"{what} exceeded the work limit of {limit} search nodes")
        self.limit = limit


class _Budget:
    def __init__(self, limit: int, what: str):
        self.limit = limit
        self.used = 0
        self.what = what

    def tick(self) -> None:
        self.used += 1
        if self.used > self.limit:
            raise WorkLimitExceeded(self.limit, self.what)


# ---------------------------------------------------------------------------
# partitions


def _connected_sets(adj, root, allowed, weights, hi, budget):
    """Every connected subset of ``allowed`` containing ``root`` with weight <= hi."""

    def grow(members, weight, frontier, banned):
        budget.tick()
        yield members, weight
        frontier = list(frontier)
        banned = set(banned)
        while frontier:
            c = frontier.pop()
            w = weight + weights[c]
            if w <= hi:
                inside = set(members) | {c}
                new = [y for y in adj[c] if y in allowed and y not in inside and y not in banned and y not in frontier]
                yield from grow(members + (c,), w, frontier + sorted(new, reverse=True), banned)
            banned.add(c)

    first = sorted((y for y in adj[root] if y in allowed), reverse=True)
    if weights[root] <= hi:
        yield from grow((root,), weights[root], first, {root})


def _components(adj, verts: set) -> list[set]:
    out, seen = [], set()
    for s in sorted(verts):
        if s in seen:
            continue
        comp, stack = {s}, [s]
        seen.add(s)
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if y in verts and y not in seen:
                    seen.add(y)
                    comp.add(y)
                    stack.append(y)
        out.append(comp)
    return out


def _iter_partitions(g: DualGraph, d: int, balance: BalanceSpec, budget: _Budget) -> Iterator[list[tuple[int, ...]]]:
    lo, hi = balance.bounds(g, d)
    weights = balance.weights(g).tolist()
    adj = [g.neighbors(v).tolist() for v in range(g.vertex_count)]

    def rec(remaining: frozenset, k: int):
        total = sum(weights[v] for v in remaining)
        if k == 1:
            budget.tick()
            if lo <= total <= hi and is_connected_subset(g, remaining):
                yield [tuple(sorted(remaining))]
            return
        root = min(remaining)
        for members, w in _connected_sets(adj, root, remaining, weights, hi, budget):
            if w < lo:
                continue
            rest = remaining - set(members)
            rtotal = total - w
            if not ((k - 1) * lo <= rtotal <= (k - 1) * hi):
                continue
            comps = _components(adj, set(rest))
            if len(comps) > k - 1 or any(sum(weights[v] for v in c) < lo for c in comps):
                continue
            for tail in rec(frozenset(rest), k - 1):
                yield [tuple(sorted(members))] + tail

    yield from rec(frozenset(range(g.vertex_count)), d)


@dataclass
class PartitionCatalog:
    """Balanced connected d-partitions in canonical form, with their ln τ."""

    graph: DualGraph
    d: int
    balance: BalanceSpec
    partitions: list[Partition]
    log_tau: np.ndarray
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {p.key(): i for i, p in enumerate(self.partitions)}
        if len(self._index) != len(self.partitions):
            raise ValueError("catalog contains duplicate partitions")

    def __len__(self) -> int:
        return len(self.partitions)

    def index_of(self, assignment) -> int:
        """Catalog position of a partition given as assignment; KeyError if absent."""
        key = Partition(np.asarray(assignment), self.d).key()
        return self._index[key]

    def log_weights(self, spec: EnergySpec) -> np.ndarray:
        """ln of each partition's unnormalized mass under ``spec``."""
        return np.array([log_partition_weight(spec, self.graph, p) for p in self.partitions])

    def write_jsonl(self, fh: IO[str], spec: EnergySpec | None = None) -> None:
        lw = self.log_weights(spec) if spec is not None else None
        for i, p in enumerate(self.partitions):
            doc = {"schema_version": SCHEMA_VERSION, "assignment": p.assignment.tolist(), "log_tau": float(self.log_tau[i])}
            if lw is not None:
                doc["log_weight"] = float(lw[i])
            fh.write(json.dumps(doc) + "\n")


def enumerate_partitions(
    g: DualGraph, d: int, balance: BalanceSpec, work_limit: int = DEFAULT_WORK_LIMIT, with_tau: bool = True
) -> PartitionCatalog:
    """Every balanced connected d-partition, in deterministic order."""
    if d < 1 or d > g.vertex_count:
        raise ValueError("d must lie in [1, vertex_count]")
    budget = _Budget(work_limit, "partition enumeration")
    parts = [Partition.from_parts(g.vertex_count, ps) for ps in _iter_partitions(g, d, balance, budget)]
    lt = np.array([log_degeneracy(g, p) for p in parts]) if with_tau else np.full(len(parts), np.nan)
    return PartitionCatalog(g, d, balance, parts, lt)


def _restricted_growth(n: int, d: int):
    # labelings with label[0] = 0 and each new label one above the running max
    def rec(prefix, mx):
        if len(prefix) == n:
            if mx == d - 1:
                yield prefix
            return
        if d - 1 - mx > n - len(prefix):
            return
        for lab in range(min(mx + 2, d)):
            yield from rec(prefix + [lab], max(mx, lab))

    yield from rec([0], 0)


def enumerate_partitions_by_labeling(
    g: DualGraph, d: int, balance: BalanceSpec, work_limit: int = DEFAULT_WORK_LIMIT
) -> list[Partition]:
    """Brute-force oracle: filter every canonical labelling for balance and connectivity."""
    budget = _Budget(work_limit, "labeling enumeration")
    lo, hi = balance.bounds(g, d)
    w = balance.weights(g)
    out = []
    for lab in _restricted_growth(g.vertex_count, d):
        budget.tick()
        arr = np.array(lab)
        totals = np.bincount(arr, weights=w, minlength=d)
        if np.any(totals < lo) or np.any(totals > hi):
            continue
        if all(is_connected_subset(g, np.flatnonzero(arr == k)) for k in range(d)):
            out.append(Partition(arr + 1, d))
    return out


# ---------------------------------------------------------------------------
# lifted states


def enumerate_spanning_trees(g: DualGraph, work_limit: int = DEFAULT_WORK_LIMIT) -> list[frozenset[int]]:
    """All spanning trees as edge-id sets, by include/exclude with union-find pruning."""
    n, m = g.vertex_count, g.edge_count
    budget = _Budget(work_limit, "spanning tree enumeration")
    edges = g.edges.tolist()
    out = []

    def find(parent, x):
        while parent[x] != x:
            x = parent[x]
        return x

    def connected_without(excluded: set) -> bool:
        parent = list(range(n))
        comps = n
        for e, (u, v) in enumerate(edges):
            if e in excluded:
                continue
            a, b = find(parent, u), find(parent, v)
            if a != b:
                parent[a] = b
                comps -= 1
        return comps == 1

    def rec(i, chosen, parent, excluded):
        budget.tick()
        if len(chosen) == n - 1:
            out.append(frozenset(chosen))
            return
        if i == m or m - i < n - 1 - len(chosen):
            return
        u, v = edges[i]
        a, b = find(parent, u), find(parent, v)
        if a != b:
            p2 = list(parent)
            p2[a] = b
            rec(i + 1, chosen + [i], p2, excluded)
        excluded.add(i)
        if connected_without(excluded):
            rec(i + 1, chosen, parent, excluded)
        excluded.discard(i)

    rec(0, [], list(range(n)), set())
    return out


def enumerate_lifted_states(
    g: DualGraph, d: int, balance: BalanceSpec, work_limit: int = DEFAULT_WORK_LIMIT
) -> list[tuple[frozenset[int], frozenset[int]]]:
    """Every (T, M) with ``|M| = d - 1`` whose forest ``T \\ M`` is balanced."""
    budget = _Budget(work_limit, "lifted state enumeration")
    lo, hi = balance.bounds(g, d)
    w = balance.weights(g)
    out = []
    for tree in enumerate_spanning_trees(g, work_limit):
        tl = sorted(tree)
        for marks in itertools.combinations(tl, d - 1):
            budget.tick()
            ms = set(marks)
            adj = {v: [] for v in range(g.vertex_count)}
            for e in tl:
                if e not in ms:
                    a, b = g.edge_pair(e)
                    adj[a].append(b)
                    adj[b].append(a)
            comps = _components(adj, set(range(g.vertex_count)))
            if all(lo <= w[list(c)].sum() <= hi for c in comps):
                out.append((tree, frozenset(marks)))
    return out


def lifted_partition(g: DualGraph, tree: Iterable[int], marked: Iterable[int], balance: BalanceSpec | None = None) -> Partition:
    return MarkedTreeState.from_edges(g, tree, marked, balance).partition()


# ---------------------------------------------------------------------------
# exact targets


def exact_target_distribution(catalog: PartitionCatalog, spec: EnergySpec) -> np.ndarray:
    """Induced partition probabilities, ``∝ exp(J) τ**(1 - gamma)``."""
    lw = catalog.log_weights(spec)
    if not np.all(np.isfinite(lw)):
        raise ValueError("non-finite log weight in catalog")
    return np.exp(lw - logsumexp(lw))


def empirical_distribution(catalog: PartitionCatalog, assignments: np.ndarray) -> np.ndarray:
    """Visit frequencies over the catalog; KeyError if a sample is not in it."""
    counts = np.zeros(len(catalog))
    cache: dict[bytes, int] = {}
    for row in np.asarray(assignments):
        key = row.tobytes()
        i = cache.get(key)
        if i is None:
            i = cache[key] = catalog.index_of(row)
        counts[i] += 1
    return counts / max(counts.sum(), 1)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# d = 2 baseline


BASELINE_METHODS = ("recom", "uniform_edge")


def recom2_baseline(
    g: DualGraph,
    balance: BalanceSpec,
    rng: Stream,
    count: int,
    method: str = "recom",
    max_attempts: int = 100_000,
) -> np.ndarray:
    """``count`` independent balanced 2-partitions as canonical assignment rows.

    ``"recom"`` draws a uniform spanning tree and a uniform choice among its
    balancing edges, redrawing trees that have none. Trees with several
    balancing edges make this differ from the spanning tree law in general.
    ``"uniform_edge"`` instead picks a uniform tree edge and redraws unless it
    balances, which samples that law exactly.
    """
    if method not in BASELINE_METHODS:
        raise ValueError(f"unknown baseline method {method!r}")
    kg = kernel_graph(g, balance.mode)
    lo, hi = balance.bounds(g, 2)
    out = np.zeros((count, g.vertex_count), dtype=np.int64)
    with quiet_wraparound():
        for i in range(count):
            got = K.recom2_draw(kg, rng.state, lo, hi, method == "uniform_edge", max_attempts, out[i])
            if got < 0:
                raise RuntimeError(f"no balanced tree edge found in {max_attempts} trees")
    return out


def recom2_baseline_sample(g: DualGraph, balance: BalanceSpec, rng: Stream, method: str = "recom",
                           max_attempts: int = 100_000) -> Partition:
    return Partition(recom2_baseline(g, balance, rng, 1, method, max_attempts)[0], 2)
