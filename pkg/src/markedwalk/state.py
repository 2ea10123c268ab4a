"""Lifted walk states: a spanning tree with marked edges, and the partition it induces."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import _kernels as K
from ._accel import quiet_wraparound
from .graph import DualGraph, is_connected_subset
from .rng import Stream, splitmix64_sequence

# Zobrist keys are a property of the package, not of any run
_ZOBRIST_SEED = 0x5EED_0F_7EE5


class InvalidStateError(ValueError):
    pass


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BalanceSpec:
    """Hard balance: each part's weight within ``ideal * (1 +/- epsilon)``.

    ``mode`` is ``"population"`` (sum of vertex populations) or ``"node"``
    (vertex count); ``ideal`` is the total weight divided by the part count.
    """

    mode: str = "population"
    epsilon: float = 0.0

    def __post_init__(self):
        if self.mode not in ("population", "node"):
            raise ValueError(f"unknown balance mode {self.mode!r}")
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError("epsilon must lie in [0, 1)")

    def weights(self, g: DualGraph) -> np.ndarray:
        if self.mode == "node":
            return np.ones(g.vertex_count)
        return np.asarray(g.population, dtype=np.float64)

    def bounds(self, g: DualGraph, d: int) -> tuple[float, float]:
        ideal = float(self.weights(g).sum()) / d
        # float slack so sums of integer populations are never misjudged
        slack = 1e-10 * ideal
        return ideal * (1.0 - self.epsilon) - slack, ideal * (1.0 + self.epsilon) + slack

    def to_dict(self) -> dict:
        return {"mode": self.mode, "epsilon": self.epsilon}


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of every vertex to a part labelled ``1..d``."""

    assignment: np.ndarray
    d: int

    def __post_init__(self):
        arr = np.asarray(self.assignment, dtype=np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "assignment", arr)

    @classmethod
    def from_parts(cls, n: int, parts: Iterable[Iterable[int]]) -> "Partition":
        arr = np.zeros(n, dtype=np.int64)
        parts = list(parts)
        for k, part in enumerate(parts):
            for v in part:
                arr[v] = k + 1
        return cls(arr, len(parts)).canonical()

    def canonical(self) -> "Partition":
        """Relabel so the part holding the smallest vertex id is 1, and so on."""
        relabel: dict[int, int] = {}
        out = np.empty_like(self.assignment)
        for v, lab in enumerate(self.assignment.tolist()):
            if lab not in relabel:
                relabel[lab] = len(relabel) + 1
            out[v] = relabel[lab]
        return Partition(out, len(relabel))

    def parts(self) -> list[frozenset[int]]:
        buckets: list[set[int]] = [set() for _ in range(self.d)]
        for v, lab in enumerate(self.assignment.tolist()):
            buckets[lab - 1].add(v)
        return [frozenset(b) for b in buckets]

    def key(self) -> tuple[int, ...]:
        return tuple(self.canonical().assignment.tolist())

    def is_valid(self, g: DualGraph) -> bool:
        if len(self.assignment) != g.vertex_count:
            return False
        if set(self.assignment.tolist()) != set(range(1, self.d + 1)):
            return False
        return all(is_connected_subset(g, p) for p in self.parts())

    def __eq__(self, other) -> bool:
        return isinstance(other, Partition) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def __repr__(self) -> str:
        return f"Partition({'|'.join(','.join(map(str, sorted(p))) for p in self.parts())})"

    def to_json(self, g: DualGraph | None = None) -> str:
        doc: dict = {"assignment": self.assignment.tolist()}
        if g is not None:
            doc["ids"] = list(g.ids)
        return json.dumps(doc)


def is_balanced(partition: Partition, g: DualGraph, spec: BalanceSpec) -> bool:
    lo, hi = spec.bounds(g, partition.d)
    w = spec.weights(g)
    totals = np.bincount(partition.assignment - 1, weights=w, minlength=partition.d)
    return bool(np.all((totals >= lo) & (totals <= hi)))


# ---------------------------------------------------------------------------
# kernel-side graph


def kernel_graph(g: DualGraph, mode: str = "population", tilt_seed: int | None = None) -> K.KGraph:
    """Flat arrays for the kernels; cached on the graph per (mode, tilt seed)."""
    key = (mode, tilt_seed)
    cached = g._kernel_cache.get(key)
    if cached is not None:
        return cached
    n = g.vertex_count
    weight = np.ones(n) if mode == "node" else np.array(g.population, dtype=np.float64)
    dem = np.array(g.vertex_attrs.get("dem_votes", np.zeros(n)), dtype=np.float64)
    rep = np.array(g.vertex_attrs.get("rep_votes", np.zeros(n)), dtype=np.float64)
    tilt = tilt_weights(n, tilt_seed) if tilt_seed is not None else np.zeros(n)
    keys = np.array(splitmix64_sequence(_ZOBRIST_SEED, 2 * n), dtype=np.uint64).view(np.int64)
    kg = K.KGraph(
        n=n,
        m=g.edge_count,
        eu=np.ascontiguousarray(g.edges[:, 0]),
        ev=np.ascontiguousarray(g.edges[:, 1]),
        adj_ptr=np.array(g.adj_ptr),
        adj_nbr=np.array(g.adj_nbr),
        adj_eid=np.array(g.adj_eid),
        weight=weight,
        dem=dem,
        rep=rep,
        tilt=tilt,
        zob1=keys[:n].copy(),
        zob2=keys[n:].copy(),
    )
    g._kernel_cache[key] = kg
    return kg


def tilt_weights(n: int, seed: int) -> np.ndarray:
    """Per-vertex weights uniform on [0, 1), drawn once from ``Stream(seed)``."""
    return Stream(seed).uniform_array(n)


# ---------------------------------------------------------------------------
# states


def _components(n: int, adjacency: list[list[int]]) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for s in range(n):
        if labels[s] >= 0:
            continue
        labels[s] = nxt
        queue = deque([s])
        while queue:
            x = queue.popleft()
            for y in adjacency[x]:
                if labels[y] < 0:
                    labels[y] = nxt
                    queue.append(y)
        nxt += 1
    return labels


def build_arrays(g: DualGraph, kg: K.KGraph, tree_edges: Iterable[int], marked: Iterable[int]) -> K.WState:
    """From-scratch construction of the kernel state; validates the invariants."""
    n, m = g.vertex_count, g.edge_count
    tree = sorted(set(int(e) for e in tree_edges))
    mark = sorted(set(int(e) for e in marked))
    if len(tree) != n - 1:
        raise InvalidStateError(f"a spanning tree needs {n - 1} edges, got {len(tree)}")
    if any(not (0 <= e < m) for e in tree):
        raise InvalidStateError("tree edge id out of range")
    if not set(mark) <= set(tree):
        raise InvalidStateError("marked edges must belong to the tree")
    in_tree = np.zeros(m, dtype=np.int64)
    in_tree[tree] = 1
    is_marked = np.zeros(m, dtype=np.int64)
    is_marked[mark] = 1

    tadj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for e in tree:
        u, v = g.edge_pair(e)
        tadj[u].append((v, e))
        tadj[v].append((u, e))
    parent = np.full(n, -1, dtype=np.int64)
    parent_edge = np.full(n, -1, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        x = queue.popleft()
        for y, e in sorted(tadj[x]):
            if not seen[y]:
                seen[y] = True
                parent[y] = x
                parent_edge[y] = e
                queue.append(y)
    if not seen.all():
        raise InvalidStateError("tree edges do not span the graph")

    forest = [[y for y, e in tadj[x] if not is_marked[e]] for x in range(n)]
    label = _components(n, forest)
    d = len(mark) + 1
    if label.max() + 1 != d:  # pragma: no cover - a tree minus k edges has k + 1 components
        raise InvalidStateError("forest does not have d components")

    nontree = np.array([e for e in range(m) if not in_tree[e]], dtype=np.int64)
    nt_pos = np.full(m, -1, dtype=np.int64)
    nt_pos[nontree] = np.arange(len(nontree))

    p_weight = np.zeros(d)
    p_dem = np.zeros(d)
    p_rep = np.zeros(d)
    p_tilt = np.zeros(d)
    p_size = np.zeros(d, dtype=np.int64)
    p_min = np.full(d, n, dtype=np.int64)
    p_h1 = np.zeros(d, dtype=np.int64)
    p_h2 = np.zeros(d, dtype=np.int64)
    for v in range(n):
        lab = label[v]
        p_weight[lab] += kg.weight[v]
        p_dem[lab] += kg.dem[v]
        p_rep[lab] += kg.rep[v]
        p_tilt[lab] += kg.tilt[v]
        p_size[lab] += 1
        p_min[lab] = min(p_min[lab], v)
        p_h1[lab] ^= kg.zob1[v]
        p_h2[lab] ^= kg.zob2[v]
    cross = np.zeros((d, d), dtype=np.int64)
    cut = 0
    for u, v in g.edges.tolist():
        a, b = label[u], label[v]
        if a != b:
            cross[a, b] += 1
            cross[b, a] += 1
            cut += 1
    deg = np.bincount(np.concatenate([g.edges[tree, 0], g.edges[tree, 1]]), minlength=n).astype(np.int64)
    return K.WState(
        in_tree=in_tree,
        marked=is_marked,
        marked_list=np.array(mark, dtype=np.int64),
        nontree=nontree,
        nt_pos=nt_pos,
        parent=parent,
        parent_edge=parent_edge,
        deg=deg,
        label=label,
        p_weight=p_weight,
        p_dem=p_dem,
        p_rep=p_rep,
        p_tilt=p_tilt,
        p_size=p_size,
        p_min=p_min,
        p_h1=p_h1,
        p_h2=p_h2,
        p_logt=np.full(d, np.nan),
        cross=cross,
        ints=np.array([cut, 0], dtype=np.int64),
        floats=np.full(4, np.nan),
    )


class MarkedTreeState:
    """A spanning tree ``T`` of the dual graph plus ``d - 1`` marked tree edges.

    Deleting the marked edges leaves ``d`` subtrees; their vertex sets are the
    parts of the induced partition. The kernel arrays in ``arrays`` are owned
    by this object and mutated in place by the chain.
    """

    def __init__(self, graph: DualGraph, balance: BalanceSpec, kgraph: K.KGraph, arrays: K.WState):
        self.graph = graph
        self.balance = balance
        self.kgraph = kgraph
        self.arrays = arrays

    @classmethod
    def from_edges(
        cls,
        graph: DualGraph,
        tree_edges: Iterable[int],
        marked: Iterable[int],
        balance: BalanceSpec | None = None,
        *,
        tilt_seed: int | None = None,
        check_balance: bool = False,
    ) -> "MarkedTreeState":
        balance = balance or BalanceSpec()
        kg = kernel_graph(graph, balance.mode, tilt_seed)
        state = cls(graph, balance, kg, build_arrays(graph, kg, tree_edges, marked))
        if check_balance and not is_balanced(state.partition(), graph, balance):
            raise InvalidStateError("forest is not balanced")
        return state

    @property
    def d(self) -> int:
        return len(self.arrays.marked_list) + 1

    @property
    def tree_edges(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.arrays.in_tree).tolist())

    @property
    def marked(self) -> frozenset[int]:
        return frozenset(self.arrays.marked_list.tolist())

    @property
    def part_of(self) -> np.ndarray:
        out = np.empty(self.graph.vertex_count, dtype=np.int64)
        K.canonical_assignment(self.arrays, self.d, self.graph.vertex_count, out)
        return out

    def partition(self) -> Partition:
        return Partition(self.part_of, self.d)

    def tree_degree(self, v: int) -> int:
        return int(self.arrays.deg[v])

    def tree_neighbors(self, v: int) -> list[int]:
        g = self.graph
        return [int(y) for y, e in zip(g.neighbors(v), g.incident_edges(v)) if self.arrays.in_tree[e]]

    def key(self) -> tuple[frozenset[int], frozenset[int]]:
        return self.tree_edges, self.marked

    def copy(self) -> "MarkedTreeState":
        arrays = K.WState(*[a.copy() for a in self.arrays])
        return MarkedTreeState(self.graph, self.balance, self.kgraph, arrays)

    def rebuilt(self) -> "MarkedTreeState":
        """The same (T, M) reconstructed from scratch, for consistency checks."""
        return MarkedTreeState(
            self.graph, self.balance, self.kgraph,
            build_arrays(self.graph, self.kgraph, self.tree_edges, self.marked),
        )

    def check_invariants(self) -> None:
        """Raise ``InvalidStateError`` if the incremental arrays drifted from (T, M)."""
        fresh = build_arrays(self.graph, self.kgraph, self.tree_edges, self.marked)
        a = self.arrays
        if not np.array_equal(self.part_of, MarkedTreeState(self.graph, self.balance, self.kgraph, fresh).part_of):
            raise InvalidStateError("part labels disagree with the forest")
        if not np.array_equal(a.deg, fresh.deg):
            raise InvalidStateError("tree degrees out of sync")
        if sorted(a.nontree.tolist()) != sorted(fresh.nontree.tolist()):
            raise InvalidStateError("non-tree edge list out of sync")
        if any(a.nt_pos[e] != i for i, e in enumerate(a.nontree.tolist())):
            raise InvalidStateError("non-tree positions out of sync")
        # parent pointers must describe exactly the tree
        n = self.graph.vertex_count
        roots = [v for v in range(n) if a.parent[v] < 0]
        if len(roots) != 1:
            raise InvalidStateError("parent array must have exactly one root")
        pe = sorted(int(a.parent_edge[v]) for v in range(n) if a.parent[v] >= 0)
        if pe != sorted(self.tree_edges):
            raise InvalidStateError("parent edges do not match the tree")
        for v in range(n):
            p = a.parent[v]
            if p >= 0 and set(self.graph.edge_pair(a.parent_edge[v])) != {v, int(p)}:
                raise InvalidStateError("parent edge does not join child and parent")
        if int(a.ints[0]) != int(fresh.ints[0]):
            raise InvalidStateError("cut edge count out of sync")
        rank = _label_rank(a)
        frank = _label_rank(fresh)
        for name in ("p_weight", "p_dem", "p_rep", "p_tilt", "p_size", "p_min", "p_h1", "p_h2"):
            if not np.allclose(getattr(a, name)[rank], getattr(fresh, name)[frank], rtol=1e-9, atol=1e-9):
                raise InvalidStateError(f"part tally {name} out of sync")
        if not np.array_equal(a.cross[np.ix_(rank, rank)], fresh.cross[np.ix_(frank, frank)]):
            raise InvalidStateError("part adjacency counts out of sync")

    def __repr__(self) -> str:
        return f"MarkedTreeState(d={self.d}, marked={sorted(self.marked)}, {self.partition()!r})"


def _label_rank(a: K.WState) -> np.ndarray:
    return np.argsort(a.p_min)


def partition_of(state: MarkedTreeState) -> Partition:
    return state.partition()


# ---------------------------------------------------------------------------
# initial state


def uniform_spanning_tree(g: DualGraph, rng: Stream) -> list[int]:
    """Edge ids of a uniformly random spanning tree (Wilson's algorithm)."""
    kg = kernel_graph(g)
    n = g.vertex_count
    parent = np.empty(n, np.int64)
    parent_edge = np.empty(n, np.int64)
    with quiet_wraparound():
        K.wilson_tree(kg, rng.state, 0, parent, parent_edge,
                      np.empty(n, np.int64), np.empty(n, np.int64), np.empty(n, np.int64))
    return sorted(int(e) for e in parent_edge if e >= 0)


def _balanced_marks(g, weights, tree, d, lo, hi, rng, budget):
    """Choose d-1 tree edges leaving balanced subtrees, by recursive splitting."""
    tadj: dict[int, list[tuple[int, int]]] = {v: [] for v in range(g.vertex_count)}
    for e in tree:
        u, v = g.edge_pair(e)
        tadj[u].append((v, e))
        tadj[v].append((u, e))
    nodes = [0]

    def split(comp: frozenset[int], k: int):
        nodes[0] += 1
        if nodes[0] > budget:
            return None
        total = sum(weights[v] for v in comp)
        if k == 1:
            return [] if lo <= total <= hi else None
        root = min(comp)
        parent = {root: (-1, -1)}
        order = [root]
        for x in order:
            for y, e in tadj[x]:
                if y in comp and y not in parent:
                    parent[y] = (x, e)
                    order.append(y)
        sub = {v: weights[v] for v in comp}
        for v in reversed(order[1:]):
            sub[parent[v][0]] += sub[v]
        cands = []
        for v in order[1:]:
            s, rest = sub[v], total - sub[v]
            if lo <= s <= hi and (k - 1) * lo <= rest <= (k - 1) * hi:
                cands.append((v, False))
            elif lo <= rest <= hi and (k - 1) * lo <= s <= (k - 1) * hi:
                cands.append((v, True))
        for v, keep_subtree in rng.shuffled(cands):
            below = {v}
            for x in order:
                if x in below:
                    continue
                if parent[x][0] in below:
                    below.add(x)
            below = frozenset(below)
            remainder = below if keep_subtree else comp - below
            rest = split(remainder, k - 1)
            if rest is not None:
                return [parent[v][1]] + rest
        return None

    return split(frozenset(range(g.vertex_count)), d)


def initial_state(
    g: DualGraph,
    d: int,
    spec: BalanceSpec,
    rng: Stream,
    max_attempts: int = 1000,
    *,
    tilt_seed: int | None = None,
    search_budget: int = 10_000,
) -> MarkedTreeState:
    """Uniform spanning tree plus a balanced set of marks, retrying fresh trees."""
    if d < 2:
        raise ValueError("initial_state needs d >= 2")
    if d > g.vertex_count:
        raise ValueError("more parts than vertices")
    lo, hi = spec.bounds(g, d)
    weights = spec.weights(g).tolist()
    for _ in range(max_attempts):
        tree = uniform_spanning_tree(g, rng)
        marks = _balanced_marks(g, weights, tree, d, lo, hi, rng, search_budget)
        if marks is not None:
            return MarkedTreeState.from_edges(g, tree, marks, spec, tilt_seed=tilt_seed)
    raise InitializationError(
        f"no balanced marked-edge configuration found after {max_attempts} attempts "
        f"(d={d}, epsilon={spec.epsilon})"
    )
