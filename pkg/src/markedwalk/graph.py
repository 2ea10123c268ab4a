"""Dual graphs, JSON ingestion and spanning-tree counting.

Tree counts are astronomically large on real dual graphs, so every count is
carried as a natural log. The count itself is the determinant of a reduced
(weighted) Laplacian, factored with partial pivoting; cost is O(k^3) in the
number of vertices of the counted (sub)graph.
"""

from __future__ import annotations

import io
import json
import math
from collections import deque
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ._accel import kernel

SCHEMA_VERSION = "1.0"


class GraphError(ValueError):
    """Base class for dual-graph validation failures."""


class GraphParseError(GraphError):
    pass


class SelfLoopError(GraphError):
    pass


class DuplicateEdgeError(GraphError):
    pass


class MissingPopulationError(GraphError):
    pass


class DisconnectedGraphError(GraphError):
    pass


class DisconnectedSubsetError(GraphError):
    """The counted vertex set does not induce a connected (multi)graph."""


class DualGraph:
    """Immutable undirected graph with per-vertex numeric attributes.

    Vertices are dense integers ``0..n-1`` in file order; the external string
    ids survive in ``ids``. Edges are stored as ``(min, max)`` pairs and an
    edge's index into ``edges`` is its stable ``EdgeId``.
    """

    def __init__(
        self,
        vertex_count: int,
        edges: Iterable[tuple[int, int]],
        vertex_attrs: Mapping[str, Iterable[float]] | None = None,
        ids: Iterable[str] | None = None,
    ):
        n = int(vertex_count)
        if n <= 0:
            raise GraphError("vertex_count must be positive")
        pairs = []
        seen = set()
        for raw in edges:
            u, v = (int(raw[0]), int(raw[1]))
            if not (0 <= u < n and 0 <= v < n):
                raise GraphParseError(f"edge ({u}, {v}) has an endpoint out of range")
            if u == v:
                raise SelfLoopError(f"self-loop at vertex {u}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise DuplicateEdgeError(f"duplicate edge {key}")
            seen.add(key)
            pairs.append(key)

        attrs = {}
        for name, values in (vertex_attrs or {}).items():
            arr = np.asarray(list(values), dtype=np.float64)
            if arr.shape != (n,):
                raise GraphParseError(f"attribute {name!r} must have one value per vertex")
            arr.setflags(write=False)
            attrs[name] = arr
        if "population" not in attrs:
            raise MissingPopulationError("every vertex needs a 'population' value")
        if np.any(attrs["population"] < 0) or not np.all(np.isfinite(attrs["population"])):
            raise GraphParseError("population must be finite and nonnegative")

        self.vertex_count = n
        self.edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        self.edges.setflags(write=False)
        self.vertex_attrs = attrs
        self.ids = tuple(str(i) for i in ids) if ids is not None else tuple(str(i) for i in range(n))
        if len(self.ids) != n:
            raise GraphParseError("ids must have one entry per vertex")
        self._edge_index = {p: i for i, p in enumerate(pairs)}

        # CSR adjacency, neighbours sorted by vertex id
        m = len(pairs)
        order = []
        for i, (u, v) in enumerate(pairs):
            order.append((u, v, i))
            order.append((v, u, i))
        order.sort()
        ptr = np.zeros(n + 1, dtype=np.int64)
        for u, _, _ in order:
            ptr[u + 1] += 1
        np.cumsum(ptr, out=ptr)
        self.adj_ptr = ptr
        self.adj_nbr = np.array([o[1] for o in order], dtype=np.int64).reshape(2 * m)
        self.adj_eid = np.array([o[2] for o in order], dtype=np.int64).reshape(2 * m)
        for arr in (self.adj_ptr, self.adj_nbr, self.adj_eid):
            arr.setflags(write=False)

        if not _is_connected(self, range(n)):
            raise DisconnectedGraphError("dual graph is not connected")
        self._kernel_cache: dict = {}

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def population(self) -> np.ndarray:
        return self.vertex_attrs["population"]

    @property
    def has_votes(self) -> bool:
        return "dem_votes" in self.vertex_attrs and "rep_votes" in self.vertex_attrs

    def neighbors(self, v: int) -> np.ndarray:
        return self.adj_nbr[self.adj_ptr[v] : self.adj_ptr[v + 1]]

    def incident_edges(self, v: int) -> np.ndarray:
        return self.adj_eid[self.adj_ptr[v] : self.adj_ptr[v + 1]]

    def degree(self, v: int) -> int:
        return int(self.adj_ptr[v + 1] - self.adj_ptr[v])

    def edge_id(self, u: int, v: int) -> int:
        try:
            return self._edge_index[(min(u, v), max(u, v))]
        except KeyError:
            raise KeyError(f"no edge between {u} and {v}") from None

    def edge_pair(self, e: int) -> tuple[int, int]:
        u, v = self.edges[e]
        return int(u), int(v)

    def __repr__(self) -> str:
        return f"DualGraph(n={self.vertex_count}, m={self.edge_count})"


def _is_connected(g: DualGraph, vertices: Iterable[int]) -> bool:
    verts = set(int(v) for v in vertices)
    if not verts:
        return False
    start = next(iter(verts))
    seen = {start}
    queue = deque([start])
    while queue:
        x = queue.popleft()
        for y in g.neighbors(x):
            y = int(y)
            if y in verts and y not in seen:
                seen.add(y)
                queue.append(y)
    return len(seen) == len(verts)


def is_connected_subset(g: DualGraph, vertices: Iterable[int]) -> bool:
    return _is_connected(g, vertices)


def load_dual_graph(source, format: str = "json") -> DualGraph:
    """Read a dual graph from a path, bytes, text, or binary/text stream.

    Schema: ``{"vertices": [{"id": str, "population": num, ...}], "edges": [[id, id], ...]}``.
    Every numeric vertex key other than ``id`` becomes a vertex attribute.
    """
    if format != "json":
        raise GraphParseError(f"unsupported format {format!r}")
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        raw = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif isinstance(source, str):
        raw = source.encode()
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        raw = source.read()
        if isinstance(raw, str):
            raw = raw.encode()
    else:
        raise GraphParseError(f"cannot read a graph from {type(source).__name__}")
    try:
        doc = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise GraphParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "vertices" not in doc or "edges" not in doc:
        raise GraphParseError("expected an object with 'vertices' and 'edges'")
    vertices = doc["vertices"]
    if not isinstance(vertices, list) or not vertices:
        raise GraphParseError("'vertices' must be a nonempty list")

    ids: list[str] = []
    index: dict[str, int] = {}
    attr_names: list[str] = []
    for i, vert in enumerate(vertices):
        if not isinstance(vert, dict) or "id" not in vert:
            raise GraphParseError(f"vertex #{i} must be an object with an 'id'")
        vid = str(vert["id"])
        if vid in index:
            raise GraphParseError(f"duplicate vertex id {vid!r}")
        index[vid] = i
        ids.append(vid)
        for key, val in vert.items():
            if key != "id" and key not in attr_names and _is_number(val):
                attr_names.append(key)
    if "population" not in attr_names:
        raise MissingPopulationError("no vertex carries a 'population' value")

    attrs = {}
    for name in attr_names:
        col = []
        for vert in vertices:
            val = vert.get(name)
            if not _is_number(val):
                if name == "population":
                    raise MissingPopulationError(f"vertex {vert['id']!r} lacks a numeric population")
                val = math.nan
            col.append(float(val))
        attrs[name] = col

    edges = []
    for raw_edge in doc["edges"]:
        if not isinstance(raw_edge, (list, tuple)) or len(raw_edge) != 2:
            raise GraphParseError(f"bad edge entry {raw_edge!r}")
        a, b = (str(raw_edge[0]), str(raw_edge[1]))
        if a not in index or b not in index:
            raise GraphParseError(f"edge {raw_edge!r} names an unknown vertex")
        edges.append((index[a], index[b]))
    return DualGraph(len(ids), edges, attrs, ids)


def _is_number(val) -> bool:
    return isinstance(val, (int, float)) and not isinstance(val, bool)


def dump_dual_graph(g: DualGraph) -> dict:
    verts = []
    for v in range(g.vertex_count):
        row = {"id": g.ids[v]}
        for name, arr in g.vertex_attrs.items():
            val = float(arr[v])
            row[name] = int(val) if val.is_integer() else val
        verts.append(row)
    edges = [[g.ids[u], g.ids[v]] for u, v in g.edges.tolist()]
    return {"vertices": verts, "edges": edges}


def from_edge_list(
    n: int,
    edges: Iterable[tuple[int, int]],
    population: Iterable[float] | None = None,
    **attrs: Iterable[float],
) -> DualGraph:
    pop = list(population) if population is not None else [1.0] * n
    return DualGraph(n, edges, {"population": pop, **attrs})


def grid_graph(rows: int, cols: int, **attrs: Iterable[float]) -> DualGraph:
    """Rows x cols lattice; vertex ``r * cols + c``; unit population unless given."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    attrs.setdefault("population", [1.0] * (rows * cols))
    return DualGraph(rows * cols, edges, attrs)


# ---------------------------------------------------------------------------
# log-determinant kernels


@kernel
def log_det_reduced(lap):
    """ln det of ``lap`` with its last row and column removed.

    Gaussian elimination with partial pivoting on a copy. Returns ``-inf``
    when a pivot vanishes (the underlying graph is disconnected).
    """
    k = lap.shape[0] - 1
    if k <= 0:
        return 0.0
    a = np.empty((k, k), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            a[i, j] = lap[i, j]
    scale = 0.0
    for i in range(k):
        if abs(a[i, i]) > scale:
            scale = abs(a[i, i])
    tol = 1e-10 * max(scale, 1.0)
    total = 0.0
    for col in range(k):
        piv = col
        best = abs(a[col, col])
        for r in range(col + 1, k):
            if abs(a[r, col]) > best:
                best = abs(a[r, col])
                piv = r
        if best <= tol:
            return -np.inf
        if piv != col:
            for j in range(col, k):
                tmp = a[col, j]
                a[col, j] = a[piv, j]
                a[piv, j] = tmp
        p = a[col, col]
        total += np.log(abs(p))
        for r in range(col + 1, k):
            f = a[r, col] / p
            if f != 0.0:
                for j in range(col + 1, k):
                    a[r, j] -= f * a[col, j]
    return total


def _laplacian(k: int, pairs: Iterable[tuple[int, int]], weights: Iterable[float]) -> np.ndarray:
    lap = np.zeros((k, k), dtype=np.float64)
    for (i, j), w in zip(pairs, weights):
        lap[i, i] += w
        lap[j, j] += w
        lap[i, j] -= w
        lap[j, i] -= w
    return lap


def log_multigraph_tree_count(k: int, multiplicity: Mapping[tuple[int, int], int]) -> float:
    """ln of the spanning-tree count of a multigraph on vertices ``0..k-1``.

    ``multiplicity`` maps unordered pairs to their number of parallel edges.
    """
    if k == 1:
        return 0.0
    pairs, weights = [], []
    for (i, j), mult in multiplicity.items():
        if i == j:
            continue
        if mult < 1:
            raise ValueError("edge multiplicities must be >= 1")
        pairs.append((i, j))
        weights.append(float(mult))
    value = float(log_det_reduced(_laplacian(k, pairs, weights)))
    if value == -math.inf:
        raise DisconnectedSubsetError("multigraph is disconnected; it has no spanning tree")
    return value


def log_spanning_tree_count(
    g: DualGraph,
    vertex_subset: Iterable[int] | None = None,
    edge_multiplicity: Mapping[tuple[int, int], int] | None = None,
) -> float:
    """ln of the number of spanning trees of the subgraph induced by ``vertex_subset``.

    ``edge_multiplicity`` optionally turns chosen edges (keyed by vertex pair)
    into bundles of parallel edges.
    """
    verts = sorted(set(int(v) for v in vertex_subset)) if vertex_subset is not None else list(range(g.vertex_count))
    if not verts:
        raise DisconnectedSubsetError("empty vertex subset")
    if len(verts) == 1:
        return 0.0
    if not _is_connected(g, verts):
        raise DisconnectedSubsetError("vertex subset does not induce a connected subgraph")
    local = {v: i for i, v in enumerate(verts)}
    mult = {}
    if edge_multiplicity:
        for (a, b), w in edge_multiplicity.items():
            if w < 1:
                raise ValueError("edge multiplicities must be >= 1")
            mult[(min(a, b), max(a, b))] = w
    pairs, weights = [], []
    for e in range(g.edge_count):
        u, v = g.edge_pair(e)
        if u in local and v in local:
            pairs.append((local[u], local[v]))
            weights.append(float(mult.get((u, v), 1)))
    return float(log_det_reduced(_laplacian(len(verts), pairs, weights)))


def quotient_multigraph(g: DualGraph, partition) -> tuple[list[int], dict[tuple[int, int], int]]:
    """Contract each part to a vertex; parallel cut edges become multiplicities.

    Returns ``(part_indices, multiplicity)`` where part ``i`` (0-based) is the
    part labelled ``i + 1`` in ``partition.assignment``.
    """
    assignment = np.asarray(partition.assignment)
    mult: dict[tuple[int, int], int] = {}
    for u, v in g.edges.tolist():
        a, b = int(assignment[u]) - 1, int(assignment[v]) - 1
        if a != b:
            key = (min(a, b), max(a, b))
            mult[key] = mult.get(key, 0) + 1
    return list(range(partition.d)), mult
