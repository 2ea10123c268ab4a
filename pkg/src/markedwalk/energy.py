"""Observables, the degeneracy factor, and energies defining target laws.

The walk targets ``p(T, M) ∝ exp(J(ξ)) / τ(ξ)**gamma`` where ``ξ`` is the
partition cut out by the marked edges and ``τ(ξ)`` counts the lifted states
that map to it: the product of every part's spanning-tree count and the
spanning-tree count of the quotient multigraph. With ``gamma = 1`` the induced
law on partitions is ``∝ exp(J)``.

Energies are ``J = -Σ beta_i (obs_i - center_i)**2`` over a closed set of
observables, or the special form ``J = ln τ`` which makes the walk uniform on
lifted states. Part indices are 0-based in canonical order (the part holding
the smallest vertex id is part 0).

The functions here are reference implementations on ``Partition`` objects.
Chains evaluate the same quantities incrementally inside the kernels.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .graph import DualGraph, log_spanning_tree_count, quotient_multigraph, log_multigraph_tree_count
from .state import Partition, tilt_weights

OBSERVABLE_KINDS = ("cut_edges", "dem_share", "mean_median", "exp_transform", "constant_zero", "log_tau")
_KIND_CODE = {
    "cut_edges": K.OBS_CUT,
    "dem_share": K.OBS_DEM_SHARE,
    "mean_median": K.OBS_MEAN_MEDIAN,
    "exp_transform": K.OBS_EXP,
    "constant_zero": K.OBS_ZERO,
    "log_tau": K.OBS_LOG_TAU,
}
_NAME_RE = re.compile(r"^([a-z_]+)(?:\[([^\]]*)\])?$")


class ObservableError(ValueError):
    pass


class EnergySpecError(ValueError):
    pass


@dataclass(frozen=True)
class Observable:
    """One scalar function of a partition.

    ``part`` is required for ``dem_share`` and ``exp_transform``; ``lam`` only
    for ``exp_transform``.
    """

    kind: str
    part: int | None = None
    lam: float | None = None

    def __post_init__(self):
        if self.kind not in OBSERVABLE_KINDS:
            raise ObservableError(f"unknown observable {self.kind!r}")
        if self.kind in ("dem_share", "exp_transform"):
            if self.part is None or self.part < 0:
                raise ObservableError(f"{self.kind} needs a nonnegative part index")
        elif self.part is not None:
            raise ObservableError(f"{self.kind} takes no part index")
        if self.kind == "exp_transform":
            if self.lam is None or not (self.lam > 0 and math.isfinite(self.lam)):
                raise ObservableError("exp_transform needs lambda > 0")
        elif self.lam is not None:
            raise ObservableError(f"{self.kind} takes no lambda")

    @property
    def name(self) -> str:
        if self.kind == "dem_share":
            return f"dem_share[{self.part}]"
        if self.kind == "exp_transform":
            return f"exp_transform[{self.part},{self.lam:g}]"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "Observable":
        """Inverse of ``name``: ``cut_edges``, ``dem_share[1]``, ``exp_transform[0,2]``."""
        mt = _NAME_RE.match(text.strip())
        if not mt:
            raise ObservableError(f"cannot parse observable {text!r}")
        kind, args = mt.group(1), mt.group(2)
        if kind not in OBSERVABLE_KINDS:
            raise ObservableError(f"unknown observable {kind!r}")
        if args is None:
            return cls(kind)
        parts = [a.strip() for a in args.split(",")]
        try:
            if kind == "exp_transform" and len(parts) == 2:
                return cls(kind, int(parts[0]), float(parts[1]))
            if kind == "dem_share" and len(parts) == 1:
                return cls(kind, int(parts[0]))
        except ValueError as exc:
            raise ObservableError(f"bad arguments in {text!r}") from exc
        raise ObservableError(f"bad arguments in {text!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "Observable":
        if "observable" not in doc:
            raise EnergySpecError("term without 'observable'")
        name = doc["observable"]
        if "[" in name:
            return cls.parse(name)
        lam = doc.get("lambda")
        return cls(name, doc.get("part"), None if lam is None else float(lam))

    def to_dict(self) -> dict:
        out: dict = {"observable": self.kind}
        if self.part is not None:
            out["part"] = self.part
        if self.lam is not None:
            out["lambda"] = self.lam
        return out

    def needs_votes(self) -> bool:
        return self.kind in ("dem_share", "mean_median")


@dataclass(frozen=True)
class EnergyTerm:
    observable: Observable
    beta: float
    center: float

    def __post_init__(self):
        if not (math.isfinite(self.beta) and math.isfinite(self.center)):
            raise EnergySpecError("energy weights and centers must be finite")


@dataclass(frozen=True)
class EnergySpec:
    """``J = -Σ beta (obs - center)**2``, or ``J = ln τ`` with ``special="spanning_tree"``.

    ``weights_seed`` fixes the per-vertex weights used by ``exp_transform``.
    """

    terms: tuple[EnergyTerm, ...] = ()
    special: str | None = None
    gamma: float = 1.0
    weights_seed: int | None = None
    _empty_ok: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.special not in (None, "spanning_tree"):
            raise EnergySpecError(f"unknown special form {self.special!r}")
        if self.special and self.terms:
            raise EnergySpecError("special form cannot be combined with terms")
        if not self.terms and not self.special and not self._empty_ok:
            raise EnergySpecError("an energy needs at least one term or a special form")
        if not math.isfinite(self.gamma):
            raise EnergySpecError("gamma must be finite")
        if any(t.observable.kind == "exp_transform" for t in self.terms) and self.weights_seed is None:
            raise EnergySpecError("exp_transform terms need a weights_seed")

    @classmethod
    def uniform(cls, gamma: float = 1.0) -> "EnergySpec":
        """``J = 0``: with ``gamma = 1`` every balanced partition is equally likely."""
        return cls((EnergyTerm(Observable("constant_zero"), 0.0, 0.0),), gamma=gamma)

    @classmethod
    def spanning_tree(cls, gamma: float = 1.0) -> "EnergySpec":
        return cls(special="spanning_tree", gamma=gamma)

    @classmethod
    def from_dict(cls, doc: dict) -> "EnergySpec":
        if not isinstance(doc, dict):
            raise EnergySpecError("energy spec must be a JSON object")
        unknown = set(doc) - {"terms", "special", "gamma", "weights_seed", "schema_version"}
        if unknown:
            raise EnergySpecError(f"unknown energy keys: {sorted(unknown)}")
        terms = []
        for t in doc.get("terms", []):
            try:
                terms.append(EnergyTerm(Observable.from_dict(t), float(t.get("beta", 1.0)), float(t.get("center", 0.0))))
            except ObservableError as exc:
                raise EnergySpecError(str(exc)) from exc
        seed = doc.get("weights_seed")
        return cls(tuple(terms), doc.get("special"), float(doc.get("gamma", 1.0)), None if seed is None else int(seed))

    @classmethod
    def from_json(cls, text: str | bytes) -> "EnergySpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise EnergySpecError(f"energy spec is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc: dict = {"gamma": self.gamma}
        if self.special:
            doc["special"] = self.special
        else:
            doc["terms"] = [
                {**t.observable.to_dict(), "beta": t.beta, "center": t.center} for t in self.terms
            ]
        if self.weights_seed is not None:
            doc["weights_seed"] = self.weights_seed
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def observables(self) -> list[Observable]:
        seen: list[Observable] = []
        for t in self.terms:
            if t.observable not in seen:
                seen.append(t.observable)
        return seen


# ---------------------------------------------------------------------------
# reference observables


def cut_edges(g: DualGraph, partition: Partition) -> int:
    a = partition.assignment
    return int(np.count_nonzero(a[g.edges[:, 0]] != a[g.edges[:, 1]]))


def _vote_totals(g: DualGraph, partition: Partition):
    if not g.has_votes:
        raise ObservableError("graph has no dem_votes/rep_votes attributes")
    labels = partition.canonical().assignment - 1
    dem = np.bincount(labels, weights=g.vertex_attrs["dem_votes"], minlength=partition.d)
    rep = np.bincount(labels, weights=g.vertex_attrs["rep_votes"], minlength=partition.d)
    return dem, rep


def _shares(dem, rep):
    tot = dem + rep
    if np.any(tot <= 0):
        raise ObservableError("a part has zero total votes")
    return dem / tot


def dem_share(g: DualGraph, partition: Partition, part: int) -> float:
    if not (0 <= part < partition.d):
        raise ObservableError(f"part index {part} out of range for d={partition.d}")
    dem, rep = _vote_totals(g, partition)
    return float(_shares(dem[part:part + 1], rep[part:part + 1])[0])


def mean_median(g: DualGraph, partition: Partition) -> float:
    """Mean minus median of the parts' dem shares; positive favours dem."""
    dem, rep = _vote_totals(g, partition)
    shares = np.sort(_shares(dem, rep))
    d = len(shares)
    med = shares[d // 2] if d % 2 else 0.5 * (shares[d // 2 - 1] + shares[d // 2])
    return float(shares.sum() / d - med)


def standard_normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def exp_transform(
    g: DualGraph,
    partition: Partition,
    lam: float,
    part: int,
    weights: np.ndarray,
    clamp_events: list | None = None,
) -> float:
    """Exponential variate built from a part's summed uniform weights.

    The sum ``s`` over the part is standardized with mean ``k/2`` and variance
    ``k/12`` (``k`` vertices), pushed through the normal CDF to ``U``, and
    mapped to ``-ln(1 - U) / lam``. ``1 - U`` is floored at 1e-15; each floor
    hit is appended to ``clamp_events`` when given.
    """
    if lam <= 0:
        raise ObservableError("lambda must be positive")
    if not (0 <= part < partition.d):
        raise ObservableError(f"part index {part} out of range for d={partition.d}")
    labels = partition.canonical().assignment - 1
    members = labels == part
    k = float(members.sum())
    s = float(np.asarray(weights, dtype=np.float64)[members].sum())
    z = (s - 0.5 * k) / math.sqrt(k / 12.0)
    q = standard_normal_sf(z)
    if q < K.CLAMP_Q:
        q = K.CLAMP_Q
        if clamp_events is not None:
            clamp_events.append((part, z))
    return -math.log(q) / lam


def log_degeneracy(g: DualGraph, partition: Partition) -> float:
    """ln τ: per-part spanning-tree counts times the quotient multigraph's."""
    total = 0.0
    for p in partition.parts():
        total += log_spanning_tree_count(g, p)
    nodes, mult = quotient_multigraph(g, partition)
    return total + log_multigraph_tree_count(len(nodes), mult)


def observable_value(obs: Observable, g: DualGraph, partition: Partition, weights=None, clamp_events=None) -> float:
    if obs.kind == "cut_edges":
        return float(cut_edges(g, partition))
    if obs.kind == "dem_share":
        return dem_share(g, partition, obs.part)
    if obs.kind == "mean_median":
        return mean_median(g, partition)
    if obs.kind == "exp_transform":
        if weights is None:
            raise ObservableError("exp_transform needs per-vertex weights")
        return exp_transform(g, partition, obs.lam, obs.part, weights, clamp_events)
    if obs.kind == "constant_zero":
        return 0.0
    return log_degeneracy(g, partition)


@dataclass(frozen=True)
class Evaluated:
    """A partition with its energy and ln τ, as consumed by ``log_target_ratio``."""

    partition: Partition
    energy: float
    log_tau: float


def energy_value(spec: EnergySpec, g: DualGraph, partition: Partition) -> float:
    if spec.special == "spanning_tree":
        return log_degeneracy(g, partition)
    weights = tilt_weights(g.vertex_count, spec.weights_seed) if spec.weights_seed is not None else None
    j = 0.0
    for t in spec.terms:
        diff = observable_value(t.observable, g, partition, weights) - t.center
        j -= t.beta * diff * diff
    return j


def evaluate(spec: EnergySpec, g: DualGraph, partition: Partition) -> Evaluated:
    lt = log_degeneracy(g, partition)
    j = lt if spec.special == "spanning_tree" else energy_value(spec, g, partition)
    return Evaluated(partition, j, lt)


def log_target_ratio(spec: EnergySpec, g: DualGraph, old, new) -> float:
    """ln p(new) - ln p(old) for the lifted target; accepts partitions or ``Evaluated``."""
    if spec.special == "spanning_tree" and spec.gamma == 1.0:
        return 0.0
    old = old if isinstance(old, Evaluated) else evaluate(spec, g, old)
    new = new if isinstance(new, Evaluated) else evaluate(spec, g, new)
    if spec.special == "spanning_tree":
        return (1.0 - spec.gamma) * (new.log_tau - old.log_tau)
    out = new.energy - old.energy
    if spec.gamma != 0.0:
        out -= spec.gamma * (new.log_tau - old.log_tau)
    return out


def log_partition_weight(spec: EnergySpec, g: DualGraph, partition: Partition) -> float:
    """ln of the induced partition mass ``exp(J) τ**(1 - gamma)`` (unnormalized)."""
    ev = evaluate(spec, g, partition)
    return ev.energy + (1.0 - spec.gamma) * ev.log_tau


# ---------------------------------------------------------------------------
# kernel encoding


@dataclass(frozen=True)
class ObservableTable:
    """Observables evaluated by the kernels: energy ones first, then recorded extras."""

    observables: tuple[Observable, ...]
    n_energy: int

    @property
    def names(self) -> list[str]:
        return [o.name for o in self.observables]

    def kind_array(self) -> np.ndarray:
        return np.array([_KIND_CODE[o.kind] for o in self.observables], dtype=np.int64)

    def part_array(self) -> np.ndarray:
        return np.array([-1 if o.part is None else o.part for o in self.observables], dtype=np.int64)

    def lam_array(self) -> np.ndarray:
        return np.array([1.0 if o.lam is None else o.lam for o in self.observables], dtype=np.float64)


def observable_table(spec: EnergySpec, extra: list[Observable] | tuple = ()) -> ObservableTable:
    energy_obs = spec.observables()
    rest = [Observable("cut_edges")] + list(extra)
    obs = list(energy_obs)
    for o in rest:
        if o not in obs:
            obs.append(o)
    return ObservableTable(tuple(obs), len(energy_obs))


def validate_for_graph(spec: EnergySpec, table: ObservableTable, g: DualGraph, d: int) -> None:
    for o in table.observables:
        if o.part is not None and o.part >= d:
            raise ObservableError(f"{o.name}: part index must be below d={d}")
        if o.needs_votes() and not g.has_votes:
            raise ObservableError(f"{o.name} needs dem_votes and rep_votes on every vertex")
        if o.kind == "exp_transform" and spec.weights_seed is None:
            raise ObservableError(f"{o.name} needs a weights_seed in the energy spec")


def compile_params(
    spec: EnergySpec,
    table: ObservableTable,
    d: int,
    lo: float,
    hi: float,
    *,
    exact: bool = True,
    single: bool = False,
    p_cycle: float = 0.5,
    cache_limit: int = 1 << 16,
) -> K.Params:
    special = 1 if spec.special == "spanning_tree" else 0
    records_tau = any(o.kind == "log_tau" for o in table.observables)
    if special:
        need_tau = records_tau or spec.gamma != 1.0
    else:
        need_tau = records_tau or spec.gamma != 0.0
    index = {o: i for i, o in enumerate(table.observables)}
    return K.Params(
        d=int(d),
        lo=float(lo),
        hi=float(hi),
        gamma=float(spec.gamma),
        special=special,
        need_tau=bool(need_tau),
        exact=bool(exact),
        single=bool(single),
        p_cycle=float(p_cycle),
        obs_kind=table.kind_array(),
        obs_part=table.part_array(),
        obs_lam=table.lam_array(),
        n_eobs=int(table.n_energy),
        term_obs=np.array([index[t.observable] for t in spec.terms], dtype=np.int64),
        term_beta=np.array([t.beta for t in spec.terms], dtype=np.float64),
        term_center=np.array([t.center for t in spec.terms], dtype=np.float64),
        cache_limit=int(cache_limit),
    )
