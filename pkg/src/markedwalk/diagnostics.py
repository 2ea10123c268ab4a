"""Convergence diagnostics: KS distances, pairwise-chain curves, sweeps, toy tilt.

``ks_2d`` is the Fasano-Franceschini statistic. Around every sample point it
splits the plane into quadrants ``(x <= px or x > px) x (y <= py or y > py)``,
takes the largest difference in the fraction of each sample falling in a
quadrant, maximizes over the points of one sample, and averages the two
maxima obtained by centring on either sample.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from ._accel import kernel, quiet_wraparound
from .chain import ChainConfig, EnsembleRun, run_ensemble
from .energy import EnergySpec, EnergyTerm
from .graph import SCHEMA_VERSION, DualGraph
from .rng import Stream, derive_seed, next_double, next_open_closed
from .state import BalanceSpec


class DiagnosticsError(ValueError):
    pass


def _as_1d(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DiagnosticsError("KS distance needs nonempty samples")
    return arr


def ks_1d(a, b) -> float:
    """Two-sample sup distance between empirical CDFs."""
    a = np.sort(_as_1d(a))
    b = np.sort(_as_1d(b))
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_1d_to_cdf(a, cdf: Callable) -> float:
    """Sup distance between the empirical CDF of ``a`` and a continuous ``cdf``."""
    return float(stats.kstest(_as_1d(a), cdf).statistic)


def ks_1d_to_distribution(a, values, probs) -> float:
    """Sup distance from the empirical CDF of ``a`` to a discrete law.

    Both CDFs are step functions, so comparing them at every jump point of
    either covers the left limits as well.
    """
    a = np.sort(_as_1d(a))
    values = np.asarray(values, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    sv, sp = values[order], np.cumsum(probs[order]) / probs.sum()
    pts = np.union1d(a, sv)
    fa = np.searchsorted(a, pts, side="right") / a.size
    idx = np.searchsorted(sv, pts, side="right") - 1
    fr = np.where(idx >= 0, sp[np.maximum(idx, 0)], 0.0)
    return float(np.max(np.abs(fa - fr)))


@kernel
def _quadrant_counts(px, py, xs, ys, out):
    # closed quadrants: a point on a boundary line belongs to every side it touches
    for j in range(xs.shape[0]):
        lo_x = xs[j] <= px
        hi_x = xs[j] >= px
        lo_y = ys[j] <= py
        hi_y = ys[j] >= py
        if lo_x and lo_y:
            out[0] += 1.0
        if hi_x and lo_y:
            out[1] += 1.0
        if lo_x and hi_y:
            out[2] += 1.0
        if hi_x and hi_y:
            out[3] += 1.0


@kernel
def _ff_max(cx, cy, ax, ay, bx, by):
    na = ax.shape[0]
    nb = bx.shape[0]
    best = 0.0
    qa = np.zeros(4)
    qb = np.zeros(4)
    for i in range(cx.shape[0]):
        qa[:] = 0.0
        qb[:] = 0.0
        _quadrant_counts(cx[i], cy[i], ax, ay, qa)
        _quadrant_counts(cx[i], cy[i], bx, by, qb)
        for q in range(4):
            diff = abs(qa[q] / na - qb[q] / nb)
            if diff > best:
                best = diff
    return best


def _as_2d(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DiagnosticsError("2D KS needs an (n, 2) array of pairs")
    if arr.shape[0] == 0:
        raise DiagnosticsError("KS distance needs nonempty samples")
    return arr


def ks_2d(a, b) -> float:
    """Fasano-Franceschini two-sample statistic on paired samples."""
    a = _as_2d(a)
    b = _as_2d(b)
    ax, ay = np.ascontiguousarray(a[:, 0]), np.ascontiguousarray(a[:, 1])
    bx, by = np.ascontiguousarray(b[:, 0]), np.ascontiguousarray(b[:, 1])
    da = _ff_max(ax, ay, ax, ay, bx, by)
    db = _ff_max(bx, by, ax, ay, bx, by)
    return float(0.5 * (da + db))


def ks(a, b) -> float:
    """``ks_1d`` or ``ks_2d`` by sample shape."""
    arr = np.asarray(a)
    return ks_2d(a, b) if arr.ndim == 2 and arr.shape[1] == 2 else ks_1d(a, b)


# ---------------------------------------------------------------------------
# curves


@dataclass(frozen=True)
class DiscreteReference:
    """A discrete law on the line, e.g. an observable's exact catalog distribution."""

    values: np.ndarray
    probs: np.ndarray

    def distance(self, sample) -> float:
        return ks_1d_to_distribution(sample, self.values, self.probs)


@dataclass(frozen=True)
class KsCurve:
    checkpoints: np.ndarray
    pairwise_mean: np.ndarray
    to_target_mean: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["checkpoint", "pairwise_mean"] + (["to_target_mean"] if self.to_target_mean is not None else [])
        w.writerow(head)
        for i, c in enumerate(self.checkpoints.tolist()):
            row = [c, repr(float(self.pairwise_mean[i]))]
            if self.to_target_mean is not None:
                row.append(repr(float(self.to_target_mean[i])))
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "checkpoints": self.checkpoints.tolist(),
            "pairwise_mean": self.pairwise_mean.tolist(),
        }
        if self.to_target_mean is not None:
            doc["to_target_mean"] = self.to_target_mean.tolist()
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _reference_distance(sample, reference) -> float:
    if isinstance(reference, DiscreteReference):
        return reference.distance(sample)
    if callable(reference):
        return ks_1d_to_cdf(sample, reference)
    return ks(sample, reference)


def pairwise_curves(
    chains: Sequence,
    checkpoints: Sequence[int],
    reference=None,
    *,
    steps: np.ndarray | None = None,
    burn_in: int = 0,
    thin: int = 1,
) -> KsCurve:
    """Average pairwise KS over chain prefixes at each checkpoint.

    Each chain is a 1D array of values or an ``(n, 2)`` array of pairs. A
    checkpoint is a prefix length in records, or a step index when ``steps``
    (the shared record step indices) is given. The first ``burn_in`` records
    are dropped and every ``thin``-th of the rest kept. ``reference`` may be a
    sample, a continuous CDF, or a ``DiscreteReference``.
    """
    if len(chains) < 2:
        raise DiagnosticsError("pairwise curves need at least two chains")
    if thin < 1 or burn_in < 0:
        raise DiagnosticsError("thin must be positive and burn_in nonnegative")
    arrs = [np.asarray(c, dtype=np.float64) for c in chains]
    length = min(len(a) for a in arrs)
    cps = np.asarray(checkpoints, dtype=np.int64)
    if cps.size == 0 or np.any(np.diff(cps) <= 0):
        raise DiagnosticsError("checkpoints must be nonempty and strictly increasing")
    if steps is not None:
        steps = np.asarray(steps)
        if cps[-1] > steps[length - 1]:
            raise DiagnosticsError(f"checkpoint {cps[-1]} is beyond the last recorded step")
        ends = np.searchsorted(steps[:length], cps, side="right")
    else:
        if cps[-1] > length:
            raise DiagnosticsError(f"checkpoint {cps[-1]} is beyond the {length} available records")
        ends = cps
    pair = np.zeros(len(cps))
    target = np.zeros(len(cps)) if reference is not None else None
    k = len(arrs)
    for ci, end in enumerate(ends):
        prefixes = [a[burn_in:end:thin] for a in arrs]
        if any(len(p) == 0 for p in prefixes):
            raise DiagnosticsError(f"checkpoint {cps[ci]} leaves no samples after burn-in")
        vals = [ks(prefixes[i], prefixes[j]) for i in range(k) for j in range(i + 1, k)]
        pair[ci] = float(np.mean(vals))
        if target is not None:
            target[ci] = float(np.mean([_reference_distance(p, reference) for p in prefixes]))
    return KsCurve(cps, pair, target)


# ---------------------------------------------------------------------------
# sweeps


class SweepCellError(RuntimeError):
    def __init__(self, cell: tuple[int, int], cause: BaseException):
        super().__init__(f"sweep cell {cell} failed: {cause}")
        self.cell = cell
        self.cause = cause


@dataclass(frozen=True)
class SweepGrid:
    axis1: tuple[str, tuple[float, ...]]
    axis2: tuple[str, tuple[float, ...]]
    values: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis1[0], self.axis2[0], "mean_pairwise_ks"])
        for i, a in enumerate(self.axis1[1]):
            for j, b in enumerate(self.axis2[1]):
                w.writerow([repr(a), repr(b), repr(float(self.values[i, j]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "axis1": {"name": self.axis1[0], "values": list(self.axis1[1])},
            "axis2": {"name": self.axis2[0], "values": list(self.axis2[1])},
            "values": self.values.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def apply_parameter(config: ChainConfig, name: str, value: float) -> ChainConfig:
    """Set ``center[i]``, ``beta[i]``, ``gamma`` or ``epsilon`` on a config."""
    spec = config.energy
    if name in ("gamma",):
        return replace(config, energy=replace(spec, gamma=float(value)))
    if name == "epsilon":
        return replace(config, balance=BalanceSpec(config.balance.mode, float(value)))
    for field_name in ("center", "beta"):
        if name.startswith(field_name + "[") and name.endswith("]"):
            i = int(name[len(field_name) + 1:-1])
            if not (0 <= i < len(spec.terms)):
                raise DiagnosticsError(f"{name}: the energy has {len(spec.terms)} terms")
            terms = list(spec.terms)
            terms[i] = replace(terms[i], **{field_name: float(value)})
            return replace(config, energy=replace(spec, terms=tuple(terms)))
    raise DiagnosticsError(f"unknown sweep parameter {name!r}")


def ensemble_ks(run: EnsembleRun, observables: Sequence[str], thin: int = 1) -> float:
    """Mean pairwise KS of the final samples (2D when two observables are named)."""
    if len(observables) == 1:
        series = [c.series(observables[0])[::thin] for c in run]
    else:
        series = [np.column_stack([c.series(o) for o in observables[:2]])[::thin] for c in run]
    k = len(series)
    return float(np.mean([ks(series[i], series[j]) for i in range(k) for j in range(i + 1, k)]))


def sweep(
    g: DualGraph,
    base_config: ChainConfig,
    axis1: tuple[str, Sequence[float]],
    axis2: tuple[str, Sequence[float]],
    chain_count: int = 10,
    observables: Sequence[str] | None = None,
    thin: int = 1,
    workers: int | None = None,
) -> SweepGrid:
    """Mean pairwise KS for an ensemble at every cell of a 2D parameter grid.

    Cell ``(i, j)`` uses master seed ``derive_seed(seed, i * len(axis2) + j)``;
    the step budget is ``base_config.steps``.
    """
    if chain_count < 2:
        raise DiagnosticsError("a sweep needs at least two chains per cell")
    a1 = (axis1[0], tuple(float(v) for v in axis1[1]))
    a2 = (axis2[0], tuple(float(v) for v in axis2[1]))
    if not a1[1] or not a2[1]:
        raise DiagnosticsError("sweep axes must be nonempty")
    if observables is None:
        observables = [t.observable.name for t in base_config.energy.terms][:2] or ["cut_edges"]
    cells = [(i, j) for i in range(len(a1[1])) for j in range(len(a2[1]))]

    def job(cell):
        i, j = cell
        try:
            cfg = apply_parameter(base_config, a1[0], a1[1][i])
            cfg = apply_parameter(cfg, a2[0], a2[1][j])
            cfg = replace(cfg, seed=derive_seed(base_config.seed, i * len(a2[1]) + j))
            run = run_ensemble(g, cfg, chain_count, threads=1)
            return ensemble_ks(run, observables, thin)
        except Exception as exc:
            raise SweepCellError(cell, exc) from exc

    with ThreadPoolExecutor(max_workers=workers or 1) as pool:
        vals = list(pool.map(job, cells))
    return SweepGrid(a1, a2, np.array(vals).reshape(len(a1[1]), len(a2[1])))


# ---------------------------------------------------------------------------
# toy model


@kernel
def _toy_chain(s, lam, beta, mu, steps, corrected, out):
    x = -math.log(next_open_closed(s)) / lam
    acc = 0
    for t in range(steps):
        y = -math.log(next_open_closed(s)) / lam
        la = -beta * (y - mu) ** 2 + beta * (x - mu) ** 2
        if corrected:
            la += lam * (y - x)
        if la >= 0.0 or math.log(next_open_closed(s)) <= la:
            x = y
            acc += 1
        out[t] = x
    return acc


@dataclass(frozen=True)
class ToyResult:
    mean: float
    variance: float
    stderr_mean: float
    acceptance_rate: float
    predicted_mean: float
    predicted_variance: float
    truncated_mean: float
    truncated_variance: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def tilt_prediction(lam: float, beta: float, mu: float, corrected: bool = False) -> tuple[float, float, float, float]:
    """Untruncated and truncated (at 0) moments of the toy chain's stationary law.

    The uncorrected law is ``∝ exp(-beta (x - mu)**2 - lam x)`` on ``x >= 0``:
    a Gaussian with mean ``mu - lam / (2 beta)`` and variance ``1 / (2 beta)``
    cut off at zero. The corrected one has mean ``mu`` before truncation.
    """
    m = mu if corrected else mu - lam / (2.0 * beta)
    v = 1.0 / (2.0 * beta)
    sd = math.sqrt(v)
    tm, tv = stats.truncnorm.stats((0.0 - m) / sd, np.inf, loc=m, scale=sd, moments="mv")
    return m, v, float(tm), float(tv)


def toy_tilt(lam: float, beta: float, mu: float, steps: int, seed: int, corrected: bool = False) -> ToyResult:
    """Independence sampler with Exp(lam) proposals and Gaussian-energy acceptance.

    Without ``corrected`` the proposal density is left out of the acceptance
    ratio, so the chain samples the exponentially tilted law; with it the
    chain samples the truncated Gaussian centred at ``mu``.
    """
    if lam <= 0 or beta <= 0:
        raise DiagnosticsError("lambda and beta must be positive")
    if steps < 2:
        raise DiagnosticsError("toy_tilt needs at least two steps")
    out = np.empty(steps)
    rng = Stream(seed)
    with quiet_wraparound():
        acc = _toy_chain(rng.state, float(lam), float(beta), float(mu), int(steps), bool(corrected), out)
    batches = np.array_split(out, 50)
    bm = np.array([b.mean() for b in batches])
    pm, pv, tm, tv = tilt_prediction(lam, beta, mu, corrected)
    return ToyResult(
        mean=float(out.mean()),
        variance=float(out.var()),
        stderr_mean=float(bm.std(ddof=1) / math.sqrt(len(bm))),
        acceptance_rate=acc / steps,
        predicted_mean=pm,
        predicted_variance=pv,
        truncated_mean=tm,
        truncated_variance=tv,
    )


def tilt_regression(lams: Sequence[float], beta: float, mu: float, steps: int, seed: int) -> dict:
    """Fit the sampled mean shift against ``lam / beta`` across several ``lam``."""
    xs, ys, results = [], [], []
    for k, lam in enumerate(lams):
        r = toy_tilt(lam, beta, mu, steps, derive_seed(seed, k))
        results.append(r)
        xs.append(lam / beta)
        ys.append(r.mean - mu)
    fit = stats.linregress(xs, ys)
    return {"slope": float(fit.slope), "intercept": float(fit.intercept), "r": float(fit.rvalue),
            "x": xs, "shift": ys, "results": results}
