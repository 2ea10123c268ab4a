"""Command-line entry point.

Exit codes: 0 success, 2 invalid flags, 3 input errors, 4 runtime failures,
5 enumeration work limit exceeded. Commands that take ``--out`` treat it as
a directory and finish by atomically writing ``manifest.json`` there.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend
from .chain import ChainConfig, ChainFailure, ConfigError, read_jsonl, run_ensemble
from .diagnostics import (
    DiagnosticsError,
    DiscreteReference,
    SweepCellError,
    pairwise_curves,
    sweep,
    tilt_prediction,
    toy_tilt,
)
from .energy import EnergySpec, EnergySpecError, Observable, ObservableError, observable_value
from .enumeration import (
    BASELINE_METHODS,
    DEFAULT_WORK_LIMIT,
    WorkLimitExceeded,
    enumerate_lifted_states,
    enumerate_partitions,
    exact_target_distribution,
    recom2_baseline,
)
from .graph import SCHEMA_VERSION, GraphError, load_dual_graph, log_multigraph_tree_count, log_spanning_tree_count, quotient_multigraph
from .rng import Stream
from .state import BalanceSpec, InitializationError, Partition, tilt_weights

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4
EXIT_WORK_LIMIT = 5


class InputError(Exception):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_manifest(out: Path, command: str, argv: list[str], config: dict, inputs: list[Path],
                    outputs: list[Path], started: float, extra: dict | None = None) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "backend": backend(),
        "command": command,
        "argv": argv,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p.name): _sha256(p) for p in outputs},
        "wall_clock_seconds": time.perf_counter() - started,
    }
    if extra:
        doc.update(extra)
    _atomic_write(out / "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_graph(path: str):
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            return load_dual_graph(fh), p
    except OSError as exc:
        raise InputError(f"cannot read graph {path}: {exc}") from exc


def _load_energy(path: str | None) -> tuple[EnergySpec, list[Path]]:
    if path is None:
        return EnergySpec.uniform(), []
    try:
        return EnergySpec.from_json(Path(path).read_text()), [Path(path)]
    except OSError as exc:
        raise InputError(f"cannot read energy spec {path}: {exc}") from exc


def _balance(args) -> BalanceSpec:
    try:
        return BalanceSpec(args.balance_mode, args.epsilon)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _parse_observable(name: str) -> Observable:
    try:
        return Observable.parse(name)
    except ObservableError as exc:
        raise UsageError(str(exc)) from exc


def _parse_checkpoints(spec: str) -> list[int]:
    """``a,b,c`` or ``lin:start:stop:count`` or ``log:start:stop:count``."""
    try:
        if spec.startswith(("lin:", "log:")):
            kind, a, b, k = spec.split(":")
            a, b, k = float(a), float(b), int(k)
            pts = np.geomspace(a, b, k) if kind == "log" else np.linspace(a, b, k)
            vals = sorted(set(int(round(x)) for x in pts))
        else:
            vals = [int(x) for x in spec.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad checkpoint spec {spec!r}") from exc
    if not vals or any(v <= 0 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
        raise UsageError("checkpoints must be positive and strictly increasing")
    return vals


def _parse_axis(text: str) -> tuple[str, list[float]]:
    if "=" not in text:
        raise UsageError(f"axis must look like NAME=v1,v2,...: {text!r}")
    name, vals = text.split("=", 1)
    try:
        return name.strip(), [float(v) for v in vals.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad axis values in {text!r}") from exc


def _out_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise InputError(f"--out must be a directory: {path}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_assignment(path: str, g) -> Partition:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read assignment {path}: {exc}") from exc
    if isinstance(doc, dict) and "assignment" in doc:
        doc = doc["assignment"]
    if isinstance(doc, dict):
        index = {vid: i for i, vid in enumerate(g.ids)}
        arr = [0] * g.vertex_count
        for vid, lab in doc.items():
            if vid not in index:
                raise InputError(f"unknown vertex id {vid!r} in assignment")
            arr[index[vid]] = lab
        doc = arr
    if not isinstance(doc, list) or len(doc) != g.vertex_count:
        raise InputError("assignment must list one label per vertex")
    labels = sorted(set(doc))
    relabel = {lab: k + 1 for k, lab in enumerate(labels)}
    part = Partition(np.array([relabel[x] for x in doc]), len(labels))
    if not part.is_valid(g):
        raise InputError("assignment has a disconnected part")
    return part


# ---------------------------------------------------------------------------
# commands


def cmd_run(args, argv) -> int:
    started = time.perf_counter()
    g, gpath = _load_graph(args.graph)
    spec, epaths = _load_energy(args.energy)
    for name in args.observable:
        _parse_observable(name)
    try:
        config = ChainConfig(
            steps=args.steps, d=args.districts, seed=args.seed, energy=spec, balance=_balance(args),
            burn_in=args.burn_in, record_every=args.record_every, mode=args.mode, p_cycle=args.p_cycle,
            record_assignments=args.record_assignments, ratio=args.ratio, observables=tuple(args.observable),
            max_init_attempts=args.max_init_attempts,
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args.out)
    try:
        ens = run_ensemble(g, config, args.chains, threads=args.threads)
    except ChainFailure as exc:
        cause = exc.cause
        if isinstance(cause, (ObservableError, ConfigError)):
            raise InputError(str(exc)) from exc
        raise
    outputs = []
    for c in ens:
        p = out / f"chain_{c.chain_index:03d}.jsonl"
        with open(p, "w") as fh:
            c.write_jsonl(fh)
        outputs.append(p)
    summary = ens.summary()
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    outputs.append(out / "summary.json")
    runtime = sum(c.runtime for c in ens)
    _write_manifest(out, "run", argv, {**config.to_dict(), "chains": args.chains}, [gpath, *epaths], outputs, started, {
        "acceptance_rate": summary["acceptance_rate"],
        "steps_per_second": (config.steps * len(ens)) / runtime if runtime > 0 else None,
    })
    print(f"wrote {len(ens)} chain(s) to {out} (acceptance rate {summary['acceptance_rate']:.4f})")
    return EXIT_OK


def cmd_enumerate(args, argv) -> int:
    started = time.perf_counter()
    g, gpath = _load_graph(args.graph)
    spec, epaths = _load_energy(args.energy)
    balance = _balance(args)
    out = _out_dir(args.out)
    if args.lifted:
        states = enumerate_lifted_states(g, args.districts, balance, args.work_limit)
        path = out / "lifted_states.jsonl"
        with open(path, "w") as fh:
            for tree, marks in states:
                fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "tree": sorted(tree), "marked": sorted(marks)}) + "\n")
        count = len(states)
    else:
        catalog = enumerate_partitions(g, args.districts, balance, args.work_limit)
        path = out / "catalog.jsonl"
        with open(path, "w") as fh:
            catalog.write_jsonl(fh, spec)
        count = len(catalog)
    _write_manifest(out, "enumerate", argv, {
        "districts": args.districts, "balance": balance.to_dict(), "lifted": args.lifted,
        "energy": spec.to_dict(), "work_limit": args.work_limit,
    }, [gpath, *epaths], [path], started, {"count": count})
    print(count)
    return EXIT_OK


def _chain_series(path: str, names: list[str]):
    try:
        with open(path) as fh:
            recs = read_jsonl(fh)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"cannot read chain file {path}: {exc}") from exc
    if not recs:
        raise InputError(f"chain file {path} has no records")
    for n in names:
        if n not in recs[0].observables:
            raise InputError(f"observable {n!r} missing from {path}")
    steps = np.array([r.step for r in recs])
    vals = np.column_stack([[r.observables[n] for r in recs] for n in names])
    return steps, (vals[:, 0] if len(names) == 1 else vals)


def _target_reference(path: str, names: list[str], args):
    try:
        lines = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read target {path}: {exc}") from exc
    if not lines:
        raise InputError(f"target {path} is empty")
    if "observables" in lines[0]:
        _, vals = _chain_series(path, names)
        return vals
    if len(names) != 1:
        raise InputError("an exact catalog target is only supported for one observable")
    if not args.graph:
        raise UsageError("a catalog target needs --graph to evaluate the observable")
    g, _ = _load_graph(args.graph)
    spec, _ = _load_energy(args.energy)
    obs = _parse_observable(names[0])
    weights = tilt_weights(g.vertex_count, spec.weights_seed) if spec.weights_seed is not None else None
    vals, logw = [], []
    for doc in lines:
        part = Partition(np.array(doc["assignment"]), max(doc["assignment"]))
        vals.append(observable_value(obs, g, part, weights))
        logw.append(doc.get("log_weight", 0.0))
    logw = np.array(logw)
    probs = np.exp(logw - logw.max())
    return DiscreteReference(np.array(vals), probs / probs.sum())


def cmd_diagnose(args, argv) -> int:
    started = time.perf_counter()
    names = [args.observable] + ([args.observable2] if args.observable2 else [])
    for n in names:
        _parse_observable(n)
    checkpoints = _parse_checkpoints(args.checkpoints)
    series, steps = [], None
    for path in args.chains:
        st, vals = _chain_series(path, names)
        series.append(vals)
        if steps is None or len(st) < len(steps):
            steps = st
    if len(series) < 2:
        raise UsageError("diagnose needs at least two chain files")
    reference = _target_reference(args.target, names, args) if args.target else None
    try:
        curve = pairwise_curves(series, checkpoints, reference, steps=steps, burn_in=args.burn_in, thin=args.thin)
    except DiagnosticsError as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(args.out)
    csv_path, json_path = out / "ks_curve.csv", out / "ks_curve.json"
    _atomic_write(csv_path, curve.to_csv())
    _atomic_write(json_path, curve.to_json() + "\n")
    inputs = [Path(p) for p in args.chains] + ([Path(args.target)] if args.target else [])
    _write_manifest(out, "diagnose", argv, {
        "observables": names, "checkpoints": checkpoints, "thin": args.thin, "burn_in": args.burn_in,
    }, inputs, [csv_path, json_path], started)
    print(f"final pairwise KS {curve.pairwise_mean[-1]:.6f}")
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    started = time.perf_counter()
    g, gpath = _load_graph(args.graph)
    spec, epaths = _load_energy(args.energy)
    obs = args.observable or None
    for n in obs or []:
        _parse_observable(n)
    try:
        config = ChainConfig(steps=args.steps, d=args.districts, seed=args.seed, energy=spec, balance=_balance(args),
                             burn_in=args.burn_in, record_every=args.record_every, observables=tuple(obs or ()))
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    a1, a2 = _parse_axis(args.axis1), _parse_axis(args.axis2)
    try:
        grid = sweep(g, config, a1, a2, args.chains, obs, args.thin, args.workers)
    except DiagnosticsError as exc:
        raise UsageError(str(exc)) from exc
    except SweepCellError as exc:
        if isinstance(exc.cause, (DiagnosticsError, ObservableError, ConfigError)):
            raise InputError(str(exc)) from exc
        raise
    out = _out_dir(args.out)
    csv_path, json_path = out / "sweep.csv", out / "sweep.json"
    _atomic_write(csv_path, grid.to_csv())
    _atomic_write(json_path, grid.to_json() + "\n")
    _write_manifest(out, "sweep", argv, {**config.to_dict(), "axis1": a1, "axis2": a2, "chains": args.chains},
                    [gpath, *epaths], [csv_path, json_path], started)
    print(f"wrote {grid.values.size} cells to {out}")
    return EXIT_OK


def cmd_tree_count(args, argv) -> int:
    started = time.perf_counter()
    g, gpath = _load_graph(args.graph)
    part = _read_assignment(args.assignment, g)
    rows = []
    total = 0.0
    for k, members in enumerate(part.parts()):
        lt = log_spanning_tree_count(g, members)
        total += lt
        rows.append({"part": k + 1, "vertices": len(members), "ln_t": lt, "log10_t": lt / math.log(10)})
    nodes, mult = quotient_multigraph(g, part)
    lq = log_multigraph_tree_count(len(nodes), mult)
    total += lq
    doc = {"parts": rows, "quotient": {"ln_t": lq, "log10_t": lq / math.log(10)},
           "ln_tau": total, "log10_tau": total / math.log(10)}
    for r in rows:
        print(f"part {r['part']}: ln t = {r['ln_t']:.6f}  log10 t = {r['log10_t']:.6f}")
    print(f"quotient: ln t = {lq:.6f}  log10 t = {lq / math.log(10):.6f}")
    print(f"total: ln tau = {total:.6f}  log10 tau = {total / math.log(10):.6f}")
    if args.out:
        out = _out_dir(args.out)
        path = out / "tree_count.json"
        _atomic_write(path, json.dumps(doc, indent=2) + "\n")
        _write_manifest(out, "tree-count", argv, {}, [gpath, Path(args.assignment)], [path], started)
    return EXIT_OK


def cmd_toy_tilt(args, argv) -> int:
    started = time.perf_counter()
    if args.lam <= 0 or args.beta <= 0 or args.steps < 2:
        raise UsageError("lambda and beta must be positive and steps at least 2")
    res = toy_tilt(args.lam, args.beta, args.mu, args.steps, args.seed, corrected=args.corrected)
    doc = res.to_dict()
    print(json.dumps(doc, indent=2))
    if args.out:
        out = _out_dir(args.out)
        path = out / "toy_tilt.json"
        _atomic_write(path, json.dumps(doc, indent=2) + "\n")
        _write_manifest(out, "toy-tilt", argv, {"lambda": args.lam, "beta": args.beta, "mu": args.mu,
                                                "steps": args.steps, "seed": args.seed, "corrected": args.corrected},
                        [], [path], started)
    return EXIT_OK


def cmd_baseline(args, argv) -> int:
    started = time.perf_counter()
    g, gpath = _load_graph(args.graph)
    balance = _balance(args)
    rows = recom2_baseline(g, balance, Stream(args.seed), args.samples, args.method, args.max_attempts)
    a = rows
    cut = (a[:, g.edges[:, 0]] != a[:, g.edges[:, 1]]).sum(axis=1)
    out = _out_dir(args.out)
    path = out / "baseline.jsonl"
    with open(path, "w") as fh:
        for i in range(len(rows)):
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "step": i + 1, "accepted": True,
                                 "observables": {"cut_edges": float(cut[i])},
                                 "assignment": rows[i].tolist()}) + "\n")
    _write_manifest(out, "baseline", argv, {"balance": balance.to_dict(), "samples": args.samples,
                                            "seed": args.seed, "method": args.method},
                    [gpath], [path], started)
    print(f"wrote {len(rows)} samples to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _balance_flags(p, epsilon_required=True):
    p.add_argument("--epsilon", type=float, required=epsilon_required, default=0.0,
                   help="relative balance tolerance around the ideal part weight")
    p.add_argument("--balance-mode", choices=["population", "node"], default="population")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="markedwalk", description="Marked edge walk sampler for balanced graph partitions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one or more chains")
    p.add_argument("--graph", required=True)
    p.add_argument("--districts", type=int, required=True)
    _balance_flags(p)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--energy", help="energy spec JSON (default: J = 0)")
    p.add_argument("--out", required=True)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--mode", choices=["composite", "single"], default="composite")
    p.add_argument("--p-cycle", type=float, default=0.5)
    p.add_argument("--ratio", choices=["exact", "pathwise"], default="exact")
    p.add_argument("--record-assignments", action="store_true")
    p.add_argument("--observable", action="append", default=[], help="extra observable to record")
    p.add_argument("--max-init-attempts", type=int, default=1000)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("enumerate", help="enumerate balanced partitions or lifted states")
    p.add_argument("--graph", required=True)
    p.add_argument("--districts", type=int, required=True)
    _balance_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--lifted", action="store_true")
    p.add_argument("--energy", help="energy spec used for the catalog's log weights")
    p.add_argument("--work-limit", type=int, default=DEFAULT_WORK_LIMIT)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("diagnose", help="pairwise KS curves from chain files")
    p.add_argument("--chains", nargs="+", required=True)
    p.add_argument("--observable", required=True)
    p.add_argument("--observable2")
    p.add_argument("--target", help="catalog JSONL or a chain-format sample file")
    p.add_argument("--graph", help="graph for evaluating a catalog target")
    p.add_argument("--energy", help="energy spec (for exp_transform weights in a catalog target)")
    p.add_argument("--checkpoints", required=True, help="a,b,c or lin:start:stop:n or log:start:stop:n (steps)")
    p.add_argument("--thin", type=int, default=100)
    p.add_argument("--burn-in", type=int, default=0, help="records to drop")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="mean pairwise KS over a 2D parameter grid")
    p.add_argument("--graph", required=True)
    p.add_argument("--districts", type=int, required=True)
    _balance_flags(p)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--energy", required=True)
    p.add_argument("--axis1", required=True, help="NAME=v1,v2,... with NAME center[i], beta[i], gamma or epsilon")
    p.add_argument("--axis2", required=True)
    p.add_argument("--chains", type=int, default=10)
    p.add_argument("--observable", action="append", default=[])
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--thin", type=int, default=100)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("tree-count", help="ln and log10 of the degeneracy factor of an assignment")
    p.add_argument("--graph", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tree_count)

    p = sub.add_parser("toy-tilt", help="exponential-tilt toy chain")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--corrected", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_toy_tilt)

    p = sub.add_parser("baseline", help="independent d = 2 spanning-tree samples")
    p.add_argument("--graph", required=True)
    _balance_flags(p)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--method", choices=list(BASELINE_METHODS), default="recom")
    p.add_argument("--max-attempts", type=int, default=100_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"markedwalk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, GraphError, EnergySpecError, ObservableError) as exc:
        print(f"markedwalk: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except WorkLimitExceeded as exc:
        print(f"markedwalk: {exc}", file=sys.stderr)
        return EXIT_WORK_LIMIT
    except (InitializationError, ChainFailure, SweepCellError, RuntimeError, ValueError) as exc:
        print(f"markedwalk: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
