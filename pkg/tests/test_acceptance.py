"""Acceptance criteria, each checked at its stated tolerance.

Every test appends one PASS/FAIL line to the terminal summary, and the
assertion carries the measured numbers. Seeds are fixed up front; nothing is
retried.
"""

import contextlib
import io
import math
import os
import random
import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from markedwalk import (
    BalanceSpec,
    ChainConfig,
    EnergySpec,
    MarkedTreeState,
    Stream,
    enumerate_lifted_states,
    enumerate_partitions,
    exact_target_distribution,
    load_dual_graph,
    log_spanning_tree_count,
    recom2_baseline,
    run_chain,
    run_ensemble,
    total_variation,
)
from markedwalk.cli import main as cli_main
from markedwalk.diagnostics import DiscreteReference, ks_1d, pairwise_curves, tilt_regression
from markedwalk.energy import Observable, log_degeneracy, observable_value
from markedwalk.enumeration import empirical_distribution
from markedwalk.graph import from_edge_list
from markedwalk.walk import RejectReason, marked_edge_factor, propose, transition_ratio

pytestmark = pytest.mark.acceptance

SEED = 2024
MILLION = 1_000_000


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def skip_report(n, why):
    line = f"criterion {n:>2}: SKIP  {why}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    pytest.skip(why)


def _moving_average(x, width=3):
    half = width // 2
    return np.array([x[max(0, i - half):i + half + 1].mean() for i in range(len(x))])


# ---------------------------------------------------------------------------


def test_criterion_01_matrix_tree_oracle():
    rng = random.Random(SEED)
    t0 = time.perf_counter()
    bad = []
    for _ in range(20):
        n = rng.randint(4, 6)
        max_extra = n * (n - 1) // 2 - (n - 1)
        edges = oracles.random_connected_graph(rng, n, rng.randint(0, max_extra))
        g = from_edge_list(n, edges)
        got = math.exp(log_spanning_tree_count(g))
        want = len(oracles.spanning_trees(n, edges))
        if round(got) != want or abs(got - want) > 1e-9 * want:
            bad.append((n, edges, got, want))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 10
    report(1, ok, f"20 graphs, mismatches={len(bad)}, runtime={elapsed:.2f}s (limit 10s)")
    assert not bad, bad
    assert elapsed < 10


def test_criterion_02_degeneracy_oracle():
    rng = random.Random(SEED + 2)
    t0 = time.perf_counter()
    rows = []
    for i in range(10):
        n = rng.randint(4, 6)
        max_extra = n * (n - 1) // 2 - (n - 1)
        edges = oracles.random_connected_graph(rng, n, rng.randint(1, max_extra))
        d = 2 if i % 2 == 0 else 3
        g = from_edge_list(n, edges)
        bal = BalanceSpec("node", 0.5)
        catalog = enumerate_partitions(g, d, bal)
        tau_sum = sum(math.exp(log_degeneracy(g, p)) for p in catalog.partitions)
        lifted = len(enumerate_lifted_states(g, d, bal))
        brute = len(oracles.lifted_states(n, edges, d, [1.0] * n, 0.5))
        rows.append((round(tau_sum), lifted, brute, abs(tau_sum - lifted) / max(lifted, 1)))
    elapsed = time.perf_counter() - t0
    bad = [r for r in rows if not (r[0] == r[1] == r[2] and r[3] < 1e-9)]
    ok = not bad and elapsed < 60
    report(2, ok, f"10 graphs, lifted counts {[r[1] for r in rows]}, mismatches={len(bad)}, runtime={elapsed:.2f}s")
    assert not bad, rows
    assert elapsed < 60


def _asymmetric_fixture():
    # u = 0 has tree degree 2 in T and 3 in T' once e+ = (0,4) replaces (3,4);
    # the mark (0,1) slides to (0,2).
    edges = [(0, 1), (0, 2), (2, 3), (3, 4), (0, 4)]
    g = from_edge_list(5, edges)
    tree = {0, 1, 2, 3}
    state = MarkedTreeState.from_edges(g, tree, {0}, BalanceSpec("node", 0.2))
    return g, edges, state


def test_criterion_03_transition_ratio_oracle():
    t0 = time.perf_counter()
    g, edges, state = _asymmetric_fixture()
    target = (frozenset({0, 1, 2, 4}), frozenset({1}))
    found = None
    for s in range(10_000):
        p = propose(state, Stream(s))
        if p is not RejectReason.COLLISION and (p.new_tree_edges, p.new_marked) == target:
            found = p
            break
    assert found is not None
    factor = marked_edge_factor(found.deg_t_u, found.deg_tp_u)
    fixture_ok = (found.deg_t_u, found.deg_tp_u) == (2, 3) and factor == 1.5
    brute_fixture = oracles.tuple_sum_ratio(5, edges, (state.tree_edges, state.marked), target)
    fixture_ok = fixture_ok and abs(transition_ratio(found) - brute_fixture) <= 1e-12 * brute_fixture

    rng = random.Random(SEED + 3)
    checked, worst, bad = 0, 0.0, []
    seed = 0
    while checked < 1000:
        n = rng.randint(4, 6)
        max_extra = n * (n - 1) // 2 - (n - 1)
        edges_r = oracles.random_connected_graph(rng, n, rng.randint(1, max_extra))
        d = rng.choice([2, 3]) if n >= 5 else 2
        gr = from_edge_list(n, edges_r)
        states = oracles.lifted_states(n, edges_r, d, [1.0] * n, 0.99)
        for _ in range(25):
            tree, marks = rng.choice(states)
            st = MarkedTreeState.from_edges(gr, tree, marks, BalanceSpec("node", 0.99))
            seed += 1
            p = propose(st, Stream(seed))
            if p is RejectReason.COLLISION:
                continue
            x, y = (tree, marks), (p.new_tree_edges, p.new_marked)
            if x == y:
                continue
            want = oracles.tuple_sum_ratio(n, edges_r, x, y)
            got = transition_ratio(p)
            err = abs(got - want) / want if want else abs(got)
            worst = max(worst, err)
            if (want == 0 and got != 0) or err > 1e-12:
                bad.append((edges_r, x, y, got, want))
            checked += 1
            if checked == 1000:
                break
    elapsed = time.perf_counter() - t0
    ok = fixture_ok and not bad and elapsed < 300
    report(3, ok, f"fixture factor={factor} (want 1.5); 1000 pairs, worst rel err={worst:.2e}, "
                  f"mismatches={len(bad)}, runtime={elapsed:.1f}s")
    assert fixture_ok
    assert not bad, bad[:3]
    assert elapsed < 300


def _catalog_run(g, spec, seed):
    bal = BalanceSpec("population", 0.0)
    catalog = enumerate_partitions(g, 2, bal)
    cfg = ChainConfig(steps=MILLION, d=2, seed=seed, energy=spec, balance=bal, record_assignments=True)
    t0 = time.perf_counter()
    run = run_chain(g, cfg)
    elapsed = time.perf_counter() - t0
    emp = empirical_distribution(catalog, run.assignments)
    exact = exact_target_distribution(catalog, spec)
    return catalog, run, emp, exact, elapsed


def test_criterion_04_uniform_partition_target(grid4):
    catalog, run, emp, exact, elapsed = _catalog_run(grid4, EnergySpec.uniform(), SEED)
    tv = total_variation(emp, exact)
    coverage = float((emp > 0).mean())
    ok = tv < 0.05 and coverage == 1.0 and elapsed < 300
    report(4, ok, f"{len(catalog)} partitions, TV={tv:.4f} (limit 0.05), coverage={coverage:.0%}, runtime={elapsed:.1f}s")
    assert coverage == 1.0
    assert elapsed < 300
    assert tv < 0.05, f"TV {tv:.4f}"


def test_criterion_05_spanning_tree_target(grid4):
    spec = EnergySpec.spanning_tree()
    catalog, run, emp, exact, elapsed = _catalog_run(grid4, spec, SEED)
    tv = total_variation(emp, exact)
    bal = BalanceSpec("population", 0.0)
    base = recom2_baseline(grid4, bal, Stream(SEED), 20_000)
    base_tv = total_variation(empirical_distribution(catalog, base), exact)
    e = grid4.edges
    base_cut = (base[:, e[:, 0]] != base[:, e[:, 1]]).sum(axis=1)
    ks = ks_1d(run.series("cut_edges"), base_cut)
    ok = tv < 0.05 and base_tv < 0.05 and ks < 0.05
    report(5, ok, f"TV={tv:.4f} (limit 0.05), baseline-vs-exact TV={base_tv:.4f}, cut-edge KS vs baseline={ks:.4f} (limit 0.05)")
    assert base_tv < 0.05
    assert tv < 0.05
    assert ks < 0.05


def test_criterion_06_ks_decay(grid4):
    bal = BalanceSpec("population", 0.0)
    cfg = ChainConfig(steps=MILLION, d=2, seed=SEED, energy=EnergySpec.spanning_tree(), balance=bal)
    ens = run_ensemble(grid4, cfg, 4)
    checkpoints = np.unique(np.geomspace(1e4, 1e6, 10).round().astype(int))
    curve = pairwise_curves(ens.series("cut_edges"), checkpoints, thin=100)
    smooth = _moving_average(curve.pairwise_mean, 3)
    monotone = bool(np.all(np.diff(smooth) <= 0))
    final = float(curve.pairwise_mean[-1])
    ok = monotone and final < 0.05
    report(6, ok, f"final pairwise KS={final:.4f} (limit 0.05), smoothed monotone={monotone}, "
                  f"smoothed={np.round(smooth, 4).tolist()}")
    assert final < 0.05
    assert monotone, f"smoothed curve {smooth}"


def test_criterion_07_toy_tilt():
    beta, mu = 0.5, 2.0
    t0 = time.perf_counter()
    fit = tilt_regression([0.5, 1.0, 2.0], beta, mu, MILLION, SEED)
    elapsed = time.perf_counter() - t0
    lines, ok = [], True
    for lam, r in zip([0.5, 1.0, 2.0], fit["results"]):
        want_m, want_v = mu - lam / (2 * beta), 1 / (2 * beta)
        good = abs(r.mean - want_m) <= 0.05 and abs(r.variance - want_v) <= 0.05
        ok &= good
        lines.append(f"lam={lam}: mean {r.mean:.3f} vs {want_m:.3f}, var {r.variance:.3f} vs {want_v:.3f}")
    slope_ok = abs(fit["slope"] + 0.5) <= 0.05
    ok = ok and slope_ok and elapsed < 60
    report(7, ok, "; ".join(lines) + f"; slope {fit['slope']:.3f} vs -0.5; runtime={elapsed:.1f}s")
    assert elapsed < 60
    assert ok


def test_criterion_08_competitiveness(grid4_votes, fixtures):
    spec = EnergySpec.from_json((fixtures / "energy_competitive.json").read_text())
    bal = BalanceSpec("population", 0.125)
    catalog = enumerate_partitions(grid4_votes, 2, bal)
    probs = exact_target_distribution(catalog, spec)
    obs = Observable("dem_share", 1)
    values = np.array([observable_value(obs, grid4_votes, p) for p in catalog.partitions])
    run = run_chain(grid4_votes, ChainConfig(steps=MILLION, d=2, seed=SEED, energy=spec, balance=bal))
    ks = DiscreteReference(values, probs).distance(run.series("dem_share[1]"))
    ok = ks < 0.05
    report(8, ok, f"{len(catalog)} partitions, KS of p2 vs exact={ks:.4f} (limit 0.05)")
    assert ok


def test_criterion_09_data_conditional(tmp_path):
    cheshire = os.environ.get("MARKEDWALK_CHESHIRE_GRAPH")
    texas = os.environ.get("MARKEDWALK_TEXAS_GRAPH")
    texas_plan = os.environ.get("MARKEDWALK_TEXAS_ASSIGNMENT")
    if not cheshire and not (texas and texas_plan):
        skip_report(9, "no Cheshire or Texas data supplied (set MARKEDWALK_CHESHIRE_GRAPH, "
                       "MARKEDWALK_TEXAS_GRAPH and MARKEDWALK_TEXAS_ASSIGNMENT)")
    details, ok = [], True
    if cheshire:
        eps = float(os.environ.get("MARKEDWALK_CHESHIRE_EPSILON", "0.01"))
        g = load_dual_graph(cheshire)
        bal = BalanceSpec("population", eps)
        catalog = enumerate_partitions(g, 2, bal, work_limit=10**9)
        run = run_chain(g, ChainConfig(steps=MILLION, d=2, seed=SEED, energy=EnergySpec.uniform(), balance=bal,
                                       record_assignments=True, record_every=10))
        visited = float((empirical_distribution(catalog, run.assignments) > 0).mean())
        good = len(catalog) == 34_225 and visited >= 0.95
        ok &= good
        details.append(f"Cheshire: {len(catalog)} partitions (want 34225), visited {visited:.1%}")
    if texas and texas_plan:
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            code = cli_main(["tree-count", "--graph", texas, "--assignment", texas_plan])
        total = [ln for ln in out.getvalue().splitlines() if ln.startswith("total:")][0]
        log10 = float(total.split("log10 tau =")[1])
        good = code == 0 and abs(log10 - 4694) <= 0.01 * 4694
        ok &= good
        details.append(f"Texas: log10 tau={log10:.1f} (want 4694 +/- 1%)")
    report(9, ok, "; ".join(details))
    assert ok


def test_criterion_10_determinism(grid4):
    t0 = time.perf_counter()
    cfg = ChainConfig(steps=50_000, d=2, seed=SEED, energy=EnergySpec.spanning_tree(),
                      balance=BalanceSpec("population", 0.0), record_assignments=True, record_every=7)

    def dump(threads):
        ens = run_ensemble(grid4, cfg, 4, threads=threads)
        blobs = []
        for c in ens:
            buf = io.StringIO()
            c.write_jsonl(buf)
            blobs.append(buf.getvalue())
        return blobs

    a, b, c = dump(1), dump(1), dump(4)
    elapsed = time.perf_counter() - t0
    ok = a == b == c and elapsed < 60
    report(10, ok, f"4 chains x 50000 steps, identical across runs={a == b}, across thread counts={a == c}, "
                   f"runtime={elapsed:.1f}s")
    assert a == b == c
    assert elapsed < 60
