import io
import json
import math

import numpy as np
import pytest

from markedwalk import (
    Chain,
    ChainConfig,
    ChainFailure,
    ConfigError,
    EnergySpec,
    EnergyTerm,
    Observable,
    read_jsonl,
    run_chain,
    run_ensemble,
)
from markedwalk.chain import EnsembleRecord, mh_step, replace_config
from markedwalk.energy import energy_value, log_degeneracy, log_target_ratio, observable_value
from markedwalk.rng import Stream, derive_seed
from markedwalk.state import BalanceSpec, Partition, is_balanced, tilt_weights
from markedwalk.walk import RejectReason, apply, pathwise_transition_ratio, transition_ratio

BAL0 = BalanceSpec("population", 0.0)


def _competitive(gamma=1.0):
    return EnergySpec((EnergyTerm(Observable("dem_share", 1), 10.0, 0.5),), gamma=gamma)


@pytest.mark.parametrize("kw", [
    dict(steps=0), dict(steps=10, burn_in=11), dict(steps=10, record_every=0), dict(steps=10, record_every=11),
    dict(steps=10, d=1), dict(steps=10, mode="bogus"), dict(steps=10, ratio="bogus"), dict(steps=10, p_cycle=2.0),
    dict(steps=10, observables=("nope",)),
])
def test_config_validation(kw):
    base = dict(steps=10, d=2, seed=1)
    base.update(kw)
    with pytest.raises((ConfigError, ValueError)):
        ChainConfig(**base)


def test_config_aliases_and_round_trip():
    cfg = ChainConfig(steps=10, d=2, seed=1, mode="uniform_single_step", energy=_competitive(0.5), observables=("cut_edges",))
    assert cfg.mode == "single"
    assert ChainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert ChainConfig(steps=10, d=2, seed=1, mode="metropolis_composite").mode == "composite"


def test_record_cadence(grid4):
    cfg = ChainConfig(steps=1000, d=2, seed=5, burn_in=100, record_every=30, balance=BAL0)
    run = run_chain(grid4, cfg)
    assert run.steps.tolist() == list(range(130, 1001, 30))
    assert len(run) == cfg.record_count == 30
    empty = run_chain(grid4, replace_config(cfg, burn_in=1000, record_every=1))
    assert len(empty) == 0


def test_same_seed_identical_and_different_seed_differs(grid4):
    cfg = ChainConfig(steps=5000, d=2, seed=9, balance=BAL0, record_assignments=True)
    a, b = run_chain(grid4, cfg), run_chain(grid4, cfg)
    assert np.array_equal(a.assignments, b.assignments) and np.array_equal(a.values, b.values)
    c = run_chain(grid4, replace_config(cfg, seed=10))
    assert not np.array_equal(a.assignments, c.assignments)


def test_jsonl_round_trip(grid4):
    cfg = ChainConfig(steps=200, d=2, seed=2, balance=BAL0, record_assignments=True, record_every=10)
    run = run_chain(grid4, cfg)
    buf = io.StringIO()
    run.write_jsonl(buf)
    lines = buf.getvalue().splitlines()
    assert all(json.loads(x)["schema_version"] == "1.0" for x in lines)
    recs = read_jsonl(lines)
    assert [r.step for r in recs] == run.steps.tolist()
    assert recs[0] == EnsembleRecord.from_json(recs[0].to_json())
    assert list(recs[0].assignment) == run.assignments[0].tolist()


def test_recorded_observables_match_reference(grid4_votes):
    spec = _competitive()
    cfg = ChainConfig(steps=3000, d=2, seed=4, energy=spec, balance=BalanceSpec("population", 0.25),
                      record_assignments=True, record_every=50, observables=("mean_median", "log_tau"))
    run = run_chain(grid4_votes, cfg)
    for i in range(len(run)):
        p = Partition(run.assignments[i], 2)
        for name in run.names:
            want = observable_value(Observable.parse(name), grid4_votes, p)
            assert run.series(name)[i] == pytest.approx(want, abs=1e-9)


def test_exp_transform_observable_matches_reference(grid4):
    spec = EnergySpec((EnergyTerm(Observable("exp_transform", 0, 2.0), 1.0, 1.0),), weights_seed=77)
    cfg = ChainConfig(steps=2000, d=2, seed=4, energy=spec, balance=BalanceSpec("population", 0.25),
                      record_assignments=True, record_every=100)
    run = run_chain(grid4, cfg)
    w = tilt_weights(16, 77)
    for i in range(len(run)):
        p = Partition(run.assignments[i], 2)
        assert run.series("exp_transform[0,2]")[i] == pytest.approx(
            observable_value(Observable("exp_transform", 0, 2.0), grid4, p, w), rel=1e-9)


@pytest.mark.parametrize("spec_name, ratio", [("competitive", "exact"), ("competitive_gamma", "pathwise"),
                                              ("spanning", "exact"), ("uniform", "exact")])
def test_replay_harness(grid4_votes, spec_name, ratio):
    """Every decision is recomputed from the traced proposal and reference energies."""
    spec = {"competitive": _competitive(), "competitive_gamma": _competitive(0.5),
            "spanning": EnergySpec.spanning_tree(0.5), "uniform": EnergySpec.uniform()}[spec_name]
    g = grid4_votes
    cfg = ChainConfig(steps=1, d=2, seed=8, energy=spec, balance=BalanceSpec("population", 0.25), ratio=ratio)
    chain = Chain(g, cfg, Stream(8))
    seen = {r: 0 for r in ("accepted", "mh", "unbalanced", "reverse", "collision")}
    for _ in range(1500):
        before = chain.state.copy()
        old_p = before.partition()
        info = chain.step(trace=True)
        if info.reason is RejectReason.COLLISION:
            assert info.proposal is None and chain.state.key() == before.key()
            seen["collision"] += 1
            continue
        p = info.proposal
        new_state = apply(before, p)
        new_p = new_state.partition()
        if info.reason is RejectReason.UNBALANCED:
            assert not is_balanced(new_p, g, cfg.balance) and chain.state.key() == before.key()
            seen["unbalanced"] += 1
            continue
        if info.reason is RejectReason.REVERSE_IMPOSSIBLE:
            assert p.m_new == p.e_plus and chain.state.key() == before.key()
            seen["reverse"] += 1
            continue
        assert info.log_target == pytest.approx(log_target_ratio(spec, g, old_p, new_p), abs=1e-9)
        want_ratio = transition_ratio(p) if ratio == "exact" else pathwise_transition_ratio(p)
        assert info.ratio == pytest.approx(want_ratio, rel=1e-12)
        la = min(0.0, info.log_target + math.log(info.ratio))
        assert info.log_accept == pytest.approx(la, abs=1e-12)
        assert -math.inf < info.log_u <= 0.0
        assert info.accepted == (info.log_u <= info.log_accept)
        if info.accepted:
            assert chain.state.key() == new_state.key()
            seen["accepted"] += 1
        else:
            assert chain.state.key() == before.key()
            seen["mh"] += 1
    chain.state.check_invariants()
    assert chain.energy == pytest.approx(
        energy_value(spec, g, chain.state.partition()) if spec.special is None else log_degeneracy(g, chain.state.partition()))
    assert seen["accepted"] > 0 and seen["unbalanced"] > 0


def test_mh_step_returns_record(grid4):
    chain = Chain(grid4, ChainConfig(steps=1, d=2, seed=1, balance=BAL0), Stream(1))
    state, rec, info = mh_step(chain)
    assert state is chain.state and rec.step == 1 and rec.accepted == info.accepted
    assert "cut_edges" in rec.observables


def test_c4_uniform_frequencies(c4):
    cfg = ChainConfig(steps=100_000, d=2, seed=3, balance=BAL0, record_assignments=True)
    run = run_chain(c4, cfg)
    keys = [Partition(a, 2).key() for a in run.assignments[::1]]
    frac = keys.count((1, 1, 2, 2)) / len(keys)
    assert abs(frac - 0.5) < 0.02


def test_tree_graph_rejected(p4):
    with pytest.raises(ConfigError):
        Chain(p4, ChainConfig(steps=10, d=2, seed=1, balance=BAL0), Stream(1))
    with pytest.raises(ChainFailure) as exc:
        run_ensemble(p4, ChainConfig(steps=10, d=2, seed=1, balance=BAL0), 2)
    assert exc.value.chain_index == 0


def test_votes_required_for_vote_observables(grid4):
    with pytest.raises(ValueError):
        Chain(grid4, ChainConfig(steps=10, d=2, seed=1, balance=BAL0, energy=_competitive()), Stream(1))


def test_ensemble_seeds_and_order(grid4):
    cfg = ChainConfig(steps=2000, d=2, seed=21, balance=BAL0, record_assignments=True, record_every=100)
    ens = run_ensemble(grid4, cfg, 10, threads=3)
    assert [c.chain_index for c in ens] == list(range(10))
    assert len({c.seed for c in ens}) == 10
    assert all(c.seed == derive_seed(21, i) for i, c in enumerate(ens))
    single = run_ensemble(grid4, cfg, 1)
    solo = run_chain(grid4, cfg)
    assert np.array_equal(single.chains[0].assignments, solo.assignments)
    summary = ens.summary()
    assert summary["chain_count"] == 10 and 0 < summary["acceptance_rate"] < 1


def test_counters_add_up(grid4):
    run = run_chain(grid4, ChainConfig(steps=5000, d=2, seed=6, balance=BAL0))
    c = run.counters
    assert c["accepted"] + c["collision"] + c["reverse_impossible"] + c["unbalanced"] + c["mh_reject"] == 5000


def test_single_mode_never_needs_target(grid4):
    cfg = ChainConfig(steps=5000, d=2, seed=6, balance=BalanceSpec("population", 0.25), mode="single",
                      energy=EnergySpec.spanning_tree())
    run = run_chain(grid4, cfg)
    assert run.counters["mh_reject"] == 0 and run.counters["reverse_impossible"] == 0
    run.final_state.check_invariants()
