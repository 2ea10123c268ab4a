import io
import json
import math
import random

import numpy as np
import pytest

import oracles
from markedwalk.energy import EnergySpec, EnergyTerm, Observable, log_degeneracy
from markedwalk.enumeration import (
    WorkLimitExceeded,
    empirical_distribution,
    enumerate_lifted_states,
    enumerate_partitions,
    enumerate_partitions_by_labeling,
    enumerate_spanning_trees,
    exact_target_distribution,
    lifted_partition,
    recom2_baseline,
    recom2_baseline_sample,
    total_variation,
)
from markedwalk.graph import from_edge_list, grid_graph
from markedwalk.rng import Stream
from markedwalk.state import BalanceSpec, Partition

BAL0 = BalanceSpec("population", 0.0)
TRIANGLE = from_edge_list(3, [(0, 1), (1, 2), (0, 2)])


def test_small_catalog_counts(c4, p4):
    assert len(enumerate_partitions(c4, 2, BAL0)) == 2
    cat = enumerate_partitions(p4, 2, BAL0)
    assert [p.key() for p in cat.partitions] == [(1, 1, 2, 2)]


def test_grid_catalog_matches_labeling_oracle(grid4):
    cat = enumerate_partitions(grid4, 2, BAL0)
    assert len(cat) == 70
    edges = [tuple(map(int, e)) for e in grid4.edges]
    by_labels = enumerate_partitions_by_labeling(grid4, 2, BAL0)
    assert {p.key() for p in cat.partitions} == {p.key() for p in by_labels}
    # independent brute force over all 2-colourings
    assert {p.key() for p in cat.partitions} == oracles.balanced_partitions_by_labeling(16, edges, 2, [1.0] * 16, 0.0)


def test_random_graphs_both_strategies_and_oracle():
    rng = random.Random(3)
    for _ in range(12):
        n = rng.randint(4, 7)
        edges = oracles.random_connected_graph(rng, n, rng.randint(0, 5))
        g = from_edge_list(n, edges)
        for d in (2, 3):
            bal = BalanceSpec("node", 0.5)
            a = {p.key() for p in enumerate_partitions(g, d, bal).partitions}
            b = {p.key() for p in enumerate_partitions_by_labeling(g, d, bal)}
            c = oracles.balanced_partitions_by_labeling(n, edges, d, [1.0] * n, 0.5)
            assert a == b == c


def test_population_weights_respected():
    g = from_edge_list(4, [(0, 1), (1, 2), (2, 3)], population=[3, 1, 1, 1])
    cat = enumerate_partitions(g, 2, BAL0)
    assert [p.key() for p in cat.partitions] == [(1, 2, 2, 2)]


def test_spanning_trees_match_oracle():
    edges = [(0, 1), (1, 2), (2, 3), (0, 3), (0, 2), (1, 3)]
    g = from_edge_list(4, edges)
    assert set(enumerate_spanning_trees(g)) == set(oracles.spanning_trees(4, edges))
    assert len(enumerate_spanning_trees(grid_graph(3, 3))) == 192


def test_lifted_states_examples(c4, p4):
    tri = enumerate_lifted_states(TRIANGLE, 2, BalanceSpec("node", 0.34))
    assert len(tri) == 6
    tau = enumerate_partitions(TRIANGLE, 2, BalanceSpec("node", 0.34))
    assert sum(round(math.exp(log_degeneracy(TRIANGLE, p))) for p in tau.partitions) == 6
    # one spanning tree: states are the balanced single-edge cuts
    assert enumerate_lifted_states(p4, 2, BAL0) == [(frozenset({0, 1, 2}), frozenset({1}))]
    c4_states = enumerate_lifted_states(c4, 2, BAL0)
    assert len({t for t, _ in c4_states}) == 4 and len(c4_states) == 4
    for t, m in c4_states:
        assert lifted_partition(c4, t, m, BAL0).key() in {(1, 1, 2, 2), (1, 2, 2, 1)}


def test_lifted_states_match_oracle():
    rng = random.Random(8)
    for _ in range(6):
        n = rng.randint(4, 6)
        edges = oracles.random_connected_graph(rng, n, rng.randint(1, 3))
        g = from_edge_list(n, edges)
        got = set(enumerate_lifted_states(g, 2, BalanceSpec("node", 0.4)))
        assert got == set(oracles.lifted_states(n, edges, 2, [1.0] * n, 0.4))


def test_work_limit():
    with pytest.raises(WorkLimitExceeded):
        enumerate_partitions(grid_graph(4, 4), 2, BAL0, work_limit=50)
    with pytest.raises(WorkLimitExceeded):
        enumerate_spanning_trees(grid_graph(4, 4), work_limit=50)


def test_exact_target_laws(grid4):
    cat = enumerate_partitions(grid4, 2, BAL0)
    uni = exact_target_distribution(cat, EnergySpec.uniform())
    assert np.allclose(uni, 1 / 70)
    st = exact_target_distribution(cat, EnergySpec.spanning_tree())
    tau = np.exp(cat.log_tau)
    assert np.allclose(st, tau / tau.sum())
    comp = EnergySpec((EnergyTerm(Observable("cut_edges"), 0.5, 4.0),))
    w = np.exp([-0.5 * (c - 4.0) ** 2 for c in [_cut(grid4, p) for p in cat.partitions]])
    assert np.allclose(exact_target_distribution(cat, comp), w / w.sum())


def _cut(g, p):
    a = p.assignment
    return int(sum(a[u] != a[v] for u, v in g.edges))


def test_catalog_jsonl_and_index(grid4):
    cat = enumerate_partitions(grid4, 2, BAL0)
    buf = io.StringIO()
    cat.write_jsonl(buf, EnergySpec.spanning_tree())
    rows = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert len(rows) == 70 and all("log_weight" in r for r in rows)
    assert cat.index_of(rows[5]["assignment"]) == 5
    swapped = [3 - x for x in rows[5]["assignment"]]
    assert cat.index_of(swapped) == 5


def test_empirical_distribution_and_tv(c4):
    cat = enumerate_partitions(c4, 2, BAL0)
    emp = empirical_distribution(cat, np.array([[1, 1, 2, 2], [1, 1, 2, 2], [1, 2, 2, 1], [2, 2, 1, 1]]))
    assert emp[cat.index_of([1, 1, 2, 2])] == 0.75
    assert total_variation(emp, np.array([0.5, 0.5])) == 0.25
    with pytest.raises(KeyError):
        empirical_distribution(cat, np.array([[1, 2, 1, 2]]))


def test_baseline_examples(c4, p4):
    rows = recom2_baseline(p4, BAL0, Stream(1), 50)
    assert all(tuple(r) == (1, 1, 2, 2) for r in rows)
    cat = enumerate_partitions(c4, 2, BAL0)
    emp = empirical_distribution(cat, recom2_baseline(c4, BAL0, Stream(2), 10_000))
    assert np.all(np.abs(emp - 0.5) < 0.02)
    assert recom2_baseline_sample(c4, BAL0, Stream(3)).is_valid(c4)


@pytest.mark.parametrize("method", ["recom", "uniform_edge"])
def test_baseline_matches_spanning_tree_law_at_zero_tolerance(grid4, method):
    cat = enumerate_partitions(grid4, 2, BAL0)
    exact = exact_target_distribution(cat, EnergySpec.spanning_tree())
    emp = empirical_distribution(cat, recom2_baseline(grid4, BAL0, Stream(4), 40_000, method))
    assert total_variation(emp, exact) < 0.03


def test_uniform_edge_baseline_exact_with_slack(grid23):
    bal = BalanceSpec("node", 0.34)
    cat = enumerate_partitions(grid23, 2, bal)
    exact = exact_target_distribution(cat, EnergySpec.spanning_tree())
    emp = empirical_distribution(cat, recom2_baseline(grid23, bal, Stream(5), 40_000, "uniform_edge"))
    assert total_variation(emp, exact) < 0.02


def test_baseline_rejects_unknown_method(c4):
    with pytest.raises(ValueError):
        recom2_baseline(c4, BAL0, Stream(1), 1, "bogus")
