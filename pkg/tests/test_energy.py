import json
import math

import numpy as np
import pytest

from markedwalk.energy import (
    EnergySpec,
    EnergySpecError,
    EnergyTerm,
    Observable,
    ObservableError,
    cut_edges,
    dem_share,
    energy_value,
    evaluate,
    exp_transform,
    log_degeneracy,
    log_partition_weight,
    log_target_ratio,
    mean_median,
)
from markedwalk.enumeration import enumerate_partitions
from markedwalk.graph import from_edge_list, grid_graph
from markedwalk.state import BalanceSpec, Partition

TRIANGLE = from_edge_list(3, [(0, 1), (1, 2), (0, 2)])


def _part(*labels):
    return Partition(np.array(labels), max(labels))


@pytest.mark.parametrize("name", ["cut_edges", "dem_share[1]", "mean_median", "exp_transform[0,2]", "constant_zero", "log_tau"])
def test_observable_name_round_trip(name):
    assert Observable.parse(name).name == name


@pytest.mark.parametrize("name", ["bogus", "dem_share", "dem_share[-1]", "cut_edges[1]", "exp_transform[0,0]", "dem_share[x]"])
def test_observable_parse_errors(name):
    with pytest.raises(ObservableError):
        Observable.parse(name)


def test_cut_edges_examples(c4):
    assert cut_edges(c4, _part(1, 1, 2, 2)) == 2
    assert cut_edges(c4, _part(1, 1, 1, 1)) == 0
    g = grid_graph(4, 4)
    halves = Partition(np.array([1 if v < 8 else 2 for v in range(16)]), 2)
    assert cut_edges(g, halves) == 4


def test_dem_share_examples():
    g = from_edge_list(2, [(0, 1)], dem_votes=[1, 3], rep_votes=[1, 1])
    assert dem_share(g, _part(1, 2), 0) == 0.5
    assert dem_share(g, _part(1, 2), 1) == 0.75
    z = from_edge_list(2, [(0, 1)], dem_votes=[0, 3], rep_votes=[0, 1])
    with pytest.raises(ObservableError):
        dem_share(z, _part(1, 2), 0)


def test_mean_median_examples():
    path = from_edge_list(3, [(0, 1), (1, 2)], dem_votes=[3, 4, 8], rep_votes=[7, 6, 2])
    assert mean_median(path, _part(1, 2, 3)) == pytest.approx(0.1)
    sym = from_edge_list(3, [(0, 1), (1, 2)], dem_votes=[4, 5, 6], rep_votes=[6, 5, 4])
    assert mean_median(sym, _part(1, 2, 3)) == pytest.approx(0.0, abs=1e-15)
    two = from_edge_list(2, [(0, 1)], dem_votes=[1, 9], rep_votes=[9, 1])
    assert mean_median(two, _part(1, 2)) == pytest.approx(0.0, abs=1e-15)


def test_exp_transform_examples():
    g = grid_graph(2, 2)
    p = _part(1, 1, 2, 2)
    half = np.full(4, 0.5)
    assert exp_transform(g, p, 1.0, 0, half) == pytest.approx(math.log(2))
    assert exp_transform(g, p, 2.0, 0, half) == pytest.approx(math.log(2) / 2)
    events = []
    big = exp_transform(g, p, 1.0, 0, np.full(4, 1e6), events)
    assert math.isfinite(big) and big > 30 and events


def test_log_degeneracy_examples(c4):
    assert log_degeneracy(c4, _part(1, 1, 2, 2)) == pytest.approx(math.log(2))
    assert log_degeneracy(TRIANGLE, _part(1, 2, 2)) == pytest.approx(math.log(2))
    tree = from_edge_list(4, [(0, 1), (1, 2), (1, 3)])
    assert log_degeneracy(tree, _part(1, 1, 2, 1)) == 0.0


def test_spec_json_round_trip():
    spec = EnergySpec(
        (EnergyTerm(Observable("dem_share", 1), 10.0, 0.5), EnergyTerm(Observable("exp_transform", 0, 2.0), 1.5, 2.0)),
        gamma=0.5, weights_seed=9,
    )
    assert EnergySpec.from_json(spec.to_json()) == spec
    assert EnergySpec.from_json(EnergySpec.spanning_tree().to_json()) == EnergySpec.spanning_tree()


@pytest.mark.parametrize("doc", [
    {},
    {"terms": [], "special": "bogus"},
    {"special": "spanning_tree", "terms": [{"observable": "cut_edges"}]},
    {"terms": [{"observable": "exp_transform", "part": 0, "lambda": 1.0}]},
    {"terms": [{"observable": "cut_edges"}], "extra": 1},
    {"terms": [{"observable": "nope"}]},
])
def test_spec_errors(doc):
    with pytest.raises(EnergySpecError):
        EnergySpec.from_json(json.dumps(doc))


def test_spanning_tree_form_cancels(grid4):
    cat = enumerate_partitions(grid4, 2, BalanceSpec("population", 0.0))
    spec = EnergySpec.spanning_tree()
    for a, b in zip(cat.partitions[:10], cat.partitions[10:20]):
        assert log_target_ratio(spec, grid4, a, b) == 0.0


def test_uniform_ratio_is_tau_difference(grid4):
    cat = enumerate_partitions(grid4, 2, BalanceSpec("population", 0.0))
    spec = EnergySpec.uniform()
    a, b = cat.partitions[0], cat.partitions[5]
    want = log_degeneracy(grid4, a) - log_degeneracy(grid4, b)
    assert log_target_ratio(spec, grid4, a, b) == pytest.approx(want)
    assert log_target_ratio(spec, grid4, b, a) == pytest.approx(-want)


def test_uniform_ratio_with_halved_tau():
    # K4 minus the edge 2-3: tau(0,1,2 | 3) = 6 and tau(0 | 1,2,3) = 3
    g = from_edge_list(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)])
    big, small = _part(1, 1, 1, 2), _part(1, 2, 2, 2)
    assert round(math.exp(log_degeneracy(g, big))) == 6
    assert round(math.exp(log_degeneracy(g, small))) == 3
    spec = EnergySpec.uniform()
    # moving to the partition with half the tau doubles the lifted target
    assert math.exp(log_target_ratio(spec, g, big, small)) == pytest.approx(2.0)
    assert math.exp(log_target_ratio(spec, g, small, big)) == pytest.approx(0.5)


def test_competitiveness_delta():
    g = from_edge_list(2, [(0, 1)], dem_votes=[1, 1], rep_votes=[1, 1])
    spec = EnergySpec((EnergyTerm(Observable("dem_share", 1), 10.0, 0.5),))
    p = _part(1, 2)
    assert energy_value(spec, g, p) == 0.0
    g2 = from_edge_list(2, [(0, 1)], dem_votes=[1, 3], rep_votes=[1, 2])
    assert energy_value(spec, g2, p) == pytest.approx(-10 * 0.01)


def test_gamma_interpolates(c4):
    spec0 = EnergySpec.uniform(gamma=0.0)
    p = _part(1, 1, 2, 2)
    assert log_partition_weight(spec0, c4, p) == pytest.approx(math.log(2))
    assert log_partition_weight(EnergySpec.uniform(), c4, p) == 0.0
    ev = evaluate(EnergySpec.spanning_tree(), c4, p)
    assert ev.energy == ev.log_tau == pytest.approx(math.log(2))
