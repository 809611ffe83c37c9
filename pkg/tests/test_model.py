import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdotflow import io as sio
from sdotflow.costs import EUCLIDEAN, GEODESIC, AssignmentCostSpec, ConsumerGraph, EndpointRef
from sdotflow.fixtures import two_node
from sdotflow.model import Arc, DemandMeasure, Network, Node, QuadraticCost, Scenario, validate_scenario
from sdotflow.scenarios import generate_power_network, generate_synthetic


def two_source(supplies=(0.5, 0.5), lower=-1.0, upper=1.0):
    nodes = (Node(0, supplies[0], True, (0.0, 0.0)), Node(1, supplies[1], True, (10.0, 0.0)))
    arcs = (Arc(0, 1, lower, upper, QuadraticCost(1.0)),)
    measure = DemandMeasure(np.array([[2.0, 0.0], [8.0, 0.0]]), np.array([0.5, 0.5]))
    return Scenario(measure, Network(nodes, arcs), AssignmentCostSpec(EUCLIDEAN))


def test_balanced_scenario_is_valid():
    assert validate_scenario(two_source()) == []


def test_imbalance_reported_once():
    report = validate_scenario(two_source(supplies=(0.5, 0.4)))
    assert [v.kind for v in report] == ["balance"]


def test_inverted_bounds_reported_once():
    report = validate_scenario(two_source(lower=1.0, upper=-1.0))
    assert [v.kind for v in report] == ["bounds"]
    assert report[0].ids == (0,)


def test_structural_violations_carry_ids():
    nodes = (Node(0, 1.0, True, (0.0, 0.0)), Node(1, 0.0, False))
    arcs = (Arc(0, 0, -1, 1, QuadraticCost(1.0)), Arc(0, 1, -1, 1, QuadraticCost(0.0)),
            Arc(0, 1, -1, 1, QuadraticCost(1.0)))
    measure = DemandMeasure(np.array([[0.0, 0.0]]), np.array([1.0]))
    kinds = {v.kind: v.ids for v in validate_scenario(
        Scenario(measure, Network(nodes, arcs), AssignmentCostSpec(EUCLIDEAN)))}
    assert kinds == {"self_loop": (0,), "arc_cost": (1,), "duplicate_arc": (2,)}


def test_negative_mass_and_missing_endpoint():
    nodes = (Node(0, 0.0, False),)
    measure = DemandMeasure(np.array([[0.0], [1.0]]), np.array([1.0, -1.0]))
    kinds = [v.kind for v in validate_scenario(
        Scenario(measure, Network(nodes, ()), AssignmentCostSpec(EUCLIDEAN)))]
    assert "mass" in kinds and "endpoints" in kinds


def test_unreachable_point_is_infeasible():
    nodes = (Node(0, 2.0, True),)
    graph = ConsumerGraph(((EndpointRef(0), 0, 1.0),))
    measure = DemandMeasure(np.zeros((2, 1)), np.array([1.0, 1.0]))
    report = validate_scenario(Scenario(measure, Network(nodes, ()), AssignmentCostSpec(GEODESIC, graph=graph)))
    assert [(v.kind, v.ids) for v in report] == [("infeasible_point", (1,))]


def test_validate_is_pure():
    s = two_source(supplies=(0.5, 0.4), lower=1.0, upper=-1.0)
    assert validate_scenario(s) == validate_scenario(s)


def test_adjacency_consistent():
    net = generate_synthetic(grid_n=2).network
    for a, arc in enumerate(net.arcs):
        assert net.outgoing[arc.tail].count(a) == 1
        assert net.incoming[arc.head].count(a) == 1
    assert sum(map(len, net.outgoing)) == sum(map(len, net.incoming)) == net.n_arcs


def test_measure_arrays_are_frozen():
    m = DemandMeasure(np.zeros((1, 2)), np.array([1.0]))
    with pytest.raises(ValueError):
        m.masses[0] = 2.0
    assert m.total_mass == 1.0 and m.dimension == 2 and m.points[0].id == 0


def _roundtrip(s):
    d = sio.scenario_to_dict(s)
    back = sio.scenario_from_dict(json.loads(sio.dumps(d)))
    return d, back


@pytest.mark.parametrize("make", [
    two_node,
    lambda: generate_synthetic(grid_n=7),
    lambda: generate_power_network(30, seed=2)[0],
])
def test_roundtrip_bit_exact(make):
    s = make()
    d, back = _roundtrip(s)
    assert sio.scenario_to_dict(back) == d
    assert np.array_equal(back.measure.masses, s.measure.masses)
    assert np.array_equal(back.measure.coords, s.measure.coords)
    assert back.network.nodes == s.network.nodes and back.network.arcs == s.network.arcs
    a, b = back.assignment_cost, s.assignment_cost
    assert a.kind == b.kind and a.table == b.table
    assert (a.graph is None) == (b.graph is None)
    if a.graph is not None:
        assert a.graph.edges == b.graph.edges


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(finite, finite, st.floats(0, 1e300)), min_size=1, max_size=8),
       finite, st.floats(min_value=1e-300, max_value=1e300))
def test_roundtrip_random_floats(points, supply, coeff):
    coords = np.array([[x, y] for x, y, _ in points])
    masses = np.array([m for _, _, m in points])
    nodes = (Node(0, supply, True, (1.5, -2.25)), Node(1, -supply, False))
    arcs = (Arc(1, 0, -coeff, coeff, QuadraticCost(coeff)),)
    s = Scenario(DemandMeasure(coords, masses), Network(nodes, arcs), AssignmentCostSpec(EUCLIDEAN), 0.125)
    d, back = _roundtrip(s)
    assert np.array_equal(back.measure.coords, coords)
    assert np.array_equal(back.measure.masses, masses)
    assert back.network.nodes == s.network.nodes and back.network.arcs == s.network.arcs
    assert back.balance_tolerance == 0.125


def test_unknown_keys_rejected():
    d = sio.scenario_to_dict(two_node())
    for mutate in (lambda x: x.__setitem__("extra", 1),
                   lambda x: x["points"][0].__setitem__("colour", "red"),
                   lambda x: x["arcs"][0]["cost"].__setitem__("offset", 0),
                   lambda x: x["assignment_cost"].__setitem__("graph", {})):
        bad = json.loads(json.dumps(d))
        mutate(bad)
        with pytest.raises(sio.FormatError):
            sio.scenario_from_dict(bad)


def test_non_contiguous_ids_rejected():
    d = sio.scenario_to_dict(two_node())
    d["nodes"][1]["id"] = 5
    with pytest.raises(sio.FormatError):
        sio.scenario_from_dict(d)


def test_graph_json_endpoint_marker(tmp_path):
    g = ConsumerGraph(((0, 1, 1.0), (EndpointRef(3), 1, 2.5)))
    sio.write_graph(g, tmp_path / "g.json")
    raw = json.loads((tmp_path / "g.json").read_text())
    assert raw["edges"][1] == {"u": {"endpoint": 3}, "v": 1, "weight": 2.5}
    assert sio.read_graph(tmp_path / "g.json").edges == g.edges
