import numpy as np
import pytest

from sdotflow.costs import TABLE, AssignmentCostSpec
from sdotflow.dual import Problem, StepSchedule, dual_value, solve
from sdotflow.fixtures import planted_instance, two_node
from sdotflow.model import Arc, DemandMeasure, Network, Node, QuadraticCost, Scenario
from sdotflow.oracle import (
    FlowStructure,
    InstanceTooLarge,
    OracleInfeasible,
    brute_force,
    duality_gap_check,
    iter_feasible,
)


def conservation_residual(scenario, assignment, flows):
    net = scenario.network
    b = net.supplies.copy()
    for k, e in enumerate(assignment):
        b[e] -= scenario.measure.masses[k]
    for arc, p in zip(net.arcs, flows):
        b[arc.tail] -= p
        b[arc.head] += p
    return float(np.max(np.abs(b)))


def three_point_tree():
    nodes = (Node(0, 0.4, True), Node(1, 0.2, False), Node(2, 0.4, True))
    arcs = (Arc(0, 1, -1, 1, QuadraticCost(1.0)), Arc(1, 2, -1, 1, QuadraticCost(2.0)))
    table = ((0.1, 0.9), (0.5, 0.4), (0.8, 0.2))
    return Scenario(DemandMeasure(np.zeros((3, 1)), np.array([0.3, 0.3, 0.4])), Network(nodes, arcs),
                    AssignmentCostSpec(TABLE, table=table))


def test_two_node_oracle():
    res = brute_force(two_node())
    assert res.best_cost == 1.0 and res.best_flows.flows.tolist() == [1.0]
    assert res.enumerated == 1 and res.exact and res.best_assignment.tolist() == [1]


def test_two_node_gap_check_at_convergence():
    rep = solve(two_node(), psi0=[2.0, 0.0])
    gap = duality_gap_check(two_node(), rep, brute_force(two_node()))
    assert gap.passed and gap.dual_gap <= 1e-10 and gap.primal_gap <= 1e-10


def test_enumerates_all_assignments():
    res = brute_force(three_point_tree())
    assert res.enumerated == 8
    assert [list(a) for a, _, _ in iter_feasible(three_point_tree())][:2] == [[0, 0, 0], [0, 0, 2]]


def test_tree_oracle_is_exact():
    rng = np.random.default_rng(0)
    for _ in range(10):
        s = planted_instance(rng)[0]
        res = brute_force(s)
        assert res.exact
        assert conservation_residual(s, res.best_assignment, res.best_flows.flows) <= 1e-12
        for arc, p in zip(s.network.arcs, res.best_flows.flows):
            assert arc.lower <= p <= arc.upper


def test_planted_optimum_found():
    rng = np.random.default_rng(1)
    for _ in range(10):
        s, psi, assignment, flows = planted_instance(rng)
        res = brute_force(s)
        assert np.array_equal(res.best_assignment, assignment)
        assert np.allclose(res.best_flows.flows, flows, atol=1e-12)
        assert res.best_cost == pytest.approx(dual_value(s, psi), rel=1e-12)


def test_tightening_bounds_never_lowers_cost():
    rng = np.random.default_rng(2)
    for _ in range(10):
        s = planted_instance(rng)[0]
        base = brute_force(s).best_cost
        net = s.network
        a = int(rng.integers(net.n_arcs))
        arc = net.arcs[a]
        mid = 0.5 * (arc.lower + arc.upper)
        shrink = Arc(arc.tail, arc.head, mid - 0.25 * (arc.upper - arc.lower), mid, arc.cost)
        arcs = net.arcs[:a] + (shrink,) + net.arcs[a + 1:]
        tight = Scenario(s.measure, Network(net.nodes, arcs), s.assignment_cost)
        try:
            assert brute_force(tight).best_cost >= base - 1e-12
        except OracleInfeasible:
            pass


def test_every_feasible_assignment_bounds_dual():
    rng = np.random.default_rng(3)
    s = planted_instance(rng, n_points=5)[0]
    p = Problem.from_scenario(s)
    qs = [dual_value(p, rng.uniform(-3, 3, p.network.n_nodes)) for _ in range(20)]
    n_feasible = 0
    for _, cost, flows in iter_feasible(s):
        if flows is None:
            continue
        n_feasible += 1
        assert cost >= max(qs) - 1e-12
    assert n_feasible > 0


def test_mid_run_dual_is_lower_bound():
    rng = np.random.default_rng(4)
    for _ in range(10):
        s = planted_instance(rng)[0]
        best = brute_force(s).best_cost
        rep = solve(s, max_iterations=10)
        assert rep.dual_value <= best + 1e-9


def test_cyclic_network_within_grid_tolerance():
    rng = np.random.default_rng(6)
    ring = [(0, 1), (1, 2), (2, 3), (3, 0)]
    s, psi, assignment, flows = planted_instance(rng, n_points=4, n_endpoints=2, n_nodes=4, edges=ring)
    assert not FlowStructure(Problem.from_scenario(s)).is_forest
    res = brute_force(s, flow_grid_resolution=1e-3)
    assert not res.exact
    rep = solve(s, StepSchedule.harmonic(1.0, 0.01), epsilon=1e-12, max_iterations=20_000)
    assert abs(rep.dual_value - res.best_cost) <= 1e-2
    assert res.best_cost >= rep.dual_value - 1e-9
    assert conservation_residual(s, res.best_assignment, res.best_flows.flows) <= 1e-9


def test_guards():
    nodes = tuple(Node(k, 13 / 3, True) for k in range(3))
    table = tuple((0.0, 0.0, 0.0) for _ in range(13))
    s = Scenario(DemandMeasure(np.zeros((13, 1)), np.ones(13)), Network(nodes, ()),
                 AssignmentCostSpec(TABLE, table=table))
    with pytest.raises(InstanceTooLarge):
        brute_force(s)
    nodes = tuple(Node(k, 1.0 if k == 0 else 0.0, k == 0) for k in range(14))
    arcs = tuple(Arc(k, k + 1, -1, 1, QuadraticCost(1.0)) for k in range(13))
    s = Scenario(DemandMeasure(np.zeros((1, 1)), np.ones(1)), Network(nodes, arcs),
                 AssignmentCostSpec(TABLE, table=((0.0,),)))
    with pytest.raises(InstanceTooLarge):
        brute_force(s)


def test_infeasible_bounds_reported():
    nodes = (Node(0, 1.0, False), Node(1, 0.0, True))
    arcs = (Arc(0, 1, -0.5, 0.5, QuadraticCost(1.0)),)
    s = Scenario(DemandMeasure(np.zeros((1, 1)), np.ones(1)), Network(nodes, arcs),
                 AssignmentCostSpec(TABLE, table=((0.0,),)))
    with pytest.raises(OracleInfeasible):
        brute_force(s)


def test_ties_keep_lexicographically_first():
    nodes = (Node(0, 0.5, True), Node(1, 0.5, True))
    table = ((1.0, 1.0), (1.0, 1.0))
    s = Scenario(DemandMeasure(np.zeros((2, 1)), np.array([0.5, 0.5])), Network(nodes, ()),
                 AssignmentCostSpec(TABLE, table=table))
    assert brute_force(s).best_assignment.tolist() == [0, 1]
