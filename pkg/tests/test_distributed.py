import math

import numpy as np
import pytest

from sdotflow.costs import TABLE, AssignmentCostSpec
from sdotflow.distributed import (
    ENDPOINT_PSI,
    FLOW_SHARE,
    PSI_SHARE,
    RESERVED_POLICIES,
    Agent,
    InstrumentedAgent,
    Message,
    SynchronousTransport,
    TransportFault,
    build_agents,
    expected_message_counts,
    run_protocol,
    run_round,
    transport_deliver,
)
from sdotflow.dual import EPSILON_REACHED, DivergenceError, Problem, StepSchedule, ascent_step, solve, supergradient
from sdotflow.fixtures import planted_instance, two_node
from sdotflow.laguerre import compute_cells
from sdotflow.model import DemandMeasure, Network, Node, Scenario

from families import power_net, synthetic

SCHED = StepSchedule.harmonic(1.0, 0.01)


def centralized_trajectory(problem, rounds, **kw):
    traj = []
    rep = solve(problem, SCHED, max_iterations=rounds, on_iterate=lambda k, psi: traj.append(psi.copy()), **kw)
    return rep, np.array(traj)


@pytest.mark.parametrize("make", [lambda: synthetic(20), lambda: power_net(60, 1),
                                  lambda: Problem.from_scenario(planted_instance(np.random.default_rng(5))[0])])
def test_trajectory_matches_centralized(make):
    problem = make()
    result = run_protocol(problem, SCHED, epsilon=1e-6, max_rounds=60)
    rep, traj = centralized_trajectory(problem, 60, epsilon=1e-6)
    dist = np.array([r.psi for r in result.rounds])
    assert dist.shape == traj.shape
    assert np.max(np.abs(dist - traj)) <= 1e-12
    assert np.array_equal(result.report.flows.flows, rep.flows.flows)
    assert np.array_equal(result.report.partition.assignment, rep.partition.assignment)
    assert result.report.dual_value == rep.dual_value
    assert [t.dual_value for t in result.report.trace] == [t.dual_value for t in rep.trace]


def test_one_round_equals_one_step():
    problem = synthetic(20)
    agents = build_agents(problem)
    log = run_round(agents, SynchronousTransport(), SCHED, 0)
    psi0 = np.zeros(problem.network.n_nodes)
    g = supergradient(problem, psi0, compute_cells(problem.measure, psi0, problem.table))
    assert log.psi == ascent_step(psi0, g, SCHED, 0).psi.tolist()
    assert log.g == g.tolist()


def test_fixed_point_round():
    problem = Problem.from_scenario(two_node())
    agents = build_agents(problem, psi0=[2.0, 0.0])
    log = run_round(agents, SynchronousTransport(), SCHED, 0)
    assert log.psi == [2.0, 0.0] and log.g == [0.0, 0.0]


def test_message_counts_every_round():
    problem = synthetic(20)
    expected = expected_message_counts(problem)
    assert expected[PSI_SHARE] == expected[FLOW_SHARE] == problem.network.n_arcs
    assert expected[ENDPOINT_PSI] == 2
    result = run_protocol(problem, SCHED, max_rounds=25)
    for r in result.rounds:
        assert r.message_counts == expected
        assert r.messages_delivered == sum(expected.values())
        assert len(r.psi) == len(r.g) == problem.network.n_nodes


def test_locality_no_foreign_reads():
    InstrumentedAgent.foreign_reads.clear()
    run_protocol(synthetic(20), SCHED, max_rounds=5, agent_cls=InstrumentedAgent)
    assert InstrumentedAgent.foreign_reads == []


def test_locality_instrumentation_catches_peeking():
    peers = []

    class Peeking(InstrumentedAgent):
        def compute_flows(self, round):
            for other in peers:
                other.psi  # direct state access instead of a message
            return super().compute_flows(round)

    InstrumentedAgent.foreign_reads.clear()
    problem = synthetic(20)
    agents = build_agents(problem, agent_cls=Peeking)
    peers.extend(agents)
    run_round(agents, SynchronousTransport(), SCHED, 0)
    assert InstrumentedAgent.foreign_reads
    InstrumentedAgent.foreign_reads.clear()


def test_termination_soundness():
    problem = Problem.from_scenario(planted_instance(np.random.default_rng(1))[0])
    eps = 1e-7
    result = run_protocol(problem, SCHED, epsilon=eps, max_rounds=20_000)
    assert result.report.termination == EPSILON_REACHED
    last, prev = np.array(result.rounds[-1].psi), np.array(result.rounds[-2].psi)
    assert np.max(np.abs(last - prev)) < eps


def test_infinite_epsilon_stops_after_first_round():
    result = run_protocol(synthetic(20), SCHED, epsilon=math.inf)
    assert len(result.rounds) == 1 and result.report.termination == EPSILON_REACHED


def test_single_node_converges_in_round_one():
    s = Scenario(DemandMeasure(np.zeros((2, 1)), np.array([0.5, 0.5])), Network((Node(0, 1.0, True),), ()),
                 AssignmentCostSpec(TABLE, table=((1.0,), (2.0,))))
    result = run_protocol(s, SCHED)
    assert len(result.rounds) == 1 and result.rounds[0].g == [0.0]
    assert result.report.termination == EPSILON_REACHED
    assert result.report.partition.assignment.tolist() == [0, 0]


def test_isolated_agent_gradient_is_supply():
    nodes = (Node(0, 0.25, True), Node(1, 0.75, False))
    s = Scenario(DemandMeasure(np.zeros((1, 1)), np.array([1.0])), Network(nodes, ()),
                 AssignmentCostSpec(TABLE, table=((0.0,),)))
    agents = build_agents(Problem.from_scenario(s))
    log = run_round(agents, SynchronousTransport(), SCHED, 0)
    assert log.g[1] == 0.75


def test_divergence_reports_round_log():
    nodes = (Node(0, 0.0, True), Node(1, 1.0, False))
    s = Scenario(DemandMeasure(np.zeros((1, 1)), np.array([1.0])), Network(nodes, ()),
                 AssignmentCostSpec(TABLE, table=((0.0,),)))
    with pytest.raises(DivergenceError) as info:
        run_protocol(s, StepSchedule.constant(1e11), max_rounds=100)
    assert info.value.rounds and len(info.value.rounds) == len(info.value.trace)


def _msg(sender, arc, round=0, kind=FLOW_SHARE):
    return Message(kind, sender, 0, round, 0.0, arc)


def test_transport_examples():
    assert transport_deliver([]) == []
    msgs = [_msg(2, 1), _msg(0, 5), _msg(2, 0), _msg(1, 3)]
    assert [(m.sender, m.arc) for m in transport_deliver(msgs)] == [(0, 5), (1, 3), (2, 0), (2, 1)]
    with pytest.raises(TransportFault):
        transport_deliver([_msg(0, 0, round=0), _msg(1, 1, round=1)])
    with pytest.raises(TransportFault):
        SynchronousTransport().deliver([_msg(0, 0, round=3)], round=4)
    for policy in RESERVED_POLICIES + ("carrier_pigeon",):
        with pytest.raises(ValueError):
            transport_deliver([], policy)


class DroppingTransport(SynchronousTransport):
    def deliver(self, messages, round):
        return [m for m in super().deliver(messages, round) if m.kind != FLOW_SHARE or m.arc != 0]


def test_dropped_message_is_a_fault():
    with pytest.raises(TransportFault):
        run_protocol(synthetic(20), SCHED, max_rounds=3, transport=DroppingTransport())


def test_agent_state_fields_exist():
    agent = build_agents(synthetic(20), agent_cls=Agent)[0]
    for name in Agent.STATE_FIELDS:
        assert hasattr(agent, name)
