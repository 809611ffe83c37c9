"""Per-node agents running the dual ascent in synchronous message rounds.

One round has three delivery barriers:

1. every head sends ``psi_share`` to the tail of each incoming arc, and every
   endpoint sends ``endpoint_psi`` to every other endpoint;
2. every tail computes its outgoing flows and sends ``flow_share`` to the head;
3. every node forms its supergradient component, updates its dual variable
   and sends a ``converged`` flag to each arc-neighbour.

The run stops after the first round in which every agent is locally
converged and has seen converged flags from all of its neighbours.

Endpoints need the dual variables of all other endpoints to compare adjusted
costs, so the endpoint broadcast is not arc-local. Each endpoint also holds
the static customer cost table.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from sdotflow.costs import CostTable, arc_flow_minimizer
from sdotflow.dual import (
    EPSILON_REACHED,
    MAX_ITERATIONS,
    DivergenceError,
    Problem,
    ScenarioError,
    SolveReport,
    StepSchedule,
    TraceRecord,
    dual_value,
    node_gradient,
    primal_value,
)
from sdotflow.laguerre import assign_columns, cell_masses_from_columns
from sdotflow.model import Arc, DualState, FlowState, Node, Partition, validate_scenario

PSI_SHARE = "psi_share"
FLOW_SHARE = "flow_share"
ENDPOINT_PSI = "endpoint_psi_broadcast"
CONVERGED = "converged"
MESSAGE_KINDS = (PSI_SHARE, FLOW_SHARE, ENDPOINT_PSI, CONVERGED)

SYNCHRONOUS = "synchronous"
# reserved names; no delivery semantics implemented for them
RESERVED_POLICIES = ("asynchronous", "lossy")


class TransportFault(RuntimeError):
    pass


@dataclass(frozen=True)
class Message:
    kind: str
    sender: int
    recipient: int
    round: int
    value: float
    arc: Optional[int] = None
    endpoint: Optional[int] = None

    def sort_key(self):
        return (self.sender, -1 if self.arc is None else self.arc, self.recipient, self.kind)


def transport_deliver(messages, policy: str = SYNCHRONOUS, round: Optional[int] = None) -> list[Message]:
    """Delivery schedule for one barrier.

    The synchronous policy delivers everything at once, ordered by
    ``(sender, arc)``, and rejects messages tagged with another round.
    """
    if policy != SYNCHRONOUS:
        raise ValueError(f"unsupported transport policy {policy!r}")
    messages = list(messages)
    if round is None and messages:
        round = messages[0].round
    for m in messages:
        if m.round != round:
            raise TransportFault(f"message from {m.sender} tagged round {m.round} sent in round {round}")
    return sorted(messages, key=Message.sort_key)


class SynchronousTransport:
    policy = SYNCHRONOUS

    def deliver(self, messages, round: int) -> list[Message]:
        return transport_deliver(messages, self.policy, round)


_executing: contextvars.ContextVar[Optional[int]] = contextvars.ContextVar("executing_agent", default=None)


@contextlib.contextmanager
def executing(node_id: int):
    token = _executing.set(node_id)
    try:
        yield
    finally:
        _executing.reset(token)


def executing_agent() -> Optional[int]:
    return _executing.get()


class Agent:
    """State machine of one network node.

    Inputs fixed at construction: supply, incident arcs (with bounds and
    costs), and for endpoints the customer cost table and demand masses.
    """

    STATE_FIELDS = frozenset({
        "psi", "psi_old", "supply", "outgoing_flows", "inbox", "converged_flag",
        "neighbour_converged", "g", "last_sent_round",
    })

    def __init__(self, node: Node, out_arcs: list[tuple[int, Arc]], in_arcs: list[tuple[int, Arc]],
                 neighbours: tuple[int, ...], endpoints: tuple[int, ...],
                 table: Optional[CostTable] = None, demand: Optional[np.ndarray] = None,
                 psi0: float = 0.0):
        self.node_id = node.id
        self.is_endpoint = node.is_endpoint
        self.out_arcs = out_arcs
        self.in_arcs = in_arcs
        self.neighbours = neighbours
        self.endpoints = endpoints
        self.table = table
        self.demand = demand
        self.supply = node.supply
        self.psi = float(psi0)
        self.psi_old = float(psi0)
        self.outgoing_flows: dict[int, float] = {}
        self.inbox: list[Message] = []
        self.converged_flag = False
        self.neighbour_converged: dict[int, bool] = {j: False for j in neighbours}
        self.g = 0.0
        self.last_sent_round = -1

    # -- helpers -----------------------------------------------------------

    def _send(self, kind, recipient, round, value, arc=None, endpoint=None) -> Message:
        self.last_sent_round = round
        return Message(kind, self.node_id, recipient, round, value, arc, endpoint)

    def _take(self, kind: str) -> list[Message]:
        got = [m for m in self.inbox if m.kind == kind]
        self.inbox = [m for m in self.inbox if m.kind != kind]
        return got

    # -- phases ------------------------------------------------------------

    def share_psi(self, round: int) -> list[Message]:
        out = [self._send(PSI_SHARE, arc.tail, round, self.psi, arc=a) for a, arc in self.in_arcs]
        if self.is_endpoint:
            out += [self._send(ENDPOINT_PSI, e, round, self.psi, endpoint=self.node_id)
                    for e in self.endpoints if e != self.node_id]
        return out

    def compute_flows(self, round: int) -> list[Message]:
        head_psi = {m.arc: m.value for m in self._take(PSI_SHARE)}
        self.outgoing_flows = {}
        out = []
        for a, arc in self.out_arcs:
            if a not in head_psi:
                raise TransportFault(f"agent {self.node_id} missing psi_share on arc {a} in round {round}")
            p = arc_flow_minimizer(arc, float(self.psi - head_psi[a]))
            self.outgoing_flows[a] = p
            out.append(self._send(FLOW_SHARE, arc.head, round, p, arc=a))
        return out

    def cell_mass(self, round: int) -> Optional[float]:
        if not self.is_endpoint:
            return None
        cols = self._cell_columns(round)
        masses = cell_masses_from_columns(cols, self.demand, len(self.endpoints))
        return float(masses[self.endpoints.index(self.node_id)])

    def _cell_columns(self, round: int) -> np.ndarray:
        known = {m.endpoint: m.value for m in self._take(ENDPOINT_PSI)}
        known[self.node_id] = self.psi
        missing = [e for e in self.endpoints if e not in known]
        if missing:
            raise TransportFault(f"endpoint {self.node_id} missing psi of {missing} in round {round}")
        psi_s = np.array([known[e] for e in self.endpoints], dtype=float)
        cols, _, _ = assign_columns(self.table, psi_endpoints=psi_s)
        return cols

    def update(self, round: int, gamma: float, epsilon: float) -> list[Message]:
        incoming = {m.arc: m.value for m in self._take(FLOW_SHARE)}
        for a, _ in self.in_arcs:
            if a not in incoming:
                raise TransportFault(f"agent {self.node_id} missing flow_share on arc {a} in round {round}")
        mass = self.cell_mass(round)
        self.g = node_gradient(
            self.supply, mass,
            [self.outgoing_flows[a] for a, _ in self.out_arcs],
            [incoming[a] for a, _ in self.in_arcs],
        )
        self.psi_old = self.psi
        self.psi = self.psi + gamma * self.g
        self.converged_flag = bool(abs(self.psi - self.psi_old) < epsilon)
        return [self._send(CONVERGED, j, round, float(self.converged_flag)) for j in self.neighbours]

    def observe_flags(self) -> bool:
        for m in self._take(CONVERGED):
            self.neighbour_converged[m.sender] = bool(m.value)
        return self.converged_flag and all(self.neighbour_converged.values())

    def final_cell(self, round: int) -> np.ndarray:
        """Point ids of this endpoint's Laguerre cell at the current duals."""
        cols = self._cell_columns(round)
        return np.flatnonzero(cols == self.endpoints.index(self.node_id))


class InstrumentedAgent(Agent):
    """Agent that records reads of its state made while another agent runs."""

    foreign_reads: list = []

    def __getattribute__(self, name):
        if name in Agent.STATE_FIELDS:
            current = _executing.get()
            owner = object.__getattribute__(self, "node_id")
            if current is not None and current != owner:
                InstrumentedAgent.foreign_reads.append((current, owner, name))
        return object.__getattribute__(self, name)


@dataclass
class RoundLog:
    round: int
    messages_delivered: int
    message_counts: dict[str, int]
    psi: list[float]
    g: list[float]

    def to_json(self) -> str:
        return json.dumps({"round": self.round, "messages_delivered": self.messages_delivered,
                           "message_counts": self.message_counts, "psi": self.psi, "g": self.g})


@dataclass
class ProtocolResult:
    report: SolveReport
    rounds: list[RoundLog] = field(default_factory=list)


def build_agents(problem: Problem, psi0=None, agent_cls=Agent) -> list[Agent]:
    net = problem.network
    endpoints = problem.table.endpoints
    psi0 = np.zeros(net.n_nodes) if psi0 is None else np.asarray(psi0, dtype=float)
    agents = []
    for node in net.nodes:
        i = node.id
        agents.append(agent_cls(
            node,
            [(a, net.arcs[a]) for a in net.outgoing[i]],
            [(a, net.arcs[a]) for a in net.incoming[i]],
            net.neighbours(i),
            endpoints,
            problem.table if node.is_endpoint else None,
            problem.measure.masses if node.is_endpoint else None,
            float(psi0[i]),
        ))
    return agents


def _barrier(agents, transport, messages, round, counts: Counter) -> int:
    schedule = transport.deliver(messages, round)
    for m in schedule:
        agents[m.recipient].inbox.append(m)
        counts[m.kind] += 1
    return len(schedule)


def run_round(agents: list[Agent], transport, schedule: StepSchedule, k: int,
              epsilon: float = 0.0) -> RoundLog:
    """One synchronous round of share, flow, and update phases."""
    counts: Counter = Counter()
    delivered = 0
    gamma = schedule(k)

    msgs = []
    for ag in agents:
        with executing(ag.node_id):
            msgs += ag.share_psi(k)
    delivered += _barrier(agents, transport, msgs, k, counts)

    msgs = []
    for ag in agents:
        with executing(ag.node_id):
            msgs += ag.compute_flows(k)
    delivered += _barrier(agents, transport, msgs, k, counts)

    msgs = []
    for ag in agents:
        with executing(ag.node_id):
            msgs += ag.update(k, gamma, epsilon)
    delivered += _barrier(agents, transport, msgs, k, counts)

    return RoundLog(k, delivered, {kind: counts.get(kind, 0) for kind in MESSAGE_KINDS},
                    [ag.psi for ag in agents], [ag.g for ag in agents])


def expected_message_counts(problem: Problem) -> dict[str, int]:
    """Messages per round: one psi_share and one flow_share per arc, one
    endpoint broadcast per ordered endpoint pair, one flag per neighbour."""
    net = problem.network
    n_s = len(net.endpoints)
    return {
        PSI_SHARE: net.n_arcs,
        FLOW_SHARE: net.n_arcs,
        ENDPOINT_PSI: n_s * (n_s - 1),
        CONVERGED: sum(len(net.neighbours(i)) for i in range(net.n_nodes)),
    }


def run_protocol(scenario, schedule: Optional[StepSchedule] = None, epsilon: float = 1e-6,
                 max_rounds: int = 300, psi0=None, transport=None, agent_cls=Agent,
                 dual_every: int = 10, validate: bool = True) -> ProtocolResult:
    """Run agents until distributed termination or ``max_rounds``.

    The returned report has the same fields and values as the centralized
    :func:`~sdotflow.dual.solve` under the same schedule and start point.
    """
    if isinstance(scenario, Problem):
        problem = scenario
    else:
        if validate:
            violations = validate_scenario(scenario)
            if violations:
                raise ScenarioError(violations)
        problem = Problem.from_scenario(scenario)
    schedule = schedule or StepSchedule.harmonic()
    transport = transport or SynchronousTransport()
    agents = build_agents(problem, psi0, agent_cls)

    rounds: list[RoundLog] = []
    trace: list[TraceRecord] = []
    termination = MAX_ITERATIONS
    k = 0
    while k < max_rounds:
        # collector-side bookkeeping, outside any agent's execution
        before = np.array([ag.psi for ag in agents])
        q = dual_value(problem, before) if dual_every and k % dual_every == 0 else None
        log = run_round(agents, transport, schedule, k, epsilon)
        rounds.append(log)
        g = np.array(log.g)
        trace.append(TraceRecord(k, schedule(k), float(np.max(np.abs(g))) if g.size else 0.0, q))
        psi = np.array(log.psi)
        if not np.all(np.isfinite(psi)) or np.max(np.abs(psi)) > 1e12:
            err = DivergenceError(f"dual iterates diverged in round {k}", trace, psi)
            err.rounds = rounds
            raise err
        k += 1
        done = True
        for ag in agents:
            with executing(ag.node_id):
                done = ag.observe_flags() and done
        if done:
            termination = EPSILON_REACHED
            break

    psi, flows, partition = _final_emission(problem, agents, transport, k)
    q = dual_value(problem, psi)
    primal = primal_value(problem, partition, flows)
    report = SolveReport(
        psi_final=DualState(psi, k),
        flows=flows,
        partition=partition,
        dual_value=q,
        primal_value=primal,
        gap=primal - q,
        trace=trace,
        termination=termination,
    )
    return ProtocolResult(report, rounds)


def _final_emission(problem: Problem, agents: list[Agent], transport, round: int):
    """Recompute flows and cells at the final duals; agents report them."""
    msgs = []
    for ag in agents:
        with executing(ag.node_id):
            msgs += ag.share_psi(round)
    _barrier(agents, transport, msgs, round, Counter())
    for ag in agents:
        with executing(ag.node_id):
            ag.compute_flows(round)  # flow shares are not needed for the final answer

    net = problem.network
    flows = np.zeros(net.n_arcs)
    assignment = np.full(len(problem.measure), -1, dtype=np.int64)
    cell_masses = {}
    for ag in agents:
        for a, p in ag.outgoing_flows.items():
            flows[a] = p
        if ag.is_endpoint:
            with executing(ag.node_id):
                members = ag.final_cell(round)
            assignment[members] = ag.node_id
    psi = np.array([ag.psi for ag in agents])
    masses = problem.measure.masses
    cols = np.searchsorted(np.asarray(problem.table.endpoints), assignment)
    per_cell = cell_masses_from_columns(cols, masses, len(problem.table.endpoints))
    for e, m in zip(problem.table.endpoints, per_cell):
        cell_masses[e] = float(m)
    return psi, FlowState(flows), Partition(assignment, cell_masses)
