"""Dual function, supergradient ascent, primal reconstruction, certificates.

The dual of the coupled partition/flow problem is

    q(psi) = sum_x mu_x min_i {c(x,i) - psi_i} + psi . s
             + sum_(i,j) min_{a_ij <= p <= b_ij} {c_ij(p) - (psi_i - psi_j) p}

and is maximized by plain supergradient ascent with diminishing steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from sdotflow.costs import CostTable, arc_dual_value, arc_flow_minimizer, cost_table
from sdotflow.laguerre import (
    CellMassReport,
    assign_columns,
    compute_cells,
    estimate_cell_masses,
)
from sdotflow.model import DualState, FlowState, GenericCost, Partition, Scenario, validate_scenario

DIVERGENCE_LIMIT = 1e12
DEFAULT_EPSILON = 1e-6
DEFAULT_MAX_ITERATIONS = 300

EPSILON_REACHED = "epsilon_reached"
MAX_ITERATIONS = "max_iterations"


class DivergenceError(ArithmeticError):
    """Dual iterates left the finite/bounded range; carries the trace so far."""

    def __init__(self, message: str, trace=None, psi=None):
        super().__init__(message)
        self.trace = list(trace or [])
        self.psi = None if psi is None else np.array(psi, dtype=float)


class ScenarioError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class StepSchedule:
    """``harmonic``: gamma_k = a / (1 + b k); ``constant``: gamma_k = gamma."""

    kind: str = "harmonic"
    a: float = 1.0
    b: float = 0.01
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind == "harmonic":
            if not (self.a > 0 and self.b > 0):
                raise ValueError("harmonic schedule needs a > 0 and b > 0")
        elif self.kind == "constant":
            if not self.gamma > 0:
                raise ValueError("constant schedule needs gamma > 0")
        else:
            raise ValueError(f"unknown step schedule {self.kind!r}")

    @classmethod
    def harmonic(cls, a: float = 1.0, b: float = 0.01) -> "StepSchedule":
        return cls("harmonic", a=a, b=b)

    @classmethod
    def constant(cls, gamma: float) -> "StepSchedule":
        return cls("constant", gamma=gamma)

    def __call__(self, k: int) -> float:
        if self.kind == "harmonic":
            return self.a / (1.0 + self.b * k)
        return self.gamma

    @property
    def diminishing(self) -> bool:
        """Whether sum gamma_k = inf and sum gamma_k**2 < inf (decided by kind)."""
        return self.kind == "harmonic"

    def to_dict(self) -> dict:
        if self.kind == "harmonic":
            return {"kind": "harmonic", "a": self.a, "b": self.b}
        return {"kind": "constant", "gamma": self.gamma}


@dataclass
class TraceRecord:
    k: int
    gamma: float
    max_abs_g: float
    dual_value: Optional[float] = None


@dataclass
class Certificate:
    arc_residuals: np.ndarray
    point_residuals: np.ndarray
    flow_balance_residuals: np.ndarray
    max_residual: float


@dataclass
class SolveReport:
    psi_final: DualState
    flows: FlowState
    partition: Partition
    dual_value: float
    primal_value: float
    gap: float
    trace: list[TraceRecord]
    termination: str
    notes: list[str] = field(default_factory=list)


@dataclass(eq=False)
class Problem:
    """A scenario with its cost table evaluated once."""

    scenario: Scenario
    table: CostTable

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "Problem":
        return cls(scenario, cost_table(scenario))

    @property
    def network(self):
        return self.scenario.network

    @property
    def measure(self):
        return self.scenario.measure


def as_problem(scenario: Union[Scenario, Problem]) -> Problem:
    return scenario if isinstance(scenario, Problem) else Problem.from_scenario(scenario)


def _psi(psi) -> np.ndarray:
    return psi.psi if isinstance(psi, DualState) else np.asarray(psi, dtype=float)


def arc_flows(problem, psi) -> list[float]:
    """p_ij(psi) for every arc, in arc-id order."""
    net = as_problem(problem).network
    psi = _psi(psi)
    return [arc_flow_minimizer(arc, float(psi[arc.tail] - psi[arc.head])) for arc in net.arcs]


def node_gradient(supply: float, mass: Optional[float], out_flows, in_flows) -> float:
    """Supergradient component of one node.

    Shared by the centralized loop and the agents so both sum in the same
    order: supply, cell mass, outgoing arcs by id, incoming arcs by id.
    """
    g = supply
    if mass is not None:
        g = g - mass
    for p in out_flows:
        g = g - p
    for p in in_flows:
        g = g + p
    return g


def dual_value(scenario, psi) -> float:
    problem = as_problem(scenario)
    psi = _psi(psi)
    _, best, _ = assign_columns(problem.table, psi)
    value = float(np.dot(problem.measure.masses, best))
    value += float(np.dot(psi, problem.network.supplies))
    for arc in problem.network.arcs:
        value += arc_dual_value(arc, float(psi[arc.tail] - psi[arc.head]))
    return value


def supergradient(scenario, psi, cell_report: CellMassReport, flows=None) -> np.ndarray:
    problem = as_problem(scenario)
    net = problem.network
    if flows is None:
        flows = arc_flows(problem, psi)
    g = np.empty(net.n_nodes)
    for node in net.nodes:
        i = node.id
        mass = cell_report.masses[i] if node.is_endpoint else None
        g[i] = node_gradient(
            node.supply, mass,
            [flows[a] for a in net.outgoing[i]],
            [flows[a] for a in net.incoming[i]],
        )
    return g


def ascent_step(psi, g, schedule: StepSchedule, k: int) -> DualState:
    """psi + gamma_k g, with the iteration counter advanced."""
    current = _psi(psi)
    new = current + schedule(k) * np.asarray(g, dtype=float)
    if not np.all(np.isfinite(new)):
        raise DivergenceError(f"non-finite dual iterate at iteration {k}", psi=current)
    return DualState(new, k + 1)


def reconstruct_primal(scenario, psi) -> tuple[Partition, FlowState, float]:
    problem = as_problem(scenario)
    psi = _psi(psi)
    if not np.all(np.isfinite(psi)):
        raise DivergenceError("non-finite dual vector", psi=psi)
    cells = compute_cells(problem.measure, psi, problem.table)
    flows = arc_flows(problem, psi)
    partition, flow_state = cells.to_partition(), FlowState(flows)
    return partition, flow_state, primal_value(problem, partition, flow_state)


def primal_value(scenario, partition: Partition, flows: FlowState) -> float:
    """Assignment cost plus arc costs of a primal candidate."""
    problem = as_problem(scenario)
    col_of = {e: k for k, e in enumerate(problem.table.endpoints)}
    cols = np.array([col_of[int(e)] for e in partition.assignment], dtype=np.int64)
    chosen = problem.table.values[np.arange(len(cols)), cols]
    value = float(np.dot(problem.measure.masses, chosen))
    for arc, p in zip(problem.network.arcs, flows.flows):
        value += arc.cost.value(float(p))
    return value


def certify(scenario, psi, partition: Partition, flows: FlowState) -> Certificate:
    """Complementary-slackness residuals of a primal/dual pair.

    Arc residuals B_ij and point residuals A(x, T(x)) are non-negative by
    construction and vanish together with the flow-balance residuals exactly
    at an optimal pair.
    """
    problem = as_problem(scenario)
    net = problem.network
    psi = _psi(psi)
    p = np.asarray(flows.flows, dtype=float)

    arc_res = np.empty(net.n_arcs)
    for a, arc in enumerate(net.arcs):
        delta = float(psi[arc.tail] - psi[arc.head])
        arc_res[a] = (arc.cost.value(p[a]) - delta * p[a]) - arc_dual_value(arc, delta)

    col_of = {e: k for k, e in enumerate(problem.table.endpoints)}
    cols = np.array([col_of[int(e)] for e in partition.assignment], dtype=np.int64)
    _, best, _ = assign_columns(problem.table, psi)
    rows = np.arange(len(cols))
    adj = problem.table.values[rows, cols] - psi[np.asarray(problem.table.endpoints)[cols]]
    point_res = np.where(problem.table.allowed[rows, cols], adj - best, np.inf)

    masses = np.bincount(cols, weights=problem.measure.masses, minlength=len(col_of))
    balance = np.empty(net.n_nodes)
    for node in net.nodes:
        i = node.id
        balance[i] = node_gradient(
            node.supply, float(masses[col_of[i]]) if node.is_endpoint else None,
            [p[a] for a in net.outgoing[i]], [p[a] for a in net.incoming[i]],
        )

    parts = [np.abs(balance)]
    if arc_res.size:
        parts.append(arc_res)
    if point_res.size:
        parts.append(point_res)
    return Certificate(arc_res, point_res, balance, float(max(np.max(x) for x in parts)))


def solve(
    scenario,
    schedule: Optional[StepSchedule] = None,
    epsilon: float = DEFAULT_EPSILON,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    mass_mode: str = "exact",
    n_samples: int = 10_000,
    seed: Optional[int] = None,
    psi0=None,
    dual_every: int = 10,
    validate: bool = True,
    on_iterate: Optional[Callable[[int, np.ndarray], None]] = None,
) -> SolveReport:
    """Centralized supergradient ascent followed by primal reconstruction.

    Stops once ``max_i |psi_i^{k+1} - psi_i^k| < epsilon`` or after
    ``max_iterations`` updates. ``mass_mode="stochastic"`` replaces exact
    cell masses with ``n_samples`` Monte Carlo draws per iteration.
    ``on_iterate(k, psi)`` is called with every new iterate.
    """
    if isinstance(scenario, Problem):
        problem = scenario
    else:
        if validate:
            violations = validate_scenario(scenario)
            if violations:
                raise ScenarioError(violations)
        problem = Problem.from_scenario(scenario)
    if schedule is None:
        schedule = StepSchedule.harmonic()
    if mass_mode not in ("exact", "stochastic"):
        raise ValueError(f"unknown mass mode {mass_mode!r}")
    rng = np.random.default_rng(seed) if mass_mode == "stochastic" else None

    n = problem.network.n_nodes
    psi = np.zeros(n) if psi0 is None else np.array(_psi(psi0), dtype=float)
    trace: list[TraceRecord] = []
    termination = MAX_ITERATIONS
    k = 0
    while k < max_iterations:
        if rng is None:
            cells = compute_cells(problem.measure, psi, problem.table)
        else:
            cells = estimate_cell_masses(rng, n_samples, problem.measure, psi, problem.table)
        g = supergradient(problem, psi, cells)
        gamma = schedule(k)
        q = dual_value(problem, psi) if dual_every and k % dual_every == 0 else None
        trace.append(TraceRecord(k, gamma, float(np.max(np.abs(g))) if g.size else 0.0, q))
        try:
            new = ascent_step(psi, g, schedule, k).psi
        except DivergenceError as exc:
            raise DivergenceError(str(exc), trace, psi) from None
        if np.max(np.abs(new)) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"|psi| exceeded {DIVERGENCE_LIMIT:g} at iteration {k}", trace, new)
        change = float(np.max(np.abs(new - psi))) if n else 0.0
        psi = new
        k += 1
        if on_iterate is not None:
            on_iterate(k, psi)
        if change < epsilon:
            termination = EPSILON_REACHED
            break

    return finish(problem, psi, k, trace, termination)


def finish(problem: Problem, psi: np.ndarray, k: int, trace, termination: str) -> SolveReport:
    partition, flows, primal = reconstruct_primal(problem, psi)
    q = dual_value(problem, psi)
    notes = []
    if any(isinstance(a.cost, GenericCost) for a in problem.network.arcs):
        notes.append("generic arc costs: caller-supplied minimizers assumed unique")
    return SolveReport(
        psi_final=DualState(psi.copy(), k),
        flows=flows,
        partition=partition,
        dual_value=q,
        primal_value=primal,
        gap=primal - q,
        trace=trace,
        termination=termination,
        notes=notes,
    )

