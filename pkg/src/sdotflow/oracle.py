"""Brute-force reference solver for tiny instances.

Every deterministic assignment of points to endpoints is enumerated. For
each one the endpoint demands are fixed, and the remaining flow problem is
solved directly: on a forest the flows are forced by conservation (leaf
elimination); each extra arc closes a cycle whose flow is found by a
coarse-to-fine grid search.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from sdotflow.dual import Problem, SolveReport, as_problem
from sdotflow.model import FlowState, QuadraticCost

MAX_ASSIGNMENTS = 10**6
MAX_ARCS = 12
CONSERVATION_TOL = 1e-9
BOUND_TOL = 1e-12


class InstanceTooLarge(ValueError):
    pass


class OracleInfeasible(ValueError):
    pass


@dataclass
class OracleResult:
    best_assignment: np.ndarray
    best_flows: FlowState
    best_cost: float
    enumerated: int
    exact: bool


@dataclass
class GapReport:
    best_cost: float
    dual_value: float
    primal_value: float
    dual_gap: float
    primal_gap: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class FlowStructure:
    """Spanning forest of the network plus the linear maps of leaf elimination.

    For net node supplies ``b`` (outflow minus inflow) and cycle-arc flows
    ``t``, tree flows are ``tree_map @ b'`` and per-component imbalance is
    ``root_map @ b'`` where ``b' = b + t @ cycle_shift``.
    """

    def __init__(self, problem: Problem):
        net = problem.network
        n = net.n_nodes
        adj: list[list[int]] = [[] for _ in range(n)]
        for a, arc in enumerate(net.arcs):
            adj[arc.tail].append(a)
            adj[arc.head].append(a)

        seen = [False] * n
        tree_arcs: list[int] = []
        parent_arc = [-1] * n
        order: list[int] = []
        roots: list[int] = []
        for r in range(n):
            if seen[r]:
                continue
            roots.append(r)
            seen[r] = True
            stack = [r]
            while stack:
                u = stack.pop()
                order.append(u)
                for a in adj[u]:
                    arc = net.arcs[a]
                    v = arc.head if arc.tail == u else arc.tail
                    if not seen[v]:
                        seen[v] = True
                        parent_arc[v] = a
                        tree_arcs.append(a)
                        stack.append(v)
        self.tree_arcs = tree_arcs
        self.cycle_arcs = [a for a in range(net.n_arcs) if a not in set(tree_arcs)]

        # eliminate in reverse discovery order: children before parents
        rows = np.eye(n)
        tree_map = np.zeros((net.n_arcs, n))
        for v in reversed(order):
            a = parent_arc[v]
            if a < 0:
                continue
            arc = net.arcs[a]
            u = arc.head if arc.tail == v else arc.tail
            tree_map[a] = rows[v] if arc.tail == v else -rows[v]
            rows[u] = rows[u] + rows[v]
        self.tree_map = tree_map[tree_arcs]
        self.root_map = rows[roots]
        shift = np.zeros((len(self.cycle_arcs), n))
        for k, a in enumerate(self.cycle_arcs):
            shift[k, net.arcs[a].tail] -= 1.0
            shift[k, net.arcs[a].head] += 1.0
        self.cycle_shift = shift

    @property
    def is_forest(self) -> bool:
        return not self.cycle_arcs


def _arc_costs(problem: Problem, a: int, p: np.ndarray) -> np.ndarray:
    cost = problem.network.arcs[a].cost
    if isinstance(cost, QuadraticCost):
        return cost.coeff * p * p
    return np.vectorize(cost.value, otypes=[float])(p)


def _cycle_box(problem: Problem, b: np.ndarray, a: int) -> tuple[float, float]:
    arc = problem.network.arcs[a]
    span = float(np.sum(np.abs(b))) + 1.0
    return max(arc.lower, -span), min(arc.upper, span)


def solve_flows(problem: Problem, structure: FlowStructure, b: np.ndarray,
                resolution: float = 1e-3, points_per_dim: int = 21) -> Optional[tuple[float, np.ndarray]]:
    """Cheapest bounded flows with outflow - inflow = ``b`` at every node.

    Returns ``(cost, flows)`` or None when infeasible.
    """
    net = problem.network
    if np.any(np.abs(structure.root_map @ b) > CONSERVATION_TOL):
        return None
    lower = np.array([arc.lower for arc in net.arcs])
    upper = np.array([arc.upper for arc in net.arcs])
    tree = structure.tree_arcs

    def evaluate(t: np.ndarray):
        # t: (m, c) candidate cycle flows -> (costs, flows) with inf cost when infeasible
        bprime = b[None, :] + t @ structure.cycle_shift
        p = np.zeros((t.shape[0], net.n_arcs))
        p[:, tree] = bprime @ structure.tree_map.T
        p[:, structure.cycle_arcs] = t
        ok = np.all((p >= lower - BOUND_TOL) & (p <= upper + BOUND_TOL), axis=1)
        p = np.clip(p, lower, upper)
        total = np.zeros(t.shape[0])
        for a in range(net.n_arcs):
            total = total + _arc_costs(problem, a, p[:, a])
        return np.where(ok, total, np.inf), p

    c = len(structure.cycle_arcs)
    if c == 0:
        costs, p = evaluate(np.zeros((1, 0)))
        return None if not np.isfinite(costs[0]) else (float(costs[0]), p[0])

    boxes = [list(_cycle_box(problem, b, a)) for a in structure.cycle_arcs]
    if any(lo > hi for lo, hi in boxes):
        return None
    g = max(5, min(points_per_dim, int(round(2e5 ** (1.0 / c)))))
    best = None
    while True:
        axes = [np.linspace(lo, hi, g) for lo, hi in boxes]
        grid = np.array(list(itertools.product(*axes)))
        costs, p = evaluate(grid)
        k = int(np.argmin(costs))
        if not np.isfinite(costs[k]):
            return best
        best = (float(costs[k]), p[k])
        spacing = max((hi - lo) / (g - 1) for lo, hi in boxes)
        if spacing <= resolution:
            return best
        centre = grid[k]
        for d, a in enumerate(structure.cycle_arcs):
            arc = net.arcs[a]
            half = 2.0 * (boxes[d][1] - boxes[d][0]) / (g - 1)
            boxes[d] = [max(arc.lower, centre[d] - half), min(arc.upper, centre[d] + half)]


def iter_feasible(scenario, flow_grid_resolution: float = 1e-3,
                  max_assignments: int = MAX_ASSIGNMENTS) -> Iterator[tuple[np.ndarray, float, np.ndarray]]:
    """Yield ``(assignment, total_cost, flows)`` for every feasible assignment.

    Assignments come in lexicographic order of endpoint columns.
    """
    problem = as_problem(scenario)
    net = problem.network
    table = problem.table
    n_points = len(problem.measure)
    if net.n_arcs > MAX_ARCS:
        raise InstanceTooLarge(f"{net.n_arcs} arcs exceeds the oracle limit of {MAX_ARCS}")
    choices = [np.flatnonzero(table.allowed[x]).tolist() for x in range(n_points)]
    count = math.prod(len(c) for c in choices)
    if len(table.endpoints) ** n_points > max_assignments or count > max_assignments:
        raise InstanceTooLarge(
            f"{len(table.endpoints)}^{n_points} assignments exceeds the oracle limit of {max_assignments}")

    structure = FlowStructure(problem)
    supplies = net.supplies
    endpoint_idx = np.asarray(table.endpoints, dtype=np.int64)
    masses = problem.measure.masses
    rows = np.arange(n_points)
    cache: dict[tuple, Optional[tuple[float, np.ndarray]]] = {}
    for combo in itertools.product(*choices):
        cols = np.array(combo, dtype=np.int64)
        cell = np.bincount(cols, weights=masses, minlength=len(endpoint_idx)) if n_points else \
            np.zeros(len(endpoint_idx))
        key = tuple(cell.tolist())
        if key not in cache:
            b = supplies.copy()
            b[endpoint_idx] -= cell
            cache[key] = solve_flows(problem, structure, b, flow_grid_resolution)
        sub = cache[key]
        if sub is None:
            yield endpoint_idx[cols], math.inf, None
            continue
        assign_cost = float(np.dot(masses, table.values[rows, cols])) if n_points else 0.0
        yield endpoint_idx[cols], assign_cost + sub[0], sub[1]


def brute_force(scenario, flow_grid_resolution: float = 1e-3,
                max_assignments: int = MAX_ASSIGNMENTS) -> OracleResult:
    problem = as_problem(scenario)
    best = None
    enumerated = 0
    for assignment, cost, flows in iter_feasible(problem, flow_grid_resolution, max_assignments):
        enumerated += 1
        if flows is not None and (best is None or cost < best[1]):
            best = (assignment, cost, flows)
    if best is None:
        raise OracleInfeasible(f"no feasible assignment and flow among {enumerated} candidates")
    exact = FlowStructure(problem).is_forest
    return OracleResult(best[0], FlowState(best[2]), best[1], enumerated, exact)


def duality_gap_check(scenario, solve_report: SolveReport, oracle_result: OracleResult,
                      rel_tol: float = 1e-6) -> GapReport:
    best = oracle_result.best_cost
    tol = rel_tol * (1.0 + abs(best))
    dual_gap = abs(solve_report.dual_value - best)
    primal_gap = abs(solve_report.primal_value - best)
    return GapReport(best, solve_report.dual_value, solve_report.primal_value,
                     dual_gap, primal_gap, tol, bool(dual_gap <= tol and primal_gap <= tol))
