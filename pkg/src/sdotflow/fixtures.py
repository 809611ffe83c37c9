"""Small hand-checkable scenarios and random instances with known optimum."""

from __future__ import annotations

from typing import Optional

import numpy as np

from sdotflow.costs import TABLE, AssignmentCostSpec
from sdotflow.model import Arc, DemandMeasure, Network, Node, QuadraticCost, Scenario


def two_node() -> Scenario:
    """Supply 1 at node 0 shipped over one arc to endpoint 1, which serves a
    single unit-mass point at zero cost. Optimum: psi = (2, 0) up to a shift,
    flow 1, cost 1."""
    nodes = (Node(0, 1.0, False), Node(1, 0.0, True))
    arcs = (Arc(0, 1, -1.0, 1.0, QuadraticCost(1.0)),)
    measure = DemandMeasure(np.array([[0.0]]), np.array([1.0]))
    return Scenario(measure, Network(nodes, arcs), AssignmentCostSpec(TABLE, table=((0.0,),)))


def random_tree(rng: np.random.Generator, n_nodes: int) -> list[tuple[int, int]]:
    """Random labelled tree with randomly oriented arcs."""
    arcs = []
    for v in range(1, n_nodes):
        u = int(rng.integers(0, v))
        arcs.append((u, v) if rng.random() < 0.5 else (v, u))
    return arcs


def planted_instance(rng: np.random.Generator, n_points: int = 6, n_endpoints: int = 3,
                     n_nodes: int = 5, margin: tuple[float, float] = (0.2, 1.0),
                     edges: Optional[list[tuple[int, int]]] = None):
    """Tree instance whose optimum is planted through the optimality conditions.

    A dual vector, an assignment and interior flows are drawn first; costs
    are then set so the assignment is the strict adjusted-cost minimizer
    (by at least ``margin[0]``) and supplies so the flows balance every node.
    ``edges`` overrides the random tree (cycles allowed).
    Returns ``(scenario, psi_star, assignment, flows)``.
    """
    psi = rng.uniform(-2.0, 2.0, size=n_nodes)
    endpoints = sorted(rng.choice(n_nodes, size=n_endpoints, replace=False).tolist())
    arcs = []
    flows = []
    for t, h in (random_tree(rng, n_nodes) if edges is None else edges):
        coeff = float(rng.uniform(1.0, 3.0))
        p = (psi[t] - psi[h]) / (2.0 * coeff)
        lo = p - float(rng.uniform(0.1, 2.0))
        hi = p + float(rng.uniform(0.1, 2.0))
        arcs.append(Arc(t, h, lo, hi, QuadraticCost(coeff)))
        flows.append(p)
    masses = rng.uniform(0.1, 1.0, size=n_points)
    cols = rng.integers(0, n_endpoints, size=n_points)
    base = rng.uniform(0.0, 3.0, size=n_points)
    table = []
    for x in range(n_points):
        row = []
        for k, e in enumerate(endpoints):
            extra = 0.0 if k == cols[x] else float(rng.uniform(*margin))
            row.append(float(psi[e] + base[x] + extra))
        table.append(tuple(row))

    cell = np.bincount(cols, weights=masses, minlength=n_endpoints)
    balance = np.zeros(n_nodes)
    for arc, p in zip(arcs, flows):
        balance[arc.tail] += p
        balance[arc.head] -= p
    supply = balance.copy()
    for k, e in enumerate(endpoints):
        supply[e] += cell[k]
    nodes = tuple(Node(i, float(supply[i]), i in endpoints) for i in range(n_nodes))
    measure = DemandMeasure(rng.uniform(0.0, 1.0, size=(n_points, 2)), masses)
    scenario = Scenario(measure, Network(nodes, tuple(arcs)),
                        AssignmentCostSpec(TABLE, table=tuple(table)), balance_tolerance=1e-9)
    assignment = np.asarray(endpoints)[cols]
    return scenario, psi, assignment, np.array(flows)
