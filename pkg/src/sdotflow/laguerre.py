"""Generalized Laguerre cells of a discrete demand measure.

A point belongs to the endpoint minimizing its adjusted cost
``c(x, i) - psi_i``; exact ties go to the lowest endpoint id (columns of a
:class:`~sdotflow.costs.CostTable` are sorted by node id, and ``argmin``
returns the first minimum).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sdotflow.costs import CostTable
from sdotflow.model import DemandMeasure, DualState, Partition


class InfeasiblePointError(ValueError):
    def __init__(self, point: int):
        super().__init__(f"point {point} has forbidden cost to every endpoint")
        self.point = point


@dataclass
class CellMassReport:
    masses: dict[int, float]
    assignment: np.ndarray  # point id -> endpoint node id
    tie_count: int = 0

    def mass_vector(self, endpoints) -> np.ndarray:
        return np.array([self.masses[e] for e in endpoints], dtype=float)

    def to_partition(self) -> Partition:
        return Partition(self.assignment.copy(), dict(self.masses))


def _psi_vector(psi) -> np.ndarray:
    if isinstance(psi, DualState):
        return psi.psi
    return np.asarray(psi, dtype=float)


def adjusted_costs(table: CostTable, psi=None, psi_endpoints=None) -> np.ndarray:
    """``c(x, i) - psi_i`` with forbidden entries replaced by ``+inf``.

    Pass either the full node vector ``psi`` or ``psi_endpoints`` ordered like
    the table columns. The infinity only ever enters comparisons
    (min/argmin), never sums.
    """
    if psi_endpoints is None:
        psi_s = _psi_vector(psi)[list(table.endpoints)]
    else:
        psi_s = np.asarray(psi_endpoints, dtype=float)
    adj = table.values - psi_s[None, :]
    if not table.all_allowed:
        adj = np.where(table.allowed, adj, np.inf)
    return adj


def assign_columns(table: CostTable, psi=None, tie_epsilon: float = 0.0, psi_endpoints=None):
    """Vectorized assignment.

    Returns ``(columns, best_adjusted, tie_count)`` where ``columns[x]`` is
    the winning column of point ``x``.
    """
    adj = adjusted_costs(table, psi, psi_endpoints)
    if adj.shape[1] == 0:
        raise ValueError("no endpoints")
    cols = np.argmin(adj, axis=1)
    best = adj[np.arange(adj.shape[0]), cols]
    if not table.all_allowed:
        dead = np.flatnonzero(~np.isfinite(best))
        if dead.size:
            raise InfeasiblePointError(int(dead[0]))
    if adj.shape[1] > 1:
        ties = int(np.count_nonzero(np.sum(adj - best[:, None] <= tie_epsilon, axis=1) >= 2))
    else:
        ties = 0
    return cols, best, ties


def assign_point(point: int, psi, table: CostTable, tie_epsilon: float = 0.0) -> int:
    """Endpoint id of minimal adjusted cost for one point; lowest id on ties."""
    row_adj = table.values[point] - _psi_vector(psi)[list(table.endpoints)]
    allowed = table.allowed[point]
    best_col = -1
    for col in range(row_adj.shape[0]):
        if not allowed[col]:
            continue
        if best_col < 0 or row_adj[col] < row_adj[best_col] - tie_epsilon:
            best_col = col
    if best_col < 0:
        raise InfeasiblePointError(point)
    return table.endpoints[best_col]


def cell_masses_from_columns(cols: np.ndarray, weights: np.ndarray, n_endpoints: int) -> np.ndarray:
    # bincount accumulates in point order: the fixed reduction order every caller relies on
    return np.bincount(cols, weights=weights, minlength=n_endpoints).astype(float)


def compute_cells(measure: DemandMeasure, psi, table: CostTable,
                  tie_epsilon: float = 0.0) -> CellMassReport:
    cols, _, ties = assign_columns(table, psi, tie_epsilon)
    masses = cell_masses_from_columns(cols, measure.masses, len(table.endpoints))
    endpoints = np.asarray(table.endpoints, dtype=np.int64)
    return CellMassReport(
        masses={e: float(m) for e, m in zip(table.endpoints, masses)},
        assignment=endpoints[cols],
        tie_count=ties,
    )


def estimate_cell_masses(rng: np.random.Generator, n_samples: int, measure: DemandMeasure,
                         psi, table: CostTable) -> CellMassReport:
    """Monte Carlo cell masses from ``n_samples`` mass-proportional draws.

    Draw counts per point are multinomial, which is the same law as sampling
    points one at a time. The returned assignment is the exact one; only the
    masses are estimated.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    total = measure.total_mass
    if not total > 0:
        raise ValueError("measure has zero total mass")
    counts = rng.multinomial(n_samples, measure.masses / total)
    cols, _, ties = assign_columns(table, psi)
    hits = np.bincount(cols, weights=counts, minlength=len(table.endpoints))
    masses = hits / n_samples * total
    endpoints = np.asarray(table.endpoints, dtype=np.int64)
    return CellMassReport(
        masses={e: float(m) for e, m in zip(table.endpoints, masses)},
        assignment=endpoints[cols],
        tie_count=ties,
    )
