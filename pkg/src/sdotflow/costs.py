"""Assignment costs c(x, i) and the per-arc scalar minimization.

Forbidden pairs (infinite assignment cost) never appear as ``inf`` in
arithmetic: a :class:`CostTable` keeps finite ``values`` next to a boolean
``allowed`` mask, and the scalar API returns the :data:`FORBIDDEN` marker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from sdotflow.model import Arc, Network, Point, Scenario, Violation


class ConfigurationError(ValueError):
    """Raised when a cost specification cannot be evaluated as given."""


class NumericError(ArithmeticError):
    pass


class _Forbidden:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "FORBIDDEN"

    def __reduce__(self):
        return (_Forbidden, ())


FORBIDDEN = _Forbidden()

EUCLIDEAN = "euclidean"
SQUARED_EUCLIDEAN = "squared_euclidean"
GEODESIC = "geodesic_resistance"
TABLE = "table"
KINDS = (EUCLIDEAN, SQUARED_EUCLIDEAN, GEODESIC, TABLE)


@dataclass(frozen=True)
class EndpointRef:
    """Consumer-graph vertex standing for network node ``node``."""

    node: int


Vertex = Union[int, EndpointRef]


@dataclass(frozen=True)
class ConsumerGraph:
    """Weighted undirected graph over demand points and endpoint markers."""

    edges: tuple[tuple[Vertex, Vertex, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((u, v, float(w)) for u, v, w in self.edges))


@dataclass(frozen=True, eq=False)
class AssignmentCostSpec:
    kind: str
    graph: Optional[ConsumerGraph] = None
    # rows = points, columns = endpoints in ascending node id; None = forbidden
    table: Optional[tuple[tuple[Optional[float], ...], ...]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown assignment cost kind {self.kind!r}")
        if self.table is not None:
            object.__setattr__(
                self, "table",
                tuple(tuple(None if v is None else float(v) for v in row) for row in self.table),
            )


@dataclass(frozen=True, eq=False)
class CostTable:
    """Dense c(x, i) over points x endpoints.

    Column ``k`` belongs to endpoint ``endpoints[k]``. ``values`` is finite
    everywhere; entries with ``allowed`` False are forbidden.
    """

    endpoints: tuple[int, ...]
    values: np.ndarray
    allowed: np.ndarray
    geodesic: Optional["GeodesicTable"] = None

    @property
    def all_allowed(self) -> bool:
        return bool(self.allowed.all())


@dataclass(frozen=True, eq=False)
class GeodesicTable:
    """Shortest-path costs with one predecessor tree per endpoint.

    Vertices ``0..n_points-1`` are demand points; the rest are endpoint
    markers, see ``vertex_of_endpoint``.
    """

    values: np.ndarray
    allowed: np.ndarray
    predecessors: np.ndarray
    endpoints: tuple[int, ...]
    n_points: int
    vertex_of_endpoint: dict = field(default_factory=dict)

    def path(self, point: int, column: int) -> list[int]:
        """Vertices on the stored shortest path from ``point`` to endpoint column."""
        target = self.vertex_of_endpoint[self.endpoints[column]]
        pred = self.predecessors[column]
        out = [point]
        v = point
        while v != target:
            v = int(pred[v])
            if v < 0:
                raise ConfigurationError(f"point {point} cannot reach endpoint {self.endpoints[column]}")
            out.append(v)
        return out


def _position(network: Network, i: int) -> np.ndarray:
    pos = network.nodes[i].position
    if pos is None:
        raise ConfigurationError(f"node {i} has no position but the assignment cost is positional")
    return np.asarray(pos, dtype=float)


def assignment_cost(spec: AssignmentCostSpec, x: Point, i: int, network: Network):
    """c(x, i) for a single pair, or :data:`FORBIDDEN`.

    ``network`` supplies endpoint positions and ordering; geodesic costs are
    answered from a freshly precomputed table, so prefer :func:`cost_table`
    for bulk queries.
    """
    if not network.nodes[i].is_endpoint:
        raise ConfigurationError(f"node {i} is not an endpoint")
    if spec.kind in (EUCLIDEAN, SQUARED_EUCLIDEAN):
        diff = np.asarray(x.coords, dtype=float) - _position(network, i)
        sq = float(np.dot(diff, diff))
        return math.sqrt(sq) if spec.kind == EUCLIDEAN else sq
    col = network.endpoints.index(i)
    if spec.kind == TABLE:
        v = spec.table[x.id][col]
        return FORBIDDEN if v is None else v
    n_points = 1 + max(
        (v for u, w, _ in spec.graph.edges for v in (u, w) if isinstance(v, int)), default=-1)
    n_points = max(n_points, x.id + 1)
    geo = precompute_geodesic_costs(spec.graph, network.endpoints, n_points)
    return float(geo.values[x.id, col]) if geo.allowed[x.id, col] else FORBIDDEN


def precompute_geodesic_costs(graph: ConsumerGraph, endpoints, n_points: int) -> GeodesicTable:
    """One single-source Dijkstra per endpoint over the consumer graph."""
    endpoints = tuple(int(e) for e in endpoints)
    vertex_of = {e: n_points + k for k, e in enumerate(endpoints)}

    def vid(v):
        if isinstance(v, EndpointRef):
            if v.node not in vertex_of:
                raise ConfigurationError(f"edge references non-endpoint node {v.node}")
            return vertex_of[v.node]
        v = int(v)
        if not 0 <= v < n_points:
            raise ConfigurationError(f"edge references unknown point {v}")
        return v

    best: dict[tuple[int, int], float] = {}
    for u, v, w in graph.edges:
        if not w >= 0 or not math.isfinite(w):
            raise ConfigurationError(f"edge ({u}, {v}) has invalid weight {w!r}")
        a, b = vid(u), vid(v)
        if a == b:
            continue
        key = (min(a, b), max(a, b))
        if key not in best or w < best[key]:
            best[key] = w

    n_vertices = n_points + len(endpoints)
    if best:
        rows, cols = zip(*best.keys())
        weights = np.fromiter(best.values(), dtype=float, count=len(best))
    else:
        rows, cols, weights = (), (), np.zeros(0)
    mat = sp.csr_matrix((weights, (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
                        shape=(n_vertices, n_vertices))
    sources = [vertex_of[e] for e in endpoints]
    if sources:
        dist, pred = dijkstra(mat, directed=False, indices=sources, return_predecessors=True)
    else:
        dist = np.zeros((0, n_vertices))
        pred = np.zeros((0, n_vertices), dtype=np.int32)
    dist = dist[:, :n_points].T
    allowed = np.isfinite(dist)
    values = np.where(allowed, dist, 0.0)
    values.setflags(write=False)
    allowed.setflags(write=False)
    return GeodesicTable(values, allowed, pred, endpoints, n_points, vertex_of)


def cost_table(scenario: Scenario) -> CostTable:
    """Evaluate c(x, i) for every point and endpoint of ``scenario``."""
    spec = scenario.assignment_cost
    net = scenario.network
    endpoints = net.endpoints
    coords = scenario.measure.coords
    n = len(scenario.measure)
    geo = None
    if spec.kind in (EUCLIDEAN, SQUARED_EUCLIDEAN):
        pos = np.array([_position(net, e) for e in endpoints], dtype=float).reshape(len(endpoints), -1)
        if pos.shape[1] != coords.shape[1]:
            raise ConfigurationError("endpoint positions and points differ in dimension")
        diff = coords[:, None, :] - pos[None, :, :]
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        values = np.sqrt(sq) if spec.kind == EUCLIDEAN else sq
        allowed = np.ones_like(values, dtype=bool)
    elif spec.kind == TABLE:
        if spec.table is None or len(spec.table) != n or any(len(r) != len(endpoints) for r in spec.table):
            raise ConfigurationError(f"cost table must have shape ({n}, {len(endpoints)})")
        allowed = np.array([[v is not None for v in row] for row in spec.table], dtype=bool).reshape(n, -1)
        values = np.array([[0.0 if v is None else v for v in row] for row in spec.table],
                          dtype=float).reshape(n, -1)
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("cost table entries must be finite or forbidden")
    else:
        if spec.graph is None:
            raise ConfigurationError("geodesic cost requires a consumer graph")
        geo = precompute_geodesic_costs(spec.graph, endpoints, n)
        values, allowed = geo.values, geo.allowed
    values = np.array(values, dtype=float)
    allowed = np.array(allowed, dtype=bool)
    values.setflags(write=False)
    allowed.setflags(write=False)
    return CostTable(tuple(endpoints), values, allowed, geo)


def check_cost_spec(scenario: Scenario) -> list[Violation]:
    """Violations that only show up once costs are evaluated."""
    try:
        table = cost_table(scenario)
    except ConfigurationError as exc:
        return [Violation("assignment_cost", str(exc))]
    if table.values.shape[1] == 0:
        return []
    dead = np.flatnonzero(~table.allowed.any(axis=1))
    return [Violation("infeasible_point", f"point {k} has forbidden cost to every endpoint", (int(k),))
            for k in dead]


def arc_flow_minimizer(arc: Arc, dual_difference: float) -> float:
    """argmin over p in [lower, upper] of c_ij(p) - dual_difference * p."""
    if not math.isfinite(dual_difference):
        raise NumericError(f"non-finite dual difference {dual_difference!r}")
    return arc.cost.minimizer(dual_difference, arc.lower, arc.upper)


def arc_dual_value(arc: Arc, dual_difference: float) -> float:
    p = arc_flow_minimizer(arc, dual_difference)
    return arc.cost.value(p) - dual_difference * p
