"""Domain types shared by every solver component.

Everything here is plain data plus structural validation. Arrays handed to
the constructors are copied and frozen (``writeable = False``) so instances
can be shared freely between readers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional, Union

import numpy as np

if TYPE_CHECKING:  # costs imports this module
    from sdotflow.costs import AssignmentCostSpec

DEFAULT_BALANCE_TOLERANCE = 1e-9


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Point:
    id: int
    coords: np.ndarray


@dataclass(frozen=True, eq=False)
class DemandMeasure:
    """Finite weighted point set.

    ``coords`` has shape ``(n, d)`` and ``masses`` shape ``(n,)``; point ``k``
    has id ``k``.
    """

    coords: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        coords = _frozen(self.coords)
        if coords.ndim == 1:
            coords = _frozen(coords.reshape(-1, 1))
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "masses", _frozen(self.masses))

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    @property
    def dimension(self) -> int:
        return int(self.coords.shape[1])

    def __len__(self) -> int:
        return int(self.masses.shape[0])

    @property
    def points(self) -> list[Point]:
        return [Point(k, self.coords[k]) for k in range(len(self))]


@dataclass(frozen=True)
class QuadraticCost:
    """Arc cost ``coeff * p**2``."""

    coeff: float

    def value(self, p: float) -> float:
        return self.coeff * p * p

    def minimizer(self, dual_difference: float, lower: float, upper: float) -> float:
        p = dual_difference / (2.0 * self.coeff)
        if p < lower:
            return lower
        if p > upper:
            return upper
        return p


@dataclass(frozen=True)
class GenericCost:
    """Caller-supplied convex arc cost.

    ``minimize(dual_difference, lower, upper)`` must return the unique
    minimizer of ``evaluate(p) - dual_difference * p`` over ``[lower, upper]``;
    the library trusts it.
    """

    evaluate: Callable[[float], float]
    minimize: Callable[[float, float, float], float]

    def value(self, p: float) -> float:
        return float(self.evaluate(p))

    def minimizer(self, dual_difference: float, lower: float, upper: float) -> float:
        return float(self.minimize(dual_difference, lower, upper))


ArcCost = Union[QuadraticCost, GenericCost]


@dataclass(frozen=True)
class Node:
    id: int
    supply: float
    is_endpoint: bool = False
    position: Optional[tuple[float, ...]] = None


@dataclass(frozen=True)
class Arc:
    tail: int
    head: int
    lower: float
    upper: float
    cost: ArcCost


@dataclass(frozen=True, eq=False)
class Network:
    nodes: tuple[Node, ...]
    arcs: tuple[Arc, ...]
    outgoing: tuple[tuple[int, ...], ...] = field(init=False)
    incoming: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        arcs = tuple(self.arcs)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "arcs", arcs)
        out: list[list[int]] = [[] for _ in nodes]
        inc: list[list[int]] = [[] for _ in nodes]
        for a, arc in enumerate(arcs):
            if 0 <= arc.tail < len(nodes):
                out[arc.tail].append(a)
            if 0 <= arc.head < len(nodes):
                inc[arc.head].append(a)
        object.__setattr__(self, "outgoing", tuple(tuple(x) for x in out))
        object.__setattr__(self, "incoming", tuple(tuple(x) for x in inc))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    @property
    def endpoints(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.is_endpoint)

    @property
    def supplies(self) -> np.ndarray:
        return np.array([n.supply for n in self.nodes], dtype=float)

    def neighbours(self, node: int) -> tuple[int, ...]:
        """Arc-neighbours of ``node`` in either direction, sorted."""
        ids = {self.arcs[a].head for a in self.outgoing[node]}
        ids |= {self.arcs[a].tail for a in self.incoming[node]}
        return tuple(sorted(ids))


@dataclass(frozen=True, eq=False)
class Scenario:
    measure: DemandMeasure
    network: Network
    assignment_cost: "AssignmentCostSpec"
    balance_tolerance: float = DEFAULT_BALANCE_TOLERANCE


@dataclass
class DualState:
    psi: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.psi = np.array(self.psi, dtype=float)


@dataclass
class FlowState:
    flows: np.ndarray

    def __post_init__(self):
        self.flows = np.array(self.flows, dtype=float)


@dataclass
class Partition:
    assignment: np.ndarray
    cell_masses: dict[int, float]

    def __post_init__(self):
        self.assignment = np.array(self.assignment, dtype=np.int64)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    ids: tuple = ()

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


def validate_scenario(s: Scenario) -> list[Violation]:
    """Return every structural or balance violation in ``s``.

    An empty list means the scenario is ready to solve.
    """
    from sdotflow.costs import check_cost_spec  # local import: costs imports model

    out: list[Violation] = []
    measure, net = s.measure, s.network

    masses = measure.masses
    if measure.coords.shape[0] != masses.shape[0]:
        out.append(Violation("shape", "coords and masses differ in length"))
    bad = np.flatnonzero(~np.isfinite(masses) | (masses < 0))
    for k in bad:
        out.append(Violation("mass", f"point {k} has invalid mass {masses[k]!r}", (int(k),)))
    if not np.all(np.isfinite(measure.coords)):
        out.append(Violation("coords", "non-finite point coordinates"))

    for idx, node in enumerate(net.nodes):
        if node.id != idx:
            out.append(Violation("node_id", f"node at index {idx} has id {node.id}", (idx,)))
        if not np.isfinite(node.supply):
            out.append(Violation("supply", f"node {node.id} has non-finite supply", (node.id,)))
    if not net.endpoints:
        out.append(Violation("endpoints", "network has no endpoint node"))

    seen: set[tuple[int, int]] = set()
    n = net.n_nodes
    for a, arc in enumerate(net.arcs):
        if not (0 <= arc.tail < n and 0 <= arc.head < n):
            out.append(Violation("arc_node", f"arc {a} references unknown node", (a,)))
        if arc.tail == arc.head:
            out.append(Violation("self_loop", f"arc {a} is a self-loop at {arc.tail}", (a,)))
        if (arc.tail, arc.head) in seen:
            out.append(Violation("duplicate_arc", f"arc {a} duplicates ({arc.tail}, {arc.head})", (a,)))
        seen.add((arc.tail, arc.head))
        if not arc.lower <= arc.upper:
            out.append(Violation("bounds", f"arc {a} has lower {arc.lower} > upper {arc.upper}", (a,)))
        if isinstance(arc.cost, QuadraticCost) and not arc.cost.coeff > 0:
            out.append(Violation("arc_cost", f"arc {a} quadratic coefficient must be > 0", (a,)))

    total = measure.total_mass
    supply = float(np.sum(net.supplies))
    if not abs(total - supply) <= s.balance_tolerance:
        out.append(Violation(
            "balance",
            f"total demand {total!r} != total supply {supply!r} (tolerance {s.balance_tolerance})",
        ))

    if not out:
        out.extend(check_cost_spec(s))
    return out

