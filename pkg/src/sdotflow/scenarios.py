"""Generators for the synthetic grid scenario and the power-network scenario.

Both reuse a small 6-node transmission topology (two supplied endpoint
stations and four zero-supply interconnection nodes). Its coordinates are an
approximation shipped as ``data/default_topology.json`` and can be replaced
by passing ``topology=``.
"""

from __future__ import annotations

import json
import math
from importlib import resources
from typing import Optional

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
import scipy.sparse as sp

from sdotflow.costs import (
    EUCLIDEAN,
    GEODESIC,
    AssignmentCostSpec,
    ConsumerGraph,
    EndpointRef,
)
from sdotflow.model import Arc, DemandMeasure, Network, Node, QuadraticCost, Scenario


class GenerationError(RuntimeError):
    pass


def default_topology() -> dict:
    text = resources.files("sdotflow").joinpath("data/default_topology.json").read_text()
    return json.loads(text)


def build_network(topology: Optional[dict] = None) -> Network:
    """Transmission network with quadratic arc costs, coefficient = arc length."""
    topo = default_topology() if topology is None else topology
    nodes = []
    for k, n in enumerate(topo["nodes"]):
        nodes.append(Node(k, float(n["supply"]), bool(n["endpoint"]), tuple(float(c) for c in n["position"])))
    arcs = []
    for a in topo["arcs"]:
        t, h = int(a["tail"]), int(a["head"])
        length = math.dist(nodes[t].position, nodes[h].position)
        arcs.append(Arc(t, h, float(a.get("lower", -1.0)), float(a.get("upper", 1.0)), QuadraticCost(length)))
    return Network(tuple(nodes), tuple(arcs))


def grid_points(grid_n: int, L: float) -> np.ndarray:
    """Cell-centred ``grid_n x grid_n`` grid on ``[0, L]^2``.

    Coordinates are built as centre + signed offset so mirrored points have
    exactly opposite offsets.
    """
    h = L / grid_n
    offsets = (np.arange(grid_n) - (grid_n - 1) / 2.0) * h
    axis = L / 2.0 + offsets
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def generate_synthetic(grid_n: int = 200, L: float = 100.0, mean=(50.0, 75.0), sigma: float = 25.0,
                       seed: Optional[int] = None, topology: Optional[dict] = None) -> Scenario:
    """Gaussian demand on a square grid served by the default topology.

    ``seed`` is accepted for interface symmetry; the construction is
    deterministic.
    """
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    pts = grid_points(grid_n, L)
    diff = pts - np.asarray(mean, dtype=float)
    sq = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]
    w = np.exp(-sq / (2.0 * sigma * sigma))
    masses = w / np.sum(w)
    net = build_network(topology)
    return Scenario(DemandMeasure(pts, masses), net, AssignmentCostSpec(EUCLIDEAN))


def _consumer_edges(pos: np.ndarray, rng: np.random.Generator) -> dict[tuple[int, int], float]:
    n = len(pos)
    tree = cKDTree(pos)
    kmax = min(3, n - 1)
    dist, idx = tree.query(pos, k=kmax + 1)
    ks = rng.integers(2, 4, size=n)
    edges: dict[tuple[int, int], float] = {}
    for u in range(n):
        for j in range(1, min(int(ks[u]), kmax) + 1):
            v = int(idx[u, j])
            edges[(min(u, v), max(u, v))] = float(dist[u, j])
    return edges


def _bridge_unserved(pos: np.ndarray, edges: dict, sub_links: list[list[int]]) -> None:
    """Join every component without a substation to its nearest served consumer."""
    n = len(pos)
    while True:
        rows = [u for u, _ in edges]
        cols = [v for _, v in edges]
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        served_labels = {labels[j] for links in sub_links for j in links}
        served = np.isin(labels, list(served_labels))
        if served.all():
            return
        comp = labels[np.flatnonzero(~served)[0]]
        inside = np.flatnonzero(labels == comp)
        outside = np.flatnonzero(served)
        dist, j = cKDTree(pos[outside]).query(pos[inside])
        best = int(np.argmin(dist))
        u, v = int(inside[best]), int(outside[j[best]])
        edges[(min(u, v), max(u, v))] = float(dist[best])


def generate_power_network(n_consumers: int = 1000, seed: Optional[int] = 0, L: float = 100.0,
                           substation_links: int = 3, topology: Optional[dict] = None,
                           bridge: bool = True, max_retries: int = 200
                           ) -> tuple[Scenario, ConsumerGraph]:
    """Random distribution grid hanging off the default transmission network.

    Consumers are uniform in the square with uniform demands rescaled to the
    total supply. Each consumer links to its 2 or 3 nearest consumers and each
    substation (endpoint) to its ``substation_links`` nearest consumers; edge
    weights are Euclidean lengths.

    Sparse nearest-neighbour graphs are rarely connected. With ``bridge`` set,
    each component that cannot reach a substation gets one extra edge to the
    nearest reachable consumer; otherwise draws are repeated up to
    ``max_retries`` times before giving up.
    """
    if n_consumers < 2:
        raise ValueError("n_consumers must be >= 2")
    net = build_network(topology)
    endpoints = net.endpoints
    sub_pos = np.array([net.nodes[e].position for e in endpoints], dtype=float)
    total_supply = float(np.sum(net.supplies))
    rng = np.random.default_rng(seed)
    k = min(substation_links, n_consumers)

    for _ in range(1 if bridge else max_retries):
        pos = rng.uniform(0.0, L, size=(n_consumers, 2))
        demand = rng.uniform(0.0, 1.0, size=n_consumers)
        edges = _consumer_edges(pos, rng)
        d, idx = cKDTree(pos).query(sub_pos, k=k)
        d, idx = np.reshape(d, (len(endpoints), k)), np.reshape(idx, (len(endpoints), k))
        sub_links = [[int(j) for j in row] for row in idx]
        if bridge:
            _bridge_unserved(pos, edges, sub_links)
            break
        n_vert = n_consumers + len(endpoints)
        rows = [u for u, _ in edges] + [n_consumers + s for s, links in enumerate(sub_links) for _ in links]
        cols = [v for _, v in edges] + [j for links in sub_links for j in links]
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vert, n_vert))
        _, labels = connected_components(adj, directed=False)
        served = set(labels[n_consumers:].tolist())
        if all(labels[u] in served for u in range(n_consumers)):
            break
    else:
        raise GenerationError(f"no connected consumer graph after {max_retries} draws")

    graph_edges = [(u, v, w) for (u, v), w in sorted(edges.items())]
    for s, e in enumerate(endpoints):
        for j in range(k):
            graph_edges.append((EndpointRef(e), int(idx[s, j]), float(d[s, j])))
    graph = ConsumerGraph(tuple(graph_edges))
    if not np.sum(demand) > 0:
        raise GenerationError("all sampled demands are zero")
    masses = demand / np.sum(demand) * total_supply
    scenario = Scenario(DemandMeasure(pos, masses), net, AssignmentCostSpec(GEODESIC, graph=graph))
    return scenario, graph
