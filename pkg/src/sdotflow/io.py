"""File formats: scenario JSON, consumer-graph JSON, and solver exports."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Optional

import numpy as np

from sdotflow.costs import (
    GEODESIC,
    TABLE,
    AssignmentCostSpec,
    ConsumerGraph,
    EndpointRef,
)
from sdotflow.dual import SolveReport, TraceRecord
from sdotflow.model import (
    DEFAULT_BALANCE_TOLERANCE,
    Arc,
    DemandMeasure,
    DualState,
    FlowState,
    Network,
    Node,
    Partition,
    QuadraticCost,
    Scenario,
)


class FormatError(ValueError):
    """Malformed or unexpected content in an input file."""


def _check_keys(obj: Any, where: str, required: set, optional: set = frozenset()):
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    missing = required - obj.keys()
    if missing:
        raise FormatError(f"{where}: missing keys {sorted(missing)}")
    unknown = obj.keys() - required - optional
    if unknown:
        raise FormatError(f"{where}: unknown keys {sorted(unknown)}")


# -- consumer graph ---------------------------------------------------------

def _vertex_to_json(v):
    return {"endpoint": v.node} if isinstance(v, EndpointRef) else int(v)


def _vertex_from_json(v, where):
    if isinstance(v, dict):
        _check_keys(v, where, {"endpoint"})
        return EndpointRef(int(v["endpoint"]))
    if isinstance(v, bool) or not isinstance(v, int):
        raise FormatError(f"{where}: vertex must be a point index or {{\"endpoint\": id}}")
    return v


def graph_to_dict(graph: ConsumerGraph) -> dict:
    return {"edges": [{"u": _vertex_to_json(u), "v": _vertex_to_json(v), "weight": w}
                      for u, v, w in graph.edges]}


def graph_from_dict(data: dict) -> ConsumerGraph:
    _check_keys(data, "consumer graph", {"edges"})
    edges = []
    for k, e in enumerate(data["edges"]):
        where = f"edges[{k}]"
        _check_keys(e, where, {"u", "v", "weight"})
        edges.append((_vertex_from_json(e["u"], where), _vertex_from_json(e["v"], where),
                      float(e["weight"])))
    return ConsumerGraph(tuple(edges))


# -- scenario ---------------------------------------------------------------

def cost_spec_to_dict(spec: AssignmentCostSpec) -> dict:
    out: dict[str, Any] = {"kind": spec.kind}
    if spec.kind == GEODESIC:
        out["graph"] = graph_to_dict(spec.graph)
    elif spec.kind == TABLE:
        out["values"] = [list(row) for row in spec.table]
    return out


def cost_spec_from_dict(data: dict) -> AssignmentCostSpec:
    if not isinstance(data, dict) or "kind" not in data:
        raise FormatError("assignment_cost: expected an object with 'kind'")
    kind = data["kind"]
    if kind == GEODESIC:
        _check_keys(data, "assignment_cost", {"kind", "graph"})
        return AssignmentCostSpec(kind, graph=graph_from_dict(data["graph"]))
    if kind == TABLE:
        _check_keys(data, "assignment_cost", {"kind", "values"})
        return AssignmentCostSpec(kind, table=tuple(tuple(r) for r in data["values"]))
    _check_keys(data, "assignment_cost", {"kind"})
    try:
        return AssignmentCostSpec(kind)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def scenario_to_dict(s: Scenario) -> dict:
    nodes = []
    for n in s.network.nodes:
        d = {"id": n.id, "supply": n.supply, "endpoint": n.is_endpoint}
        if n.position is not None:
            d["position"] = [float(c) for c in n.position]
        nodes.append(d)
    arcs = []
    for a, arc in enumerate(s.network.arcs):
        if not isinstance(arc.cost, QuadraticCost):
            raise FormatError(f"arc {a}: only quadratic arc costs can be serialized")
        arcs.append({"tail": arc.tail, "head": arc.head, "lower": arc.lower, "upper": arc.upper,
                     "cost": {"kind": "quadratic", "coeff": arc.cost.coeff}})
    m = s.measure
    return {
        "dimension": m.dimension,
        "points": [{"id": k, "coords": m.coords[k].tolist(), "mass": float(m.masses[k])}
                   for k in range(len(m))],
        "nodes": nodes,
        "arcs": arcs,
        "assignment_cost": cost_spec_to_dict(s.assignment_cost),
        "balance_tolerance": s.balance_tolerance,
    }


def scenario_from_dict(data: dict) -> Scenario:
    _check_keys(data, "scenario",
                {"dimension", "points", "nodes", "arcs", "assignment_cost"}, {"balance_tolerance"})
    dim = int(data["dimension"])
    if dim < 1:
        raise FormatError("dimension must be >= 1")
    coords, masses = [], []
    for k, p in enumerate(data["points"]):
        _check_keys(p, f"points[{k}]", {"id", "coords", "mass"})
        if p["id"] != k:
            raise FormatError(f"points[{k}]: ids must be contiguous from 0, got {p['id']}")
        if len(p["coords"]) != dim:
            raise FormatError(f"points[{k}]: expected {dim} coordinates")
        coords.append([float(c) for c in p["coords"]])
        masses.append(float(p["mass"]))
    nodes = []
    for k, n in enumerate(data["nodes"]):
        _check_keys(n, f"nodes[{k}]", {"id", "supply", "endpoint"}, {"position"})
        if n["id"] != k:
            raise FormatError(f"nodes[{k}]: ids must be contiguous from 0, got {n['id']}")
        pos = n.get("position")
        nodes.append(Node(k, float(n["supply"]), bool(n["endpoint"]),
                          None if pos is None else tuple(float(c) for c in pos)))
    arcs = []
    for k, a in enumerate(data["arcs"]):
        _check_keys(a, f"arcs[{k}]", {"tail", "head", "lower", "upper", "cost"})
        cost = a["cost"]
        _check_keys(cost, f"arcs[{k}].cost", {"kind", "coeff"})
        if cost["kind"] != "quadratic":
            raise FormatError(f"arcs[{k}].cost: unsupported kind {cost['kind']!r}")
        arcs.append(Arc(int(a["tail"]), int(a["head"]), float(a["lower"]), float(a["upper"]),
                        QuadraticCost(float(cost["coeff"]))))
    measure = DemandMeasure(np.array(coords, dtype=float).reshape(len(coords), dim),
                            np.array(masses, dtype=float))
    return Scenario(measure, Network(tuple(nodes), tuple(arcs)),
                    cost_spec_from_dict(data["assignment_cost"]),
                    float(data.get("balance_tolerance", DEFAULT_BALANCE_TOLERANCE)))


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=False) + "\n"


def write_scenario(s: Scenario, path) -> None:
    Path(path).write_text(dumps(scenario_to_dict(s)))


def read_scenario(path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})") from None
    return scenario_from_dict(data)


def write_graph(graph: ConsumerGraph, path) -> None:
    Path(path).write_text(dumps(graph_to_dict(graph)))


def read_graph(path) -> ConsumerGraph:
    return graph_from_dict(json.loads(Path(path).read_text()))


# -- solver outputs ----------------------------------------------------------

def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def partition_csv(scenario: Scenario, partition: Partition) -> str:
    masses = scenario.measure.masses
    return _csv(["point_id", "endpoint_id", "mass"],
                ((k, int(e), repr(float(masses[k]))) for k, e in enumerate(partition.assignment)))


def flows_csv(scenario: Scenario, flows: FlowState) -> str:
    return _csv(["arc_tail", "arc_head", "flow"],
                ((arc.tail, arc.head, repr(float(p)))
                 for arc, p in zip(scenario.network.arcs, flows.flows)))


def trace_csv(trace) -> str:
    return _csv(["k", "gamma", "max_abs_g", "dual_value"],
                ((t.k, repr(t.gamma), repr(t.max_abs_g),
                  "" if t.dual_value is None else repr(t.dual_value)) for t in trace))


def report_to_dict(report: SolveReport, extra: Optional[dict] = None) -> dict:
    out = {
        "psi_final": {"psi": [float(v) for v in report.psi_final.psi],
                      "iteration": report.psi_final.iteration},
        "flows": [float(v) for v in report.flows.flows],
        "partition": {
            "assignment": [int(e) for e in report.partition.assignment],
            "cell_masses": {str(k): float(v) for k, v in sorted(report.partition.cell_masses.items())},
        },
        "dual_value": report.dual_value,
        "primal_value": report.primal_value,
        "gap": report.gap,
        "trace": [{"k": t.k, "gamma": t.gamma, "max_abs_g": t.max_abs_g, "dual_value": t.dual_value}
                  for t in report.trace],
        "termination": report.termination,
        "notes": list(report.notes),
    }
    if extra:
        out.update(extra)
    return out


def report_from_dict(data: dict) -> SolveReport:
    try:
        return SolveReport(
            psi_final=DualState(data["psi_final"]["psi"], int(data["psi_final"]["iteration"])),
            flows=FlowState(data["flows"]),
            partition=Partition(data["partition"]["assignment"],
                                {int(k): float(v) for k, v in data["partition"]["cell_masses"].items()}),
            dual_value=float(data["dual_value"]),
            primal_value=float(data["primal_value"]),
            gap=float(data["gap"]),
            trace=[TraceRecord(int(t["k"]), float(t["gamma"]), float(t["max_abs_g"]),
                               None if t["dual_value"] is None else float(t["dual_value"]))
                   for t in data["trace"]],
            termination=data["termination"],
            notes=list(data.get("notes", [])),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"report: missing or malformed field {exc}") from None


def read_report(path) -> SolveReport:
    return report_from_dict(json.loads(Path(path).read_text()))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["psi_final", "flows", "partition", "dual_value", "primal_value", "gap",
                 "trace", "termination"],
    "properties": {
        "psi_final": {
            "type": "object",
            "required": ["psi", "iteration"],
            "properties": {"psi": {"type": "array", "items": {"type": "number"}},
                           "iteration": {"type": "integer", "minimum": 0}},
        },
        "flows": {"type": "array", "items": {"type": "number"}},
        "partition": {
            "type": "object",
            "required": ["assignment", "cell_masses"],
            "properties": {
                "assignment": {"type": "array", "items": {"type": "integer"}},
                "cell_masses": {"type": "object", "additionalProperties": {"type": "number"}},
            },
        },
        "dual_value": {"type": "number"},
        "primal_value": {"type": "number"},
        "gap": {"type": "number"},
        "trace": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["k", "gamma", "max_abs_g", "dual_value"],
                "properties": {"k": {"type": "integer"}, "gamma": {"type": "number"},
                               "max_abs_g": {"type": "number"},
                               "dual_value": {"type": ["number", "null"]}},
            },
        },
        "termination": {"enum": ["epsilon_reached", "max_iterations"]},
        "notes": {"type": "array", "items": {"type": "string"}},
    },
}

ROUND_SCHEMA = {
    "type": "object",
    "required": ["round", "messages_delivered", "psi", "g"],
    "properties": {
        "round": {"type": "integer", "minimum": 0},
        "messages_delivered": {"type": "integer", "minimum": 0},
        "message_counts": {"type": "object", "additionalProperties": {"type": "integer"}},
        "psi": {"type": "array", "items": {"type": "number"}},
        "g": {"type": "array", "items": {"type": "number"}},
    },
}
