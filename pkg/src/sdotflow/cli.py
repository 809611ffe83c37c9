"""Command line entry point: ``sdotflow generate|solve|verify|trace``.

Exit codes: 0 success, 1 invalid input or failed check, 2 divergence,
3 I/O error. Failures print one ``sdotflow: error=<kind> reason=<text>``
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from sdotflow import io as sio
from sdotflow.dual import DivergenceError, Problem, ScenarioError, StepSchedule, certify, solve
from sdotflow.model import validate_scenario

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, kind: str, reason: str):
        super().__init__(reason)
        self.code, self.kind, self.reason = code, kind, reason


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot write {path}: {exc.strerror}") from None


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot create {out}: {exc.strerror}") from None
    return out


def _load_scenario(path: str):
    try:
        return sio.read_scenario(path)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read {path}: {exc.strerror}") from None
    except (sio.FormatError, ValueError) as exc:
        raise CliError(EXIT_INVALID, "format", str(exc)) from None


def _load_report(path: str):
    try:
        return sio.read_report(path)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read {path}: {exc.strerror}") from None
    except (sio.FormatError, ValueError) as exc:
        raise CliError(EXIT_INVALID, "format", str(exc)) from None


def cmd_generate(args) -> int:
    from sdotflow import scenarios
    from sdotflow.fixtures import two_node

    out = _out_dir(args.out)
    topology = None
    if getattr(args, "topology", None):
        try:
            topology = json.loads(Path(args.topology).read_text())
        except OSError as exc:
            raise CliError(EXIT_IO, "io", f"cannot read {args.topology}: {exc.strerror}") from None
    if args.family == "synthetic":
        s = scenarios.generate_synthetic(args.grid_n, args.L, tuple(args.mean), args.sigma, args.seed, topology)
    elif args.family == "power-net":
        s, graph = scenarios.generate_power_network(args.n_consumers, args.seed, args.L, topology=topology)
        _write(out / "consumer_graph.json", sio.dumps(sio.graph_to_dict(graph)))
    else:
        s = two_node()
    _write(out / "scenario.json", sio.dumps(sio.scenario_to_dict(s)))
    return EXIT_OK


def cmd_solve(args) -> int:
    from sdotflow.distributed import run_protocol

    scenario = _load_scenario(args.scenario)
    violations = validate_scenario(scenario)
    if violations:
        raise CliError(EXIT_INVALID, violations[0].kind, "; ".join(str(v) for v in violations))
    out = _out_dir(args.out)
    problem = Problem.from_scenario(scenario)
    schedule = StepSchedule.harmonic(args.step_a, args.step_b)
    rounds = None
    try:
        if args.mode == "distributed":
            result = run_protocol(problem, schedule, args.eps, args.max_iters, dual_every=args.dual_every)
            report, rounds = result.report, result.rounds
        else:
            report = solve(problem, schedule, args.eps, args.max_iters,
                           mass_mode="stochastic" if args.mode == "stochastic" else "exact",
                           n_samples=args.samples, seed=args.seed, dual_every=args.dual_every)
    except DivergenceError as exc:
        if exc.trace:
            _write(out / "trace.csv", sio.trace_csv(exc.trace))
        raise CliError(EXIT_DIVERGED, "divergence", str(exc)) from None

    cert = certify(problem, report.psi_final, report.partition, report.flows)
    extra = {
        "mode": args.mode,
        "schedule": schedule.to_dict(),
        "epsilon": args.eps,
        "certificate": {
            "max_residual": cert.max_residual,
            "max_arc_residual": float(cert.arc_residuals.max()) if cert.arc_residuals.size else 0.0,
            "max_point_residual": float(cert.point_residuals.max()) if cert.point_residuals.size else 0.0,
            "max_abs_flow_balance": float(abs(cert.flow_balance_residuals).max()),
        },
    }
    _write(out / "report.json", sio.dumps(sio.report_to_dict(report, extra)))
    _write(out / "trace.csv", sio.trace_csv(report.trace))
    _write(out / "partition.csv", sio.partition_csv(scenario, report.partition))
    _write(out / "flows.csv", sio.flows_csv(scenario, report.flows))
    if rounds is not None:
        _write(out / "rounds.jsonl", "".join(r.to_json() + "\n" for r in rounds))
    return EXIT_OK


def cmd_verify(args) -> int:
    from sdotflow.oracle import InstanceTooLarge, OracleInfeasible, brute_force, duality_gap_check

    scenario = _load_scenario(args.scenario)
    report = _load_report(args.report)
    try:
        oracle = brute_force(scenario, args.grid_resolution)
    except InstanceTooLarge as exc:
        raise CliError(EXIT_INVALID, "instance_too_large", str(exc)) from None
    except OracleInfeasible as exc:
        raise CliError(EXIT_INVALID, "infeasible", str(exc)) from None
    gap = duality_gap_check(scenario, report, oracle, args.tol)
    out = gap.to_dict()
    out["enumerated"] = oracle.enumerated
    out["exact"] = oracle.exact
    sys.stdout.write(json.dumps(out, indent=1) + "\n")
    if not gap.passed:
        raise CliError(EXIT_INVALID, "gap", f"dual gap {gap.dual_gap:g}, primal gap {gap.primal_gap:g} "
                                           f"exceed tolerance {gap.tolerance:g}")
    return EXIT_OK


def cmd_trace(args) -> int:
    report = _load_report(args.report)
    sys.stdout.write(sio.trace_csv(report.trace))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdotflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a scenario file")
    g.add_argument("family", choices=["synthetic", "power-net", "two-node"])
    g.add_argument("--out", required=True)
    g.add_argument("--grid-n", type=int, default=200)
    g.add_argument("--L", type=float, default=100.0)
    g.add_argument("--mean", type=float, nargs=2, default=[50.0, 75.0])
    g.add_argument("--sigma", type=float, default=25.0)
    g.add_argument("--n-consumers", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--topology", help="JSON file overriding the default 6-node topology")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="run the dual ascent and export results")
    s.add_argument("--scenario", required=True)
    s.add_argument("--mode", choices=["centralized", "distributed", "stochastic"], default="centralized")
    s.add_argument("--step-a", type=float, default=1.0)
    s.add_argument("--step-b", type=float, default=0.01)
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--max-iters", type=int, default=300)
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dual-every", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("verify", help="compare a report against the brute-force oracle")
    v.add_argument("--scenario", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--grid-resolution", type=float, default=1e-3)
    v.add_argument("--tol", type=float, default=1e-6)
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("trace", help="print the trace of a report as CSV")
    t.add_argument("--report", required=True)
    t.set_defaults(func=cmd_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        reason = " ".join(exc.reason.split())
        print(f"sdotflow: error={exc.kind} reason={reason}", file=sys.stderr)
        return exc.code
    except ScenarioError as exc:
        print(f"sdotflow: error=validation reason={' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
