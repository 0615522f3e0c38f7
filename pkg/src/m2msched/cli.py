"""Command line entry point: ``m2msched {solve|joint|subcarrier|compare|audit}``.

Single solves print JSON; sweeps and tables print CSV. Every output carries
the scenario hash (and the seed where randomness is involved), and re-runs
with the same inputs are byte-identical. ``--out FILE`` writes to a file
instead of stdout; ``joint`` then also writes its objective trace to
``FILE`` with the suffix replaced by ``.trace.csv``.

Exit codes: 0 ok, 2 input error, 3 numeric failure, 4 infeasible.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import scenario as scn
from .core import ScenarioError, ServiceKind, TimeSharingPolicy
from .experiments import ComparePoint, compare_point, ordered_map, scheduler_labels, solve_as
from .joint import (JointProviders, SimulatedASProviders, expected_overhead, overhead_audit, run_distributed,
                    solve_centralized)
from .kkt import ConvergenceError
from .schedopt import complexity_report
from .subcarrier import (InfeasibleError, exact_reference, joint_value, minimally_feasible, reference_sized,
                         two_stage_pipeline)
from .utility import UtilityParams, utility

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4
AUDIT_MAX_R = 8


# ------------------------------------------------------------------ helpers

def _num(x: float) -> str:
    """Shortest round-trip float text; integers stay integers."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, (float, int, np.floating, np.integer)) else v for v in row])
    return buf.getvalue()


def _json(doc) -> str:
    return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=True) + "\n"


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _policy_doc(policy: TimeSharingPolicy) -> list[dict]:
    items = sorted(((str(o), g) for o, g in policy.gamma.items() if g > 0), key=lambda t: t[0])
    return [{"order": o, "gamma": g} for o, g in items]


def _utilities(classes, latencies) -> dict[int, float]:
    return {c.id: utility(UtilityParams.of(c), latencies[c.id]) for c in classes}


def _sweep_arg(args, name: str, default):
    if args.sweep is None:
        return default
    key, rng = scn.parse_sweep(args.sweep)
    if key != name:
        raise ScenarioError(f"this command sweeps {name!r}, got {key!r}")
    return rng


def _load(args) -> scn.Scenario:
    s = scn.load(args.scenario)
    if args.seed is not None:
        s = dataclasses.replace(s, sim=dataclasses.replace(s.sim, seed=args.seed))
    return s


# ----------------------------------------------------------------- commands

def cmd_solve(args) -> int:
    s = _load(args)
    mode = args.mode or "io"
    if mode not in ("io", "sso"):
        raise ScenarioError(f"solve --mode must be io or sso, got {mode!r}")
    rep, tree = solve_as(s.classes, s.topology.as_capacity, s.service, mode)
    doc = {
        "command": "solve",
        "scenario_hash": scn.scenario_hash(s),
        "mode": mode,
        "node": "AS",
        "R": len(s.classes),
        "service": s.service.value,
        "objective": rep.objective,
        "policy": _policy_doc(rep.policy),
        "latencies": rep.latencies,
        "utilities": _utilities(s.classes, rep.latencies),
        "iterations": rep.iterations,
        "residual": rep.residual,
        "subproblems": rep.subproblems,
        "memo_hits": rep.memo_hits,
    }
    if tree is not None:
        doc["alpha_tree"] = [{"subset": sorted(sub), "alpha": alpha, "latencies": lat}
                             for sub, (alpha, lat) in sorted(tree.entries.items(),
                                                             key=lambda t: (len(t[0]), sorted(t[0])))]
    _emit(_json(doc), args.out)
    return EXIT_OK


def _joint_providers(s: scn.Scenario):
    topo = s.topology
    # ideal MAs forward Poisson input untouched, so closed forms stay exact
    if s.service is ServiceKind.EXPONENTIAL or topo.ma_capacities is None:
        return JointProviders(topo, s.service)
    return SimulatedASProviders(topo, s.service, seed=s.sim.seed, horizon=s.sim.horizon_packets)


def cmd_joint(args) -> int:
    s = _load(args)
    mode = args.mode or "distributed"
    if mode not in ("centralized", "distributed"):
        raise ScenarioError(f"joint --mode must be centralized or distributed, got {mode!r}")
    providers = _joint_providers(s)
    if mode == "centralized":
        res = solve_centralized(s.topology, providers)
    else:
        res = run_distributed(s.topology, providers)
    h = scn.scenario_hash(s)
    doc = {
        "command": "joint",
        "scenario_hash": h,
        "seed": s.sim.seed,
        "mode": mode,
        "service": s.service.value,
        "approximate": res.approximate,
        "objective": res.objective,
        "iterations": res.iterations,
        "converged": res.converged,
        "trace": res.trace,
        "as_policy": _policy_doc(res.as_policy),
        "ma_policies": [_policy_doc(p) for p in res.ma_policies] if s.topology.ma_capacities is not None else [],
        "latencies": res.latencies,
        "utilities": _utilities(s.classes, res.latencies),
    }
    if mode == "distributed":
        doc["objective_decreases"] = res.decreases
        doc["overhead"] = overhead_audit(res)
        if len(s.classes) > 1 and s.topology.ma_capacities is not None:
            doc["overhead_expected"] = expected_overhead(len(s.classes), s.topology.M, res.iterations)
        if res.approximate:
            central = solve_centralized(s.topology, providers)
            doc["centralized_objective"] = central.objective
            doc["gap_vs_centralized"] = abs(res.objective - central.objective) / abs(central.objective)
    _emit(_json(doc), args.out)
    if args.out is not None:
        trace = _csv(["iteration", "objective", "scenario_hash", "seed"],
                     [(i, v, h, s.sim.seed) for i, v in enumerate(res.trace)])
        Path(args.out).with_suffix(".trace.csv").write_text(trace)
    return EXIT_OK


@dataclasses.dataclass(frozen=True)
class _SubcarrierTask:
    s: scn.Scenario
    with_reference: bool


def _subcarrier_point(task: _SubcarrierTask) -> list[tuple[str, tuple, float]]:
    s = task.s
    topo, link = s.topology, s.link
    nmf = minimally_feasible(topo, link)
    rows = [("minimally-feasible", nmf.n, joint_value(topo, link, list(nmf.n), "io").objective)]
    ts = two_stage_pipeline(topo, link, s.service)
    rows.append(("two-stage", ts.assignment.n, ts.objective))
    if task.with_reference:
        start = None
        if reference_sized(topo, link):
            start = exact_reference(topo, link, "integer", s.service)
            rows.append(("integer-reference", start.assignment.n, start.objective))
        rel = exact_reference(topo, link, "relaxed", s.service, start=start)
        rows.append(("relaxed-bound", rel.assignment.n, rel.objective))
    return rows


def cmd_subcarrier(args) -> int:
    s = _load(args)
    if s.link is None:
        raise ScenarioError("subcarrier needs topology.link")
    mode = args.mode or "full"
    if mode not in ("full", "greedy"):
        raise ScenarioError(f"subcarrier --mode must be full or greedy, got {mode!r}")
    if s.smart_metering is not None:
        rng = _sweep_arg(args, "esm", s.smart_metering.sweep_esm_share)
        points = [s] if rng is None else [s.with_esm_share(v) for v in scn.sweep_values(*rng)]
    else:
        if args.sweep is not None:
            raise ScenarioError("--sweep esm=... needs a smart_metering scenario")
        points = [s]
    for p in points:  # fail fast (exit 4) before the pool starts
        minimally_feasible(p.topology, p.link)
    results = ordered_map(_subcarrier_point, [_SubcarrierTask(p, mode == "full") for p in points])
    M = s.topology.M
    h = scn.scenario_hash(s)
    header = ["esm_share", "method"] + [f"n_{k}" for k in range(1, M + 1)] + ["objective", "scale_factor",
                                                                               "scenario_hash", "seed"]
    rows = []
    for p, res in zip(points, results):
        e = p.esm_point if p.esm_point is not None else float("nan")
        for method, n, obj in res:
            rows.append([e, method] + [float(x) if isinstance(x, (float, np.floating)) else int(x) for x in n]
                        + [obj, s.scale, h, s.sim.seed])
    _emit(_csv(header, rows), args.out)
    return EXIT_OK


def _compare_task(p: ComparePoint):
    return compare_point(p)


def cmd_compare(args) -> int:
    s = _load(args)
    R = len(s.classes)
    labels = scheduler_labels(R)
    only = None
    if args.mode not in (None, "all"):
        if args.mode not in labels:
            raise ScenarioError(f"compare --mode must be all or one of {', '.join(labels)}")
        only = (args.mode,)
    rng = _sweep_arg(args, "lambda1", s.sweep_lambda1)
    lams = [s.classes[0].lam] if rng is None else scn.sweep_values(*rng)
    points = [s.with_lambda1(l) for l in lams]
    tasks, task_lam = [], []
    for lam, p in zip(lams, points):
        for lab in (labels if only is None else only):
            tasks.append(ComparePoint(p.classes, p.topology.as_capacity, s.service.value, s.sim.seed,
                                      s.sim.horizon_packets, s.sim.warmup_packets, s.sim.epoch, only=(lab,)))
            task_lam.append(lam)
    results = ordered_map(_compare_task, tasks)
    h = scn.scenario_hash(s)
    ids = [c.id for c in s.classes]
    header = (["lambda1", "scheduler", "system_utility", "utility_ci_lo", "utility_ci_hi", "analytic_utility"]
              + [f"mean_{i}" for i in ids] + [f"var_{i}" for i in ids] + [f"ci_{i}" for i in ids]
              + ["scenario_hash", "seed", "horizon_packets"])
    rows = []
    for lam, task, res in zip(task_lam, tasks, results):
        for label, r, an in res:
            lo, hi = r.utility_ci(task.classes)
            rows.append([lam, label, r.system_log_utility, lo, hi, an]
                        + [r.mean[i] for i in ids] + [r.variance[i] for i in ids] + [r.ci[i] for i in ids]
                        + [h, s.sim.seed, s.sim.horizon_packets])
    _emit(_csv(header, rows), args.out)
    return EXIT_OK


def cmd_audit(args) -> int:
    s = _load(args)
    R, M = len(s.classes), s.topology.M
    top = max(AUDIT_MAX_R, R)
    h = scn.scenario_hash(s)
    header = ["R", "M", "sso_equations", "io_max_equations", "io_subproblems", "N_R", "N1", "N2", "N2_over_N1",
              "scenario_R", "scenario_hash"]
    rows = []
    for r in range(2, top + 1):
        c = complexity_report(r, M)
        rows.append([r, M, c["sso_eqs"], c["io_max_eqs"], c["io_subproblem_count"], c["N_R"], c["N1"], c["N2"],
                     c["N2_over_N1"], "yes" if r == R else "no", h])
    _emit(_csv(header, rows), args.out)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "joint": cmd_joint, "subcarrier": cmd_subcarrier, "compare": cmd_compare,
            "audit": cmd_audit}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2msched", description="Delay-optimal multiclass scheduling for M2M uplinks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "optimal AS time-sharing policy (--mode io|sso)",
        "joint": "joint MA and AS scheduling (--mode distributed|centralized)",
        "subcarrier": "subcarrier assignment sweep (--mode full|greedy, --sweep esm=a:step:b)",
        "compare": "simulate proposed vs baseline schedulers (--mode all|LABEL, --sweep lambda1=a:step:b)",
        "audit": "complexity and overhead table",
    }
    for name, text in helps.items():
        c = sub.add_parser(name, help=text, description=text)
        c.add_argument("--scenario", required=True, help="scenario JSON file")
        c.add_argument("--mode", default=None)
        c.add_argument("--sweep", default=None, help="name=start:step:stop (inclusive)")
        c.add_argument("--out", default=None, help="output file (default stdout)")
        c.add_argument("--seed", type=int, default=None, help="override sim.seed")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InfeasibleError as e:
        print(f"m2msched: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ScenarioError as e:
        print(f"m2msched: input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ConvergenceError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"m2msched: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
