"""Experiment routines shared by the CLI and the acceptance tests."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .core import PriorityOrder, QosClass, ServiceKind, TimeSharingPolicy, Topology
from .queueing import ClosedFormLatency
from .schedopt import OptimizerReport, solve_io, solve_sso
from .simkit import FixedPriority, MaxWeight, PriorityLevels, SimResult, TimeSharing, WFS, WRR, simulate_node
from .simkit.weights import derive_baseline_weights


def worker_count(n_tasks: int) -> int:
    """Pool size: M2MSCHED_THREADS if set, else the CPU count, never above the task count."""
    cap = os.environ.get("M2MSCHED_THREADS", "")
    limit = int(cap) if cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(n_tasks, limit))


def ordered_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Map in a process pool; results come back in input order."""
    workers = worker_count(len(items)) if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def solve_as(classes: Sequence[QosClass], capacity: float, kind: ServiceKind | str, mode: str = "io"):
    """Optimal AS time-sharing policy; returns (report, tree or None)."""
    topo = Topology.single_node(classes, capacity)
    provider = ClosedFormLatency.for_as(topo, kind)
    if len(classes) == 1:
        order = PriorityOrder((1,))
        lat = {1: provider.latency(1, frozenset())}
        from .schedopt import block_objective_value

        rep = OptimizerReport(TimeSharingPolicy.fixed(order), lat, dict(lat), block_objective_value(classes, lat),
                              0, 0.0, ())
        return rep, None
    if mode == "sso":
        return solve_sso(classes, provider), None
    tree, rep = solve_io(classes, provider)
    return rep, tree


def baseline_specs(classes: Sequence[QosClass], policy: TimeSharingPolicy, epoch: float | None = None,
                   fifo_levels: bool = False) -> list:
    """Proposed scheduler first, then WRR, WFS, max-weight and priority-to-i.

    priority-to-i is the strict order i, then the rest by ascending id. With
    ``fifo_levels`` the variants that serve the rest FIFO at one level are
    appended as well.
    """
    w = derive_baseline_weights(classes)
    R = len(classes)
    specs = [TimeSharing(policy, epoch), WRR(tuple(w["wrr"])), WFS(tuple(w["wfs"])), MaxWeight()]
    specs += [FixedPriority.priority_to(i, R) for i in range(1, R + 1)]
    if fifo_levels:
        specs += [PriorityLevels.priority_to(i, R) for i in range(1, R + 1)]
    return specs


@dataclass(frozen=True)
class ComparePoint:
    classes: tuple[QosClass, ...]
    capacity: float
    kind: str
    seed: int
    horizon: int
    warmup: int | None
    epoch: float | None
    mode: str = "io"
    fifo_levels: bool = False
    only: tuple[str, ...] | None = None  # scheduler labels to run; None runs all


def scheduler_labels(R: int, fifo_levels: bool = False) -> list[str]:
    out = ["proposed", "wrr", "wfs", "max-weight"] + [f"priority-to-{i}" for i in range(1, R + 1)]
    if fifo_levels:
        out += [f"priority-to-{i}-fifo" for i in range(1, R + 1)]
    return out


def compare_point(p: ComparePoint) -> list[tuple[str, SimResult, float]]:
    """Simulate the schedulers on one scenario with common random numbers.

    Returns (label, result, analytic objective or nan) per scheduler, in
    ``scheduler_labels`` order.
    """
    rep, _ = solve_as(p.classes, p.capacity, p.kind, p.mode)
    out = []
    for spec in baseline_specs(p.classes, rep.policy, p.epoch, p.fifo_levels):
        if p.only is not None and spec.label not in p.only:
            continue
        r = simulate_node(p.classes, p.kind, spec, seed=p.seed, horizon=p.horizon, warmup=p.warmup,
                          capacity=p.capacity, preemptive=True)
        out.append((spec.label, r, rep.objective if spec.label == "proposed" else float("nan")))
    return out


def with_lambda1(classes: Sequence[QosClass], lam1: float) -> tuple[QosClass, ...]:
    c0 = classes[0]
    return (QosClass(1, lam1, c0.packet_size, c0.a, c0.b, c0.beta),) + tuple(classes[1:])
