"""Single-server discrete-event engine.

Arrivals are pre-generated per class from independent counter-based
streams and merged, so the engine only compares three clocks: the next
arrival, the completion of the packet in service and the next scheduler
switch. Ties go arrival-last: a completion or switch at the same instant
as an arrival is handled first.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np

from ..core import QosClass, ScenarioError, ServiceKind, ServiceModel, UnstableError
from ..queueing import latency_given_higher
from .schedulers import build_runtime
from .stats import SimResult, summarize

INF = math.inf
QUEUE_LIMIT = 2_000_000
WARMUP_MIN_PACKETS = 10_000
WARMUP_DELAY_FACTOR = 50.0

# stream purposes
_ARRIVALS, _SERVICE, _SCHED = 0, 1, 2


def stream(seed: int, node: int, cls: int, purpose: int) -> np.random.Generator:
    """Independent Philox stream per (seed, node, class, purpose)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), node, cls, purpose])))


def poisson_times(rng: np.random.Generator, lam: float, t_end: float) -> np.ndarray:
    if lam <= 0:
        return np.empty(0)
    n = int(lam * t_end + 8 * math.sqrt(lam * t_end) + 32)
    t = np.cumsum(rng.exponential(1.0 / lam, n))
    while t[-1] < t_end:
        more = np.cumsum(rng.exponential(1.0 / lam, n)) + t[-1]
        t = np.concatenate([t, more])
    return t[t < t_end]


def service_times(rng: np.random.Generator, model: ServiceModel, n: int) -> np.ndarray:
    if model.kind is ServiceKind.DETERMINISTIC:
        return np.full(n, model.mean)
    return rng.exponential(model.mean, n)


@dataclass
class NodeRun:
    """Raw output of one node: departure time per input packet."""

    departures: np.ndarray
    order_fractions: dict[str, float] = field(default_factory=dict)
    busy_time: float = 0.0


def run_node(arr_t: np.ndarray, arr_c: np.ndarray, work: np.ndarray, ids: Sequence[int], spec,
             node_preemptive: bool, sizes: Mapping[int, float], seed: int = 0, node: int = 0,
             trace: IO[str] | None = None) -> NodeRun:
    """Serve a merged arrival sequence under ``spec``; returns departures."""
    n = len(arr_t)
    dep = np.full(n, np.nan)
    if n == 0:
        return NodeRun(dep)
    mean_service = float(np.mean(work))
    times = arr_t.tolist()
    cls_of = arr_c.tolist()
    rem = work.tolist()
    sched = build_runtime(spec, ids, node_preemptive, rem, sizes, mean_service, stream(seed, node, 0, _SCHED))
    account = getattr(sched, "account", None)
    queues = {c: deque() for c in ids}
    backlog = 0
    preemptive = sched.preemptive
    out = dep  # numpy writes are fine at one per packet
    t = 0.0
    serving = -1
    s_cls = 0
    s_start = 0.0
    i = 0
    busy = 0.0

    def emit(kind: str, c: int) -> None:
        trace.write(f"{t:.9g} {kind} {node} {c} {backlog + (serving >= 0)}\n")

    while True:
        if i >= n and serving < 0 and not backlog:
            break
        t_arr = times[i] if i < n else INF
        t_dep = s_start + rem[serving] if serving >= 0 else INF
        t_sw = sched.next_switch
        if t_dep <= t_arr and t_dep <= t_sw:
            # completion
            dt = t_dep - s_start
            busy += dt
            if account:
                account(dt)
            t = t_dep
            out[serving] = t
            rem[serving] = 0.0
            serving = -1
            if trace:
                emit("DEP", s_cls)
        elif t_sw <= t_arr:
            if serving >= 0:
                dt = t_sw - s_start
                busy += dt
                rem[serving] -= dt
                s_start = t_sw
                if account:
                    account(dt)
            t = t_sw
            sched.switch(t)
            if trace:
                emit("SWITCH", 0)
            if serving >= 0 and preemptive and backlog:
                top = sched.choose(queues)
                if sched.outranks(top, s_cls):
                    queues[s_cls].appendleft(serving)
                    backlog += 1
                    serving = -1
                    if trace:
                        emit("PREEMPT", s_cls)
        else:
            # arrival
            if serving >= 0:
                dt = t_arr - s_start
                busy += dt
                rem[serving] -= dt
                s_start = t_arr
                if account:
                    account(dt)
            t = t_arr
            c = cls_of[i]
            sched.on_arrival(c, i, t, serving < 0 and backlog == 0)
            queues[c].append(i)
            backlog += 1
            i += 1
            if trace:
                emit("ARR", c)
            if serving >= 0 and preemptive and sched.outranks(c, s_cls):
                queues[s_cls].appendleft(serving)
                backlog += 1
                serving = -1
                if trace:
                    emit("PREEMPT", s_cls)
            if backlog > QUEUE_LIMIT:
                raise UnstableError(f"queue growth abort at node {node}: backlog {backlog} at t={t:.6g}")
        if serving < 0 and backlog:
            c = sched.choose(queues)
            serving = queues[c].popleft()
            backlog -= 1
            s_cls = c
            s_start = t
            sched.on_start(c, serving)
            if trace:
                emit("START", c)
    fr = sched.fractions() if hasattr(sched, "fractions") else {}
    return NodeRun(dep, fr, busy)


def analytic_delay_bound(classes: Sequence[QosClass], services: Mapping[int, ServiceModel],
                         arrivals: Mapping[int, float] | None = None) -> float:
    """Largest mean delay any class can see under a strict priority order."""
    arrivals = arrivals or {c.id: c.lam for c in classes}
    live = {i: lam for i, lam in arrivals.items() if lam > 0}
    if not live:
        return 0.0
    worst = 0.0
    for i in live:
        rest = frozenset(live) - {i}
        for pre in (True, False):
            worst = max(worst, latency_given_higher(i, rest, live, {k: services[k] for k in live}, pre))
    return worst


def check_stable(load: float, node: str) -> None:
    if load >= 1.0:
        raise UnstableError(f"{node} unstable: utilization {load:.6g} >= 1")


def plan_horizon(total_rate: float, horizon: int, warmup: int | None, max_delay: float) -> tuple[float, float, float]:
    """(t_warm, t_end, t_gen): measure arrivals in [t_warm, t_end)."""
    if warmup is None:
        warmup = max(WARMUP_MIN_PACKETS, int(math.ceil(WARMUP_DELAY_FACTOR * max_delay * total_rate)))
    t_warm = warmup / total_rate
    t_end = t_warm + horizon / total_rate
    tail = max(WARMUP_DELAY_FACTOR * max_delay, 1000.0 / total_rate)
    return t_warm, t_end, t_end + tail


def simulate_node(classes: Sequence[QosClass], service: ServiceModel | ServiceKind | str, scheduler,
                  seed: int = 0, horizon: int = 1_000_000, warmup: int | None = None,
                  capacity: float | None = None, preemptive: bool = True,
                  trace: IO[str] | None = None, keep_delays: bool = False) -> SimResult:
    """Simulate one queue fed by independent Poisson class streams.

    ``service`` is either a ServiceKind together with ``capacity`` (bits/s,
    rates derived from packet sizes) or a ServiceModel applied to all
    classes. ``horizon`` counts measured packets after warmup.
    """
    ids = [c.id for c in classes]
    services = _services(classes, service, capacity)
    load = sum(c.lam / services[c.id].rate for c in classes)
    check_stable(load, "node")
    total = sum(c.lam for c in classes)
    t_warm, t_end, t_gen = plan_horizon(total, horizon, warmup, analytic_delay_bound(classes, services))
    ts, cs, ws = [], [], []
    for c in classes:
        t = poisson_times(stream(seed, 0, c.id, _ARRIVALS), c.lam, t_gen)
        ts.append(t)
        cs.append(np.full(len(t), c.id, dtype=np.int64))
        ws.append(service_times(stream(seed, 0, c.id, _SERVICE), services[c.id], len(t)))
    arr_t, arr_c, work = merge(ts, cs, ws)
    run = run_node(arr_t, arr_c, work, ids, scheduler, preemptive, {c.id: c.packet_size for c in classes},
                   seed=seed, node=0, trace=trace)
    return summarize(classes, arr_t, arr_c, run.departures - arr_t, t_warm, t_end, seed,
                     order_fractions=run.order_fractions, keep_delays=keep_delays)


def merge(ts, cs, *extra):
    t = np.concatenate(ts) if ts else np.empty(0)
    idx = np.argsort(t, kind="stable")
    out = [t[idx], np.concatenate(cs)[idx]]
    out += [np.concatenate(e)[idx] for e in extra]
    return tuple(out)


def _services(classes, service, capacity) -> dict[int, ServiceModel]:
    if isinstance(service, ServiceModel):
        return {c.id: service for c in classes}
    if capacity is None:
        raise ScenarioError("capacity is required when service is given as a kind")
    return {c.id: ServiceModel.from_capacity(service, capacity, c.packet_size) for c in classes}
