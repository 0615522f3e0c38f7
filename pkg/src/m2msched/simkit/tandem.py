"""Aggregators feeding the application server.

Aggregators never see feedback from the server, so each MA is simulated
on its own and the merged departures become the server's arrival stream.
MA k is node k, the server is node 0; every (node, class) pair has its
own random streams.
"""

from __future__ import annotations

from typing import IO, Sequence

import numpy as np

from ..core import ServiceKind, Topology
from .engine import (
    _ARRIVALS,
    _SERVICE,
    analytic_delay_bound,
    check_stable,
    merge,
    plan_horizon,
    poisson_times,
    run_node,
    service_times,
    stream,
)
from .stats import SimResult, summarize


def _ma_stream(topology: Topology, k: int, seed: int, t_gen: float):
    ts, cs = [], []
    for c in topology.classes:
        t = poisson_times(stream(seed, k, c.id, _ARRIVALS), topology.lam_ik(c.id, k), t_gen)
        ts.append(t)
        cs.append(np.full(len(t), c.id, dtype=np.int64))
    return merge(ts, cs)


def _work(topology: Topology, node: int, cls: np.ndarray, services, seed: int) -> np.ndarray:
    work = np.empty(len(cls))
    for c in topology.classes:
        mask = cls == c.id
        work[mask] = service_times(stream(seed, node, c.id, _SERVICE), services[c.id], int(mask.sum()))
    return work


def simulate_tandem(topology: Topology, ma_schedulers: Sequence, as_scheduler, seed: int = 0,
                    horizon: int = 1_000_000, warmup: int | None = None,
                    service: ServiceKind | str = ServiceKind.EXPONENTIAL,
                    trace: IO[str] | None = None, keep_arrivals: bool = False,
                    keep_delays: bool = False) -> SimResult:
    """End-to-end delays (MA sojourn + AS sojourn) for every class.

    ``ma_schedulers[k-1]`` runs at MA k without preemption; ideal MAs
    (no capacity) forward packets instantly. ``extra`` carries the mean
    MA and AS components of each class's delay.
    """
    kind = ServiceKind(service)
    ids = list(topology.ids)
    sizes = {c.id: c.packet_size for c in topology.classes}
    check_stable(topology.as_load(), "AS")
    bound = analytic_delay_bound(topology.classes, topology.as_services(kind))
    ideal = topology.ma_capacities is None
    if not ideal:
        for k in range(1, topology.M + 1):
            check_stable(topology.ma_load(k), f"MA {k}")
            bound += analytic_delay_bound(topology.classes, topology.ma_services(k, kind), topology.ma_arrivals(k))
    total = sum(c.lam for c in topology.classes)
    t_warm, t_end, t_gen = plan_horizon(total, horizon, warmup, bound)

    origins, deps, classes = [], [], []
    for k in range(1, topology.M + 1):
        arr_t, arr_c = _ma_stream(topology, k, seed, t_gen)
        if ideal:
            dep = arr_t.copy()
        else:
            work = _work(topology, k, arr_c, topology.ma_services(k, kind), seed)
            dep = run_node(arr_t, arr_c, work, ids, ma_schedulers[k - 1], False, sizes,
                           seed=seed, node=k, trace=trace).departures
        origins.append(arr_t)
        deps.append(dep)
        classes.append(arr_c)
    as_t, as_c, origin = merge(deps, classes, origins)
    as_work = _work(topology, 0, as_c, topology.as_services(kind), seed)
    run = run_node(as_t, as_c, as_work, ids, as_scheduler, True, sizes, seed=seed, node=0, trace=trace)
    e2e = run.departures - origin
    window = (origin >= t_warm) & (origin < t_end)
    extra = {"ma_delay": {}, "as_delay": {}}
    for c in ids:
        m = window & (as_c == c)
        extra["ma_delay"][c] = float(np.mean(as_t[m] - origin[m]))
        extra["as_delay"][c] = float(np.mean(run.departures[m] - as_t[m]))
    if keep_arrivals:
        extra["as_arrivals"] = (as_t, as_c)
    return summarize(topology.classes, origin, as_c, e2e, t_warm, t_end, seed,
                     order_fractions=run.order_fractions, keep_delays=keep_delays, extra=extra)


class AsStream:
    """Server input produced by the MAs under fixed policies.

    The MA stage is simulated once; ``estimate(order)`` then replays the
    same server arrivals and service draws under a strict preemptive order
    and returns the mean server sojourn per class (common random numbers
    across orders).
    """

    def __init__(self, topology: Topology, ma_policies, seed: int = 0, horizon: int = 200_000,
                 service: ServiceKind | str = ServiceKind.DETERMINISTIC):
        from .schedulers import TimeSharing

        self.topology = topology
        kind = ServiceKind(service)
        ids = list(topology.ids)
        sizes = {c.id: c.packet_size for c in topology.classes}
        bound = analytic_delay_bound(topology.classes, topology.as_services(kind))
        total = sum(c.lam for c in topology.classes)
        t_warm, t_end, t_gen = plan_horizon(total, horizon, None, bound)
        deps, classes = [], []
        for k in range(1, topology.M + 1):
            arr_t, arr_c = _ma_stream(topology, k, seed, t_gen)
            if topology.ma_capacities is None:
                dep = arr_t.copy()
            else:
                work = _work(topology, k, arr_c, topology.ma_services(k, kind), seed)
                dep = run_node(arr_t, arr_c, work, ids, TimeSharing(ma_policies[k - 1]), False, sizes,
                               seed=seed, node=k).departures
            deps.append(dep)
            classes.append(arr_c)
        self.as_t, self.as_c = merge(deps, classes)
        self.work = _work(topology, 0, self.as_c, topology.as_services(kind), seed)
        self.window = (self.as_t >= t_warm) & (self.as_t < t_end)
        self.sizes = sizes
        self.seed = seed

    def estimate(self, order) -> dict[int, float]:
        from .schedulers import FixedPriority

        ids = list(self.topology.ids)
        run = run_node(self.as_t, self.as_c, self.work, ids, FixedPriority(order, True), True, self.sizes,
                       seed=self.seed, node=0)
        soj = run.departures - self.as_t
        return {c: float(np.mean(soj[self.window & (self.as_c == c)])) for c in ids}
