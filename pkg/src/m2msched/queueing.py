"""Closed-form mean sojourn times for priority queues and their
time-sharing mixtures.

A class's latency under strict priority depends only on the set of classes
above it, so every formula here is keyed by ``(cls, higher)``. Residual
terms use E[S^2] and cover deterministic and exponential service alike.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import (
    PriorityOrder,
    ServiceKind,
    ServiceModel,
    TimeSharingPolicy,
    Topology,
    UnstableError,
    enumerate_priority_orders,
)

SINGULAR_GUARD = 1e-9


def _rho(arrivals: Mapping[int, float], services: Mapping[int, ServiceModel], i: int) -> float:
    return arrivals[i] / services[i].rate


def _residual(arrivals, services, ids: Iterable[int]) -> float:
    # sum of lambda_k E[S_k^2] / 2
    return sum(arrivals[k] * services[k].second_moment / 2.0 for k in ids)


def latency_given_higher(
    cls: int,
    higher: Iterable[int],
    arrivals: Mapping[int, float],
    services: Mapping[int, ServiceModel],
    preemptive: bool = True,
) -> float:
    """Mean sojourn time of ``cls`` with exactly ``higher`` above it."""
    higher = frozenset(higher)
    rho_h = 1.0 - sum(_rho(arrivals, services, m) for m in higher)
    rho_i = _rho(arrivals, services, cls)
    gap = rho_h - rho_i
    if rho_h < SINGULAR_GUARD or gap < SINGULAR_GUARD:
        raise UnstableError(f"unstable at this priority level: class {cls} above-set {sorted(higher)} "
                            f"leaves {gap:.3g} utilization")
    mu = services[cls].rate
    if preemptive:
        d = _residual(arrivals, services, higher | {cls})
        return (d + gap / mu) / (rho_h * gap)
    d = _residual(arrivals, services, services.keys())
    return 1.0 / mu + d / (rho_h * gap)


def preemptive_priority_latency(
    arrivals: Mapping[int, float], services: Mapping[int, ServiceModel], order: PriorityOrder
) -> dict[int, float]:
    """Per-class latency under preemptive-resume priority ``order``."""
    return {i: latency_given_higher(i, order.higher_set(i), arrivals, services, True) for i in order.perm}


def nonpreemptive_priority_latency(
    arrivals: Mapping[int, float], services: Mapping[int, ServiceModel], order: PriorityOrder
) -> dict[int, float]:
    """Per-class latency under non-preemptive priority ``order`` (MA side)."""
    return {i: latency_given_higher(i, order.higher_set(i), arrivals, services, False) for i in order.perm}


def literal_companion_latency(
    i: int, j: int, higher: Iterable[int], arrivals, services
) -> float:
    """Two-class companion latency exactly as printed in the source text.

    Kept only so regression tests can show it disagrees with simulation;
    the solvers use :func:`latency_given_higher` with ``higher | {j}``.
    """
    higher = frozenset(higher)
    rho_r = 1.0 - sum(_rho(arrivals, services, m) for m in higher)
    rho_i = _rho(arrivals, services, i)
    rho_j = _rho(arrivals, services, j)
    d = _residual(arrivals, services, higher | {i})
    mu_i, mu_j = services[i].rate, services[j].rate
    return (d + rho_j / mu_j + rho_r / mu_i) / (rho_r * (rho_r + rho_i))


class LatencyProvider(Protocol):
    """Anything that can report l(cls | higher) at one node."""

    ids: tuple[int, ...]

    def latency(self, cls: int, higher: frozenset[int]) -> float: ...


class ClosedFormLatency:
    """M/G/1 priority formulas (preemptive at the AS, non-preemptive at MAs)."""

    def __init__(self, arrivals: Mapping[int, float], services: Mapping[int, ServiceModel], preemptive: bool = True):
        self.arrivals = dict(arrivals)
        self.services = dict(services)
        self.preemptive = preemptive
        self.ids = tuple(sorted(self.arrivals))
        self._cache: dict[tuple[int, frozenset[int]], float] = {}

    @classmethod
    def for_as(cls, topology: Topology, kind: ServiceKind | str) -> "ClosedFormLatency":
        return cls(topology.as_arrivals(), topology.as_services(kind), preemptive=True)

    @classmethod
    def for_ma(cls, topology: Topology, k: int, kind: ServiceKind | str) -> "ClosedFormLatency":
        return cls(topology.ma_arrivals(k), topology.ma_services(k, kind), preemptive=False)

    def latency(self, cls: int, higher: frozenset[int]) -> float:
        key = (cls, frozenset(higher))
        val = self._cache.get(key)
        if val is None:
            val = latency_given_higher(cls, key[1], self.arrivals, self.services, self.preemptive)
            self._cache[key] = val
        return val

    def load(self) -> float:
        return sum(_rho(self.arrivals, self.services, i) for i in self.ids)


class ZeroLatency:
    """Ideal node: contributes nothing regardless of order."""

    def __init__(self, ids: Sequence[int]):
        self.ids = tuple(ids)

    def latency(self, cls: int, higher: frozenset[int]) -> float:
        return 0.0


class CachedLatency:
    """Provider backed by an expensive per-order estimator, write-once cache.

    ``estimate(order)`` returns a per-class latency map for a full fixed
    order. ``(cls, higher)`` queries are served from the canonical order
    ``sorted(higher), cls, sorted(rest)``. Safe to share across threads.
    """

    def __init__(self, ids: Sequence[int], estimate: Callable[[PriorityOrder], Mapping[int, float]],
                 key: Hashable = None):
        self.ids = tuple(ids)
        self._estimate = estimate
        self._key = key
        self._cache: dict[tuple, dict[int, float]] = {}
        self._lock = threading.Lock()
        self.misses = 0

    def canonical_order(self, cls: int, higher: frozenset[int]) -> PriorityOrder:
        rest = sorted(set(self.ids) - set(higher) - {cls})
        return PriorityOrder(tuple(sorted(higher)) + (cls,) + tuple(rest))

    def per_order(self, order: PriorityOrder) -> dict[int, float]:
        key = (self._key, order.perm)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        value = dict(self._estimate(order))
        with self._lock:
            if key not in self._cache:
                self._cache[key] = value
                self.misses += 1
            return self._cache[key]

    def latency(self, cls: int, higher: frozenset[int]) -> float:
        return self.per_order(self.canonical_order(cls, frozenset(higher)))[cls]


@dataclass(frozen=True)
class LatencyMatrix:
    """``values[r, j]``: latency of class ``ids[r]`` under context ``contexts[j]``."""

    ids: tuple[int, ...]
    contexts: tuple
    values: np.ndarray

    def column(self, context) -> dict[int, float]:
        j = self.contexts.index(context)
        return {i: float(self.values[r, j]) for r, i in enumerate(self.ids)}

    def row(self, cls: int) -> np.ndarray:
        return self.values[self.ids.index(cls)]


def order_latency_matrix(provider: LatencyProvider, orders: Sequence[PriorityOrder] | None = None) -> LatencyMatrix:
    """l_{i,j} for every class and every order (columns in lexicographic order)."""
    ids = tuple(provider.ids)
    if orders is None:
        orders = enumerate_priority_orders(len(ids))
    vals = np.empty((len(ids), len(orders)))
    for j, o in enumerate(orders):
        for r, i in enumerate(ids):
            vals[r, j] = provider.latency(i, o.higher_set(i))
    return LatencyMatrix(ids, tuple(orders), vals)


def timeshare_latency(per_order: LatencyMatrix, policy: TimeSharingPolicy) -> dict[int, float]:
    """Convex combination sum_j gamma_j l_{i,j}."""
    out = np.zeros(len(per_order.ids))
    for order, g in policy.gamma.items():
        if g == 0:
            continue
        if order not in per_order.contexts:
            raise KeyError(f"order {order} missing from latency matrix")
        out += g * per_order.values[:, per_order.contexts.index(order)]
    return {i: float(out[r]) for r, i in enumerate(per_order.ids)}


def io_context_latencies(
    subset: Iterable[int], higher: Iterable[int], provider: LatencyProvider
) -> tuple[dict[int, float], dict[tuple[int, int], float]]:
    """Latency of each class when it tops ``subset`` (with ``higher`` above all).

    For a two-class subset the companion latencies l*_{i,j} (class ``i``
    below ``j``) are returned as well, keyed ``(i, j)``; otherwise empty.
    """
    subset = frozenset(subset)
    higher = frozenset(higher)
    top = {i: provider.latency(i, higher) for i in sorted(subset)}
    companion: dict[tuple[int, int], float] = {}
    if len(subset) == 2:
        i, j = sorted(subset)
        companion[(i, j)] = provider.latency(i, higher | {j})
        companion[(j, i)] = provider.latency(j, higher | {i})
    return top, companion
