"""Scheduler specifications and their runtime state machines.

A spec is an immutable description (what the CLI and tests build); a
runtime object is created per simulation run and is driven by the engine
through four hooks: ``choose``, ``outranks``, ``on_arrival`` / ``on_start``
and, for time-sharing, ``next_switch`` / ``switch``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..core import PriorityOrder, ScenarioError, TimeSharingPolicy

INF = math.inf


@dataclass(frozen=True)
class FixedPriority:
    order: PriorityOrder
    preemptive: bool | None = None  # None: node default (AS preemptive, MA not)
    name: str | None = None

    @classmethod
    def priority_to(cls, top: int, R: int, preemptive: bool | None = None) -> "FixedPriority":
        """Class ``top`` first, the others in ascending id order."""
        rest = tuple(c for c in range(1, R + 1) if c != top)
        return cls(PriorityOrder((top,) + rest), preemptive, f"priority-to-{top}")

    @property
    def label(self) -> str:
        return self.name or f"priority-{self.order}"


@dataclass(frozen=True)
class PriorityLevels:
    """Strict priority between levels, FIFO across the classes of a level."""

    levels: tuple[tuple[int, ...], ...]
    preemptive: bool | None = None
    name: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(tuple(l) for l in self.levels))
        flat = [c for l in self.levels for c in l]
        if sorted(flat) != list(range(1, len(flat) + 1)) or any(not l for l in self.levels):
            raise ScenarioError(f"levels must partition classes 1..R, got {self.levels}")

    @classmethod
    def priority_to(cls, top: int, R: int, preemptive: bool | None = None) -> "PriorityLevels":
        rest = tuple(c for c in range(1, R + 1) if c != top)
        return cls(((top,), rest) if rest else ((top,),), preemptive, f"priority-to-{top}-fifo")

    @property
    def label(self) -> str:
        return self.name or "levels-" + "|".join("".join(map(str, l)) for l in self.levels)


@dataclass(frozen=True)
class TimeSharing:
    policy: TimeSharingPolicy
    epoch: float | None = None  # seconds; None = 200 mean service times
    preemptive: bool | None = None
    mode: str = "epoch"  # or "busy-period" (random order drawn per busy period)

    def __post_init__(self) -> None:
        if self.mode not in ("epoch", "busy-period"):
            raise ScenarioError(f"unknown time-sharing mode {self.mode!r}")
        if self.epoch is not None and not self.epoch > 0:
            raise ScenarioError("epoch must be positive")

    @property
    def label(self) -> str:
        return "proposed"


@dataclass(frozen=True)
class WRR:
    weights: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.weights or any(int(w) != w or w <= 0 for w in self.weights):
            raise ScenarioError(f"WRR weights must be positive integers, got {self.weights}")
        object.__setattr__(self, "weights", tuple(int(w) for w in self.weights))

    preemptive = False
    label = "wrr"


@dataclass(frozen=True)
class WFS:
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.weights or any(not (w > 0) for w in self.weights):
            raise ScenarioError(f"WFS weights must be positive, got {self.weights}")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    preemptive = False
    label = "wfs"


@dataclass(frozen=True)
class MaxWeight:
    measure: str = "packets"  # or "bytes"

    def __post_init__(self) -> None:
        if self.measure not in ("packets", "bytes"):
            raise ScenarioError(f"unknown max-weight measure {self.measure!r}")

    preemptive = False
    label = "max-weight"


SchedulerSpec = FixedPriority | PriorityLevels | TimeSharing | WRR | WFS | MaxWeight


class _Runtime:
    preemptive = False
    next_switch = INF

    def on_arrival(self, cls: int, pkt: int, t: float, idle: bool) -> None:
        pass

    def on_start(self, cls: int, pkt: int) -> None:
        pass

    def outranks(self, new: int, serving: int) -> bool:
        return False


class _Priority(_Runtime):
    def __init__(self, order: PriorityOrder, preemptive: bool):
        self.preemptive = preemptive
        self.set_order(order.perm)

    def set_order(self, perm: Sequence[int]) -> None:
        self.perm = tuple(perm)
        self.rank = {c: r for r, c in enumerate(perm)}

    def choose(self, queues) -> int:
        for c in self.perm:
            if queues[c]:
                return c
        raise RuntimeError("choose called with empty queues")

    def outranks(self, new: int, serving: int) -> bool:
        return self.rank[new] < self.rank[serving]


class _Levels(_Runtime):
    def __init__(self, levels, preemptive: bool):
        self.preemptive = preemptive
        self.levels = levels
        self.rank = {c: r for r, l in enumerate(levels) for c in l}

    def choose(self, queues) -> int:
        for level in self.levels:
            best, head = -1, None
            for c in level:
                q = queues[c]
                if q and (head is None or q[0] < head):
                    best, head = c, q[0]
            if best >= 0:
                return best
        raise RuntimeError("choose called with empty queues")

    def outranks(self, new: int, serving: int) -> bool:
        return self.rank[new] < self.rank[serving]


class _TimeShare(_Priority):
    """Priority service whose active order follows a largest-remainder
    schedule over epochs (or a random draw per busy period)."""

    def __init__(self, spec: TimeSharing, preemptive: bool, epoch: float, rng: np.random.Generator):
        self.orders = [o for o in spec.policy.gamma if spec.policy.gamma[o] > 0]
        self.orders.sort(key=lambda o: o.perm)
        g = np.array([spec.policy.gamma[o] for o in self.orders])
        self.gamma = g / g.sum()
        self.counts = np.zeros(len(self.orders))
        self.busy = np.zeros(len(self.orders))
        self.epoch = epoch
        self.mode = spec.mode
        self.rng = rng
        self.k = 0
        super().__init__(self.orders[0], preemptive)
        self.active = 0
        if self.mode == "epoch":
            self._advance()
            self.next_switch = epoch if len(self.orders) > 1 else INF

    def _advance(self) -> None:
        deficit = self.gamma * (self.k + 1) - self.counts
        j = int(np.argmax(deficit))
        self.counts[j] += 1
        self.k += 1
        self.active = j
        self.set_order(self.orders[j].perm)

    def switch(self, t: float) -> None:
        self._advance()
        self.next_switch = t + self.epoch

    def on_arrival(self, cls, pkt, t, idle) -> None:
        if idle and self.mode == "busy-period":
            j = int(self.rng.choice(len(self.orders), p=self.gamma))
            self.active = j
            self.set_order(self.orders[j].perm)

    def account(self, dt: float) -> None:
        self.busy[self.active] += dt

    def fractions(self) -> dict[str, float]:
        total = self.busy.sum()
        return {str(o): float(b / total) if total > 0 else 0.0 for o, b in zip(self.orders, self.busy)}


class _WRR(_Runtime):
    def __init__(self, weights: Sequence[int], ids: Sequence[int]):
        self.ids = tuple(ids)
        self.w = tuple(weights)
        self.ptr = 0
        self.quota = self.w[0]

    def choose(self, queues) -> int:
        R = len(self.ids)
        for _ in range(2 * R + 1):
            c = self.ids[self.ptr]
            if self.quota > 0 and queues[c]:
                self.quota -= 1
                return c
            self.ptr = (self.ptr + 1) % R
            self.quota = self.w[self.ptr]
        raise RuntimeError("choose called with empty queues")


class _WFS(_Runtime):
    """Self-clocked fair queueing: finish tag = max(last tag of class,
    tag in service) + service time / weight; smallest head tag served."""

    def __init__(self, weights: Sequence[float], ids: Sequence[int], work: Sequence[float]):
        self.ids = tuple(ids)
        self.w = dict(zip(ids, weights))
        self.work = work
        self.tag: dict[int, float] = {}
        self.last = {c: 0.0 for c in ids}
        self.vtime = 0.0

    def on_arrival(self, cls, pkt, t, idle) -> None:
        if idle:
            self.vtime = 0.0
            for c in self.last:
                self.last[c] = 0.0
        f = max(self.last[cls], self.vtime) + self.work[pkt] / self.w[cls]
        self.last[cls] = f
        self.tag[pkt] = f

    def on_start(self, cls, pkt) -> None:
        self.vtime = self.tag.pop(pkt)

    def choose(self, queues) -> int:
        best, best_tag = -1, INF
        for c in self.ids:
            q = queues[c]
            if q:
                f = self.tag[q[0]]
                if f < best_tag:
                    best, best_tag = c, f
        return best


class _MaxWeight(_Runtime):
    def __init__(self, ids: Sequence[int], scale: Mapping[int, float]):
        self.ids = tuple(ids)
        self.scale = dict(scale)

    def choose(self, queues) -> int:
        best, best_val = -1, -1.0
        for c in self.ids:
            v = len(queues[c]) * self.scale[c]
            if v > best_val:
                best, best_val = c, v
        return best


def build_runtime(spec, ids: Sequence[int], node_preemptive: bool, work, sizes: Mapping[int, float],
                  mean_service: float, rng: np.random.Generator) -> _Runtime:
    """Instantiate the per-run state machine for ``spec`` at one node."""
    if isinstance(spec, FixedPriority):
        pre = node_preemptive if spec.preemptive is None else spec.preemptive
        return _Priority(spec.order, pre)
    if isinstance(spec, PriorityLevels):
        pre = node_preemptive if spec.preemptive is None else spec.preemptive
        return _Levels(spec.levels, pre)
    if isinstance(spec, TimeSharing):
        pre = node_preemptive if spec.preemptive is None else spec.preemptive
        epoch = spec.epoch if spec.epoch is not None else 200.0 * mean_service
        return _TimeShare(spec, pre, epoch, rng)
    if isinstance(spec, WRR):
        _check_len(spec.weights, ids)
        return _WRR(spec.weights, ids)
    if isinstance(spec, WFS):
        _check_len(spec.weights, ids)
        return _WFS(spec.weights, ids, work)
    if isinstance(spec, MaxWeight):
        scale = {c: (sizes[c] if spec.measure == "bytes" else 1.0) for c in ids}
        return _MaxWeight(ids, scale)
    raise ScenarioError(f"unknown scheduler spec {spec!r}")


def _check_len(weights, ids) -> None:
    if len(weights) != len(ids):
        raise ScenarioError(f"need {len(ids)} weights, got {len(weights)}")
