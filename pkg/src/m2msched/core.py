"""Domain model shared by every module: traffic classes, service, priority
orders, time-sharing policies, topologies and the memoized alpha tree.

All public quantities use 1-based class ids. Sizes are bits, rates are
packets/second, capacities are bits/second.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

MAX_FACTORIAL_R = 8
STABILITY_MARGIN = 1e-6
SIMPLEX_TOL = 1e-9


class ScenarioError(ValueError):
    """Input that violates a model precondition."""


class UnstableError(ScenarioError):
    """Some queue has utilization at or beyond one."""


class ServiceKind(str, Enum):
    DETERMINISTIC = "deterministic"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class QosClass:
    """One traffic class.

    ``a`` is the utility roll-off (1/s), ``b`` the inflection latency (s) and
    ``beta`` the weight of the class in the system utility.
    """

    id: int
    lam: float
    packet_size: float
    a: float
    b: float
    beta: float

    def __post_init__(self) -> None:
        if self.id < 1:
            raise ScenarioError(f"class id must be >= 1, got {self.id}")
        for name in ("lam", "packet_size", "a", "b"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ScenarioError(f"class {self.id}: {name} must be positive, got {value}")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ScenarioError(f"class {self.id}: beta must be >= 0, got {self.beta}")

    @property
    def c(self) -> float:
        # (1 + e^{ab}) / e^{ab} written so that large ab cannot overflow
        return 1.0 + math.exp(-self.a * self.b)

    @property
    def d(self) -> float:
        return 1.0 / (1.0 + math.exp(self.a * self.b)) if self.a * self.b < 700 else 0.0


@dataclass(frozen=True)
class ServiceModel:
    kind: ServiceKind
    rate: float

    def __post_init__(self) -> None:
        if not (self.rate > 0):
            raise ScenarioError(f"service rate must be positive, got {self.rate}")

    @classmethod
    def from_capacity(cls, kind: ServiceKind | str, capacity: float, packet_size: float) -> "ServiceModel":
        return cls(ServiceKind(kind), capacity / packet_size)

    @property
    def mean(self) -> float:
        return 1.0 / self.rate

    @property
    def second_moment(self) -> float:
        factor = 1.0 if self.kind is ServiceKind.DETERMINISTIC else 2.0
        return factor / self.rate**2


@dataclass(frozen=True)
class PriorityOrder:
    """Strict preemption order; ``perm[0]`` has the highest priority."""

    perm: tuple[int, ...]

    def __post_init__(self) -> None:
        if sorted(self.perm) != list(range(1, len(self.perm) + 1)):
            raise ScenarioError(f"not a permutation: {self.perm}")

    def higher_set(self, cls: int) -> frozenset[int]:
        pos = self.perm.index(cls)
        return frozenset(self.perm[:pos])

    def rank(self, cls: int) -> int:
        return self.perm.index(cls)

    def __str__(self) -> str:
        return "".join(str(c) for c in self.perm) if len(self.perm) < 10 else "-".join(map(str, self.perm))


def enumerate_priority_orders(R: int) -> list[PriorityOrder]:
    """All R! orders of classes 1..R in lexicographic order."""
    if R < 1:
        raise ScenarioError("need at least one class")
    if R > MAX_FACTORIAL_R:
        raise ScenarioError(f"factorial limit exceeded: R={R} > {MAX_FACTORIAL_R}")
    return [PriorityOrder(p) for p in itertools.permutations(range(1, R + 1))]


@dataclass(frozen=True)
class TimeSharingPolicy:
    gamma: Mapping[PriorityOrder, float]

    def __post_init__(self) -> None:
        if not self.gamma:
            raise ScenarioError("empty time-sharing policy")
        total = 0.0
        for order, frac in self.gamma.items():
            if frac < -SIMPLEX_TOL or not math.isfinite(frac):
                raise ScenarioError(f"negative time share {frac} for order {order}")
            total += frac
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ScenarioError(f"time shares sum to {total}, not 1")
        object.__setattr__(self, "gamma", dict(self.gamma))

    @classmethod
    def fixed(cls, order: PriorityOrder) -> "TimeSharingPolicy":
        return cls({order: 1.0})

    @classmethod
    def uniform(cls, R: int) -> "TimeSharingPolicy":
        orders = enumerate_priority_orders(R)
        return cls({o: 1.0 / len(orders) for o in orders})

    @property
    def support(self) -> list[PriorityOrder]:
        return [o for o, g in self.gamma.items() if g > 0]

    def __hash__(self) -> int:
        return hash(tuple(sorted((o.perm, round(g, 15)) for o, g in self.gamma.items())))

    def as_vector(self, orders: Sequence[PriorityOrder]) -> np.ndarray:
        return np.array([self.gamma.get(o, 0.0) for o in orders])


@dataclass(frozen=True)
class Topology:
    """M aggregators feeding one application server.

    ``arrival_matrix[i][k]`` is the class ``i+1`` rate at MA ``k+1``.
    ``ma_capacities`` of ``None`` models ideal aggregators with no queueing.
    """

    M: int
    classes: tuple[QosClass, ...]
    arrival_matrix: tuple[tuple[float, ...], ...]
    as_capacity: float
    ma_capacities: tuple[float, ...] | None = None
    channel_gains: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "arrival_matrix", tuple(tuple(float(x) for x in row) for row in self.arrival_matrix))
        if self.ma_capacities is not None:
            object.__setattr__(self, "ma_capacities", tuple(float(x) for x in self.ma_capacities))
        if self.channel_gains is not None:
            object.__setattr__(self, "channel_gains", tuple(float(x) for x in self.channel_gains))
        ids = [c.id for c in self.classes]
        if ids != list(range(1, len(ids) + 1)):
            raise ScenarioError(f"class ids must be 1..R in order, got {ids}")
        if len(self.arrival_matrix) != len(self.classes):
            raise ScenarioError("arrival matrix needs one row per class")
        for row in self.arrival_matrix:
            if len(row) != self.M:
                raise ScenarioError("arrival matrix needs one column per MA")
            if any(x < 0 or not math.isfinite(x) for x in row):
                raise ScenarioError("arrival rates must be finite and >= 0")
        if self.ma_capacities is not None and len(self.ma_capacities) != self.M:
            raise ScenarioError("need one capacity per MA")

    @classmethod
    def single_node(cls, classes: Sequence[QosClass], as_capacity: float) -> "Topology":
        """AS-only scenario: one ideal MA carrying all traffic."""
        return cls(1, tuple(classes), tuple((c.lam,) for c in classes), as_capacity, None)

    @property
    def R(self) -> int:
        return len(self.classes)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.classes)

    def cls(self, i: int) -> QosClass:
        return self.classes[i - 1]

    def lam_ik(self, i: int, k: int) -> float:
        return self.arrival_matrix[i - 1][k - 1]

    def weight(self, i: int, k: int) -> float:
        """w_ik = lambda_ik / lambda_i."""
        row = self.arrival_matrix[i - 1]
        return row[k - 1] / sum(row)

    @property
    def weights(self) -> np.ndarray:
        lam = np.array(self.arrival_matrix)
        return lam / lam.sum(axis=1, keepdims=True)

    def as_load(self) -> float:
        return sum(c.lam * c.packet_size for c in self.classes) / self.as_capacity

    def ma_load(self, k: int) -> float:
        if self.ma_capacities is None:
            return 0.0
        return sum(self.lam_ik(c.id, k) * c.packet_size for c in self.classes) / self.ma_capacities[k - 1]

    def with_ma_capacities(self, caps: Sequence[float] | None) -> "Topology":
        return Topology(self.M, self.classes, self.arrival_matrix, self.as_capacity,
                        None if caps is None else tuple(caps), self.channel_gains)

    def as_services(self, kind: ServiceKind | str) -> dict[int, ServiceModel]:
        return {c.id: ServiceModel.from_capacity(kind, self.as_capacity, c.packet_size) for c in self.classes}

    def ma_services(self, k: int, kind: ServiceKind | str) -> dict[int, ServiceModel]:
        if self.ma_capacities is None:
            raise ScenarioError("ideal aggregators have no service model")
        cap = self.ma_capacities[k - 1]
        return {c.id: ServiceModel.from_capacity(kind, cap, c.packet_size) for c in self.classes}

    def ma_arrivals(self, k: int) -> dict[int, float]:
        return {c.id: self.lam_ik(c.id, k) for c in self.classes}

    def as_arrivals(self) -> dict[int, float]:
        return {c.id: c.lam for c in self.classes}


@dataclass(frozen=True)
class Violation:
    constraint: str
    node: str
    detail: str

    def __str__(self) -> str:
        return f"{self.constraint} at {self.node}: {self.detail}"


def _stability(load: float, node: str) -> list[Violation]:
    if load >= 1.0:
        name = "AS unstable" if node == "AS" else "MA unstable"
        return [Violation(name, node, f"utilization {load:.6g} >= 1")]
    if load > 1.0 - STABILITY_MARGIN:
        return [Violation("near-critical", node, f"utilization {load:.9g} within {STABILITY_MARGIN} of 1")]
    return []


def validate_scenario(topology: Topology) -> list[Violation]:
    """Diagnostics for every broken topology invariant; empty means valid."""
    out: list[Violation] = []
    for c in topology.classes:
        row = topology.arrival_matrix[c.id - 1]
        total = math.fsum(row)
        if not math.isclose(total, c.lam, rel_tol=1e-12, abs_tol=0.0):
            out.append(Violation("rate mismatch", f"class {c.id}",
                                 f"sum_k lambda_ik = {total!r} != lambda_i = {c.lam!r}"))
    out += _stability(topology.as_load(), "AS")
    if topology.ma_capacities is not None:
        for k in range(1, topology.M + 1):
            if topology.ma_capacities[k - 1] <= 0:
                out.append(Violation("MA unstable", f"MA {k}", "non-positive capacity"))
                continue
            out += _stability(topology.ma_load(k), f"MA {k}")
    return out


@dataclass
class AlphaTree:
    """Per-subset optimal time shares from the iterative scheduler.

    ``entries[A] = (alpha, latencies)`` where ``alpha[i]`` is the fraction of
    time class ``i`` is on top within ``A`` and ``latencies`` are the
    node-local optimal latencies of the classes in ``A``.
    """

    root: frozenset[int]
    entries: dict[frozenset[int], tuple[dict[int, float], dict[int, float]]] = field(default_factory=dict)

    def insert(self, subset: frozenset[int], alpha: Mapping[int, float], latencies: Mapping[int, float]) -> tuple:
        # first write wins
        return self.entries.setdefault(subset, (dict(alpha), dict(latencies)))

    def alpha(self, subset: Iterable[int]) -> dict[int, float]:
        return self.entries[frozenset(subset)][0]

    def latencies(self, subset: Iterable[int] | None = None) -> dict[int, float]:
        return self.entries[self.root if subset is None else frozenset(subset)][1]

    def __contains__(self, subset: object) -> bool:
        return subset in self.entries
