"""Subcarrier assignment to MA-AS links.

Every subcarrier on link k carries C_s,k = W log2(1 + g_k * snr) bits/s, so
an MA with n_k subcarriers serves at n_k * C_s,k. Stage 1 starts from the
smallest stable assignment and hands out the spare subcarriers one at a
time to the MA whose local objective gains most; Stage 2 runs the
distributed scheduler with that assignment fixed. Service is exponential
throughout (geometric packet sizes), which keeps every node M/M/1.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .core import STABILITY_MARGIN, ScenarioError, ServiceKind, Topology
from .joint import JointProviders, JointResult, run_distributed, solve_block, solve_centralized
from .queueing import ClosedFormLatency

RELAXED_FD_STEP = 1e-4  # finite-difference step in subcarriers
MAX_REFERENCE_M = 4
MAX_REFERENCE_SPARE = 16  # subcarriers left after the minimally feasible assignment


class InfeasibleError(ScenarioError):
    """Not enough subcarriers to keep every MA stable."""


@dataclass(frozen=True)
class LinkModel:
    W: float
    snr: float  # linear
    gains: tuple[float, ...]
    N: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "gains", tuple(float(g) for g in self.gains))
        if not (self.W > 0 and self.snr > 0):
            raise ScenarioError("link needs W > 0 and snr > 0")
        if any(not (g >= 0 and math.isfinite(g)) for g in self.gains):
            raise ScenarioError(f"channel gains must be finite and >= 0, got {self.gains}")
        if int(self.N) != self.N or self.N < len(self.gains):
            raise ScenarioError(f"need an integer N >= M subcarriers, got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def M(self) -> int:
        return len(self.gains)

    @staticmethod
    def db_to_linear(db: float) -> float:
        return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class Assignment:
    n: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(x < 0 for x in self.n):
            raise ScenarioError(f"negative subcarrier count in {self.n}")

    @property
    def total(self) -> float:
        return float(sum(self.n))

    def __getitem__(self, k: int) -> float:
        return self.n[k]


def subcarrier_capacity(link: LinkModel, k: int) -> float:
    """Capacity of one subcarrier on link ``k`` (1-based), bits/s."""
    return link.W * math.log2(1.0 + link.gains[k - 1] * link.snr)


def _require_exponential(kind) -> None:
    if ServiceKind(kind) is not ServiceKind.EXPONENTIAL:
        raise ScenarioError("subcarrier allocation requires exponential service: packet sizes are treated as "
                            "geometric so every node stays M/M/1; deterministic service is not supported here")


def ma_load_bits(topology: Topology, k: int) -> float:
    return sum(topology.lam_ik(c.id, k) * c.packet_size for c in topology.classes)


def with_assignment(topology: Topology, link: LinkModel, n: Sequence[float]) -> Topology:
    caps = [n[k - 1] * subcarrier_capacity(link, k) for k in range(1, topology.M + 1)]
    return topology.with_ma_capacities(caps)


def _stable(topology: Topology, link: LinkModel, k: int, n_k: float) -> bool:
    load = ma_load_bits(topology, k)
    cap = n_k * subcarrier_capacity(link, k)
    if load == 0:
        return cap > 0 or n_k == 0
    return cap > 0 and load / cap <= 1.0 - STABILITY_MARGIN


def minimally_feasible(topology: Topology, link: LinkModel) -> Assignment:
    """Smallest n_k per MA keeping utilization strictly below 1 (with margin)."""
    if link.M != topology.M:
        raise ScenarioError(f"link describes {link.M} MAs, topology has {topology.M}")
    out = []
    for k in range(1, topology.M + 1):
        load = ma_load_bits(topology, k)
        cs = subcarrier_capacity(link, k)
        if load == 0:
            out.append(0)
            continue
        if cs <= 0:
            raise InfeasibleError(f"infeasible: MA {k} has traffic but zero link capacity")
        n = math.floor(load / (cs * (1.0 - STABILITY_MARGIN))) + 1
        while not _stable(topology, link, k, n):  # guard against rounding at the boundary
            n += 1
        out.append(n)
    if sum(out) > link.N:
        raise InfeasibleError(f"infeasible: not enough subcarriers (need {sum(out)}, have {link.N})")
    return Assignment(tuple(out))


@dataclass
class LocalSolution:
    policy: object
    Z: float


def solve_do_k(topology: Topology, link: LinkModel, k: int, n_k: float, kind=ServiceKind.EXPONENTIAL,
               method: str = "io") -> LocalSolution:
    """MA k's own problem: maximize sum_i beta_i log U_i(w_ik * l_ik)."""
    _require_exponential(kind)
    if not _stable(topology, link, k, n_k):
        raise InfeasibleError(f"infeasible: MA {k} unstable with {n_k} subcarriers")
    if ma_load_bits(topology, k) == 0:
        # no traffic: every order is equivalent and contributes nothing
        from .core import PriorityOrder, TimeSharingPolicy

        return LocalSolution(TimeSharingPolicy.fixed(PriorityOrder(topology.ids)), 0.0)
    topo_k = with_assignment(topology, link, [n_k if m == k else 1.0 for m in range(1, topology.M + 1)])
    provider = ClosedFormLatency.for_ma(topo_k, k, ServiceKind.EXPONENTIAL)
    W = topology.weights
    w = {i: float(W[i - 1, k - 1]) for i in topology.ids}
    sol = solve_block(topology.classes, provider, {i: 0.0 for i in topology.ids}, w, method)
    return LocalSolution(sol.policy, sol.objective)


@dataclass
class GreedyTrace:
    assignment: Assignment
    Z: list[float]
    history: list[tuple[int, ...]] = field(default_factory=list)  # assignment after each step
    solves: int = 0


def greedy_assign(topology: Topology, link: LinkModel, nmf: Assignment, zmf: Sequence[float] | None = None,
                  method: str = "io") -> GreedyTrace:
    """Hand out the spare subcarriers one by one to argmax_k dZ_k.

    Only the MA that won the previous step re-solves its problem (update
    flags); ties go to the lowest MA index.
    """
    M = topology.M
    n = [int(x) for x in nmf.n]
    if sum(n) > link.N:
        raise InfeasibleError(f"infeasible: not enough subcarriers (need {sum(n)}, have {link.N})")
    solves = 0
    if zmf is None:
        zmf = []
        for k in range(1, M + 1):
            zmf.append(solve_do_k(topology, link, k, n[k - 1], method=method).Z)
            solves += 1
    Z = list(zmf)
    delta = [0.0] * M
    flags = [True] * M
    history = [tuple(n)]
    for _ in range(link.N - sum(n)):
        for k in range(M):
            if flags[k]:
                delta[k] = solve_do_k(topology, link, k + 1, n[k] + 1, method=method).Z - Z[k]
                solves += 1
        best = max(range(M), key=lambda k: (delta[k], -k))
        n[best] += 1
        Z[best] += delta[best]
        flags = [k == best for k in range(M)]
        history.append(tuple(n))
    return GreedyTrace(Assignment(tuple(n)), Z, history, solves)


def joint_value(topology: Topology, link: LinkModel, n: Sequence[float], method: str = "io") -> JointResult:
    """Centralized joint optimum with n_k subcarriers at MA k."""
    topo = with_assignment(topology, link, n)
    return solve_centralized(topo, JointProviders(topo, ServiceKind.EXPONENTIAL), method=method)


@dataclass
class ReferenceResult:
    assignment: Assignment
    result: JointResult | None
    objective: float
    evaluated: int = 0


def _compositions(total: int, parts: int):
    for cut in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        out = []
        for c in cut:
            out.append(c - prev - 1)
            prev = c
        out.append(total + parts - 2 - prev)
        yield out


def exhaustive_assignment(topology: Topology, link: LinkModel, method: str = "io") -> ReferenceResult:
    """Enumerate every integer assignment with n_k >= n_k^mf and sum = N."""
    nmf = minimally_feasible(topology, link)
    spare = link.N - int(nmf.total)
    best: ReferenceResult | None = None
    count = 0
    for extra in _compositions(spare, topology.M):
        n = [int(a) + b for a, b in zip(nmf.n, extra)]
        res = joint_value(topology, link, n, method)
        count += 1
        if best is None or res.objective > best.objective + 1e-12:
            best = ReferenceResult(Assignment(tuple(n)), res, res.objective)
    best.evaluated = count
    return best


def exact_reference(topology: Topology, link: LinkModel, mode: str = "integer",
                    kind=ServiceKind.EXPONENTIAL, method: str = "io",
                    start: ReferenceResult | None = None) -> ReferenceResult:
    """Integer optimum by branch and bound, or the real-valued relaxation.

    The joint objective is non-decreasing in each n_k (more capacity never
    raises any latency), so giving every unfixed MA all remaining spare
    subcarriers bounds a branch from above.
    """
    _require_exponential(kind)
    if mode == "integer":
        if not reference_sized(topology, link):
            raise ScenarioError(f"instance too large for the integer reference (M <= {MAX_REFERENCE_M}, "
                                f"at most {MAX_REFERENCE_SPARE} spare subcarriers)")
        return _branch_and_bound(topology, link, method)
    if mode == "relaxed":
        return _relaxed(topology, link, method, start)
    raise ScenarioError(f"unknown reference mode {mode!r}")


def reference_sized(topology, link) -> bool:
    spare = link.N - int(minimally_feasible(topology, link).total)
    return topology.M <= MAX_REFERENCE_M and spare <= MAX_REFERENCE_SPARE


def _branch_and_bound(topology, link, method) -> ReferenceResult:
    M = topology.M
    nmf = [int(x) for x in minimally_feasible(topology, link).n]
    spare = link.N - sum(nmf)
    cache: dict[tuple, JointResult] = {}

    def value(n) -> JointResult:
        key = tuple(n)
        if key not in cache:
            cache[key] = joint_value(topology, link, n, method)
        return cache[key]

    best = {"obj": -math.inf, "n": None}

    def branch(prefix: list[int], left: int) -> None:
        j = len(prefix)
        if j == M - 1:
            n = [nmf[k] + prefix[k] for k in range(j)] + [nmf[j] + left]
            v = value(n).objective
            if v > best["obj"] + 1e-12:
                best.update(obj=v, n=n)
            return
        optimistic = [nmf[k] + prefix[k] for k in range(j)] + [nmf[k] + left for k in range(j, M)]
        if value(optimistic).objective <= best["obj"] + 1e-12:
            return
        for x in range(left, -1, -1):
            branch(prefix + [x], left - x)

    if M == 1:
        n = [nmf[0] + spare]
        res = value(n)
        return ReferenceResult(Assignment(tuple(n)), res, res.objective, 1)
    branch([], spare)
    n = best["n"]
    return ReferenceResult(Assignment(tuple(n)), cache[tuple(n)], best["obj"], len(cache))


def _relaxed(topology, link, method, start: ReferenceResult | None = None) -> ReferenceResult:
    """SLSQP on real n_k with sum n_k = N and n_k above the stability floor.

    Starts from the integer optimum (or the greedy assignment on instances
    too large for branch and bound) and keeps the start if SLSQP does not
    improve on it, so the result never falls below the integer value.
    A caller that already has the integer result can pass it as ``start``.
    """
    M = topology.M
    floor = []
    for k in range(1, M + 1):
        load = ma_load_bits(topology, k)
        cs = subcarrier_capacity(link, k)
        floor.append(load / (cs * (1.0 - 2 * STABILITY_MARGIN)) if load > 0 else 0.0)
    if start is not None:
        pass
    elif reference_sized(topology, link):
        start = _branch_and_bound(topology, link, method)
    else:
        g = greedy_assign(topology, link, minimally_feasible(topology, link), method=method)
        res = joint_value(topology, link, list(g.assignment.n), method)
        start = ReferenceResult(g.assignment, res, res.objective)
    evals = 0

    def neg(x) -> float:
        nonlocal evals
        evals += 1
        if any(xi < fi for xi, fi in zip(x, floor)):
            return math.inf
        return -joint_value(topology, link, list(x), method).objective

    best_n = [float(x) for x in start.assignment.n]
    best = start.objective
    if M > 1:
        r = minimize(neg, np.array(best_n), method="SLSQP",
                     bounds=[(f, float(link.N)) for f in floor],
                     constraints=[{"type": "eq", "fun": lambda x: float(np.sum(x)) - link.N}],
                     options={"eps": RELAXED_FD_STEP, "ftol": 1e-12, "maxiter": 200})
        x = np.clip(r.x, floor, None)
        x = x * (link.N / x.sum())
        if all(xi >= fi for xi, fi in zip(x, floor)):
            v = -neg(x)
            if v > best:
                best, best_n = v, [float(xi) for xi in x]
    res = joint_value(topology, link, best_n, method)
    return ReferenceResult(Assignment(tuple(best_n)), res, res.objective, evals)


@dataclass
class TwoStageResult:
    assignment: Assignment
    greedy: GreedyTrace
    joint: JointResult
    objective: float


def two_stage_pipeline(topology: Topology, link: LinkModel, kind=ServiceKind.EXPONENTIAL,
                       method: str = "io") -> TwoStageResult:
    """Stage 1 greedy assignment, then the distributed scheduler on it."""
    _require_exponential(kind)
    nmf = minimally_feasible(topology, link)
    g = greedy_assign(topology, link, nmf, method=method)
    topo = with_assignment(topology, link, g.assignment.n)
    res = run_distributed(topo, JointProviders(topo, ServiceKind.EXPONENTIAL), method=method)
    return TwoStageResult(g.assignment, g, res, res.objective)
