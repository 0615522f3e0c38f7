"""Joint scheduling at the aggregators (MAs) and the application server (AS).

End-to-end latency of class i is
    l_i = AS_i(gamma_AS) + sum_k w_ik * MA_ik(gamma_k),
affine in each node's time-sharing vector. The centralized reference runs
block-coordinate ascent to a fixed point; the distributed protocol lets all
MAs solve at once with the previous iteration's values frozen, then the AS
solves once every MA broadcast of that iteration has arrived.
"""

from __future__ import annotations

import itertools
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    AlphaTree,
    PriorityOrder,
    QosClass,
    ScenarioError,
    ServiceKind,
    TimeSharingPolicy,
    Topology,
    UnstableError,
    validate_scenario,
)
from .kkt import KKT_TOL
from .queueing import CachedLatency, ClosedFormLatency, LatencyProvider, ZeroLatency
from .schedopt import aggregate_gamma, n_r, solve_io, solve_sso
from .utility import system_log_utility

AS_NODE = 0
EPS = 1e-6
MAX_ITERS = 50
VARIABLE_GUARD = 10_000
ASCENT_TOL = 1e-8


# ------------------------------------------------------------------ messages

@dataclass(frozen=True)
class NodePolicy:
    node: int  # 0 = AS, k = MA k
    policy: TimeSharingPolicy
    iteration: int


@dataclass(frozen=True)
class PsiConstants:
    psi: dict[int, float]

    def __post_init__(self) -> None:
        for i, v in self.psi.items():
            if not (v >= 0 and math.isfinite(v)):
                raise ScenarioError(f"psi for class {i} must be finite and >= 0, got {v}")


_HEADER = struct.Struct("<HII")


def subset_enumeration(ids: Sequence[int]) -> list[tuple[int, ...]]:
    """Subsets of size >= 2, largest first, lexicographic within a size."""
    ids = sorted(ids)
    return [s for r in range(len(ids), 1, -1) for s in itertools.combinations(ids, r)]


@dataclass(frozen=True)
class AlphaBroadcast:
    """Flattened alpha tree of one node at one iteration.

    Wire format (little-endian): u16 sender, u32 iteration, u32 count, then
    ``count`` float64 values. Values follow :func:`subset_enumeration`;
    within a subset classes ascend and the last class's alpha is omitted.
    """

    sender: int
    iteration: int
    payload: tuple[float, ...]

    @classmethod
    def from_tree(cls, sender: int, iteration: int, tree: AlphaTree, ids: Sequence[int]) -> "AlphaBroadcast":
        values = []
        for s in subset_enumeration(ids):
            alpha = tree.alpha(s)
            values.extend(float(alpha[i]) for i in s[:-1])
        return cls(sender, iteration, tuple(values))

    def to_tree(self, ids: Sequence[int]) -> AlphaTree:
        it = iter(self.payload)
        tree = AlphaTree(frozenset(ids))
        for s in subset_enumeration(ids):
            head = [next(it) for _ in s[:-1]]
            alpha = dict(zip(s[:-1], head))
            alpha[s[-1]] = max(0.0, 1.0 - math.fsum(head))
            tree.insert(frozenset(s), alpha, {})
        return tree

    def encode(self) -> bytes:
        return _HEADER.pack(self.sender, self.iteration, len(self.payload)) + struct.pack(
            f"<{len(self.payload)}d", *self.payload)

    @classmethod
    def decode(cls, data: bytes) -> "AlphaBroadcast":
        sender, iteration, count = _HEADER.unpack_from(data)
        expected = _HEADER.size + 8 * count
        if len(data) != expected:
            raise ValueError(f"broadcast length {len(data)} != {expected}")
        return cls(sender, iteration, struct.unpack_from(f"<{count}d", data, _HEADER.size))


class LoopbackTransport:
    """In-process transport: frames are queued and handed back unchanged."""

    def __init__(self) -> None:
        self._frames: list[bytes] = []

    def send(self, frame: bytes) -> None:
        self._frames.append(frame)

    def drain(self) -> list[bytes]:
        frames, self._frames = self._frames, []
        return frames


class MessageBus:
    """Encodes broadcasts onto a transport and keeps an audit log."""

    def __init__(self, transport=None) -> None:
        self.transport = transport or LoopbackTransport()
        self.log: list[tuple[int, int, int]] = []  # (iteration, sender, values)

    def publish(self, msg: AlphaBroadcast) -> None:
        self.transport.send(msg.encode())
        self.log.append((msg.iteration, msg.sender, len(msg.payload)))

    def collect(self, iteration: int, senders: Sequence[int]) -> dict[int, AlphaBroadcast]:
        got = {}
        for frame in self.transport.drain():
            msg = AlphaBroadcast.decode(frame)
            if msg.iteration != iteration:
                raise RuntimeError(f"out-of-order broadcast: iteration {msg.iteration} during {iteration}")
            got[msg.sender] = msg
        missing = set(senders) - set(got)
        if missing:
            raise RuntimeError(f"barrier incomplete: no broadcast from {sorted(missing)}")
        return got


# ----------------------------------------------------------------- providers

class JointProviders:
    """Latency providers for the AS and every MA.

    ``as_for(ma_policies)`` returns the AS provider valid for the given MA
    policies. With exponential service the AS sees Poisson input whatever
    the MAs do, so one closed-form provider serves all calls.
    """

    approximate = False

    def __init__(self, topology: Topology, kind: ServiceKind | str):
        self.topology = topology
        self.kind = ServiceKind(kind)
        self._as = ClosedFormLatency.for_as(topology, self.kind)
        if topology.ma_capacities is None:
            self.ma = [ZeroLatency(topology.ids) for _ in range(topology.M)]
        else:
            self.ma = [ClosedFormLatency.for_ma(topology, k, self.kind) for k in range(1, topology.M + 1)]

    def as_for(self, ma_policies: Sequence[TimeSharingPolicy]) -> LatencyProvider:
        return self._as


class SimulatedASProviders(JointProviders):
    """AS latencies estimated by simulating the tandem with the MA policies
    in force; MA latencies stay closed-form (their input is Poisson)."""

    approximate = True

    def __init__(self, topology: Topology, kind: ServiceKind | str, seed: int = 0, horizon: int = 200_000):
        super().__init__(topology, kind)
        self.seed = seed
        self.horizon = horizon
        self._bound: dict[tuple, CachedLatency] = {}

    def as_for(self, ma_policies: Sequence[TimeSharingPolicy]) -> LatencyProvider:
        key = tuple(hash(p) for p in ma_policies)
        prov = self._bound.get(key)
        if prov is None:
            from .simkit.tandem import AsStream

            feed = AsStream(self.topology, ma_policies, self.seed, self.horizon, self.kind)
            prov = CachedLatency(self.topology.ids, feed.estimate, key=key)
            self._bound[key] = prov
        return prov


# ------------------------------------------------------------------- latency

def node_latency(provider: LatencyProvider, policy: TimeSharingPolicy) -> dict[int, float]:
    out = {i: 0.0 for i in provider.ids}
    for order, g in policy.gamma.items():
        if g <= 0:
            continue
        for i in provider.ids:
            out[i] += g * provider.latency(i, order.higher_set(i))
    return out


def _components(topology, as_policy, ma_policies, providers):
    as_term = node_latency(providers.as_for(ma_policies), as_policy)
    ma_terms = [node_latency(providers.ma[k], ma_policies[k]) for k in range(topology.M)]
    return as_term, ma_terms


def joint_latency(topology: Topology, as_policy: TimeSharingPolicy, ma_policies: Sequence[TimeSharingPolicy],
                  providers: JointProviders) -> dict[int, float]:
    """End-to-end mean latency per class (seconds)."""
    if len(ma_policies) != topology.M:
        raise ScenarioError(f"need {topology.M} MA policies, got {len(ma_policies)}")
    bad = [v for v in validate_scenario(topology) if v.constraint != "rate mismatch"]
    if bad:
        raise UnstableError("; ".join(map(str, bad)))
    as_term, ma_terms = _components(topology, as_policy, ma_policies, providers)
    W = topology.weights
    return {i: as_term[i] + sum(W[i - 1, k] * ma_terms[k][i] for k in range(topology.M)) for i in topology.ids}


def joint_objective(topology, as_policy, ma_policies, providers) -> float:
    return system_log_utility(topology.classes, joint_latency(topology, as_policy, ma_policies, providers))


# -------------------------------------------------------------- block solves

@dataclass
class BlockSolution:
    policy: TimeSharingPolicy
    tree: AlphaTree | None
    objective: float


def solve_block(classes: Sequence[QosClass], provider: LatencyProvider, psi: Mapping[int, float],
                w: Mapping[int, float], method: str = "io", tol: float = KKT_TOL) -> BlockSolution:
    """One node's subproblem with the rest of the network frozen."""
    ids = tuple(provider.ids)
    if len(ids) == 1:
        order = PriorityOrder(ids)
        tree = AlphaTree(frozenset(ids))
        from .schedopt import block_objective_value

        lat = {ids[0]: provider.latency(ids[0], frozenset())}
        return BlockSolution(TimeSharingPolicy.fixed(order), tree, block_objective_value(classes, lat, psi, w))
    if method == "io":
        tree, rep = solve_io(classes, provider, psi, w, tol)
        return BlockSolution(rep.policy, tree, rep.objective)
    if method == "sso":
        rep = solve_sso(classes, provider, psi, w, tol=tol)
        return BlockSolution(rep.policy, None, rep.objective)
    raise ScenarioError(f"unknown block method {method!r}")


def _as_block(topology, providers, ma_policies, ma_terms, method):
    W = topology.weights
    psi = {i: sum(W[i - 1, k] * ma_terms[k][i] for k in range(topology.M)) for i in topology.ids}
    one = {i: 1.0 for i in topology.ids}
    return solve_block(topology.classes, providers.as_for(ma_policies), psi, one, method)


def _ma_block(topology, providers, k, as_term, ma_terms, method):
    W = topology.weights
    psi = {i: as_term[i] + sum(W[i - 1, m] * ma_terms[m][i] for m in range(topology.M) if m != k)
           for i in topology.ids}
    w = {i: float(W[i - 1, k]) for i in topology.ids}
    return solve_block(topology.classes, providers.ma[k], psi, w, method)


def _guard(topology: Topology) -> None:
    R = topology.R
    if (topology.M + 1) * math.factorial(R) > VARIABLE_GUARD:
        raise ScenarioError(f"joint problem too large: (M+1)*R! = {(topology.M + 1) * math.factorial(R)} "
                            f"> {VARIABLE_GUARD}")
    bad = [v for v in validate_scenario(topology) if v.constraint != "rate mismatch"]
    if bad:
        raise UnstableError("; ".join(map(str, bad)))


@dataclass
class JointResult:
    as_policy: TimeSharingPolicy
    ma_policies: list[TimeSharingPolicy]
    objective: float
    latencies: dict[int, float]
    trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    approximate: bool = False
    messages: list[tuple[int, int, int]] = field(default_factory=list)
    decreases: list[int] = field(default_factory=list)  # iterations where the objective fell

    @property
    def diverged(self) -> bool:
        return bool(self.decreases)

    @property
    def node_policies(self) -> list[NodePolicy]:
        out = [NodePolicy(AS_NODE, self.as_policy, self.iterations)]
        out += [NodePolicy(k + 1, p, self.iterations) for k, p in enumerate(self.ma_policies)]
        return out


def solve_centralized(topology: Topology, providers: JointProviders, method: str = "io",
                      tol: float = 1e-10, max_sweeps: int = 200) -> JointResult:
    """Gauss-Seidel block-coordinate ascent (MA 1..M, then AS) to a fixed point."""
    _guard(topology)
    R = topology.R
    as_pol = TimeSharingPolicy.uniform(R)
    ma_pols = [TimeSharingPolicy.uniform(R) for _ in range(topology.M)]
    v = joint_objective(topology, as_pol, ma_pols, providers)
    trace = [v]
    converged = False
    for sweep in range(max_sweeps):
        as_term, ma_terms = _components(topology, as_pol, ma_pols, providers)
        if topology.ma_capacities is not None:
            for k in range(topology.M):
                ma_pols[k] = _ma_block(topology, providers, k, as_term, ma_terms, method).policy
                ma_terms[k] = node_latency(providers.ma[k], ma_pols[k])
                as_term = node_latency(providers.as_for(ma_pols), as_pol)
        as_pol = _as_block(topology, providers, ma_pols, ma_terms, method).policy
        v_new = joint_objective(topology, as_pol, ma_pols, providers)
        trace.append(v_new)
        if abs(v_new - v) < tol:
            converged = True
            v = v_new
            break
        v = v_new
    lat = joint_latency(topology, as_pol, ma_pols, providers)
    return JointResult(as_pol, ma_pols, v, lat, trace, len(trace) - 1, converged, providers.approximate)


def _threads(n: int) -> int:
    cap = os.environ.get("M2MSCHED_THREADS")
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(n, limit))


def run_distributed(topology: Topology, providers: JointProviders, max_iters: int = MAX_ITERS,
                    eps: float = EPS, method: str = "io", bus: MessageBus | None = None,
                    check_ascent: bool | None = None) -> JointResult:
    """Iterate: all MAs solve with iteration n-1 values frozen, then the AS.

    Every node starts from the uniform policy. The objective trace starts
    with the value at that uniform start (iteration 0).
    """
    _guard(topology)
    bus = bus or MessageBus()
    ids = topology.ids
    R = topology.R
    as_pol = TimeSharingPolicy.uniform(R)
    ma_pols = [TimeSharingPolicy.uniform(R) for _ in range(topology.M)]
    v = joint_objective(topology, as_pol, ma_pols, providers)
    trace = [v]
    if check_ascent is None:
        check_ascent = not providers.approximate
    converged = False
    decreases: list[int] = []
    it = 0
    real_mas = topology.ma_capacities is not None
    with ThreadPoolExecutor(max_workers=_threads(topology.M)) as pool:
        for it in range(1, max_iters + 1):
            as_term, ma_terms = _components(topology, as_pol, ma_pols, providers)
            if real_mas:
                futs = [pool.submit(_ma_block, topology, providers, k, as_term, ma_terms, method)
                        for k in range(topology.M)]
                sols = [f.result() for f in futs]
                for k, sol in enumerate(sols):
                    if R > 1 and sol.tree is not None:
                        bus.publish(AlphaBroadcast.from_tree(k + 1, it, sol.tree, ids))
                if R > 1 and method == "io":
                    got = bus.collect(it, range(1, topology.M + 1))
                    ma_pols = [aggregate_gamma(got[k + 1].to_tree(ids)) for k in range(topology.M)]
                else:
                    ma_pols = [s.policy for s in sols]
                ma_terms = [node_latency(providers.ma[k], ma_pols[k]) for k in range(topology.M)]
            sol = _as_block(topology, providers, ma_pols, ma_terms, method)
            if R > 1 and sol.tree is not None:
                bus.publish(AlphaBroadcast.from_tree(AS_NODE, it, sol.tree, ids))
                got = bus.collect(it, [AS_NODE])
                as_pol = aggregate_gamma(got[AS_NODE].to_tree(ids))
            else:
                as_pol = sol.policy
            v_new = joint_objective(topology, as_pol, ma_pols, providers)
            trace.append(v_new)
            if check_ascent and v_new < v - max(ASCENT_TOL, 1e-9 * abs(v)):
                decreases.append(it)
            done = abs(v_new - v) < eps
            v = v_new
            if done:
                converged = True
                break
    lat = joint_latency(topology, as_pol, ma_pols, providers)
    return JointResult(as_pol, ma_pols, v, lat, trace, it, converged, providers.approximate, list(bus.log),
                       decreases)


def overhead_audit(result: JointResult | Sequence[tuple[int, int, int]]) -> dict[str, int]:
    """Messages and alpha values actually broadcast during a run."""
    log = result.messages if isinstance(result, JointResult) else list(result)
    iters = {m[0] for m in log}
    return {"iterations": len(iters), "messages": len(log), "values_exchanged": sum(m[2] for m in log)}


def expected_overhead(R: int, M: int, iterations: int) -> dict[str, int]:
    """Per-iteration Case-1 (alpha trees) and Case-2 (full gamma) counts."""
    return {"case1": iterations * (M + 1) * n_r(R), "case2": iterations * (M + 1) * (math.factorial(R) - 1)}
