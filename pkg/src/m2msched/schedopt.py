"""Delay-optimal time-sharing schedulers for one node.

Two routes to the same optimum:

* ``solve_sso`` optimizes directly over the R! fixed-priority orders.
* ``solve_io`` recurses over class subsets: within a subset each class is
  tried on top, the rest reuse the memoized optimum of the smaller subset.

Both accept an additive latency offset ``psi`` and multiplicative weight
``w`` per class so the joint MA/AS code can reuse them block by block.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    AlphaTree,
    PriorityOrder,
    QosClass,
    ScenarioError,
    TimeSharingPolicy,
    enumerate_priority_orders,
)
from .kkt import KKT_TOL, BlockObjective, ConvergenceError, kkt_residual, solve_kkt, solve_objective
from .queueing import LatencyProvider, order_latency_matrix

SSO_MAX_R = 6


@dataclass
class OptimizerReport:
    policy: TimeSharingPolicy
    latencies: dict[int, float]
    total_latencies: dict[int, float]
    objective: float
    iterations: int
    residual: float
    active_constraints: tuple[int, ...] = ()
    tree: AlphaTree | None = None
    subproblems: int = 0
    memo_hits: int = 0
    restart_spread: float = 0.0
    extra: dict = field(default_factory=dict)


def _vectors(ids: Sequence[int], psi: Mapping[int, float] | None, w: Mapping[int, float] | None):
    p = np.array([0.0 if psi is None else psi.get(i, 0.0) for i in ids])
    q = np.array([1.0 if w is None else w.get(i, 1.0) for i in ids])
    return p, q


def _class_map(classes: Sequence[QosClass]) -> dict[int, QosClass]:
    return {c.id: c for c in classes}


def block_objective_value(classes, node_latencies: Mapping[int, float], psi=None, w=None) -> float:
    """sum_i beta_i log U_i(psi_i + w_i l_i) for any real latencies."""
    ids = sorted(node_latencies)
    cm = _class_map(classes)
    p, q = _vectors(ids, psi, w)
    obj = BlockObjective(np.array([[node_latencies[i]] for i in ids]), [cm[i] for i in ids], p, q)
    return obj.value(np.ones(1))


# ---------------------------------------------------------------- single stage

def solve_sso(
    classes: Sequence[QosClass],
    provider: LatencyProvider,
    psi: Mapping[int, float] | None = None,
    w: Mapping[int, float] | None = None,
    restarts: int = 3,
    tol: float = KKT_TOL,
) -> OptimizerReport:
    """Optimum over all R! orders, found by column generation.

    Each round solves the KKT system on the current support, then adds
    the order with the largest gradient if it beats the multiplier.
    Several starting orders are run and must agree on the objective.
    """
    ids = tuple(provider.ids)
    R = len(ids)
    if R > SSO_MAX_R:
        raise ScenarioError(f"single-stage solve capped at R={SSO_MAX_R}; use the iterative solver")
    cm = _class_map(classes)
    orders = enumerate_priority_orders(R)
    L = order_latency_matrix(provider, orders)
    p, q = _vectors(ids, psi, w)
    obj = BlockObjective(L.values, [cm[i] for i in ids], p, q)
    if R == 1:
        alpha = np.ones(1)
        return _sso_report(L, obj, alpha, 0, 0.0, ids, 0.0)

    vertex_vals = np.array([obj.value(np.eye(1, len(orders), j)[0]) for j in range(len(orders))])
    starts = list(np.argsort(-vertex_vals)[:max(1, restarts)])
    best = None
    values = []
    for s in starts:
        alpha, iters = _column_generation(obj, int(s), tol)
        v = obj.value(alpha)
        values.append(v)
        if best is None or v > best[0]:
            best = (v, alpha, iters)
    spread = max(values) - min(values)
    return _sso_report(L, obj, best[1], best[2], spread, ids, kkt_residual(obj, best[1]))


def _column_generation(obj: BlockObjective, first: int, tol: float):
    n = obj.Z.shape[1]
    support = [first]
    iters = 0
    for _ in range(4 * n + 10):
        res = solve_objective(obj.restrict(support), tol=tol)
        iters += res.iterations
        alpha = np.zeros(n)
        alpha[support] = res.alpha
        _, grad, _ = obj.derivatives(alpha)
        support = [j for j in support if alpha[j] > 0]
        j = int(np.argmax(grad))
        scale = max(1.0, float(np.max(np.abs(grad))))
        if grad[j] <= res.eta + tol * scale or j in support:
            return alpha, iters
        support.append(j)
    raise ConvergenceError("column generation did not terminate", iterate=alpha)


def _sso_report(L, obj, alpha, iters, spread, ids, residual) -> OptimizerReport:
    gamma = {o: float(g) for o, g in zip(L.contexts, alpha) if g > 0}
    policy = TimeSharingPolicy(_normalized(gamma))
    node = obj.Z @ alpha
    total = obj.total_latency(alpha)
    return OptimizerReport(
        policy=policy,
        latencies={i: float(node[r]) for r, i in enumerate(ids)},
        total_latencies={i: float(total[r]) for r, i in enumerate(ids)},
        objective=obj.value(alpha),
        iterations=iters,
        residual=residual,
        active_constraints=tuple(j for j in range(len(alpha)) if alpha[j] == 0),
        restart_spread=spread,
    )


def _normalized(gamma: dict) -> dict:
    s = math.fsum(gamma.values())
    return {k: v / s for k, v in gamma.items()}


# ------------------------------------------------------------------- iterative

class _Recursion:
    def __init__(self, classes, provider, psi, w, tol):
        self.cm = _class_map(classes)
        self.provider = provider
        self.all = frozenset(provider.ids)
        self.psi = psi
        self.w = w
        self.tol = tol
        self.tree = AlphaTree(self.all)
        self.singletons: dict[frozenset[int], dict[int, float]] = {}
        self.solved = 0
        self.hits = 0
        self.iterations = 0
        self.worst_residual = 0.0
        self.solve_order: list[frozenset[int]] = []

    def latencies(self, subset: frozenset[int]) -> dict[int, float]:
        if len(subset) == 1:
            if subset not in self.singletons:
                (i,) = subset
                self.singletons[subset] = {i: self.provider.latency(i, self.all - subset)}
            return self.singletons[subset]
        if subset in self.tree:
            self.hits += 1
            return self.tree.latencies(subset)
        alpha, lat = self._solve(subset)
        return self.tree.insert(subset, alpha, lat)[1]

    def zeta(self, subset: frozenset[int]) -> tuple[list[int], np.ndarray]:
        members = sorted(subset)
        higher = self.all - subset
        Z = np.empty((len(members), len(members)))
        for col, i in enumerate(members):
            below = self.latencies(subset - {i})
            for row, j in enumerate(members):
                Z[row, col] = self.provider.latency(i, higher) if i == j else below[j]
        return members, Z

    def _solve(self, subset):
        members, Z = self.zeta(subset)
        p, q = _vectors(members, self.psi, self.w)
        res = solve_kkt(Z, [self.cm[i] for i in members], p, q, tol=self.tol)
        self.solved += 1
        self.iterations += res.iterations
        self.worst_residual = max(self.worst_residual, res.residual)
        self.solve_order.append(subset)
        alpha = {i: float(a) for i, a in zip(members, res.alpha)}
        lat = {i: float(x) for i, x in zip(members, res.latencies)}
        return alpha, lat


def solve_io(
    classes: Sequence[QosClass],
    provider: LatencyProvider,
    psi: Mapping[int, float] | None = None,
    w: Mapping[int, float] | None = None,
    tol: float = KKT_TOL,
) -> tuple[AlphaTree, OptimizerReport]:
    """Iterative subset recursion; returns the memo tree and the root report."""
    ids = tuple(provider.ids)
    if len(ids) < 2:
        raise ScenarioError("iterative solver needs at least two classes")
    rec = _Recursion(classes, provider, psi, w, tol)
    root = rec.latencies(rec.all)
    tree = rec.tree
    alpha_root = tree.alpha(rec.all)
    p, q = _vectors(ids, psi, w)
    total = {i: float(p[r] + q[r] * root[i]) for r, i in enumerate(ids)}
    policy = aggregate_gamma(tree)
    report = OptimizerReport(
        policy=policy,
        latencies=dict(root),
        total_latencies=total,
        objective=block_objective_value(classes, root, psi, w),
        iterations=rec.iterations,
        residual=rec.worst_residual,
        active_constraints=tuple(i for i in ids if alpha_root[i] == 0.0),
        tree=tree,
        subproblems=rec.solved,
        memo_hits=rec.hits,
    )
    report.extra["solve_order"] = [tuple(sorted(s)) for s in rec.solve_order]
    return tree, report


def aggregate_gamma(tree: AlphaTree) -> TimeSharingPolicy:
    """gamma(p1 p2 ... pR) = alpha_{p1}(A_R) * alpha_{p2}(A_R - {p1}) * ..."""
    gamma: dict[PriorityOrder, float] = {}

    def walk(subset: frozenset[int], prefix: tuple[int, ...], weight: float) -> None:
        if len(subset) == 1:
            gamma[PriorityOrder(prefix + tuple(subset))] = weight
            return
        if subset not in tree:
            raise KeyError(f"alpha tree incomplete: missing subset {sorted(subset)}")
        for i, a in sorted(tree.alpha(subset).items()):
            if a > 0:
                walk(subset - {i}, prefix + (i,), weight * a)

    walk(tree.root, (), 1.0)
    return TimeSharingPolicy(gamma)


# ----------------------------------------------------------------- convexity

@dataclass
class ConvexityReport:
    points: int
    violations: list[str]
    max_minor_ratio: float
    max_eigenvalue: float

    @property
    def ok(self) -> bool:
        return not self.violations


def _principal_minors(H: np.ndarray, k: int):
    n = H.shape[0]
    for sub in itertools.combinations(range(n), k):
        yield sub, float(np.linalg.det(H[np.ix_(sub, sub)]))


def verify_convexity(
    classes: Sequence[QosClass],
    provider: LatencyProvider,
    subset: Sequence[int] | None = None,
    trials: int = 100,
    rng: np.random.Generator | None = None,
    psi=None,
    w=None,
) -> ConvexityReport:
    """Check each class term is concave in alpha at random simplex points.

    The analytic Hessian of class ``i`` is the rank-one matrix
    -beta theta a^2 / (1 + theta)^2 * zeta_i zeta_i^T. Its first minors must
    be negative, all higher minors must vanish, and a finite-difference
    Hessian of the whole objective must have no positive eigenvalue.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = rng or np.random.default_rng(0)
    rec = _Recursion(classes, provider, psi, w, KKT_TOL)
    sub = frozenset(provider.ids if subset is None else subset)
    members, Z = rec.zeta(sub)
    p, q = _vectors(members, psi, w)
    cm = _class_map(classes)
    obj = BlockObjective(Z, [cm[i] for i in members], p, q)
    r = len(members)
    points = [rng.dirichlet(np.ones(r)) for _ in range(trials)]
    violations: list[str] = []
    worst_ratio = 0.0
    worst_eig = -np.inf
    for n_pt, alpha in enumerate(points):
        l = obj.total_latency(alpha)
        for row, i in enumerate(members):
            c = cm[i]
            theta = math.exp(-c.a * (l[row] - c.b)) if -c.a * (l[row] - c.b) < 700 else math.inf
            coeff = c.beta * c.a**2 * (theta / (1.0 + theta) ** 2 if math.isfinite(theta) else 0.0)
            zrow = q[row] * Z[row]
            H = -coeff * np.outer(zrow, zrow)
            diag = np.diag(H)
            if np.any(diag > 0) or (c.beta > 0 and np.any(diag >= 0) and coeff > 0):
                violations.append(f"point {n_pt} class {i}: first-order minor not negative")
            scale = float(np.max(np.abs(diag))) or 1.0
            for k in range(2, r + 1):
                for idx, m in _principal_minors(H, k):
                    ratio = abs(m) / scale**k
                    worst_ratio = max(worst_ratio, ratio)
                    if ratio > 1e-9:
                        violations.append(f"point {n_pt} class {i}: minor {idx} = {m:.3g}")
        Hn = _fd_hessian(obj.value, alpha)
        eig = float(np.max(np.linalg.eigvalsh(0.5 * (Hn + Hn.T))))
        worst_eig = max(worst_eig, eig)
        if eig > 1e-6 * max(1.0, float(np.max(np.abs(Hn)))):
            violations.append(f"point {n_pt}: numeric Hessian eigenvalue {eig:.3g} > 0")
    return ConvexityReport(len(points), violations, worst_ratio, worst_eig)


def _fd_hessian(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    n = len(x)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h
            ej[j] = h
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


# ---------------------------------------------------------------- complexity

def n_r(R: int) -> int:
    """Per-node variables broadcast when sending every alpha subset."""
    return (R - 1) * (2 ** (R - 1) - 1) - 2 ** (R - 1) + R


def complexity_report(R: int, M: int) -> dict[str, int | float]:
    if R < 2 or M < 1:
        raise ValueError("need R >= 2 and M >= 1")
    fact = math.factorial(R)
    nr = n_r(R)
    return {
        "R": R,
        "M": M,
        "sso_eqs": fact + 1,
        "io_max_eqs": R + 1,
        "io_subproblem_count": sum(math.comb(R, r) for r in range(2, R + 1)),
        "N_R": nr,
        "N1": (M + 1) * nr,
        "N2": (M + 1) * (fact - 1),
        "N2_over_N1": (fact - 1) / nr,
    }
