"""Active-set Newton solver for the per-subset utility maximization.

The subproblem: maximize sum_j beta_j log U_j(psi_j + w_j * (Z @ alpha)_j)
over the simplex, where column ``i`` of ``Z`` holds the node latencies of all
rows when option ``i`` is chosen. Stationarity reads
sum_j k_{j,i} / (1 + theta_j) + eta = 0 with k_{j,i} = beta_j a_j w_j Z_{j,i};
``eta`` returned here is therefore the common gradient value on the support.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import QosClass

KKT_TOL = 1e-10
MAX_RESTARTS = 50


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, iterate=None):
        super().__init__(message)
        self.iterate = iterate


@dataclass
class KKTResult:
    alpha: np.ndarray
    latencies: np.ndarray
    eta: float
    objective: float
    iterations: int
    residual: float
    active: tuple[int, ...]
    gradient: np.ndarray = field(repr=False)


class BlockObjective:
    """Concave objective of one scheduling block (one node, one class subset)."""

    def __init__(self, zeta: np.ndarray, classes: Sequence[QosClass], psi=None, weight=None):
        self.Z = np.asarray(zeta, dtype=float)
        rows = self.Z.shape[0]
        if len(classes) != rows:
            raise ValueError("one class per row of zeta")
        self.a = np.array([c.a for c in classes])
        self.b = np.array([c.b for c in classes])
        self.beta = np.array([c.beta for c in classes])
        self.psi = np.zeros(rows) if psi is None else np.asarray(psi, dtype=float)
        self.w = np.ones(rows) if weight is None else np.asarray(weight, dtype=float)
        self._logc = np.logaddexp(0.0, -self.a * self.b)

    def restrict(self, cols) -> "BlockObjective":
        sub = object.__new__(BlockObjective)
        sub.__dict__.update(self.__dict__)
        sub.Z = self.Z[:, cols]
        return sub

    def total_latency(self, alpha: np.ndarray) -> np.ndarray:
        return self.psi + self.w * (self.Z @ alpha)

    def value(self, alpha: np.ndarray) -> float:
        l = self.total_latency(alpha)
        return float(np.sum(self.beta * (self._logc - np.logaddexp(0.0, self.a * (l - self.b)))))

    def derivatives(self, alpha: np.ndarray):
        l = self.total_latency(alpha)
        x = self.a * (l - self.b)
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        dl = -self.beta * self.a * s * self.w
        d2l = -self.beta * self.a**2 * s * (1.0 - s) * self.w**2
        grad = self.Z.T @ dl
        hess = self.Z.T @ (d2l[:, None] * self.Z)
        val = float(np.sum(self.beta * (self._logc - np.logaddexp(0.0, x))))
        return val, grad, hess


def _newton_direction(hess_ff: np.ndarray, grad_f: np.ndarray) -> tuple[np.ndarray, float]:
    n = len(grad_f)
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = hess_ff
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.concatenate([-grad_f, [0.0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n], -sol[n]


def _stationarity(grad: np.ndarray, free: np.ndarray) -> tuple[float, float]:
    g = grad[free]
    eta = float(np.mean(g))
    return eta, float(np.max(np.abs(g - eta)))


def _solve_from(obj: BlockObjective, alpha: np.ndarray, tol: float, max_iter: int):
    n = len(alpha)
    free = alpha > 0
    iters = 0
    last_released = -1
    for _ in range(4 * n + 20):
        # Newton on the current free set
        while True:
            iters += 1
            if iters > max_iter:
                return None, iters
            val, grad, hess = obj.derivatives(alpha)
            idx = np.flatnonzero(free)
            scale = max(1.0, float(np.max(np.abs(grad))))
            eta, res = _stationarity(grad, free)
            if len(idx) == 1 or res <= tol * scale:
                break
            d, _ = _newton_direction(hess[np.ix_(idx, idx)], grad[idx])
            slope = float(grad[idx] @ d)
            pg = grad[idx] - np.mean(grad[idx])
            pg_slope = float(grad[idx] @ pg)
            if not np.isfinite(slope) or slope <= 1e-10 * pg_slope:
                # projected gradient on the simplex face: Newton is not an
                # ascent direction, or the Hessian is singular along the
                # gradient (saturated utilities make the objective linear)
                d, slope = pg, pg_slope
            neg = np.flatnonzero(d < 0)
            if len(neg):
                ratios = alpha[idx][neg] / -d[neg]
                j_block = idx[neg[int(np.argmin(ratios))]]
                t_max = float(np.min(ratios))
            else:
                j_block, t_max = -1, np.inf
            if t_max <= 1e-15:
                alpha[j_block] = 0.0
                free[j_block] = False
                alpha /= alpha.sum()
                continue
            t = min(1.0, t_max)
            slack = 1e-14 * max(1.0, abs(val))
            while t > 1e-16:
                trial = alpha.copy()
                trial[idx] += t * d
                np.clip(trial, 0.0, None, out=trial)
                if obj.value(trial) >= val + 1e-4 * t * slope - slack:
                    break
                t *= 0.5
            else:
                return None, iters
            alpha = trial
            if t >= t_max:
                alpha[j_block] = 0.0
                free[j_block] = False
                tiny = idx[alpha[idx] <= 1e-14]
                alpha[tiny] = 0.0
                free[tiny] = False
            alpha /= alpha.sum()
        pinned = np.flatnonzero(~free)
        if len(pinned) == 0:
            return (alpha, eta, res, grad, val), iters
        viol = grad[pinned] - eta
        k = int(np.argmax(viol))
        if viol[k] <= tol * scale or pinned[k] == last_released and viol[k] <= 1e3 * tol * scale:
            return (alpha, eta, res, grad, val), iters
        free[pinned[k]] = True
        last_released = pinned[k]
    return None, iters


def solve_kkt(
    zeta: np.ndarray,
    classes: Sequence[QosClass],
    psi=None,
    weight=None,
    tol: float = KKT_TOL,
    start: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    max_iter: int = 500,
) -> KKTResult:
    """Solve the r+1 stationarity/feasibility equations with alpha >= 0.

    Newton steps run on the free coordinates from a feasible start; an
    alpha reaching zero is pinned and its equation dropped, a pinned
    alpha whose gradient exceeds ``eta`` is released. Damped restarts from
    random simplex points are tried before giving up.
    """
    return solve_objective(BlockObjective(zeta, classes, psi, weight), tol, start, rng, max_iter)


def solve_objective(obj: BlockObjective, tol: float = KKT_TOL, start=None, rng=None, max_iter: int = 500) -> KKTResult:
    n = obj.Z.shape[1]
    alpha0 = np.full(n, 1.0 / n) if start is None else np.asarray(start, dtype=float).copy()
    rng = rng or np.random.default_rng(0)
    total = 0
    for attempt in range(MAX_RESTARTS + 1):
        found, iters = _solve_from(obj, alpha0, tol, max_iter)
        total += iters
        if found is not None:
            alpha, eta, res, grad, val = found
            act = tuple(int(i) for i in np.flatnonzero(alpha == 0.0))
            return KKTResult(alpha, obj.Z @ alpha, eta, val, total, res, act, grad)
        alpha0 = rng.dirichlet(np.ones(n))
    raise ConvergenceError(f"Newton failed after {MAX_RESTARTS} damped restarts", iterate=alpha0)


def kkt_residual(obj: BlockObjective, alpha: np.ndarray) -> float:
    """Infinity norm of stationarity on the support plus simplex feasibility."""
    _, grad, _ = obj.derivatives(alpha)
    support = alpha > 0
    eta, res = _stationarity(grad, support)
    viol = np.max(grad[~support] - eta, initial=0.0)
    return max(res, float(viol), abs(alpha.sum() - 1.0), float(np.max(-alpha, initial=0.0)))
