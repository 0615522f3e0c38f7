"""Sigmoidal delay utilities and the proportionally fair system utility.

With c = 1 + e^{-ab} and d = 1/(1 + e^{ab}) the sigmoid collapses to
U(l) = c * sigmoid(a (b - l)), so log U = softplus(-ab) - softplus(a (l - b)).
Everything below is evaluated in that form to stay finite for large a*b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import QosClass, ScenarioError

NEG_INF = float("-inf")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    # logistic without overflow for either sign
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class UtilityParams:
    a: float
    b: float

    @classmethod
    def of(cls, c: QosClass) -> "UtilityParams":
        return cls(c.a, c.b)

    @property
    def c(self) -> float:
        return 1.0 + math.exp(-self.a * self.b)

    @property
    def d(self) -> float:
        ab = self.a * self.b
        return 1.0 / (1.0 + math.exp(ab)) if ab < 700 else 0.0


def _check_latency(l: float) -> float:
    l = float(l)
    if math.isnan(l) or l < 0:
        raise ScenarioError(f"latency must be a non-negative number, got {l}")
    return l


def log_utility(params: UtilityParams, l) -> np.ndarray | float:
    """log U(l); accepts arrays and any real l (no domain check)."""
    return float(_softplus(-params.a * params.b)) - _softplus(params.a * (np.asarray(l, dtype=float) - params.b))


def utility(params: UtilityParams, l: float) -> float:
    """U(l) in (0, 1]; exactly 1 at l = 0."""
    l = _check_latency(l)
    if l == 0.0:
        return 1.0
    return float(math.exp(log_utility(params, l)))


def utility_derivative(params: UtilityParams, l: float) -> float:
    """dU/dl = -c a s (1 - s), s = sigmoid(a (l - b))."""
    l = _check_latency(l)
    s = _sigmoid(params.a * (l - params.b))
    return -params.c * params.a * s * (1.0 - s)


def log_utility_grad(params: UtilityParams, l) -> np.ndarray | float:
    """d log U / dl = -a sigmoid(a (l - b))."""
    return -params.a * _sigmoid(params.a * (np.asarray(l, dtype=float) - params.b))


def log_utility_curvature(params: UtilityParams, l) -> np.ndarray | float:
    """d^2 log U / dl^2 = -a^2 theta / (1 + theta)^2 with theta = e^{-a(l-b)}."""
    s = _sigmoid(params.a * (np.asarray(l, dtype=float) - params.b))
    return -params.a**2 * s * (1.0 - s)


def system_log_utility(classes: Sequence[QosClass], latencies: Mapping[int, float]) -> float:
    """sum_i beta_i log U_i(l_i); -inf once any class utility underflows."""
    total = 0.0
    for c in classes:
        if c.id not in latencies:
            raise KeyError(f"no latency for class {c.id}")
        l = _check_latency(latencies[c.id])
        if c.beta == 0:
            continue
        u = utility(UtilityParams.of(c), l)
        if u <= 0.0:
            return NEG_INF
        total += c.beta * math.log(u)
    return total


class RunningMean:
    """Welford accumulator for streaming delay samples."""

    __slots__ = ("n", "mean", "_m2")

    def __init__(self) -> None:
        self.n = 0
        self.mean = 0.0
        self._m2 = 0.0

    def push(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self._m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        return self._m2 / (self.n - 1) if self.n > 1 else 0.0


def steady_state_utility(params: UtilityParams, delay_samples: Iterable[float]) -> float:
    """Utility of the mean latency (not the mean of per-packet utilities)."""
    acc = RunningMean()
    for x in delay_samples:
        acc.push(float(x))
    if acc.n == 0:
        raise ValueError("steady_state_utility needs at least one sample")
    return utility(params, acc.mean)
