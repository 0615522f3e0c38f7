"""Per-class delay statistics with batch-means confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from ..core import QosClass
from ..utility import UtilityParams, system_log_utility, utility

N_BATCHES = 20
CONFIDENCE = 0.99


@dataclass
class SimResult:
    ids: tuple[int, ...]
    mean: dict[int, float]
    variance: dict[int, float]
    count: dict[int, int]
    ci: dict[int, float]
    utility: dict[int, float]
    system_log_utility: float
    seed: int
    horizon: float  # measured window T_s, seconds
    order_fractions: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict, compare=False, repr=False)
    delays: dict[int, np.ndarray] = field(default_factory=dict, compare=False, repr=False)

    def contains(self, cls: int, value: float) -> bool:
        return abs(self.mean[cls] - value) <= self.ci[cls]

    def utility_ci(self, classes: Sequence[QosClass]) -> tuple[float, float]:
        """Range of the system log-utility over the per-class mean CIs."""
        lo = {c.id: max(0.0, self.mean[c.id] + self.ci[c.id]) for c in classes}
        hi = {c.id: max(0.0, self.mean[c.id] - self.ci[c.id]) for c in classes}
        return system_log_utility(classes, lo), system_log_utility(classes, hi)


def batch_means(x: np.ndarray, batches: int = N_BATCHES, confidence: float = CONFIDENCE) -> tuple[float, float]:
    """(mean, CI half-width) from contiguous, equal-size batches."""
    n = len(x)
    if n < batches:
        return float(np.mean(x)) if n else math.nan, math.inf
    size = n // batches
    means = x[: size * batches].reshape(batches, size).mean(axis=1)
    half = sps.t.ppf(0.5 + confidence / 2, batches - 1) * means.std(ddof=1) / math.sqrt(batches)
    return float(np.mean(x)), float(half)


def summarize(classes: Sequence[QosClass], origin: np.ndarray, cls: np.ndarray, delay: np.ndarray,
              t_warm: float, t_end: float, seed: int, order_fractions=None, keep_delays: bool = False,
              extra=None) -> SimResult:
    window = (origin >= t_warm) & (origin < t_end)
    if np.any(np.isnan(delay[window])):
        raise RuntimeError("measured packet left unserved; simulation tail too short")
    mean, var, cnt, ci, util, kept = {}, {}, {}, {}, {}, {}
    for c in classes:
        d = delay[window & (cls == c.id)]
        if len(d) == 0:
            raise RuntimeError(f"no samples for class {c.id}; increase horizon")
        m, h = batch_means(d)
        mean[c.id], ci[c.id], cnt[c.id] = m, h, int(len(d))
        var[c.id] = float(np.var(d, ddof=1)) if len(d) > 1 else 0.0
        util[c.id] = utility(UtilityParams.of(c), m)
        if keep_delays:
            kept[c.id] = d
    v = system_log_utility(classes, mean)
    return SimResult(tuple(c.id for c in classes), mean, var, cnt, ci, util, v, int(seed), float(t_end - t_warm),
                     dict(order_fractions or {}), dict(extra or {}), kept)
