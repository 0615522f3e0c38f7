"""Shared fixtures-as-functions: reference scenarios and seeded generators."""

from __future__ import annotations

import numpy as np

from m2msched.core import PriorityOrder, QosClass, Topology
from m2msched.scenario import bundled, load

AS_BPS = 800.0  # 100 B/s


def s7a():
    return load(bundled("paper_s7a.json"))


def s7a_classes(lam1: float = 0.01) -> tuple[QosClass, ...]:
    return s7a().with_lambda1(lam1).classes


def s7b(det: bool = False):
    return load(bundled("paper_s7b_det.json" if det else "paper_s7b.json"))


def s7c():
    return load(bundled("paper_s7c.json"))


def random_as_classes(rng: np.random.Generator, R: int, load_lo: float, load_hi: float,
                      random_utility: bool = True) -> tuple[list[QosClass], float]:
    """R classes sharing an 800 bit/s server at a load drawn from [lo, hi]."""
    load_ = rng.uniform(load_lo, load_hi)
    s = rng.uniform(40, 200, R) * 8
    lam = rng.dirichlet(np.ones(R)) * load_ * AS_BPS / s
    if random_utility:
        a = rng.uniform(0.1, 2, R)
        b = rng.uniform(0.5, 5, R)
        be = rng.uniform(0.1, 1, R)
    else:
        a = b = be = np.ones(R)
    return [QosClass(i + 1, float(lam[i]), float(s[i]), float(a[i]), float(b[i]), float(be[i])) for i in range(R)], load_


def random_order(rng: np.random.Generator, R: int) -> PriorityOrder:
    return PriorityOrder(tuple(int(x) + 1 for x in rng.permutation(R)))


def random_subcarrier_instance(rng: np.random.Generator):
    """Small joint instance: M in 1..3, R in 2..3, N <= 12, utilized 40-80%."""
    from m2msched.subcarrier import LinkModel, subcarrier_capacity

    M = int(rng.integers(1, 4))
    R = int(rng.integers(2, 4))
    N = int(rng.integers(max(M, 4), 13))
    link = LinkModel(15000, 10, rng.uniform(0.5, 3, M), N)
    cs = [subcarrier_capacity(link, k) for k in range(1, M + 1)]
    s = rng.uniform(100, 2000, R) * 8
    share = rng.dirichlet(np.ones(M)) * N * rng.uniform(0.4, 0.8)
    L = np.zeros((R, M))
    for k in range(M):
        mix = rng.dirichlet(np.ones(R))
        L[:, k] = mix * share[k] * cs[k] / s
    classes = [QosClass(i + 1, float(L[i].sum()), float(s[i]), rng.uniform(0.2, 3), rng.uniform(0.5, 5),
                        rng.uniform(0.2, 1)) for i in range(R)]
    as_cap = 1.3 * sum(L[i].sum() * s[i] for i in range(R)) / 0.6
    return Topology(M, classes, L, as_cap), link


# acceptance results, printed by conftest at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (bool(ok), detail)
