"""Baseline scheduler weights, inversely proportional to each class's
delay requirement b + 4/a."""

from __future__ import annotations

import math
from typing import Sequence

from ..core import QosClass

WFS_SCALE = 1e4
WRR_MIN = 50


def delay_requirement(c: QosClass) -> float:
    return c.b + 4.0 / c.a


def derive_baseline_weights(classes: Sequence[QosClass]) -> dict[str, list[int]]:
    """Integer WRR and WFS weights.

    WFS: round(1e4 / (b + 4/a)). WRR: proportional to 1/((b + 4/a) * bytes),
    scaled by the smallest power of ten that lifts the minimum weight to at
    least 50, then rounded half-to-even.
    """
    wfs = [round(WFS_SCALE / delay_requirement(c)) for c in classes]
    raw = [1.0 / (delay_requirement(c) * (c.packet_size / 8.0)) for c in classes]
    scale = 10.0 ** math.ceil(math.log10(WRR_MIN / min(raw)))
    wrr = [max(1, round(r * scale)) for r in raw]
    return {"wrr": wrr, "wfs": wfs}
