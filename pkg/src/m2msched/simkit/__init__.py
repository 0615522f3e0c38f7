"""Discrete-event simulation of aggregator and server queues."""

from .engine import run_node, simulate_node, stream
from .schedulers import FixedPriority, MaxWeight, PriorityLevels, TimeSharing, WFS, WRR
from .stats import SimResult, batch_means

__all__ = ["run_node", "simulate_node", "stream", "FixedPriority", "MaxWeight", "PriorityLevels", "TimeSharing", "WFS", "WRR",
           "SimResult", "batch_means"]
