"""Shared controller interface and message types."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ControllerOutput:
    u: np.ndarray  # N x 4 green times
    compute_time: float = 0.0  # seconds, per-step computation time reported in KPIs
    solve_times: list = field(default_factory=list)  # per-intersection solver seconds
    sweeps: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    traces: list = field(default_factory=list)  # (intersection, SolverTrace)
    forecast_fallback: list = field(default_factory=list)


@dataclass(frozen=True)
class NeighborMessage:
    sender: int
    step: int
    U: np.ndarray  # 4 x M planned green times
    y: np.ndarray  # M x n predicted states, x(k+1) .. x(k+M) as seen from the sender's step


class Controller:
    """Base class; subclasses implement :meth:`control`."""

    name = "controller"
    uses_oracle = False

    def reset(self, topology, signal, oracle=None):
        self.topology = topology
        self.signal = signal
        self.oracle = oracle

    def control(self, meas):
        raise NotImplementedError
