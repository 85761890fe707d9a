from __future__ import annotations

import numpy as np

from ..qp import project_capped_simplex
from .base import Controller, ControllerOutput


def fixed_time_plan(signal):
    """Quarter of the usable cycle per phase, kept inside the green-time bounds."""
    budget = signal.cycle - signal.yellow
    return project_capped_simplex(np.full(4, budget / 4), budget, signal.u_min, signal.u_max)


def fixed_time(topology, signal, k=None):
    return ControllerOutput(u=np.tile(fixed_time_plan(signal), (topology.n_intersections, 1)))


class FixedTime(Controller):
    name = "fixed_time"

    def reset(self, topology, signal, oracle=None):
        super().reset(topology, signal, oracle)
        self._plan = fixed_time_plan(signal)

    def control(self, meas):
        return ControllerOutput(u=np.tile(self._plan, (self.topology.n_intersections, 1)))
