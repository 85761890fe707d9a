from __future__ import annotations

import time

import numpy as np

from ..qp import project_capped_simplex
from ..topology import LANES_OF_PHASE, N_LANES
from .base import Controller, ControllerOutput


def lane_pressures(topology, counts, saturation_rows):
    """Saturation-weighted density difference between each lane and its downstream set."""
    rho = counts / topology.lane_lengths
    out = np.zeros_like(counts, dtype=float)
    for lane, ds in topology.downstream_sets.items():
        i, m = lane.idx
        down = np.mean([rho[g.idx] for g in ds.lanes]) if ds.lanes else 0.0
        out[i, m] = saturation_rows[i, m] * (rho[i, m] - down)
    return out


def allocate_by_pressure(pressure, signal):
    """Green times proportional to positive phase pressure, projected onto the cycle and bounds."""
    budget = signal.cycle - signal.yellow
    pos = np.maximum(pressure, 0.0)
    if pos.sum() <= 0.0:
        target = np.full(4, budget / 4)
    else:
        target = budget * pos / pos.sum()
    return project_capped_simplex(target, budget, signal.u_min, signal.u_max)


def max_pressure(meas, topology, signal):
    sat = np.array([[B[m, :].max() for m in range(N_LANES)] for B in meas.outflow_matrices])
    lp = lane_pressures(topology, meas.counts, sat)
    u = np.empty((topology.n_intersections, 4))
    for i in range(topology.n_intersections):
        phase_p = lp[i, LANES_OF_PHASE].sum(axis=1)
        u[i] = allocate_by_pressure(phase_p, signal)
    return ControllerOutput(u=u)


class MaxPressure(Controller):
    name = "max_pressure"

    def control(self, meas):
        t0 = time.perf_counter()
        out = max_pressure(meas, self.topology, self.signal)
        out.compute_time = time.perf_counter() - t0
        return out
