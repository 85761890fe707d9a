"""Stacked M-step prediction model and predicted lane densities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingNeighborTrajectory, ShapeMismatch
from .topology import N_LANES, LaneId


@dataclass(frozen=True)
class StackedModel:
    horizon: int
    B_stack: np.ndarray
    C_stack: np.ndarray

    @property
    def n_states(self):
        return self.B_stack.shape[0] // self.horizon

    def E(self):
        return np.kron(np.ones((self.horizon, 1)), np.eye(self.n_states))

    def phase_block(self, m):
        """Columns of the outflow stack acting on phase ``m`` (0-based) over the horizon."""
        n_in = self.B_stack.shape[1] // self.horizon
        return self.B_stack[:, m::n_in]


def _lower_block_toeplitz(seq):
    M = len(seq)
    r, c = seq[0].shape
    out = np.zeros((r * M, c * M))
    for row in range(M):
        for col in range(row + 1):
            out[row * r:(row + 1) * r, col * c:(col + 1) * c] = seq[col]
    return out


def assemble_stacked(B_seq, C_seq):
    """Block lower-triangular stacks; block (r, c) holds the step-c matrix for c <= r."""
    B_seq = [np.asarray(b, float) for b in B_seq]
    C_seq = [np.asarray(c, float) for c in C_seq]
    M = len(B_seq)
    if M < 1 or len(C_seq) != M:
        raise ShapeMismatch("need M >= 1 outflow and transfer matrices")
    if any(b.shape != B_seq[0].shape for b in B_seq) or any(c.shape != C_seq[0].shape for c in C_seq):
        raise ShapeMismatch("matrices in a sequence must share one shape")
    if B_seq[0].shape[0] != C_seq[0].shape[0]:
        raise ShapeMismatch("outflow and transfer matrices need the same row count")
    return StackedModel(M, _lower_block_toeplitz(B_seq), _lower_block_toeplitz(C_seq))


def predict_trajectory(model, x, U, Z, arrivals=None):
    """Predicted states x(k+1..k+M) stacked: E x - B_stack U + C_stack Z.

    ``arrivals`` (optional) is a per-step exogenous inflow, either one
    n-vector held over the horizon or an M x n array.
    """
    x = np.asarray(x, float)
    U = np.asarray(U, float)
    Z = np.asarray(Z, float)
    M, n = model.horizon, model.n_states
    if x.shape != (n,) or U.shape != (model.B_stack.shape[1],) or Z.shape != (model.C_stack.shape[1],):
        raise ShapeMismatch(
            f"x {x.shape}, U {U.shape}, Z {Z.shape} do not fit a model with "
            f"B_stack {model.B_stack.shape}, C_stack {model.C_stack.shape}"
        )
    y = np.tile(x, M) - model.B_stack @ U + model.C_stack @ Z
    if arrivals is not None:
        w = np.broadcast_to(np.asarray(arrivals, float), (M, n))
        y = y + np.cumsum(w, axis=0).ravel()
    return y


def predicted_densities(topology, trajectories, intersections=None):
    """Lane densities and downstream-average densities over the horizon.

    ``trajectories`` maps intersection id to an (M, 8) array of predicted
    counts.  Returns two dicts of (M, 8) arrays (veh/m).  Lanes with no
    downstream lane in the network get a downstream average of 0.
    """
    ids = sorted(trajectories) if intersections is None else list(intersections)
    rho, rho_bar = {}, {}
    for i in ids:
        if i not in trajectories:
            raise MissingNeighborTrajectory(f"no predicted trajectory for intersection {i}")
        traj = np.asarray(trajectories[i], float)
        M = traj.shape[0]
        rho[i] = traj / topology.lane_lengths[i - 1]
        bar = np.zeros((M, N_LANES))
        for m in range(1, N_LANES + 1):
            ds = topology.downstream_sets[LaneId(i, m)].lanes
            if not ds:
                continue
            acc = np.zeros(M)
            for g in ds:
                if g.intersection not in trajectories:
                    raise MissingNeighborTrajectory(
                        f"lane {i}.{m} needs the trajectory of intersection {g.intersection}"
                    )
                acc += np.asarray(trajectories[g.intersection], float)[:, g.lane - 1] / topology.length(g)
            bar[:, m - 1] = acc / len(ds)
        rho_bar[i] = bar
    return rho, rho_bar
