"""Network-wide MPC solved as one dense QP with the true transfer matrices.

Stands in for a general-purpose solver baseline and doubles as the quality
oracle for the distributed solution.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..qp import solve_grouped_qp
from ..topology import N_LANES, N_PHASES
from .base import Controller, ControllerOutput
from .mpc import MpcParams


@dataclass
class NetworkQP:
    H: np.ndarray
    g: np.ndarray
    const: float
    X0: np.ndarray  # N x M x 8 zero-control trajectory
    G: np.ndarray  # (N*M*8) x (N*4*M)
    horizon: int

    def cost(self, U_all):
        """Objective for an N x 4 x M plan."""
        v = np.asarray(U_all, float).transpose(0, 2, 1).ravel()
        return float(0.5 * v @ self.H @ v + self.g @ v + self.const)

    def trajectory(self, U_all):
        v = np.asarray(U_all, float).transpose(0, 2, 1).ravel()
        return (self.X0.ravel() + self.G @ v).reshape(self.X0.shape)


def build_network_qp(topology, counts, B_seqs, C_seqs, arrivals, r, scale, sink_target=True):
    """Assemble the joint density-balancing QP over all intersections.

    ``B_seqs[i]`` / ``C_seqs[i]`` hold the M outflow / transfer matrices of
    intersection i+1 for steps k .. k+M-1.  Variables are ordered
    intersection-major, then time, then phase.  With ``sink_target`` a lane
    feeding the exits also averages in one empty lane for them.
    """
    N = topology.n_intersections
    M = len(B_seqs[0])
    nx = N * M * N_LANES
    nv = N * M * N_PHASES

    def sidx(i, h):
        return ((i * M) + h) * N_LANES

    def vidx(i, t):
        return (i * M + t) * N_PHASES

    G = np.zeros((nx, nv))
    X0 = np.zeros((N, M, N_LANES))
    for i in range(N):
        nbrs = topology.neighbors(i + 1)
        for h in range(M):
            X0[i, h] = counts[i] + (h + 1) * arrivals[i]
            rows = slice(sidx(i, h), sidx(i, h) + N_LANES)
            for t in range(h + 1):
                G[rows, vidx(i, t):vidx(i, t) + N_PHASES] -= B_seqs[i][t]
                for l, j in enumerate(nbrs):
                    G[rows, vidx(j - 1, t):vidx(j - 1, t) + N_PHASES] += C_seqs[i][t][:, N_PHASES * l:N_PHASES * (l + 1)]
    # deviation operator: scaled (own density - mean downstream density)
    P_rows = []
    for lane, ds in topology.downstream_sets.items():
        n_down = len(ds.lanes) + bool(sink_target and ds.sink)
        if not n_down:
            continue
        i, m = lane.idx
        for h in range(M):
            row = np.zeros(nx)
            row[sidx(i, h) + m] = scale / topology.lane_lengths[i, m]
            for gl in ds.lanes:
                gi, gm = gl.idx
                row[sidx(gi, h) + gm] -= scale / topology.lane_lengths[gi, gm] / n_down
            P_rows.append(row)
    P = np.array(P_rows).reshape(-1, nx)
    PG = P @ G
    d0 = P @ X0.ravel()
    H = 2.0 * PG.T @ PG + 2.0 * np.kron(np.eye(N * M), np.diag(np.broadcast_to(r, (N_PHASES,))))
    g = 2.0 * PG.T @ d0
    return NetworkQP(H, g, float(d0 @ d0), X0, G, M)


class CentralizedReference(Controller):
    name = "centralized_ref"
    uses_oracle = True

    def __init__(self, params=None, tol=1e-8):
        self.params = params if isinstance(params, MpcParams) else MpcParams.from_dict(params or {})
        self.tol = tol

    def reset(self, topology, signal, oracle=None):
        if oracle is None:
            raise ValueError("the centralized reference needs the plant's true transfer matrices")
        super().reset(topology, signal, oracle)
        self.plan = None

    def problem(self, meas):
        M = self.params.horizon
        k = meas.step
        N = self.topology.n_intersections
        B_seqs = [[meas.outflow_matrices[i]] * M for i in range(N)]
        C_seqs = [[self.oracle.true_transfer_matrix(i + 1, k + t) for t in range(M)] for i in range(N)]
        arrivals = meas.arrivals if self.params.use_arrivals else np.zeros_like(meas.arrivals)
        return build_network_qp(self.topology, meas.counts, B_seqs, C_seqs, arrivals,
                                self.params.r, self.params.density_scale, self.params.sink_target)

    def solve(self, qp):
        N = self.topology.n_intersections
        M = qp.horizon
        sig = self.signal
        groups = np.arange(N * M * N_PHASES).reshape(N * M, N_PHASES)
        x0 = None
        if self.plan is not None:
            x0 = np.concatenate([self.plan[:, :, 1:], self.plan[:, :, -1:]], axis=2).transpose(0, 2, 1).ravel()
        v, iters = solve_grouped_qp(qp.H, qp.g, groups, sig.cycle - sig.yellow, sig.u_min, sig.u_max,
                                    x0=x0, tol=self.tol)
        return v.reshape(N, M, N_PHASES).transpose(0, 2, 1), iters

    def control(self, meas):
        t0 = time.perf_counter()
        qp = self.problem(meas)
        U_all, iters = self.solve(qp)
        elapsed = time.perf_counter() - t0
        self.plan = U_all
        return ControllerOutput(u=U_all[:, :, 0].copy(), compute_time=elapsed, solve_times=[elapsed],
                                sweeps=[iters])
