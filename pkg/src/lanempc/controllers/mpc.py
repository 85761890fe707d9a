"""Per-intersection MPC agents exchanging plans in synchronous rounds.

The same agent runs the lane-level model solved by block ADMM (the
distributed controller) and the road-aggregated model solved as one dense QP
per intersection (MPC-Road).  Each round an agent reads only the messages
its contacts sent in the previous round, so the execution order of agents
within a round cannot change the result.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, fields

import numpy as np

from ..admm import AugmentedProblem, solve_block_admm
from ..errors import MalformedConfig, MissingMessage
from ..estimation import ARForecaster, CouplingEstimate, update_transfer_estimate
from ..prediction import assemble_stacked, predict_trajectory
from ..qp import solve_grouped_qp
from ..topology import N_LANES, N_PHASES, PHASE_OF_LANE
from .base import Controller, ControllerOutput, NeighborMessage


@dataclass(frozen=True)
class MpcParams:
    horizon: int = 5
    ar_order: int = 3
    delta: float = 0.5
    ar_weight_bound: float | None = 3.0  # None keeps the raw update unguarded
    mu: float = 1.0
    r: float = 1e-4
    rho_admm: float = 1.0
    eps_stop: float = 1e-3
    T_max: float = 2.0
    max_sweeps: int = 50
    stop_rule: str = "paper"
    cover_first: bool = False
    warm_lambda: bool = True
    density_scale: float = 1000.0  # cost evaluated in veh/km
    masked_estimate: bool = True
    use_arrivals: bool = True
    oracle_transfer: bool = False
    sink_target: bool = True  # exits count as one empty downstream lane

    @classmethod
    def from_dict(cls, params):
        known = {f.name for f in fields(cls)}
        unknown = set(params) - known
        if unknown:
            raise MalformedConfig(f"unknown controller parameters: {', '.join(sorted(unknown))}")
        out = cls(**params)
        if out.horizon < 1:
            raise MalformedConfig("horizon must be >= 1")
        return out


class Aggregation:
    """Maps the 8 lane counts of an intersection onto the controller's states.

    ``lane`` keeps all eight lanes; ``road`` sums the two lanes of each road.
    """

    def __init__(self, topology, kind="lane"):
        if kind not in ("lane", "road"):
            raise ValueError(f"unknown aggregation {kind!r}")
        self.kind = kind
        self.topology = topology
        if kind == "lane":
            self.T = np.eye(N_LANES)
        else:
            self.T = np.zeros((4, N_LANES))
            for r in range(4):
                self.T[r, 2 * r:2 * r + 2] = 1.0
        self.n = self.T.shape[0]
        self._down, self._sink = {}, {}
        for i in range(1, topology.n_intersections + 1):
            per_state, sinks = [], []
            for s in range(self.n):
                targets, sink = set(), False
                for m in np.flatnonzero(self.T[s]):
                    ds = topology.downstream_sets[(i, m + 1)]
                    sink |= ds.sink
                    for g in ds.lanes:
                        targets.add((g.intersection, self.state_of(g.lane - 1)))
                per_state.append(tuple(sorted(targets)))
                sinks.append(sink)
            self._down[i] = per_state
            self._sink[i] = sinks

    def state_of(self, lane):
        return int(np.flatnonzero(self.T[:, lane])[0])

    def lengths(self, i):
        return self.T @ self.topology.lane_lengths[i - 1]

    def downstream(self, i):
        return self._down[i]

    def feeds_sink(self, i):
        return self._sink[i]

    def outflow_pattern(self):
        B = np.zeros((N_LANES, N_PHASES), dtype=bool)
        B[np.arange(N_LANES), PHASE_OF_LANE] = True
        return (self.T @ B) > 0

    def transfer_pattern(self, i):
        return (self.T @ self.topology.transfer_pattern(i)) > 0


def build_local_cost(model, x, Z, arrivals, rho_bar, lengths, active, r, scale):
    """Quadratic cost 0.5 U'HU + g'U + const of the density-balancing objective.

    U is time-major (u(k), u(k+1), ...).  Each state flagged in ``active``
    contributes its squared deviation from ``rho_bar`` over the horizon.
    Returns H, g, per-state constants and the zero-control trajectory (M x n).
    """
    M, n = model.horizon, model.n_states
    nu = model.B_stack.shape[1]
    base = predict_trajectory(model, x, np.zeros(nu), Z, arrivals).reshape(M, n)
    H = 2.0 * np.kron(np.eye(M), np.diag(np.broadcast_to(r, (N_PHASES,))))
    g = np.zeros(nu)
    const = np.zeros(n)
    for s in range(n):
        if not active[s]:
            continue
        A = (scale / lengths[s]) * model.B_stack[s::n, :]
        c = scale * (base[:, s] / lengths[s] - rho_bar[:, s])
        H += 2.0 * A.T @ A
        g -= 2.0 * A.T @ c
        const[s] = c @ c
    return H, g, const, base


def shifted(plan):
    """Drop the first column of a 4 x M plan and repeat the last one."""
    return np.concatenate([plan[:, 1:], plan[:, -1:]], axis=1)


class MpcAgent:
    def __init__(self, i, topology, signal, params, agg, solver="admm", oracle=None):
        self.i = i
        self.topology = topology
        self.signal = signal
        self.p = params
        self.agg = agg
        self.solver = solver
        self.oracle = oracle
        self.neighbors = topology.neighbors(i)
        self.contacts = topology.contacts(i)
        n_cols = N_PHASES * len(self.neighbors)
        mask = agg.transfer_pattern(i) if params.masked_estimate else None
        self.estimate = CouplingEstimate.zeros(agg.n, n_cols, params.mu, mask)
        self.forecaster = ARForecaster(agg.outflow_pattern(), agg.transfer_pattern(i), params.ar_order,
                                       params.delta, params.ar_weight_bound)
        self.lengths = agg.lengths(i)
        self.downstream = agg.downstream(i)
        self.sink = agg.feeds_sink(i) if params.sink_target else [False] * agg.n
        self.active = [bool(d) or k for d, k in zip(self.downstream, self.sink)]
        budget = signal.cycle - signal.yellow
        self.plan = np.full((N_PHASES, params.horizon), budget / 4)
        self.lam = None
        self.prev = None  # (x, B, u) of the previous step
        self.last_prediction = None

    def initial_message(self, meas):
        x = self.agg.T @ meas.counts[self.i - 1]
        return NeighborMessage(self.i, meas.step - 1, self.plan.copy(), np.tile(x, (self.p.horizon, 1)))

    def _true_transfer(self, k):
        return self.agg.T @ self.oracle.true_transfer_matrix(self.i, k)

    def step(self, meas, inbox):
        p = self.p
        M = p.horizon
        k = meas.step
        for j in self.contacts:
            msg = inbox.get(j)
            if msg is None or msg.step != k - 1:
                raise MissingMessage(f"intersection {self.i} has no step-{k - 1} message from {j}")
        T = self.agg.T
        x = T @ meas.counts[self.i - 1]
        B = T @ meas.outflow_matrices[self.i - 1]
        w = T @ meas.arrivals[self.i - 1] if p.use_arrivals else np.zeros(self.agg.n)

        # (a) transfer estimate from last step's applied neighbour controls
        if self.prev is not None and self.neighbors:
            x_prev, B_prev, u_prev = self.prev
            z_prev = np.concatenate([inbox[j].U[:, 0] for j in self.neighbors])
            self.estimate = update_transfer_estimate(self.estimate, x, x_prev, B_prev, u_prev, z_prev,
                                                     arrivals=w if p.use_arrivals else None)
        # (b) coefficient forecasts over the horizon
        C_now = self._true_transfer(k) if p.oracle_transfer else self.estimate.C_hat
        self.forecaster.update(B, C_now)
        B_f, C_f, fallback = self.forecaster.forecast(M)
        if p.oracle_transfer:
            C_f = [self._true_transfer(k + h) for h in range(1, M)]
        # (c) stacked model; neighbour plans shifted one step
        model = assemble_stacked([B] + B_f, [C_now] + C_f)
        Z = np.concatenate([
            np.concatenate([inbox[j].U[:, min(h + 1, M - 1)] for j in self.neighbors]) if self.neighbors else np.zeros(0)
            for h in range(M)
        ])
        # (d) downstream averages from neighbours' broadcast trajectories
        rho_bar = np.zeros((M, self.agg.n))
        for s, targets in enumerate(self.downstream):
            for j, t in targets:
                y = inbox[j].y
                traj = np.concatenate([y[1:], y[-1:]], axis=0)[:, t]
                rho_bar[:, s] += traj / self.agg.lengths(j)[t]
            if targets or self.sink[s]:
                rho_bar[:, s] /= len(targets) + self.sink[s]
        H, g, const, _ = build_local_cost(model, x, Z, w, rho_bar, self.lengths, self.active, p.r, p.density_scale)
        # (e) solve
        warm = shifted(self.plan)
        t0 = time.perf_counter()
        diag = {}
        if self.solver == "admm":
            Hb = np.stack([H[m::N_PHASES, m::N_PHASES] for m in range(N_PHASES)])
            gb = np.stack([g[m::N_PHASES] for m in range(N_PHASES)])
            cb = np.array([const[PHASE_OF_LANE == m].sum() if self.agg.n == N_LANES else 0.0 for m in range(N_PHASES)])
            prob = AugmentedProblem(Hb, gb, self.signal.cycle, self.signal.yellow, self.signal.u_min,
                                    self.signal.u_max, rho=p.rho_admm, const=cb, cover_first=p.cover_first)
            lam0 = None
            if p.warm_lambda and self.lam is not None:
                lam0 = np.concatenate([self.lam[1:], self.lam[-1:]]) if len(self.lam) else self.lam
            U, self.lam, trace, theta = solve_block_admm(prob, U0=warm, lam0=lam0, eps_stop=p.eps_stop,
                                                         T_max=p.T_max, max_sweeps=p.max_sweeps,
                                                         stop_rule=p.stop_rule)
            diag = {"sweeps": len(trace), "residual": float(np.linalg.norm(theta)), "trace": trace}
        else:
            groups = np.arange(N_PHASES * M).reshape(M, N_PHASES)
            v, iters = solve_grouped_qp(H, g, groups, self.signal.cycle - self.signal.yellow,
                                        self.signal.u_min, self.signal.u_max, x0=warm.T.ravel())
            U = v.reshape(M, N_PHASES).T
            diag = {"sweeps": iters, "residual": 0.0}
        diag["solve_time"] = time.perf_counter() - t0
        diag["fallback"] = fallback
        # (f) apply first control, broadcast plan and prediction
        self.plan = U
        u = U[:, 0].copy()
        y = predict_trajectory(model, x, U.T.ravel(), Z, w).reshape(M, self.agg.n)
        self.last_prediction = y
        self.prev = (x, B, u)
        return u, NeighborMessage(self.i, k, U.copy(), y), diag


class DistributedMpc(Controller):
    """Synchronous-round coordinator for one MpcAgent per intersection."""

    def __init__(self, name="dmpc_admm", aggregation="lane", solver="admm", params=None, order=None):
        self.name = name
        self.aggregation = aggregation
        self.solver = solver
        self.params = params if isinstance(params, MpcParams) else MpcParams.from_dict(params or {})
        self.order = order
        self.uses_oracle = self.params.oracle_transfer

    def reset(self, topology, signal, oracle=None):
        super().reset(topology, signal, oracle)
        agg = Aggregation(topology, self.aggregation)
        self.agents = {
            i: MpcAgent(i, topology, signal, self.params, agg, self.solver, oracle)
            for i in range(1, topology.n_intersections + 1)
        }
        self.outbox = None

    def control(self, meas):
        if self.outbox is None:
            self.outbox = {i: a.initial_message(meas) for i, a in self.agents.items()}
        order = self.order or sorted(self.agents)
        u = np.zeros((self.topology.n_intersections, N_PHASES))
        new_outbox = {}
        out = ControllerOutput(u=u)
        agent_times = {}
        results = {}
        for i in order:
            agent = self.agents[i]
            inbox = {j: self.outbox[j] for j in agent.contacts}
            t0 = time.perf_counter()
            results[i] = agent.step(meas, inbox)
            agent_times[i] = time.perf_counter() - t0
        for i in sorted(results):
            ui, msg, diag = results[i]
            u[i - 1] = ui
            new_outbox[i] = msg
            out.solve_times.append(diag["solve_time"])
            out.sweeps.append(diag["sweeps"])
            out.residuals.append(diag["residual"])
            out.forecast_fallback.append(diag["fallback"])
            if "trace" in diag:
                out.traces.append((i, diag["trace"]))
        self.outbox = new_outbox
        # agents run in parallel, so a step costs one agent's time on average
        out.compute_time = float(np.mean([agent_times[i] for i in sorted(agent_times)]))
        return out
