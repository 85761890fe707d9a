"""ADMM solvers: a generic two-block method and the four-block coordinate
variant used by each intersection to split its green-time problem by phase.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import Divergence, InfeasibleBox, ShapeMismatch
from .qp import check_box_budget, project_capped_simplex, solve_box_qp


@dataclass(frozen=True)
class Quadratic:
    """0.5 x'Px + q'x, optionally restricted to a box."""

    P: np.ndarray
    q: np.ndarray
    lo: float | np.ndarray | None = None
    hi: float | np.ndarray | None = None

    def __call__(self, x):
        return float(0.5 * x @ self.P @ x + self.q @ x)

    @property
    def boxed(self):
        return self.lo is not None or self.hi is not None

    def minimize(self, H_extra, q_extra, x0):
        H = self.P + H_extra
        q = self.q + q_extra
        if self.boxed:
            lo = -np.inf if self.lo is None else self.lo
            hi = np.inf if self.hi is None else self.hi
            return solve_box_qp(H, q, lo, hi, x0=x0, tol=1e-12)[0]
        return np.linalg.solve(H, -q)


@dataclass
class TraceRow:
    iteration: int
    r: float
    s: float
    objective: float
    ms: float


@dataclass
class SolverTrace:
    rows: list = field(default_factory=list)
    stop_reason: str | None = None

    def __len__(self):
        return len(self.rows)

    @property
    def last(self):
        return self.rows[-1]


def write_trace_csv(traces, fh):
    """``traces`` yields (step, intersection, SolverTrace)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["step", "intersection", "sweep", "r", "s", "objective", "ms"])
    for step, i, trace in traces:
        for row in trace.rows:
            w.writerow([step, i, row.iteration, repr(row.r), repr(row.s), repr(row.objective), f"{row.ms:.3f}"])


def solve_two_block(f, g, A, B, d, rho=1.0, tol_primal=1e-8, tol_dual=1e-8, max_iter=10000, z0=None):
    """Minimize f(x) + g(z) subject to Ax + Bz = d by ADMM.

    ``f`` and ``g`` are :class:`Quadratic` terms.  The z iterate starts at the
    minimizer of g alone unless ``z0`` is given.  Returns (x, z, trace).
    """
    A, B, d = (np.atleast_2d(np.asarray(A, float)), np.atleast_2d(np.asarray(B, float)), np.atleast_1d(np.asarray(d, float)))
    if A.shape[0] != d.shape[0] or B.shape[0] != d.shape[0]:
        raise ShapeMismatch("A, B and d must have the same number of rows")
    if A.shape[1] != f.q.shape[0] or B.shape[1] != g.q.shape[0]:
        raise ShapeMismatch("A and B columns must match the variable sizes")
    if not rho > 0:
        raise ValueError("rho must be positive")
    n_z = g.q.shape[0]
    if z0 is None:
        try:
            z = g.minimize(np.zeros((n_z, n_z)), np.zeros(n_z), np.zeros(n_z))
        except np.linalg.LinAlgError:
            z = np.zeros(n_z)
    else:
        z = np.asarray(z0, float).copy()
    x = np.zeros(A.shape[1])
    lam = np.zeros(d.shape[0])
    AtA, BtB = A.T @ A, B.T @ B
    trace = SolverTrace()
    r0 = None
    t0 = time.perf_counter()
    for it in range(1, max_iter + 1):
        x = f.minimize(rho * AtA, A.T @ lam + rho * A.T @ (B @ z - d), x)
        z_old = z
        z = g.minimize(rho * BtB, B.T @ lam + rho * B.T @ (A @ x - d), z)
        r = A @ x + B @ z - d
        lam = lam + rho * r
        s = rho * A.T @ B @ (z - z_old)
        rn, sn = float(np.linalg.norm(r)), float(np.linalg.norm(s))
        trace.rows.append(TraceRow(it, rn, sn, f(x) + g(z), 1e3 * (time.perf_counter() - t0)))
        if r0 is None:
            r0 = max(rn, 1e-12)
        elif rn > 1e6 * r0:
            trace.stop_reason = "diverged"
            raise Divergence(f"primal residual grew from {r0:.3e} to {rn:.3e}; check rho")
        if rn <= tol_primal and sn <= tol_dual:
            trace.stop_reason = "tolerance"
            break
    else:
        trace.stop_reason = "max_iter"
    return x, z, trace


@dataclass
class AugmentedProblem:
    """Per-intersection green-time problem split into four phase blocks.

    Block m carries the cost 0.5 U'H[m]U + g[m]'U + const[m] over its
    horizon sequence U (length M).  The cycle residual stacks
    sum_m u_m(k+h) + yellow - cycle over the covered steps: all h when
    ``cover_first`` is set, otherwise h = 1..M-1.
    """

    H: np.ndarray  # 4 x M x M
    g: np.ndarray  # 4 x M
    cycle: float
    yellow: float
    u_min: float
    u_max: float
    rho: float = 1.0
    const: np.ndarray | None = None
    cover_first: bool = True

    def __post_init__(self):
        self.H = np.asarray(self.H, float)
        self.g = np.asarray(self.g, float)
        if self.H.ndim != 3 or self.H.shape[0] != 4 or self.H.shape[1:] != (self.horizon, self.horizon):
            raise ShapeMismatch("H must be 4 x M x M")
        if self.g.shape != (4, self.horizon):
            raise ShapeMismatch("g must be 4 x M")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.const is None:
            self.const = np.zeros(4)

    @property
    def horizon(self):
        return self.g.shape[1] if self.g.ndim == 2 else self.H.shape[1]

    @property
    def covered(self):
        return np.arange(0 if self.cover_first else 1, self.horizon)

    def block_cost(self, m, U_m):
        return float(0.5 * U_m @ self.H[m] @ U_m + self.g[m] @ U_m + self.const[m])

    def objective(self, U):
        return sum(self.block_cost(m, U[m]) for m in range(4))

    def residual(self, U):
        return (U.sum(axis=0) + self.yellow - self.cycle)[self.covered]


def project_cycle(U, cycle, yellow, u_min, u_max):
    """Project a 4 x M plan onto exact cycles with box-bounded phases, step by step."""
    return project_capped_simplex(np.asarray(U, float).T, cycle - yellow, u_min, u_max).T


class _BlockSolver:
    """Box QP with a fixed Hessian, retrying the last active set before a full solve.

    A guessed active set is accepted only if the reduced solution is inside the
    box and every bound multiplier has the right sign, so the answer is exact.
    """

    def __init__(self, H, lo, hi):
        self.H, self.lo, self.hi = H, lo, hi
        n = H.shape[0]
        self.at_lo = np.zeros(n, bool)
        self.at_hi = np.zeros(n, bool)
        self._inv = {}

    def _reduced_inverse(self, free):
        key = free.tobytes()
        if key not in self._inv:
            try:
                self._inv[key] = np.linalg.inv(self.H[np.ix_(free, free)])
            except np.linalg.LinAlgError:
                self._inv[key] = None
        return self._inv[key]

    def _try(self, g):
        at_lo, at_hi = self.at_lo, self.at_hi
        free = ~(at_lo | at_hi)
        x = np.where(at_lo, self.lo, np.where(at_hi, self.hi, 0.0))
        if free.any():
            inv = self._reduced_inverse(free)
            if inv is None:
                return None
            x[free] = -inv @ (g[free] + self.H[np.ix_(free, ~free)] @ x[~free])
            if (x[free] < self.lo).any() or (x[free] > self.hi).any():
                return None
        grad = self.H @ x + g
        if (grad[at_lo] < 0).any() or (grad[at_hi] > 0).any():
            return None
        return x

    def __call__(self, g, x0):
        x = self._try(g)
        if x is None:
            x = solve_box_qp(self.H, g, self.lo, self.hi, x0=x0, tol=1e-12)[0]
            self.at_lo = x <= self.lo
            self.at_hi = x >= self.hi
        return x


def solve_block_admm(problem, U0=None, lam0=None, eps_stop=1e-3, T_max=2.0, max_sweeps=50,
                     stop_rule="paper", clock=time.perf_counter):
    """Gauss-Seidel sweeps over the four phase blocks followed by dual ascent.

    ``stop_rule="paper"`` stops once ||lambda - residual||_inf < eps_stop;
    ``stop_rule="residual"`` stops once both the primal residual and the
    dual residual have 2-norm below eps_stop.  Either way the loop also ends
    after ``max_sweeps`` sweeps or when ``T_max`` seconds have elapsed, and at
    least one sweep is always made.  The returned plan is projected onto
    exact cycles.  Returns (U, lam, trace, residual_before_projection).
    """
    p = problem
    M = p.horizon
    budget = p.cycle - p.yellow
    try:
        check_box_budget(4, budget, p.u_min, p.u_max)
    except InfeasibleBox:
        raise InfeasibleBox(
            f"4 x [{p.u_min}, {p.u_max}] cannot fill a {p.cycle} s cycle with {p.yellow} s yellow"
        ) from None
    if stop_rule not in ("paper", "residual"):
        raise ValueError(f"unknown stop rule {stop_rule!r}")
    U = np.full((4, M), budget / 4) if U0 is None else np.clip(np.array(U0, float), p.u_min, p.u_max)
    if U.shape != (4, M):
        raise ShapeMismatch(f"warm start must be 4 x {M}")
    rows = p.covered
    sel = np.zeros(M)
    sel[rows] = 1.0
    PtP = np.diag(sel)
    lam = np.zeros(len(rows)) if lam0 is None else np.array(lam0, float)
    if lam.shape != (len(rows),):
        raise ShapeMismatch(f"multiplier must have length {len(rows)}")
    lam_full = np.zeros(M)
    trace = SolverTrace()
    t_start = clock()
    theta0 = None
    # block Hessians do not change between sweeps, and active sets rarely do
    H_blocks = [p.H[m] + p.rho * PtP for m in range(4)]
    solvers = [_BlockSolver(H, p.u_min, p.u_max) for H in H_blocks]
    for sweep in range(1, max_sweeps + 1):
        lam_full[rows] = lam
        U_prev = U.copy()
        for m in range(4):
            rest = U.sum(axis=0) - U[m] + p.yellow - p.cycle
            g = p.g[m] + lam_full + p.rho * sel * rest
            U[m] = solvers[m](g, U[m])
        theta = p.residual(U)
        lam = lam + p.rho * theta
        dU = (U - U_prev)[:, rows]
        tail = np.cumsum(dU[::-1], axis=0)[::-1]  # sum over later blocks
        s = p.rho * max(float(np.linalg.norm(tail[mm])) for mm in range(1, 4))
        r = float(np.linalg.norm(theta))
        elapsed = clock() - t_start
        trace.rows.append(TraceRow(sweep, r, s, p.objective(U), 1e3 * elapsed))
        if theta0 is None:
            theta0 = max(r, 1e-9)
        elif r > 1e6 * theta0:
            trace.stop_reason = "diverged"
            raise Divergence(f"cycle residual grew from {theta0:.3e} to {r:.3e}; check rho")
        if stop_rule == "paper":
            eps = float(np.abs(lam - theta).max(initial=0.0))
            done = eps < eps_stop
        else:
            done = r < eps_stop and s < eps_stop
        if done:
            trace.stop_reason = "tolerance"
            break
        if elapsed > T_max:
            trace.stop_reason = "time_budget"
            break
    else:
        trace.stop_reason = "max_iter"
    theta_final = p.residual(U)
    U_feasible = project_cycle(U, p.cycle, p.yellow, p.u_min, p.u_max)
    return U_feasible, lam, trace, theta_final
