"""Small dense QP routines shared by the solvers and controllers.

All problems are ``min 0.5 x'Hx + g'x`` with H symmetric positive
(semi)definite, box bounds, and optionally fixed-sum groups of variables.
"""
from __future__ import annotations

import numpy as np

from .errors import InfeasibleBox, SolverNonconvergence


def check_box_budget(n, total, lo, hi):
    if n * lo > total + 1e-12 or n * hi < total - 1e-12:
        raise InfeasibleBox(f"{n} green times in [{lo}, {hi}] cannot sum to {total}")


def project_capped_simplex(v, total, lo, hi):
    """Euclidean projection of each row of ``v`` onto {lo <= u <= hi, sum(u) = total}.

    The projection is clip(v + tau) for the shift tau solving a monotone
    piecewise-linear equation, located exactly from its breakpoints.
    """
    v = np.asarray(v, float)
    squeeze = v.ndim == 1
    V = np.atleast_2d(v)
    K, n = V.shape
    check_box_budget(n, total, lo, hi)
    bps = np.sort(np.concatenate([lo - V, hi - V], axis=1), axis=1)  # K x 2n
    vals = np.clip(V[:, None, :] + bps[:, :, None], lo, hi).sum(axis=2)  # K x 2n, nondecreasing
    out = np.empty_like(V)
    for r in range(K):
        f = vals[r]
        j = int(np.searchsorted(f, total))
        if j == 0:
            tau = bps[r, 0]
        elif j >= len(f):
            tau = bps[r, -1]
        elif f[j] == f[j - 1]:
            tau = bps[r, j]
        else:
            t0, t1 = bps[r, j - 1], bps[r, j]
            tau = t0 + (total - f[j - 1]) * (t1 - t0) / (f[j] - f[j - 1])
        u = np.clip(V[r] + tau, lo, hi)
        # spread the rounding residue over the interior coordinates
        free = (u > lo) & (u < hi)
        if free.any():
            u[free] += (total - u.sum()) / free.sum()
        if abs(u.sum() - total) > 1e-9 * max(1.0, abs(total)):
            u = _project_by_pattern(V[r], total, lo, hi)  # breakpoints lost precision
        out[r] = u
    return out[0] if squeeze else out


def _project_by_pattern(v, total, lo, hi):
    """Projection found by trying which coordinates sit at the upper and lower bounds.

    Slow (O(n^3)) but immune to cancellation when the entries of ``v`` are huge.
    """
    n = v.size
    order = np.argsort(-v, kind="stable")
    tol = 1e-9 * max(1.0, float(np.abs(v).max()))
    for n_hi in range(n + 1):
        for n_lo in range(n - n_hi + 1):
            top, mid, bot = order[:n_hi], order[n_hi:n - n_lo], order[n - n_lo:]
            rest = total - n_hi * hi - n_lo * lo
            u = np.empty(n)
            u[top], u[bot] = hi, lo
            if mid.size == 0:
                if abs(rest) <= 1e-9 * max(1.0, abs(total)):
                    return u
                continue
            centre = v[mid].mean()
            level = rest / mid.size
            u[mid] = (v[mid] - centre) + level
            if (u[mid] < lo - 1e-9).any() or (u[mid] > hi + 1e-9).any():
                continue
            if (v[top] - centre + level < hi - tol).any() or (v[bot] - centre + level > lo + tol).any():
                continue
            u[mid] = np.clip(u[mid], lo, hi)
            u[mid] += (total - u.sum()) / mid.size
            return u
    raise InfeasibleBox(f"no projection onto sum {total} within [{lo}, {hi}]")


def box_qp_objective(H, g, x):
    return 0.5 * x @ H @ x + g @ x


def solve_box_qp(H, g, lo, hi, x0=None, tol=1e-10, max_iter=100):
    """Minimize 0.5 x'Hx + g'x over a box, H positive definite.

    Tries the unconstrained minimizer, then projected Newton.  Returns the
    minimizer and the iteration count.
    """
    H = np.asarray(H, float)
    g = np.asarray(g, float)
    n = g.shape[0]
    lo = np.broadcast_to(np.asarray(lo, float), (n,))
    hi = np.broadcast_to(np.asarray(hi, float), (n,))
    try:
        x = np.linalg.solve(H, -g)
        if (x >= lo).all() and (x <= hi).all():  # interior minimizer, no bound active
            return x, 0
    except np.linalg.LinAlgError:
        pass
    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, float), lo, hi)
    scale = max(1.0, np.abs(g).max(initial=0.0), np.abs(H).max(initial=0.0))
    for it in range(1, max_iter + 1):
        grad = H @ x + g
        pg = x - np.clip(x - grad, lo, hi)
        pg_norm = np.abs(pg).max(initial=0.0)
        if pg_norm <= tol * scale:
            return x, it - 1
        eps = min(1e-3, pg_norm)
        active = ((x <= lo + eps) & (grad > 0)) | ((x >= hi - eps) & (grad < 0))
        free = ~active
        d = np.zeros(n)
        if free.any():
            Hff = H[np.ix_(free, free)]
            try:
                d[free] = -np.linalg.solve(Hff, grad[free])
            except np.linalg.LinAlgError:
                d[free] = -grad[free]
        diag = np.maximum(np.diag(H), 1e-12)
        d[active] = -grad[active] / diag[active]
        f0 = box_qp_objective(H, g, x)
        alpha = 1.0
        while True:
            xn = np.clip(x + alpha * d, lo, hi)
            if box_qp_objective(H, g, xn) <= f0 + 1e-4 * grad @ (xn - x) or alpha < 1e-12:
                break
            alpha *= 0.5
        if np.array_equal(xn, x):
            # Newton step stalled on a degenerate active set; take a projected gradient step
            L = max(np.linalg.eigvalsh(H)[-1], 1e-12)
            xn = np.clip(x - grad / L, lo, hi)
        x = xn
    return x, max_iter


def solve_grouped_qp(H, g, groups, totals, lo, hi, x0=None, tol=1e-9, max_iter=200000):
    """Dense QP with box bounds and fixed-sum groups.

    ``groups`` is a K x n integer array of variable indices; each row must sum
    to the matching entry of ``totals``.  Accelerated projected gradient with
    adaptive restart finds the active set, then an equality-constrained KKT
    solve on the free variables polishes the result when it stays feasible.
    Returns (x, iterations).
    """
    H = np.asarray(H, float)
    g = np.asarray(g, float)
    groups = np.atleast_2d(np.asarray(groups, int))
    totals = np.broadcast_to(np.asarray(totals, float), (groups.shape[0],))
    nvar = g.shape[0]

    def project(v):
        out = v.copy()
        for tot in np.unique(totals):
            rows = groups[totals == tot]
            out[rows] = project_capped_simplex(v[rows], tot, lo, hi)
        return out

    L = max(float(np.linalg.eigvalsh(H)[-1]), 1e-12)
    x = project(np.full(nvar, np.mean(totals) / groups.shape[1]) if x0 is None else np.asarray(x0, float))
    y = x.copy()
    t = 1.0
    scale = max(1.0, np.abs(g).max(initial=0.0))
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        grad = H @ y + g
        x_new = project(y - grad / L)
        if L * np.abs(x_new - y).max() <= tol * scale:
            x = x_new
            converged = True
            break
        if (y - x_new) @ (x_new - x) > 0:  # restart momentum when it points uphill
            t = 1.0
            y = x_new
        else:
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            y = x_new + (t - 1) / t_new * (x_new - x)
            t = t_new
        x = x_new
    polished = _polish(H, g, groups, totals, lo, hi, x)
    if polished is not None:
        return polished, it
    if not converged:
        raise SolverNonconvergence(f"grouped QP did not converge in {max_iter} iterations")
    return x, it


def _polish(H, g, groups, totals, lo, hi, x, bound_tol=1e-7):
    nvar = x.shape[0]
    at_lo = x <= lo + bound_tol
    at_hi = x >= hi - bound_tol
    free = ~(at_lo | at_hi)
    xf = np.where(at_lo, lo, np.where(at_hi, hi, x))
    K = groups.shape[0]
    A = np.zeros((K, nvar))
    A[np.repeat(np.arange(K), groups.shape[1]), groups.ravel()] = 1.0
    idx = np.flatnonzero(free)
    rows = A[:, idx].any(axis=1)
    Af = A[np.ix_(rows, idx)]
    rhs_eq = totals[rows] - A[rows][:, ~free] @ xf[~free]
    if not rows.all() and np.abs(A[~rows] @ xf - totals[~rows]).max(initial=0.0) > 1e-9:
        return None
    Hff = H[np.ix_(idx, idx)]
    rhs = -(g[idx] + H[np.ix_(idx, np.flatnonzero(~free))] @ xf[~free])
    nf, ne = idx.size, Af.shape[0]
    kkt = np.block([[Hff, Af.T], [Af, np.zeros((ne, ne))]])
    try:
        sol = np.linalg.lstsq(kkt, np.concatenate([rhs, rhs_eq]), rcond=None)[0]
    except np.linalg.LinAlgError:
        return None
    out = xf.copy()
    out[idx] = sol[:nf]
    if (out < lo - 1e-9).any() or (out > hi + 1e-9).any():
        return None
    if np.abs(A @ out - totals).max(initial=0.0) > 1e-9:
        return None
    # multiplier sign check on the bound-fixed variables; groups with no free
    # variable only need some multiplier in a feasible interval
    grad = H @ out + g
    slack = 1e-6 * max(1.0, np.abs(g).max())
    nu = np.zeros(K)
    nu[rows] = sol[nf:]
    for j in np.flatnonzero(~rows):
        members = groups[j]
        low = -grad[members[at_lo[members]]]
        high = -grad[members[at_hi[members]]]
        if low.max(initial=-np.inf) > high.min(initial=np.inf) + slack:
            return None
        nu[j] = low.max() if low.size else (high.min() if high.size else 0.0)
    red = grad + A.T @ nu
    if (red[at_lo] < -slack).any() or (red[at_hi] > slack).any():
        return None
    return np.clip(out, lo, hi)
