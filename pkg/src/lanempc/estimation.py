"""Online estimation of transfer matrices and AR forecasting of model coefficients."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .errors import InsufficientHistory, ShapeMismatch


@dataclass(frozen=True)
class CouplingEstimate:
    C_hat: np.ndarray
    mu: float = 1.0
    mask: np.ndarray | None = None  # restricts the update to the live transfer entries

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.mask is not None and self.mask.shape != self.C_hat.shape:
            raise ShapeMismatch("mask shape must match C_hat")

    @classmethod
    def zeros(cls, n_rows, n_cols, mu=1.0, mask=None):
        return cls(np.zeros((n_rows, n_cols)), mu, mask)


def estimation_residual(C, x_k, x_km1, B_km1, u_km1, z_km1, arrivals=None):
    """One-step model error x(k) - x(k-1) + B u - C z (minus known arrivals)."""
    e = x_k - x_km1 + B_km1 @ u_km1 - C @ z_km1
    if arrivals is not None:
        e = e - arrivals
    return e


def estimation_objective(C, C_prev, mu, x_k, x_km1, B_km1, u_km1, z_km1, arrivals=None):
    e = estimation_residual(C, x_k, x_km1, B_km1, u_km1, z_km1, arrivals)
    return float(e @ e + mu * np.sum((C - C_prev) ** 2))


def update_transfer_estimate(est, x_k, x_km1, B_km1, u_km1, z_km1, arrivals=None):
    """Regularized one-step least-squares update of the transfer matrix.

    Minimizes ``|x_k - x_km1 + B u - C z|^2 + mu |C - C_prev|_F^2`` over C.
    Without a mask this is the closed form
    ``C_prev + e z^T (mu I + z z^T)^-1``; with a mask each row is minimized
    over its live entries only (rows decouple, so this is exact too).
    """
    C_prev = est.C_hat
    n, q = C_prev.shape
    x_k, x_km1 = np.asarray(x_k, float), np.asarray(x_km1, float)
    u_km1, z_km1 = np.asarray(u_km1, float), np.asarray(z_km1, float)
    if x_k.shape != (n,) or x_km1.shape != (n,) or z_km1.shape != (q,):
        raise ShapeMismatch(f"expected states of length {n} and neighbour input of length {q}")
    if B_km1.shape != (n, u_km1.shape[0]):
        raise ShapeMismatch("outflow matrix does not match state/control sizes")
    if q == 0:
        return est
    e = estimation_residual(C_prev, x_k, x_km1, B_km1, u_km1, z_km1, arrivals)
    if est.mask is None:
        # e z^T (mu I + z z^T)^-1 == outer(e, w) with (mu I + z z^T) w = z (symmetric system)
        w = np.linalg.solve(est.mu * np.eye(q) + np.outer(z_km1, z_km1), z_km1)
        C_new = C_prev + np.outer(e, w)
    else:
        zm = est.mask * z_km1
        gain = zm / (est.mu + np.sum(zm * zm, axis=1, keepdims=True))
        C_new = C_prev + e[:, None] * gain
    return replace(est, C_hat=C_new)


def update_ar_weights(weights, regressor, target, delta):
    """Normalized-gradient step for AR weights shared across vector entries.

    ``regressor`` is p x n (row q holds the series value q+1 steps back),
    ``target`` the newest value (length n).  The step size uses the 2-norm of
    the stacked regressor, offset by ``delta`` so it stays finite at zero.
    """
    eta = np.atleast_2d(np.asarray(regressor, float))
    target = np.atleast_1d(np.asarray(target, float))
    err = target - eta.T @ weights
    return weights + eta @ err / (delta + np.linalg.norm(eta))


class ARSeries:
    """Buffered AR model for one coefficient vector."""

    def __init__(self, order=3, delta=0.5, weights=None, weight_bound=None):
        if not 1 <= order:
            raise ValueError("order must be >= 1")
        if not 0 < delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        self.order = order
        self.delta = delta
        if weights is None:
            weights = np.zeros(order)
            weights[0] = 1.0
        self.weights = np.asarray(weights, float).copy()
        if self.weights.shape != (order,):
            raise ShapeMismatch(f"need {order} weights")
        self.history = deque(maxlen=order + 1)
        self.last_error = np.nan
        # the update gain grows with the regressor norm, so large series can
        # drive the weights unstable; past this l1 bound they restart at hold-last
        self.weight_bound = weight_bound
        self.resets = 0
        self.just_reset = False

    def regressor(self):
        """p x n stack of the newest p values, newest first."""
        return np.array(list(self.history)[::-1][: self.order])

    def push(self, value):
        """Append the latest value, updating the weights once p past values exist."""
        value = np.atleast_1d(np.asarray(value, float)).copy()
        if len(self.history) >= self.order:
            eta = self.regressor()
            self.last_error = float(np.max(np.abs(value - eta.T @ self.weights), initial=0.0))
            self.weights = update_ar_weights(self.weights, eta, value, self.delta)
            bound = self.weight_bound
            self.just_reset = bool(bound is not None and not np.abs(self.weights).sum() <= bound)
            if self.just_reset:
                self.weights = np.eye(self.order)[0]
                self.resets += 1
        self.history.append(value)

    @property
    def ready(self):
        return len(self.history) >= self.order

    def forecast(self, steps):
        """Feed forecasts back into the recursion for ``steps`` steps ahead."""
        if not self.history:
            raise InsufficientHistory("no values buffered")
        if not self.ready:
            raise InsufficientHistory(f"need {self.order} values, have {len(self.history)}")
        window = list(self.regressor())  # newest first
        out = []
        for _ in range(steps):
            nxt = sum(w * v for w, v in zip(self.weights, window))
            out.append(np.asarray(nxt, float))
            window = [out[-1]] + window[:-1]
        return out


class ARForecaster:
    """Forecasts the nonzero entries of B and C-hat over the prediction horizon."""

    def __init__(self, b_mask, c_mask, order=3, delta=0.5, weight_bound=None):
        if not 2 <= order <= 7:
            raise ValueError("AR order must be between 2 and 7")
        self.b_mask = np.asarray(b_mask, bool)
        self.c_mask = np.asarray(c_mask, bool)
        self.b = ARSeries(order, delta, weight_bound=weight_bound)
        self.c = ARSeries(order, delta, weight_bound=weight_bound)

    @property
    def phi(self):
        return self.b.weights

    @property
    def theta(self):
        return self.c.weights

    def update(self, B, C_hat):
        self.b.push(B[self.b_mask])
        self.c.push(C_hat[self.c_mask])

    def forecast(self, horizon):
        """Matrices for steps k+1 .. k+horizon-1 plus a fallback flag.

        With too little history, or right after a weight reset, the last
        values are held and the flag is set.
        """
        steps = horizon - 1
        fallback = not (self.b.ready and self.c.ready) or self.b.just_reset or self.c.just_reset
        if fallback:
            b_seq = [self.b.history[-1]] * steps
            c_seq = [self.c.history[-1]] * steps
        else:
            b_seq = self.b.forecast(steps)
            c_seq = self.c.forecast(steps)
        B_seq = [scatter(v, self.b_mask) for v in b_seq]
        C_seq = [scatter(v, self.c_mask) for v in c_seq]
        return B_seq, C_seq, fallback


def forecast_coefficients(forecaster, horizon):
    B_seq, C_seq, _ = forecaster.forecast(horizon)
    return B_seq, C_seq


def scatter(values, mask):
    out = np.zeros(mask.shape)
    out[mask] = values
    return out
