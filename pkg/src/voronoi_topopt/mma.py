"""Method of moving asymptotes for one objective and one inequality constraint.

Follows Svanberg's 1987 scheme (with the 2007 ``raa0`` regularization): each
step builds a separable convex approximation from the current gradients
around a pair of moving asymptotes, then solves it through its
one-dimensional dual by bisection.  The constraint carries an elastic slack
``y`` with a linear plus quadratic penalty, so the subproblem is always
feasible.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ASY_INIT = 0.5
ASY_INCR = 1.2
ASY_DECR = 0.7
MOVE = 0.2
RAA0 = 1e-5
ALBEFA = 0.1
ASY_MIN = 1e-6
ASY_MAX = 10.0
SLACK_LINEAR = 1000.0
SLACK_QUADRATIC = 1.0


@dataclass(frozen=True)
class DesignVector:
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), vals.shape).copy()
        hi = np.broadcast_to(np.asarray(self.upper, dtype=float), vals.shape).copy()
        if np.any(lo >= hi):
            raise ValueError("every lower bound must be below its upper bound")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def with_values(self, values) -> "DesignVector":
        return DesignVector(values, self.lower, self.upper)


@dataclass(frozen=True)
class MMAState:
    x_prev: np.ndarray
    x_prev2: np.ndarray
    low: np.ndarray
    upp: np.ndarray
    iteration: int = 0
    move: float = MOVE
    asy_init: float = ASY_INIT
    asy_incr: float = ASY_INCR
    asy_decr: float = ASY_DECR

    @classmethod
    def initial(cls, x: DesignVector, **params) -> "MMAState":
        span = x.upper - x.lower
        init = params.get("asy_init", ASY_INIT)
        return cls(x.values.copy(), x.values.copy(), x.values - init * span,
                   x.values + init * span, **params)


def _asymptotes(xval, state: MMAState, xmin, xmax):
    span = xmax - xmin
    if state.iteration < 2:
        low = xval - state.asy_init * span
        upp = xval + state.asy_init * span
    else:
        trend = (xval - state.x_prev) * (state.x_prev - state.x_prev2)
        factor = np.ones_like(xval)
        factor[trend > 0] = state.asy_incr
        factor[trend < 0] = state.asy_decr
        low = xval - factor * (state.x_prev - state.low)
        upp = xval + factor * (state.upp - state.x_prev)
        low = np.clip(low, xval - ASY_MAX * span, xval - ASY_MIN * span)
        upp = np.clip(upp, xval + ASY_MIN * span, xval + ASY_MAX * span)
    return low, upp


def _approx_coeffs(grad, xval, low, upp, span):
    ux2 = (upp - xval) ** 2
    xl2 = (xval - low) ** 2
    pos = np.maximum(grad, 0.0)
    neg = np.maximum(-grad, 0.0)
    reg = RAA0 / span
    p = ux2 * (1.001 * pos + 0.001 * neg + reg)
    q = xl2 * (0.001 * pos + 1.001 * neg + reg)
    return p, q


def _solve_subproblem(p0, q0, p1, q1, b, low, upp, alpha, beta):
    """Minimize the convex approximation via bisection on the dual multiplier."""

    def primal(lam):
        P = p0 + lam * p1
        Q = q0 + lam * q1
        sp_, sq = np.sqrt(P), np.sqrt(Q)
        x = (sp_ * low + sq * upp) / (sp_ + sq)
        return np.clip(x, alpha, beta)

    def slack(lam):
        return max(0.0, (lam - SLACK_LINEAR) / SLACK_QUADRATIC)

    def dual_grad(lam):
        x = primal(lam)
        return float(np.sum(p1 / (upp - x) + q1 / (x - low)) - b - slack(lam)), x

    g0, x0 = dual_grad(0.0)
    if g0 <= 0:
        return x0, 0.0
    lo, hi = 0.0, 1.0
    while dual_grad(hi)[0] > 0:
        lo, hi = hi, 2 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if dual_grad(mid)[0] > 0:
            lo = mid
        else:
            hi = mid
    return primal(hi), hi


def mma_update(x: DesignVector, f: float, df, g: float, dg, state: MMAState,
               active=None):
    """One MMA step for ``min f s.t. g <= 0`` inside the bounds of ``x``.

    ``active`` (boolean mask) restricts the step to a subset of variables;
    the others are returned unchanged.  Returns the new design and state.
    """
    df = np.asarray(df, dtype=float)
    dg = np.asarray(dg, dtype=float)
    xall = x.values
    if df.shape != xall.shape or dg.shape != xall.shape:
        raise ValueError("gradient lengths must match the design vector")
    if not (np.all(np.isfinite(df)) and np.all(np.isfinite(dg))
            and np.isfinite(f) and np.isfinite(g)):
        raise ValueError("non-finite objective, constraint or gradient")
    sel = np.ones(xall.shape, bool) if active is None else np.asarray(active, bool)

    xval, xmin, xmax = xall[sel], x.lower[sel], x.upper[sel]
    span = xmax - xmin
    sub = replace(state, x_prev=state.x_prev[sel], x_prev2=state.x_prev2[sel],
                  low=state.low[sel], upp=state.upp[sel])
    low, upp = _asymptotes(xval, sub, xmin, xmax)

    alpha = np.maximum.reduce([xmin, low + ALBEFA * (xval - low), xval - state.move * span])
    beta = np.minimum.reduce([xmax, upp - ALBEFA * (upp - xval), xval + state.move * span])

    p0, q0 = _approx_coeffs(df[sel], xval, low, upp, span)
    p1, q1 = _approx_coeffs(dg[sel], xval, low, upp, span)
    b = float(np.sum(p1 / (upp - xval) + q1 / (xval - low)) - g)
    xnew, _ = _solve_subproblem(p0, q0, p1, q1, b, low, upp, alpha, beta)

    values = xall.copy()
    values[sel] = np.clip(xnew, xmin, xmax)
    full_low, full_upp = state.low.copy(), state.upp.copy()
    full_low[sel], full_upp[sel] = low, upp
    new_state = replace(state, x_prev=xall.copy(), x_prev2=state.x_prev.copy(),
                        low=full_low, upp=full_upp, iteration=state.iteration + 1)
    return x.with_values(values), new_state
