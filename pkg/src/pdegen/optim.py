"""Deterministic optimizers over flat parameter vectors.

Both optimizers are pure functions of (state, params, gradient information), so
replicas that feed them bit-identical inputs stay bit-identical without
exchanging optimizer state.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import NonFiniteError

CURVATURE_EPS = 1e-10
FALLBACK_STEP = 1e-2


@dataclass
class SgdState:
    lr: float = 0.01
    momentum: float = 0.0
    velocity: np.ndarray | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_step(state: SgdState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """v <- mu v + g; theta <- theta - lr v."""
    if params.shape != grad.shape:
        raise ValueError(f"parameter length {params.size} != gradient length {grad.size}")
    if not np.isfinite(grad).all():
        raise NonFiniteError("sgd_step: gradient has non-finite entries")
    dtype = params.dtype.type
    if state.velocity is None:
        state.velocity = np.zeros_like(params)
    elif state.velocity.shape != params.shape:
        raise ValueError("velocity length does not match parameter length")
    state.velocity = dtype(state.momentum) * state.velocity + grad
    return params - dtype(state.lr) * state.velocity


@dataclass
class LbfgsState:
    history: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_evals: int = 20
    pairs: deque = field(default=None)
    # bookkeeping of the last step, for logging
    last_loss: float = math.nan
    last_evals: int = 0
    last_fallback: bool = False
    steps: int = 0

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search needs 0 < c1 < c2 < 1")
        if self.pairs is None:
            self.pairs = deque(maxlen=int(self.history))


def two_loop_direction(grad: np.ndarray, pairs) -> np.ndarray:
    """-H g using the stored (s, y) curvature pairs, oldest first."""
    q = grad.copy()
    if not pairs:
        return -q
    alphas = []
    for s, y in reversed(pairs):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho))
        q -= q.dtype.type(a) * y
    s, y = pairs[-1]
    gamma = float(s @ y) / float(y @ y)
    r = q * q.dtype.type(gamma)
    for (s, y), (a, rho) in zip(pairs, reversed(alphas)):
        b = rho * float(y @ r)
        r += r.dtype.type(a - b) * s
    return -r


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    """Minimizer of the cubic interpolating two points and slopes, clipped to [lo, hi]."""
    d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
    disc = d1 * d1 - g1 * g2
    if disc >= 0 and math.isfinite(disc):
        d2 = math.copysign(math.sqrt(disc), x2 - x1)
        denom = g2 - g1 + 2 * d2
        if denom != 0:
            x = x2 - (x2 - x1) * (g2 + d2 - d1) / denom
            if math.isfinite(x):
                return min(max(x, lo), hi)
    return 0.5 * (lo + hi)


def strong_wolfe(phi: Callable[[float], tuple[float, float, object]], f0: float, d0: float,
                 alpha: float = 1.0, c1: float = 1e-4, c2: float = 0.9, max_evals: int = 20):
    """Search for a step satisfying the strong Wolfe conditions.

    ``phi(a)`` returns ``(f, dphi, payload)`` at step ``a``. Returns
    ``(a, f, dphi, payload, evals)`` or ``(None, ..., evals)`` on failure.
    """
    evals = 0
    a_prev, f_prev, d_prev = 0.0, f0, d0
    lo = hi = None
    while evals < max_evals:
        f, d, payload = phi(alpha)
        evals += 1
        if not (math.isfinite(f) and math.isfinite(d)):
            # overshoot into a bad region: treat as a failed Armijo test
            f, d = math.inf, math.inf
        if f > f0 + c1 * alpha * d0 or (evals > 1 and f >= f_prev):
            lo, hi = (a_prev, f_prev, d_prev), (alpha, f, d)
            break
        if abs(d) <= -c2 * d0:
            return alpha, f, d, payload, evals
        if d >= 0:
            lo, hi = (alpha, f, d), (a_prev, f_prev, d_prev)
            break
        nxt = _cubic_min(a_prev, f_prev, d_prev, alpha, f, d,
                         alpha + 0.01 * (alpha - a_prev), alpha * 10)
        a_prev, f_prev, d_prev = alpha, f, d
        alpha = nxt
    else:
        return None, None, None, None, evals

    while evals < max_evals:
        (al, fl, dl), (ah, fh, dh) = lo, hi
        if abs(ah - al) * max(1.0, abs(d0)) < 1e-14:
            break
        left, right = min(al, ah), max(al, ah)
        margin = 0.1 * (right - left)
        if math.isfinite(fh) and math.isfinite(dh):
            a = _cubic_min(al, fl, dl, ah, fh, dh, left + margin, right - margin)
        else:
            a = 0.5 * (al + ah)
        f, d, payload = phi(a)
        evals += 1
        if not (math.isfinite(f) and math.isfinite(d)):
            hi = (a, math.inf, math.inf)
            continue
        if f > f0 + c1 * a * d0 or f >= fl:
            hi = (a, f, d)
        else:
            if abs(d) <= -c2 * d0:
                return a, f, d, payload, evals
            if d * (ah - al) >= 0:
                hi = lo
            lo = (a, f, d)
    return None, None, None, None, evals


def lbfgs_step(state: LbfgsState, params: np.ndarray,
               evaluate: Callable[[np.ndarray], tuple[float, np.ndarray]]) -> np.ndarray:
    """One L-BFGS iteration from ``params``; returns the updated parameters.

    ``evaluate(theta)`` returns ``(loss, grad)`` and must be deterministic over
    the current mini-batch. The loss at ``params`` is kept in
    ``state.last_loss``.
    """
    f0, g0 = evaluate(params)
    state.last_loss = float(f0)
    state.last_fallback = False
    if not (math.isfinite(f0) and np.isfinite(g0).all()):
        raise NonFiniteError("lbfgs_step: loss or gradient is not finite at the current point")
    direction = two_loop_direction(g0, state.pairs)
    d0 = float(g0 @ direction)
    state.steps += 1
    if d0 == 0.0:
        state.last_evals = 1
        return params.copy()
    if d0 > 0:
        # stale pairs can break descent; restart from steepest descent
        state.pairs.clear()
        direction = -g0
        d0 = float(g0 @ direction)
    dtype = params.dtype.type

    def phi(a):
        theta = params + dtype(a) * direction
        f, g = evaluate(theta)
        return float(f), float(g @ direction), (theta, g)

    alpha, f1, d1, payload, evals = strong_wolfe(phi, float(f0), d0, 1.0, state.c1, state.c2, state.max_evals)
    state.last_evals = 1 + evals
    if alpha is None:
        state.last_fallback = True
        return params - dtype(FALLBACK_STEP) * g0
    if not (f1 <= f0 + state.c1 * alpha * d0 and abs(d1) <= state.c2 * abs(d0)):
        raise RuntimeError(f"accepted step {alpha} violates the strong Wolfe conditions")
    theta, g1 = payload
    s = theta - params
    y = g1 - g0
    if float(s @ y) > CURVATURE_EPS:
        state.pairs.append((s, y))
    return theta
