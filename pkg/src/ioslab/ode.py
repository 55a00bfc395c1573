"""Dormand-Prince 5(4) integrator with dense output, batched over initial states.

All members of a batch share one step-size sequence; the accepted step is the
one that satisfies the error tolerance of every still-active member.  Members
that blow up or leave the domain of the right-hand side are frozen at their
last good state and flagged, while the rest of the batch continues.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .expr import DomainError

# Butcher tableau
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# difference between the 5th and embedded 4th order weights (7 stages, FSAL)
E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# dense output: y(t0 + theta h) = y0 + h * K^T P [theta, theta^2, theta^3, theta^4]
P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
ORDER = 5

COMPLETED = "completed"
BLEW_UP = "blew_up"
DOMAIN_ERROR = "domain_error"
STEP_LIMIT = "step_limit"


@dataclass
class BatchSolution:
    """Shared time grid and per-member states.

    ``x`` has shape ``(len(t), batch, n)``.  Rows after a member's stop time
    repeat its last good state; use ``status``/``t_stop`` to mask them.
    """

    t: np.ndarray
    x: np.ndarray
    status: list[str]
    t_stop: np.ndarray
    steps: int = 0
    rejected: int = 0
    max_error: float = 0.0
    messages: list[str | None] = field(default_factory=list)


def _rms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(a * a, axis=-1))


def integrate_piecewise(
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0: np.ndarray,
    breakpoints: np.ndarray,
    inputs: np.ndarray,
    *,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    t_eval: np.ndarray | None = None,
    blowup: float = 1e8,
    max_steps: int = 200_000,
    max_step: float = np.inf,
    keep_steps: bool = True,
) -> BatchSolution:
    """Integrate ``x' = rhs(x, u)`` with piecewise-constant inputs.

    Parameters
    ----------
    rhs : callable
        ``rhs(x, u)`` with ``x`` of shape ``(B, n)`` and ``u`` of shape
        ``(B, m)``; returns ``(B, n)``.  May raise :class:`DomainError` whose
        ``point`` identifies the failing sample.
    x0 : (B, n) array
    breakpoints : (N + 1,) array
        ``0 = t_0 < ... < t_N = T``.  The integrator restarts at each one.
    inputs : (N, B, m) array
        Input value of every member on every interval.
    t_eval : array, optional
        Extra output times, filled in with the continuous extension.
    keep_steps : bool
        Whether accepted step points are part of the output grid.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    nb, n = x0.shape
    breakpoints = np.asarray(breakpoints, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 2:
        inputs = np.repeat(inputs[:, None, :], nb, axis=1)
    T = breakpoints[-1]
    t_eval = np.array([]) if t_eval is None else np.unique(np.asarray(t_eval, dtype=float))
    t_eval = t_eval[(t_eval >= 0) & (t_eval <= T)]

    active = np.ones(nb, dtype=bool)
    status = [COMPLETED] * nb
    messages: list[str | None] = [None] * nb
    t_stop = np.full(nb, T)

    out_t = [0.0]
    out_x = [x0.copy()]
    x = x0.copy()
    steps = rejected = 0
    max_err = 0.0

    def safe_rhs(xs, us):
        # evaluate active members only; members that leave the domain are frozen
        out = np.zeros_like(xs)
        while active.any():
            try:
                out[active] = rhs(xs[active], us[active])
                return out
            except DomainError as err:
                bad = _locate_bad(rhs, xs, us, active)
                if bad is None:
                    raise
                active[bad] = False
                status[bad] = DOMAIN_ERROR
                messages[bad] = str(err)
                t_stop[bad] = t_cur
        return out

    h = None
    t_cur = 0.0
    for k in range(len(breakpoints) - 1):
        t0, t1 = breakpoints[k], breakpoints[k + 1]
        u = inputs[k]
        t_cur = t0
        if not active.any():
            break
        f = safe_rhs(x, u)
        if h is None or not np.isfinite(h):
            h = _initial_step(safe_rhs, x, u, f, rtol, atol, t1 - t0)
        h = min(h, t1 - t0, max_step)
        seg_eval = t_eval[(t_eval > t0) & (t_eval <= t1)] if k else t_eval[(t_eval >= t0) & (t_eval <= t1)]
        seg_eval = seg_eval[seg_eval > t0]
        ei = 0
        while t_cur < t1 and active.any():
            if steps >= max_steps:
                for i in np.flatnonzero(active):
                    status[i] = STEP_LIMIT
                    t_stop[i] = t_cur
                active[:] = False
                break
            h_prop = h
            h = min(h, t1 - t_cur)
            last = t_cur + h >= t1 - 1e-14 * max(1.0, abs(t1))
            if last:
                h = t1 - t_cur
            K = np.empty((7, nb, n))
            K[0] = f
            for s in range(1, 6):
                dx = np.tensordot(A[s], K[:s], axes=1)
                K[s] = safe_rhs(x + h * dx, u)
            x_new = x + h * np.tensordot(B, K[:6], axes=1)
            K[6] = f_new = safe_rhs(x_new, u)
            err = h * np.tensordot(E, K, axes=1)
            scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
            en = _rms(err / scale)
            en = np.where(active, en, 0.0)
            e = float(en.max()) if nb else 0.0
            if not np.isfinite(e):
                e = np.inf
            if e <= 1.0:
                t_next = t1 if last else t_cur + h
                # dense output for requested samples within the step
                while ei < len(seg_eval) and seg_eval[ei] <= t_next + 1e-15:
                    theta = (seg_eval[ei] - t_cur) / h
                    Q = np.tensordot(P.T, K, axes=([1], [0]))  # (4, B, n)
                    powers = np.array([theta, theta**2, theta**3, theta**4])
                    xe = x + h * np.tensordot(powers, Q, axes=1)
                    xe = np.where(active[:, None], xe, x)
                    out_t.append(float(seg_eval[ei]))
                    out_x.append(xe)
                    ei += 1
                steps += 1
                max_err = max(max_err, e)
                x = np.where(active[:, None], x_new, x)
                f = f_new
                t_cur = t_next
                if keep_steps or last:
                    if not out_t or t_cur > out_t[-1]:
                        out_t.append(t_cur)
                        out_x.append(x.copy())
                norms = np.linalg.norm(x, axis=1)
                blown = active & ~(norms <= blowup)
                if blown.any():
                    for i in np.flatnonzero(blown):
                        status[i] = BLEW_UP
                        t_stop[i] = t_cur
                    active &= ~blown
                factor = MAX_FACTOR if e == 0 else min(MAX_FACTOR, SAFETY * e ** (-1 / ORDER))
                h = h * max(factor, MIN_FACTOR)
                if last and h_prop > h:
                    h = h_prop
            else:
                rejected += 1
                factor = max(MIN_FACTOR, SAFETY * e ** (-1 / ORDER)) if np.isfinite(e) else MIN_FACTOR
                h *= factor
                if h < 1e-14 * max(1.0, abs(t_cur)):
                    for i in np.flatnonzero(active & (en > 1.0)):
                        status[i] = STEP_LIMIT
                        t_stop[i] = t_cur
                        messages[i] = "step size underflow"
                    active &= ~(en > 1.0)

    t_arr = np.asarray(out_t)
    x_arr = np.stack(out_x)
    order = np.argsort(t_arr, kind="stable")
    t_arr, x_arr = t_arr[order], x_arr[order]
    keep = np.concatenate([[True], np.diff(t_arr) > 0])
    return BatchSolution(
        t=t_arr[keep],
        x=x_arr[keep],
        status=status,
        t_stop=t_stop,
        steps=steps,
        rejected=rejected,
        max_error=max_err,
        messages=messages,
    )


def _locate_bad(rhs, xs, us, active):
    """Index of the first active member whose rhs evaluation fails."""
    for i in np.flatnonzero(active):
        try:
            rhs(xs[i : i + 1], us[i : i + 1])
        except DomainError:
            return int(i)
    return None


def _initial_step(fun, x, u, f0, rtol, atol, span):
    # Hairer, Norsett & Wanner, II.4 starting step heuristic, batch max
    scale = atol + np.abs(x) * rtol
    d0 = float(_rms(x / scale).max())
    d1 = float(_rms(f0 / scale).max())
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = fun(x + h0 * f0, u)
    d2 = float(_rms((f1 - f0) / scale).max()) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / ORDER)
    return min(100 * h0, h1, span)
