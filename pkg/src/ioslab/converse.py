"""Numerical pieces of the converse construction for output stability.

The construction closes the loop ``u = d * lam(|y|)`` with a small-gain
``lam`` built from fitted gains, estimates the worst-case future output
``omega`` of the resulting uniformly stable loop by search over unit-ball
disturbances, and then builds the weighted function
``W(xi) = sup_t omega(x(t)) k(t)`` with ``k(t) = c2 - (c2 - c1) exp(-t)``.
All suprema are lower estimates from finite search; the class invariants
that must hold by construction are asserted.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import LinearNDInterpolator

from . import ode
from .comparison import (
    KINF,
    ClassError,
    DecayMargin,
    KLFunction,
    ScalarMonotone,
    dominance_min,
    invert,
    monotone_envelope,
)
from .lyap import CandidateLyapunov, dini_batch
from .system import ControlSystem, simulate_batch

OMEGA_CHUNK = 16384


class ConverseError(RuntimeError):
    pass


class ConstructionRejected(ConverseError):
    pass


@dataclass(frozen=True)
class WeightFunction:
    """``k(t) = c2 - (c2 - c1) exp(-t)``; ``c3 = c1 / c2**2``."""

    c1: float = 1.0
    c2: float = 2.0

    def __post_init__(self):
        if not 0 < self.c1 < self.c2:
            raise ValueError("need 0 < c1 < c2")

    def __call__(self, t):
        return self.c2 - (self.c2 - self.c1) * np.exp(-np.asarray(t, float))

    def derivative(self, t):
        return (self.c2 - self.c1) * np.exp(-np.asarray(t, float))

    @property
    def c3(self) -> float:
        return self.c1 / self.c2**2


# --------------------------------------------------------------------------
# Small-gain function and zero-output set
# --------------------------------------------------------------------------


def sigma1_dominates_identity(sigma1: ScalarMonotone, grid=None) -> bool:
    """Whether ``sigma1(s) >= s`` on the grid (the construction assumes it)."""
    g = np.geomspace(1e-6, 1e4, 400) if grid is None else np.asarray(grid, float)
    return bool(np.all(sigma1(g) >= g * (1 - 1e-12)))


def small_gain_lambda(sigma1: ScalarMonotone, sigma2: ScalarMonotone, rectify: bool = False) -> ScalarMonotone:
    """``lam(s) = sigma2^-1(sigma1^-1(s / 2) / 2)``.

    With ``rectify`` the first gain is replaced by ``max(sigma1, id)`` so
    that it dominates the identity.  Both gains must be class K-infinity.
    """
    for name, f in (("sigma1", sigma1), ("sigma2", sigma2)):
        if f.cls != KINF:
            raise ClassError(f"{name} must be class Kinf (got {f.cls})")
    s1 = sigma1
    if rectify:
        s1 = ScalarMonotone.from_callable(lambda s: np.maximum(sigma1(s), s), KINF, label=f"max({sigma1.label}, s)")

    def lam(s):
        s = np.asarray(s, float)
        a = invert(s1, 0.5 * s, tol=1e-14)
        return invert(sigma2, 0.5 * np.asarray(a, float), tol=1e-14)

    label = f"{sigma2.label}^-1({s1.label}^-1(s/2)/2)"
    return ScalarMonotone.from_callable(lam, KINF, label=label)


def tabulate_gain(f: ScalarMonotone, s_top: float = 1e3, points: int = 1201) -> ScalarMonotone:
    """Table-backed copy of ``f`` on ``[0, s_top]`` (log-spaced), linear beyond.

    Simulating a closed loop calls the gain at every stage, and nested
    bisection is too slow for that; the table is evaluated once.
    """
    grid = np.concatenate([[0.0], np.geomspace(s_top * 1e-9, s_top, points - 1)])
    return ScalarMonotone.from_table(grid, np.asarray(f(grid), float), KINF, label=f"table({f.label})")


@dataclass
class ConverseBudget:
    """Search effort for value-function suprema.

    Each omega query simulates the corner constants, zero and
    ``random_signals`` piecewise-constant unit-ball disturbances per round;
    round ``r`` always uses the same seeds so a larger budget is a superset.
    """

    horizon: float = 30.0
    segments: int = 4
    random_signals: int = 32
    path_signals: int = 8
    rounds: int = 1
    seed: int = 0
    time_points: int = 64
    t_min: float = 1e-3
    refine_points: int = 17
    rtol: float = 1e-8
    atol: float = 1e-10

    def to_dict(self) -> dict:
        return asdict(self)


def _corners(m: int) -> np.ndarray:
    c = np.array(list(itertools.product([-1.0, 1.0], repeat=m)))
    return c / np.sqrt(m)


def _unit_ball(rng, shape, m):
    z = rng.normal(size=shape + (m,))
    z /= np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-300)
    return z * rng.uniform(0, 1, size=shape + (1,)) ** (1.0 / m)


def disturbance_family(m: int, segments: int, n_random: int, seed: int, rounds: int = 1) -> np.ndarray:
    """Signal values of shape ``(segments, S, m)``: corners, zero, random."""
    fixed = np.concatenate([_corners(m), np.zeros((1, m))])
    vals = [np.broadcast_to(fixed[None], (segments,) + fixed.shape)]
    for r in range(rounds):
        rng = np.random.default_rng([seed, r])
        rnd = _unit_ball(rng, (n_random, segments), m)
        vals.append(np.moveaxis(rnd, 0, 1))
    return np.concatenate(vals, axis=1)


def zero_output_set_test(sys_closed: ControlSystem, xi, budget: ConverseBudget | None = None, tol: float = 1e-9) -> dict:
    """Decide numerically whether ``xi`` is in the zero-output set.

    Membership means ``|y(t)| <= tol`` for every searched disturbance.
    """
    budget = budget or ConverseBudget()
    xi = np.asarray(xi, float).reshape(1, sys_closed.n)
    vals = disturbance_family(sys_closed.m, budget.segments, budget.random_signals, budget.seed, budget.rounds)
    S = vals.shape[1]
    bp = np.linspace(0, budget.horizon, budget.segments + 1)
    bt = simulate_batch(sys_closed, np.repeat(xi, S, axis=0), horizon=budget.horizon, breakpoints=bp, values=vals,
                        rtol=budget.rtol, atol=budget.atol, t_eval=np.linspace(0, budget.horizon, 201))
    yn = np.where(bt.valid_mask(), np.linalg.norm(bt.y, axis=-1), 0.0)
    per = yn.max(axis=0)
    k = int(np.argmax(per))
    out = {"in_D": bool(per[k] <= tol), "sup_output": float(per[k]), "simulations": S}
    if not out["in_D"]:
        kt = int(np.argmax(yn[:, k]))
        out["witness"] = {"signal": vals[:, k, :].tolist(), "breakpoints": bp.tolist(), "time": float(bt.t[kt])}
    return out


# --------------------------------------------------------------------------
# Value-function estimates
# --------------------------------------------------------------------------


def _thresholds(beta: KLFunction, r: np.ndarray, s: np.ndarray, t_cap: float) -> np.ndarray:
    """Vectorised ``T_r(s)`` by bisection on ``[0, t_cap]`` (capped)."""
    r = np.asarray(r, float)
    s = np.asarray(s, float)
    lo = np.zeros_like(r)
    hi = np.full_like(r, t_cap)
    done0 = beta(r, np.zeros_like(r)) <= s
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = beta(r, mid) <= s
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    return np.where(done0, 0.0, hi)


class ValueFunctionEstimate:
    """Lower estimates of ``omega(xi) = sup_{d, t} |y(t, xi, d)|`` and of
    the weighted function ``W`` for a robust closed loop.

    ``beta`` (a fitted uniform bound of the closed loop) only shortens
    horizons; without it the budget horizon is used throughout.
    """

    def __init__(self, sys_closed: ControlSystem, beta: KLFunction | None = None,
                 budget: ConverseBudget | None = None, weight: WeightFunction | None = None):
        self.sys = sys_closed
        self.beta = beta
        self.budget = budget or ConverseBudget()
        self.weight = weight or WeightFunction()
        b = self.budget
        self.values = disturbance_family(sys_closed.m, b.segments, b.random_signals, b.seed, b.rounds)
        self.path_values = disturbance_family(sys_closed.m, b.segments, b.path_signals, b.seed + 1, 1)
        self.t_grid = np.concatenate([[0.0], np.geomspace(b.t_min, b.horizon, b.time_points - 1)])
        self._omega: dict[tuple, float] = {}
        self.simulations = 0

    # omega ----------------------------------------------------------------

    def _horizon(self, X, lower):
        if self.beta is None:
            return self.budget.horizon
        T = _thresholds(self.beta, np.linalg.norm(X, axis=1), np.maximum(lower, 1e-6), self.budget.horizon)
        return float(max(T.max(), self.budget.t_min * 10))

    def _sup_pairs(self, XX, VV, horizon):
        """Sup of the output norm for paired rows ``XX[i]`` and signals ``VV[:, i]``."""
        bp = np.linspace(0, horizon, VV.shape[0] + 1)
        te = np.linspace(0, horizon, 65)
        out = np.zeros(len(XX))
        for start in range(0, len(XX), OMEGA_CHUNK):
            sl = slice(start, min(start + OMEGA_CHUNK, len(XX)))
            bt = simulate_batch(self.sys, XX[sl], horizon=horizon, breakpoints=bp, values=VV[:, sl],
                                rtol=self.budget.rtol, atol=self.budget.atol, t_eval=te)
            bad = [i for i, st in enumerate(bt.status) if st != ode.COMPLETED]
            if bad:
                i = bad[0]
                raise ConverseError(
                    f"closed loop left the uniform-stability regime from xi={XX[sl][i].tolist()} ({bt.status[i]})"
                )
            out[sl] = np.linalg.norm(bt.y, axis=-1).max(axis=0)
            self.simulations += sl.stop - sl.start
        return out

    def omega(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        keys = [tuple(row.tolist()) for row in X]
        todo = sorted({k: i for i, k in enumerate(keys) if k not in self._omega}.values())
        if todo:
            Xt = X[todo]
            B, S, m = len(todo), self.values.shape[1], self.sys.m
            h0 = self.sys.output_norm(Xt)
            T = self._horizon(Xt, h0)
            sup = self._sup_pairs(np.repeat(Xt, S, axis=0), np.tile(self.values, (1, B, 1)), T).reshape(B, S)
            # local refinement: re-set one segment of the best signal at a time
            best = self.values[:, sup.argmax(axis=1), :]  # (N, B, m)
            opts = np.concatenate([_corners(m), np.zeros((1, m))])
            N = best.shape[0]
            ref = np.repeat(best[:, :, None, :], N * len(opts), axis=2)  # (N, B, R, m)
            for seg in range(N):
                ref[seg, :, seg * len(opts) : (seg + 1) * len(opts), :] = opts[None]
            R = ref.shape[2]
            rsup = self._sup_pairs(np.repeat(Xt, R, axis=0), ref.reshape(N, B * R, m), T).reshape(B, R)
            w = np.maximum(np.maximum(sup.max(axis=1), rsup.max(axis=1)), h0)
            for i, val in zip(todo, w):
                self._omega[keys[i]] = max(self._omega.get(keys[i], 0.0), float(val))
        out = np.array([self._omega[k] for k in keys])
        h = self.sys.output_norm(X)
        assert np.all(out >= h), "omega estimate below |h(xi)|"
        return out

    def _lift(self, X, vals):
        for row, v in zip(X, vals):
            k = tuple(row.tolist())
            self._omega[k] = max(self._omega.get(k, 0.0), float(v))

    # weighted value -------------------------------------------------------

    def _path(self, X, values, t_eval, horizon):
        """States ``x(t_eval)`` for paired rows ``X[i]`` and signals ``values[:, i]``: (K, B, n)."""
        bp = np.linspace(0, self.budget.horizon, values.shape[0] + 1)
        bp = np.append(bp[bp < horizon], horizon)
        bt = simulate_batch(self.sys, X, horizon=horizon, breakpoints=bp, values=values[: len(bp) - 1],
                            rtol=self.budget.rtol, atol=self.budget.atol, t_eval=t_eval, keep_steps=False)
        if not bt.ok().all():
            raise ConverseError("closed-loop path did not complete")
        self.simulations += len(X)
        idx = np.minimum(np.searchsorted(bt.t, t_eval), len(bt.t) - 1)
        return bt.x[idx]

    def weighted_value(self, X) -> np.ndarray:
        """``W(xi) = sup_{t, d} omega(x(t, xi, d)) k(t)`` (search estimate).

        Times run over a fixed geometric grid up to the horizon where the
        fitted bound guarantees ``omega(x(t)) k(t) <= c1 omega(xi)``, and the
        best grid time is refined twice on a finer local grid.  Every
        ``omega(x(t))`` found also lifts the estimate ``omega(xi)``.
        """
        X = np.atleast_2d(np.asarray(X, float))
        k = self.weight
        om0 = self.omega(X)
        W = np.zeros(len(X))
        live = om0 > 0
        if live.any():
            W[live] = self._weighted(X[live], om0[live])
        om = self.omega(X)
        assert np.all(k.c1 * om <= W * (1 + 1e-12) + 1e-300), "W below c1 * omega"
        assert np.all(W <= k.c2 * om * (1 + 1e-12)), "W above c2 * omega"
        return W

    def _weighted(self, X, om0):
        k, bud, n = self.weight, self.budget, self.sys.n
        B = len(X)
        T = np.full(B, bud.horizon)
        if self.beta is not None:
            T = np.maximum(_thresholds(self.beta, np.linalg.norm(X, axis=1), k.c1 / k.c2 * om0, bud.horizon),
                           bud.t_min * 10)
        # last usable grid index per row: first grid time at or beyond T
        last = np.minimum(np.searchsorted(self.t_grid, T * (1 - 1e-12)), len(self.t_grid) - 1)
        tg = self.t_grid[: last.max() + 1]
        P = self.path_values
        S = P.shape[1]
        pts = self._path(np.repeat(X, S, axis=0), np.tile(P, (1, B, 1)), tg, tg[-1]).reshape(len(tg), B, S, n)
        allowed = np.arange(len(tg))[:, None] <= last[None, :]  # (K, B)
        om = np.zeros((len(tg), B, S))
        om[allowed] = self.omega(pts[allowed].reshape(-1, n)).reshape(-1, S)
        score = om * k(tg)[:, None, None]
        flat = score.transpose(1, 0, 2).reshape(B, -1)
        arg = flat.argmax(axis=1)
        best = flat[np.arange(B), arg]
        i_best, s_best = np.divmod(arg, S)
        lift = om.max(axis=(0, 2))
        grids = [tg[: last[b] + 1] for b in range(B)]
        sig = P[:, s_best, :]
        for _ in range(2):
            lo = np.array([g[max(i - 1, 0)] for g, i in zip(grids, i_best)])
            hi = np.array([g[min(i + 1, len(g) - 1)] for g, i in zip(grids, i_best)])
            fine = lo[:, None] + (hi - lo)[:, None] * np.linspace(0, 1, bud.refine_points)[None, :]
            te = np.unique(fine)
            states = self._path(X, sig, te, te[-1])  # (K', B, n)
            pos = np.searchsorted(te, fine)
            fp = states[pos, np.arange(B)[:, None]]  # (B, R, n)
            fo = self.omega(fp.reshape(-1, n)).reshape(B, -1)
            fs = fo * k(fine)
            lift = np.maximum(lift, fo.max(axis=1))
            j = fs.argmax(axis=1)
            best = np.maximum(best, fs[np.arange(B), j])
            grids, i_best = list(fine), j
        self._lift(X, lift)
        return best


# --------------------------------------------------------------------------
# Empirical decay and assembled candidate
# --------------------------------------------------------------------------


@dataclass
class DecayCertificate:
    margin: DecayMargin | None
    samples: int
    nonnegative: int
    positive_fraction: float
    worst: dict | None
    rates: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["margin"] = None if self.margin is None else self.margin.to_config()
        return d


def forward_differences(vfe: ValueFunctionEstimate, X, delta: float = 1e-3) -> dict:
    """``W(x(delta, xi, d)) - W(xi)`` for every corner disturbance ``d``."""
    X = np.atleast_2d(np.asarray(X, float))
    D = _corners(vfe.sys.m)
    W0 = vfe.weighted_value(X)
    XX = np.repeat(X, len(D), axis=0)
    DD = np.tile(D, (len(X), 1))
    bt = simulate_batch(vfe.sys, XX, horizon=delta, breakpoints=np.array([0.0, delta]), values=DD[None],
                        rtol=1e-12, atol=1e-14, keep_steps=False)
    W1 = vfe.weighted_value(bt.x[-1])
    return {"xi": XX, "d": DD, "W0": np.repeat(W0, len(D)), "W1": W1, "diff": W1 - np.repeat(W0, len(D))}


def empirical_decay_certificate(vfe: ValueFunctionEstimate, X, s_grid, r_grid, delta: float = 1e-3,
                                tol: float = 1e-6) -> DecayCertificate:
    """Fit ``alpha(s, r)`` to observed decrease rates ``-(W(x(delta)) - W) / delta``.

    Samples with ``W = 0`` lie in the zero-output set and are skipped.  A
    sample counts as nonnegative when the difference exceeds ``-tol * W``.
    """
    fd = forward_differences(vfe, X, delta)
    live = fd["W0"] > 0
    diff, W0 = fd["diff"][live], fd["W0"][live]
    xi = fd["xi"][live]
    nonneg = diff > -tol * W0
    rates = -diff / delta
    worst = None
    if len(rates):
        k = int(np.argmin(rates))
        worst = {"xi": xi[k].tolist(), "d": fd["d"][live][k].tolist(), "rate": float(rates[k]), "W": float(W0[k])}
    margin = None
    good = rates > 0
    if good.any():
        margin = margin_from_samples(rates[good], W0[good], np.linalg.norm(xi[good], axis=1), s_grid, r_grid)
    return DecayCertificate(margin, int(live.sum()), int(nonneg.sum()),
                            float((~nonneg).mean()) if len(nonneg) else 0.0, worst, rates.tolist())


def margin_from_samples(rates, w, norms, s_grid, r_grid) -> DecayMargin:
    """Dominance envelope of sampled rates (no cap); empty cells get 0."""
    s_grid = np.unique(np.concatenate([[0.0], np.asarray(s_grid, float)]))
    r_grid = np.unique(np.asarray(r_grid, float))
    a = dominance_min(np.asarray(rates, float), np.asarray(w, float), np.asarray(norms, float), s_grid, r_grid)
    vac = ~np.isfinite(a)
    a = np.where(vac, 0.0, a)
    a[0] = 0.0
    return DecayMargin(s_grid, r_grid, monotone_envelope(a), vac, info={"samples": int(len(rates))})


def _interp_W(points, W):
    points = np.asarray(points, float)
    W = np.asarray(W, float)
    if points.shape[1] == 1:
        order = np.argsort(points[:, 0])
        xs, ws = points[order, 0], W[order]
        lo, hi = xs[0], xs[-1]

        def V(x):
            x = np.asarray(x, float)[:, 0]
            out = np.interp(x, xs, ws)
            return np.where((x < lo) | (x > hi), np.nan, out)

        return V
    lin = LinearNDInterpolator(points, W)
    return lambda x: lin(np.asarray(x, float))


def _lower_k(keys, W, grid, slope):
    """Class-K lower bound ``a(s) <= min{W : key >= s}`` mixed with ``slope * s``."""
    env = dominance_min(W, keys, np.zeros_like(keys), grid, [0.0])[:, 0]
    env = np.where(np.isfinite(env), env, np.nan)
    down = np.concatenate([[0.0], env[:-1]])
    down = np.where(np.isfinite(down), down, slope * grid)
    vals = 0.5 * np.minimum(down, slope * grid) + 0.5 * slope * grid
    return ScalarMonotone.from_table(grid, vals, KINF, label="alpha1-fit")


def _upper_k(keys, W, grid):
    env = -dominance_min(-W, np.zeros_like(keys), keys, [0.0], grid)[0]
    env = np.where(np.isfinite(env), env, 0.0)
    env = np.maximum.accumulate(env)
    up = np.concatenate([env[1:], [env[-1]]])
    vals = up + 1e-6 * grid + 1e-12 * np.arange(len(grid))
    return ScalarMonotone.from_table(grid, vals, KINF, label="alpha2-fit")


@dataclass
class ConverseBundle:
    """Everything needed to re-check an assembled candidate without simulation."""

    system: str
    points: np.ndarray
    omega: np.ndarray
    W: np.ndarray
    weight: WeightFunction
    lam: dict | None
    margin: dict | None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "points": self.points.tolist(),
            "omega": self.omega.tolist(),
            "W": self.W.tolist(),
            "weight": asdict(self.weight),
            "lam": self.lam,
            "margin": self.margin,
            "meta": self.meta,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ConverseBundle":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["system"], np.asarray(d["points"], float), np.asarray(d["omega"], float),
                   np.asarray(d["W"], float), WeightFunction(**d["weight"]), d["lam"], d["margin"], d.get("meta", {}))


def margin_from_config(d: dict) -> DecayMargin:
    return DecayMargin(np.asarray(d["s"], float), np.asarray(d["r"], float), np.asarray(d["values"], float))


def assemble_ios_candidate(bundle: ConverseBundle, sys: ControlSystem, lam: ScalarMonotone,
                           grid_points: int = 64) -> CandidateLyapunov:
    """Wrap tabulated ``W`` as a candidate for the open-loop system.

    ``W`` is interpolated linearly between sample points (finite-difference
    gradient), ``alpha1``/``alpha2`` are fitted from the samples, the
    trigger is the output trigger with ``chi = lam^-1`` and the decay is the
    fitted empirical margin.
    """
    if not np.any(bundle.W > 1e-12):
        raise ConstructionRejected("W vanishes on every sample: no positive lower bound alpha1 exists")
    hn = sys.output_norm(bundle.points)
    xn = np.linalg.norm(bundle.points, axis=1)
    top = max(float(hn.max()), float(xn.max()), 1e-6)
    grid = np.linspace(0, top, grid_points)
    a1 = _lower_k(hn, bundle.W, grid, bundle.weight.c1)
    a2 = _upper_k(xn, bundle.W, grid)
    chi = ScalarMonotone.from_callable(lambda s: invert(lam, s, tol=1e-13), KINF, label=f"inv({lam.label})")
    decay = margin_from_config(bundle.margin) if bundle.margin else None
    return CandidateLyapunov(V=_interp_W(bundle.points, bundle.W), n=sys.n, alpha1=a1, alpha2=a2,
                             sandwich_mode="state", chi=chi, decay=decay, trigger="output",
                             label=f"W[{bundle.system}]")


def holdout_decrease(cand: CandidateLyapunov, sys_closed: ControlSystem, X, seed: int = 0,
                     dt: float = 1e-3) -> dict:
    """Fraction of holdout points where ``cand`` decreases along the closed loop."""
    X = np.atleast_2d(np.asarray(X, float))
    rng = np.random.default_rng(seed)
    D = _unit_ball(rng, (len(X),), sys_closed.m)
    v0 = cand.value(X)
    live = np.isfinite(v0) & (v0 > 1e-12)
    q = dini_batch(cand, sys_closed, X[live], D[live], dt)
    ok = np.isfinite(q) & (q < 0)
    return {"points": int(live.sum()), "decreasing": int(ok.sum()),
            "fraction": float(ok.mean()) if len(ok) else 0.0}


# --------------------------------------------------------------------------
# End-to-end pipeline
# --------------------------------------------------------------------------


@dataclass
class ConverseResult:
    ok: bool
    reason: str
    bundle: ConverseBundle | None
    candidate: CandidateLyapunov | None
    decay: DecayCertificate | None
    holdout: dict | None
    zero_set: dict | None
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "reason": self.reason,
            "decay": None if self.decay is None else {k: v for k, v in self.decay.to_dict().items() if k != "rates"},
            "holdout": self.holdout,
            "zero_set": self.zero_set,
            "info": self.info,
            "candidate": None if self.candidate is None else self.candidate.describe(),
        }


def sample_points(n: int, radius: float, points: int, seed: int = 0, mode: str = "grid") -> np.ndarray:
    """Tensor grid (``points`` per axis) or ``points`` uniform random states."""
    if mode == "grid":
        ax = np.linspace(-radius, radius, points)
        return np.stack(np.meshgrid(*[ax] * n, indexing="ij"), -1).reshape(-1, n)
    return np.random.default_rng(seed).uniform(-radius, radius, (points, n))


def construct_converse(
    sys: ControlSystem,
    lam: ScalarMonotone | None = None,
    radius: float = 3.0,
    points: int = 21,
    budget: ConverseBudget | None = None,
    weight: WeightFunction | None = None,
    beta: KLFunction | None = None,
    delta: float = 1e-3,
    holdout_points: int = 200,
    holdout_min: float = 0.95,
    s_bins: int = 8,
    r_bins: int = 6,
    fit_plan=None,
) -> ConverseResult:
    """Run the construction from the small-gain loop to an assembled candidate.

    Without ``lam`` the gain comes from an output-Lagrange fit of ``sys``.
    """
    from .props import SamplePlan, fit_overshoot

    budget = budget or ConverseBudget()
    weight = weight or WeightFunction()
    info: dict = {}
    if lam is None:
        plan = fit_plan or SamplePlan(s_max=radius, seed=budget.seed)
        ol = fit_overshoot(sys, "SIOS", plan)
        if not ol.ok:
            return ConverseResult(False, f"no output-Lagrange fit for the small-gain loop: {ol.reason}",
                                  None, None, None, None, None, info)
        info["sigma1_dominates_identity"] = sigma1_dominates_identity(ol.functions["sigma1"])
        lam = tabulate_gain(small_gain_lambda(ol.functions["sigma1"], ol.functions["sigma2"], rectify=True))
    closed = close_loop_robust_gain(sys, lam)
    vfe = ValueFunctionEstimate(closed, beta=beta, budget=budget, weight=weight)
    X = sample_points(sys.n, radius, points, budget.seed)
    zs = zero_output_set_test(closed, X[np.argmax(np.linalg.norm(X, axis=1))], budget)
    W = vfe.weighted_value(X)
    om = vfe.omega(X)
    if not np.any(W > 1e-12):
        return ConverseResult(False, "W vanishes on every sample: no positive lower bound alpha1 exists",
                              None, None, None, None, zs, info)
    wmax = float(W.max())
    s_grid = np.linspace(0, wmax, s_bins + 1)[1:]
    r_grid = np.linspace(0, radius * np.sqrt(sys.n), r_bins + 1)[1:]
    cert = empirical_decay_certificate(vfe, X, s_grid, r_grid, delta)
    info.update(simulations=vfe.simulations, samples=len(X))
    bundle = ConverseBundle(sys.name, X, om, W, weight, lam_to_config(lam),
                            None if cert.margin is None else cert.margin.to_config(),
                            {"budget": budget.to_dict(), "radius": radius, "delta": delta})
    if cert.nonnegative:
        return ConverseResult(False, f"{cert.nonnegative} forward differences of W are not negative",
                              bundle, None, cert, None, zs, info)
    cand = assemble_ios_candidate(bundle, sys, lam)
    rng = np.random.default_rng(budget.seed + 101)
    H = rng.uniform(-radius, radius, (holdout_points, sys.n)) * 0.999
    hold = holdout_decrease(cand, closed, H, seed=budget.seed + 102)
    if hold["fraction"] < holdout_min:
        return ConverseResult(False, f"holdout decrease {hold['fraction']:.3f} below {holdout_min}",
                              bundle, None, cert, hold, zs, info)
    return ConverseResult(True, "", bundle, cand, cert, hold, zs, info)


def close_loop_robust_gain(sys: ControlSystem, lam: ScalarMonotone) -> ControlSystem:
    from .system import close_loop_robust

    closed = close_loop_robust(sys, lam)
    closed.meta["lambda"] = lam.label
    return closed


def lam_to_config(lam: ScalarMonotone) -> dict:
    try:
        return lam.to_config()
    except Exception:
        return {"form": "opaque", "label": lam.label}
