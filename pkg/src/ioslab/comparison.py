"""Comparison functions (classes K, K-infinity, L, KL) and their calculus.

Class membership of a concrete function is only ever checked on grids; the
default resolution is 512 points.  Tabulated functions use monotone cubic
(PCHIP) interpolation and extend linearly with the last secant slope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator

from . import ode
from .expr import Expr, NotDifferentiableError, compile_exprs, differentiate, parse

K = "K"
KINF = "Kinf"
L = "L"
PD = "PD"
CLASSES = (K, KINF, L, PD)

GRID_POINTS = 512
GRID_TOL = 1e-12
EPS_RECTIFY = 1e-6
UNDERFLOW = 1e-300


class ComparisonError(ValueError):
    pass


class ClassError(ComparisonError):
    """A function does not satisfy its claimed class on the check grid."""


class RangeError(ComparisonError):
    pass


class FactorizationError(ComparisonError):
    def __init__(self, message, worst=None):
        super().__init__(message)
        self.worst = worst


class DecayHypothesisError(ComparisonError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


def default_grid(s_max: float = math.inf, points: int = GRID_POINTS) -> np.ndarray:
    top = min(s_max, 1e3)
    return np.concatenate([[0.0], np.geomspace(min(1e-6, top / 2), top, points - 1)])


# --------------------------------------------------------------------------
# Scalar monotone functions
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScalarMonotone:
    """A scalar function on ``[0, s_max]`` tagged with a comparison class.

    Use :meth:`from_expr`, :meth:`from_table` or :meth:`from_callable` to
    build one.  Calling it is vectorised.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    cls: str = K
    s_max: float = math.inf
    derivative: Callable[[np.ndarray], np.ndarray] | None = None
    expr: Expr | None = None
    table: tuple[np.ndarray, np.ndarray] | None = None
    label: str = ""

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ComparisonError(f"unknown class tag {self.cls!r}")

    def __call__(self, s):
        return self.fn(np.asarray(s, dtype=float))

    def __repr__(self):
        return f"ScalarMonotone({self.label or '<fn>'}, cls={self.cls})"

    # constructors ----------------------------------------------------------

    @classmethod
    def from_expr(cls, e: Expr | str, klass: str = K, var: str = "s", s_max: float = math.inf):
        e = parse(e, [var]) if isinstance(e, str) else e
        fc = compile_exprs([e], [var])
        try:
            de = differentiate(e, var)
            dc = compile_exprs([de], [var])
            deriv = lambda s: dc(s)[0]  # noqa: E731
        except NotDifferentiableError:
            deriv = None
        return cls(fn=lambda s: fc(s)[0], cls=klass, s_max=s_max, derivative=deriv, expr=e, label=str(e))

    @classmethod
    def from_table(cls, s, v, klass: str = K, label: str = "table"):
        s = np.asarray(s, dtype=float)
        v = np.asarray(v, dtype=float)
        if s.ndim != 1 or s.shape != v.shape or len(s) < 2:
            raise ComparisonError("table needs matching 1-d arrays with at least two points")
        if np.any(np.diff(s) <= 0):
            k = int(np.argmin(np.diff(s)))
            raise ComparisonError(f"table abscissae not strictly increasing at ({s[k]}, {s[k + 1]})")
        if klass in (K, KINF):
            dv = np.diff(v)
            if np.any(dv <= 0):
                k = int(np.flatnonzero(dv <= 0)[0])
                raise ClassError(
                    f"table not strictly increasing: ({s[k]}, {v[k]}) -> ({s[k + 1]}, {v[k + 1]})"
                )
        elif klass == L and np.any(np.diff(v) > 0):
            k = int(np.flatnonzero(np.diff(v) > 0)[0])
            raise ClassError(f"table not nonincreasing: ({s[k]}, {v[k]}) -> ({s[k + 1]}, {v[k + 1]})")
        interp = PchipInterpolator(s, v, extrapolate=False)
        dinterp = interp.derivative()
        slope = (v[-1] - v[-2]) / (s[-1] - s[-2])
        if klass == L:
            slope = 0.0
        s0, s1 = s[0], s[-1]

        def fn(x):
            x = np.asarray(x, dtype=float)
            inside = np.clip(x, s0, s1)
            out = interp(inside)
            return np.where(x > s1, v[-1] + slope * (x - s1), out)

        def deriv(x):
            x = np.asarray(x, dtype=float)
            return np.where(x > s1, slope, dinterp(np.clip(x, s0, s1)))

        s_max = math.inf if klass in (KINF, L) else float(s1)
        return cls(fn=fn, cls=klass, s_max=s_max, derivative=deriv, table=(s, v), label=label)

    @classmethod
    def from_callable(cls, fn, klass: str = K, derivative=None, label: str = "", s_max: float = math.inf):
        return cls(fn=fn, cls=klass, s_max=s_max, derivative=derivative, label=label)

    @classmethod
    def identity(cls):
        return cls.from_callable(lambda s: np.asarray(s, dtype=float), KINF, lambda s: np.ones_like(s), "id")

    @classmethod
    def linear(cls, c: float):
        return cls.from_callable(
            lambda s: c * np.asarray(s, dtype=float), KINF, lambda s: np.full_like(s, c, dtype=float), f"{c}*s"
        )

    # checks ---------------------------------------------------------------

    def check(self, grid: np.ndarray | None = None, tol: float = GRID_TOL) -> list[str]:
        """Problems with the claimed class on ``grid`` (empty list = fine)."""
        grid = default_grid(self.s_max) if grid is None else np.asarray(grid, dtype=float)
        try:
            v = np.asarray(self(grid), dtype=float)
        except Exception as err:  # evaluation errors are diagnostics here
            return [f"evaluation failed: {err}"]
        problems = []
        if not np.all(np.isfinite(v)):
            problems.append("non-finite values on grid")
            return problems
        d = np.diff(v)
        if self.cls in (K, KINF, PD) and grid[0] == 0.0 and abs(v[0]) > tol:
            problems.append(f"value at 0 is {v[0]!r}, expected 0")
        if self.cls in (K, KINF):
            bad = np.flatnonzero(~(d > 0) & ~((v[:-1] <= UNDERFLOW) & (v[1:] <= UNDERFLOW)))
            if len(bad):
                k = bad[0]
                problems.append(
                    f"not strictly increasing between s={grid[k]!r} ({v[k]!r}) and s={grid[k + 1]!r} ({v[k + 1]!r})"
                )
        if self.cls == KINF and math.isinf(self.s_max):
            # growth proxy: far out, the value must clearly exceed the grid end
            big = float(np.asarray(self(np.array([max(grid[-1], 1.0) * 1e8])))[0])
            if not big > 1.5 * v[-1] + tol:
                problems.append("does not grow beyond the grid (not unbounded)")
        if self.cls == PD:
            pos = v[grid > 0]
            if np.any(pos <= 0):
                problems.append("not positive for s > 0")
        if self.cls == L:
            if np.any(d > tol):
                k = int(np.flatnonzero(d > tol)[0])
                problems.append(f"increasing between s={grid[k]!r} and s={grid[k + 1]!r}")
            if abs(v[-1]) > max(tol, 1e-6 * abs(v[0])):
                problems.append(f"value {v[-1]!r} at s={grid[-1]!r} has not decayed")
        return problems

    def require(self, grid=None) -> "ScalarMonotone":
        problems = self.check(grid)
        if problems:
            raise ClassError(f"{self.label or 'function'} is not class {self.cls}: " + "; ".join(problems))
        return self

    # serialisation ----------------------------------------------------------

    def to_config(self) -> dict:
        if self.expr is not None:
            return {"form": "expr", "class": self.cls, "expr": str(self.expr)}
        if self.table is not None:
            s, v = self.table
            return {"form": "table", "class": self.cls, "points": np.column_stack([s, v]).tolist()}
        raise ComparisonError(f"{self!r} has no serialisable form")


def function_from_config(d: dict) -> ScalarMonotone:
    form = d.get("form", "expr")
    klass = d.get("class", K)
    if form == "expr":
        return ScalarMonotone.from_expr(d["expr"], klass)
    if form == "table":
        pts = np.asarray(d["points"], dtype=float)
        return ScalarMonotone.from_table(pts[:, 0], pts[:, 1], klass)
    raise ComparisonError(f"unknown function form {form!r}")


# --------------------------------------------------------------------------
# Inversion and composition
# --------------------------------------------------------------------------


def _bracket(f: ScalarMonotone, y: np.ndarray) -> np.ndarray:
    hi = np.ones_like(y)
    if math.isfinite(f.s_max):
        hi[:] = f.s_max
        return hi
    for _ in range(1100):
        low = f(hi) < y
        if not low.any():
            return hi
        hi = np.where(low, hi * 2.0, hi)
        if np.any(hi > 1e300):
            break
    raise RangeError("value outside the range of the function (no bracket found)")


def invert(f: ScalarMonotone, y, tol: float = 1e-12):
    """Solve ``f(s) = y`` for class-K ``f`` by bracketing bisection.

    Returns ``s`` with ``|f(s) - y| <= tol * max(1, |y|)`` unless the
    bracket collapses to machine precision first.  Works elementwise on
    arrays.
    """
    if f.cls not in (K, KINF):
        raise ClassError(f"cannot invert a function of class {f.cls}")
    scalar = np.ndim(y) == 0
    y = np.atleast_1d(np.asarray(y, dtype=float))
    f0 = float(np.asarray(f(np.array([0.0])))[0])
    if np.any(y < f0 - tol):
        raise RangeError(f"value {float(y.min())!r} below f(0) = {f0!r}")
    if math.isfinite(f.s_max):
        top = float(np.asarray(f(np.array([f.s_max])))[0])
        if np.any(y > top + tol * max(1.0, top)):
            raise RangeError(f"value {float(y.max())!r} above the range [{f0}, {top}] of a class-{f.cls} function")
    lo = np.zeros_like(y)
    hi = _bracket(f, y)
    target = tol * np.maximum(1.0, np.abs(y))
    best = hi.copy()
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        below = fm < y
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        done = (np.abs(fm - y) <= target) | (hi - lo <= 4 * np.finfo(float).eps * np.maximum(hi, 1e-300))
        best = np.where(done & (np.abs(fm - y) <= np.abs(f(best) - y)), mid, best)
        if done.all():
            break
    res = np.where(np.abs(f(best) - y) <= np.abs(f(0.5 * (lo + hi)) - y), best, 0.5 * (lo + hi))
    res = np.where(y <= f0, 0.0, res)
    return float(res[0]) if scalar else res


def inverse(f: ScalarMonotone, tol: float = 1e-13) -> ScalarMonotone:
    """The inverse function of a class K / K-infinity function."""
    if f.cls not in (K, KINF):
        raise ClassError(f"cannot invert a function of class {f.cls}")
    s_max = math.inf
    if math.isfinite(f.s_max):
        s_max = float(np.asarray(f(np.array([f.s_max])))[0])

    def fn(y):
        return invert(f, y, tol)

    deriv = None
    if f.derivative is not None:
        deriv = lambda y: 1.0 / f.derivative(invert(f, y, tol))  # noqa: E731
    return ScalarMonotone(fn=fn, cls=f.cls, s_max=s_max, derivative=deriv, label=f"inv({f.label})")


def compose(f: ScalarMonotone, g: ScalarMonotone, grid=None) -> ScalarMonotone:
    """``f o g`` with propagated class tag (K o K = K, Kinf o Kinf = Kinf)."""
    if f.cls not in (K, KINF) or g.cls not in (K, KINF):
        raise ClassError(f"incompatible classes for composition: {f.cls} o {g.cls}")
    klass = KINF if (f.cls == KINF and g.cls == KINF) else K
    s_max = g.s_max
    if math.isfinite(f.s_max):
        # restrict to where g stays inside f's domain
        s_max = min(s_max, invert(g, f.s_max)) if g.cls == KINF or f.s_max < float(g(np.array([g.s_max]))[0]) else s_max
    deriv = None
    if f.derivative is not None and g.derivative is not None:
        deriv = lambda s: f.derivative(g(s)) * g.derivative(s)  # noqa: E731
    expr = None
    if f.expr is not None and g.expr is not None:
        expr = f.expr.substitute({"s": g.expr})
    out = ScalarMonotone(
        fn=lambda s: f(g(s)), cls=klass, s_max=s_max, derivative=deriv, expr=expr, label=f"{f.label}o{g.label}"
    )
    problems = out.check(grid)
    if problems:
        raise ClassError("composition failed grid check: " + "; ".join(problems))
    return out


def pointwise_max(f: ScalarMonotone, g: ScalarMonotone) -> ScalarMonotone:
    klass = KINF if KINF in (f.cls, g.cls) else K
    return ScalarMonotone.from_callable(
        lambda s: np.maximum(f(s), g(s)), klass, label=f"max({f.label},{g.label})", s_max=max(f.s_max, g.s_max)
    )


# --------------------------------------------------------------------------
# KL functions
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KLFunction:
    """A bivariate ``beta(s, t)``: class K in ``s``, decaying to 0 in ``t``."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str = "closed"
    expr: Expr | None = None
    table: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __call__(self, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        return self.fn(s, t)

    def __repr__(self):
        return f"KLFunction({self.label or self.kind})"

    @classmethod
    def from_expr(cls, e: Expr | str):
        e = parse(e, ["s", "t"]) if isinstance(e, str) else e
        fc = compile_exprs([e], ["s", "t"])
        return cls(fn=lambda s, t: fc(s, t)[0], kind="closed", expr=e, label=str(e))

    @classmethod
    def from_callable(cls, fn, label=""):
        return cls(fn=fn, kind="closed", label=label)

    @classmethod
    def separable(cls, kappa1: ScalarMonotone, ell: Callable[[np.ndarray], np.ndarray], label=""):
        return cls(fn=lambda s, t: kappa1(s) * ell(t), kind="separable", label=label or f"{kappa1.label}*l(t)")

    @classmethod
    def from_table(cls, s_grid, t_grid, values, label="table"):
        """Bilinear table.  Beyond the last ``s`` the last secant slope is
        used; beyond the last ``t`` values decay like ``t_max / t``."""
        s = np.asarray(s_grid, dtype=float)
        t = np.asarray(t_grid, dtype=float)
        v = np.asarray(values, dtype=float)
        if v.shape != (len(s), len(t)):
            raise ComparisonError(f"table shape {v.shape} does not match grids ({len(s)}, {len(t)})")
        if np.any(np.diff(s) <= 0) or np.any(np.diff(t) <= 0):
            raise ComparisonError("table grids must be strictly increasing")

        def fn(sq, tq):
            sq, tq = np.broadcast_arrays(np.asarray(sq, float), np.asarray(tq, float))
            tc = np.clip(tq, t[0], t[-1])
            j = np.clip(np.searchsorted(t, tc, side="right") - 1, 0, len(t) - 2)
            wt = (tc - t[j]) / (t[j + 1] - t[j])
            sc = np.clip(sq, s[0], s[-1])
            i = np.clip(np.searchsorted(s, sc, side="right") - 1, 0, len(s) - 2)
            ws = (sq - s[i]) / (s[i + 1] - s[i])  # > 1 beyond the table: linear extension
            ws = np.where(sq < s[0], 0.0, ws)
            col_lo = v[i, j] + ws * (v[i + 1, j] - v[i, j])
            col_hi = v[i, j + 1] + ws * (v[i + 1, j + 1] - v[i, j + 1])
            out = col_lo + wt * (col_hi - col_lo)
            tail = np.where(tq > t[-1], t[-1] / np.maximum(tq, 1e-300), 1.0) if t[-1] > 0 else 1.0
            return out * tail

        return cls(fn=fn, kind="table", table=(s, t, v), label=label)

    def check(self, s_grid=None, t_grid=None, decay_tol: float = 0.1) -> list[str]:
        """Grid checks.  Decay is a proxy: ``beta(s, t_end)`` must have fallen
        below ``decay_tol * beta(s, 0)``; slow rates like ``s/(1+t)`` pass."""
        s = np.asarray(default_grid(1e3, 128) if s_grid is None else s_grid, dtype=float)
        t = np.asarray(np.linspace(0, 50, 128) if t_grid is None else t_grid, dtype=float)
        v = self(s[:, None], t[None, :])
        problems = []
        if not np.all(np.isfinite(v)):
            return ["non-finite values on grid"]
        if s[0] == 0 and np.any(np.abs(v[0]) > GRID_TOL):
            problems.append("beta(0, t) is not 0")
        ds = np.diff(v, axis=0)
        strict_fail = ~(ds > 0) & ~((v[:-1] <= UNDERFLOW) & (v[1:] <= UNDERFLOW))
        if strict_fail.any():
            i, j = np.argwhere(strict_fail)[0]
            problems.append(f"not strictly increasing in s at t={t[j]!r} between s={s[i]!r} and s={s[i + 1]!r}")
        dt = np.diff(v, axis=1)
        if np.any(dt > GRID_TOL * np.maximum(1.0, np.abs(v[:, 1:]))):
            i, j = np.argwhere(dt > GRID_TOL * np.maximum(1.0, np.abs(v[:, 1:])))[0]
            problems.append(f"increasing in t at s={s[i]!r} between t={t[j]!r} and t={t[j + 1]!r}")
        tail = v[:, -1]
        head = np.abs(v[:, 0])
        if np.any(tail > decay_tol * head + UNDERFLOW):
            i = int(np.argmax(tail - decay_tol * head))
            problems.append(f"beta({s[i]!r}, {t[-1]!r}) = {tail[i]!r} has not decayed below tolerance")
        return problems

    def to_config(self) -> dict:
        if self.expr is not None:
            return {"form": "expr", "class": "KL", "expr": str(self.expr)}
        if self.table is not None:
            s, t, v = self.table
            return {"form": "table", "class": "KL", "s": s.tolist(), "t": t.tolist(), "values": v.tolist()}
        raise ComparisonError(f"{self!r} has no serialisable form")


def kl_from_config(d: dict) -> KLFunction:
    form = d.get("form", "expr")
    if form == "expr":
        return KLFunction.from_expr(d["expr"])
    if form == "table":
        return KLFunction.from_table(d["s"], d["t"], d["values"])
    raise ComparisonError(f"unknown KL form {form!r}")


# --------------------------------------------------------------------------
# Time thresholds
# --------------------------------------------------------------------------


def _raw_threshold(beta: KLFunction, r: float, s: float, tol: float) -> float:
    if float(beta(r, 0.0)) <= s:
        return 0.0
    hi = 1.0
    while float(beta(r, hi)) > s:
        hi *= 2.0
        if hi > 1e12:
            raise ComparisonError(f"beta({r}, t) does not fall below {s} for t <= 1e12")
    lo = 0.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if float(beta(r, mid)) <= s:
            hi = mid
        else:
            lo = mid
    return hi


class TimeThresholds:
    """The family ``T_r(s) = inf{t >= 0 : beta(r, t') <= s for all t' >= t}``.

    Queries are cached; each answer is raised to the largest cached answer at
    some ``(r', s')`` with ``r' <= r`` and ``s' >= s`` so that the returned
    family is nondecreasing in ``r`` and nonincreasing in ``s`` over
    everything asked so far.
    """

    def __init__(self, beta: KLFunction, tol: float = 1e-12):
        self.beta = beta
        self.tol = tol
        self.cache: dict[tuple[float, float], float] = {}

    def __call__(self, r: float, s: float) -> float:
        r, s = float(r), float(s)
        if not s > 0:
            raise ComparisonError("time thresholds need s > 0")
        if r < 0:
            raise ComparisonError("time thresholds need r >= 0")
        key = (r, s)
        if key in self.cache:
            return self.cache[key]
        val = _raw_threshold(self.beta, r, s, self.tol)
        for (r2, s2), v2 in self.cache.items():
            if r2 <= r and s2 >= s and v2 > val:
                val = v2
        self.cache[key] = val
        return val


def time_threshold_family(beta: KLFunction, r: float, s: float, cache: TimeThresholds | None = None) -> float:
    if cache is None:
        cache = TimeThresholds(beta)
    return cache(r, s)


# --------------------------------------------------------------------------
# KL factorisation  beta(s, t) <= kappa1(s) * kappa2(exp(-t))
# --------------------------------------------------------------------------


def _upshift(values: np.ndarray) -> np.ndarray:
    # value at grid point i := envelope at grid point i + 1
    out = np.empty_like(values)
    out[:-1] = values[1:]
    out[-1] = values[-1]
    return out


def kl_exponential_factorization(
    beta: KLFunction, s_grid, t_grid, eps: float = EPS_RECTIFY
) -> tuple[ScalarMonotone, ScalarMonotone]:
    """Return class K-infinity ``kappa1, kappa2`` with
    ``beta(s, t) <= kappa1(s) * kappa2(exp(-t))`` on the grid.

    ``kappa1(s) = max(s, sup_t beta(s, t))`` and
    ``kappa2(r) = sup_s beta(s, ln(1/r)) / kappa1(s)``, both made into
    monotone envelopes, shifted by one grid cell towards larger arguments so
    the bound also holds between grid points, and made strictly increasing by
    adding ``eps * s``.  The bound is verified on the grid before returning.
    """
    s = np.unique(np.concatenate([[0.0], np.asarray(s_grid, float)]))
    t = np.unique(np.concatenate([[0.0], np.asarray(t_grid, float)]))
    bv = np.asarray(beta(s[:, None], t[None, :]), dtype=float)
    if not np.all(np.isfinite(bv)) or np.any(bv < 0):
        raise FactorizationError("beta must be finite and nonnegative on the grid")
    k1_raw = np.maximum(s, bv.max(axis=1))
    k1_env = np.maximum.accumulate(k1_raw)
    pos = s > 0
    ratio = np.zeros_like(bv)
    ratio[pos] = bv[pos] / k1_raw[pos, None]
    k2_t = ratio.max(axis=0)  # indexed by t ascending
    # envelope over r = exp(-t): nondecreasing as t decreases
    k2_env_t = np.maximum.accumulate(k2_t[::-1])[::-1]
    r = np.exp(-t)[::-1]  # ascending
    k2_env_r = k2_env_t[::-1]
    k1_tab = _upshift(k1_env)
    k1_tab[0] = 0.0
    k1_tab = k1_tab + eps * s
    k2_tab = _upshift(k2_env_r) + eps * r
    r_all = np.concatenate([[0.0], r])
    k2_all = np.concatenate([[0.0], k2_tab])
    keep = np.concatenate([[True], np.diff(r_all) > 0])
    kappa1 = ScalarMonotone.from_table(s, np.maximum.accumulate(k1_tab), KINF, label="kappa1")
    kappa2 = ScalarMonotone.from_table(r_all[keep], k2_all[keep], KINF, label="kappa2")
    bound = kappa1(s)[:, None] * kappa2(np.exp(-t))[None, :]
    slack = bound * (1 + 1e-12) + 1e-300 - bv
    if np.any(slack < 0):
        i, j = np.unravel_index(int(np.argmin(slack)), slack.shape)
        raise FactorizationError(
            f"factorisation fails at s={s[i]!r}, t={t[j]!r}: beta={bv[i, j]!r} > {bound[i, j]!r}",
            worst=(float(s[i]), float(t[j])),
        )
    return kappa1, kappa2


def verify_factorization(beta, kappa1, kappa2, s_grid, t_grid, slack: float = 1.0):
    """Worst ratio ``beta / (slack * kappa1 * kappa2)`` and where it occurs."""
    s = np.asarray(s_grid, float)
    t = np.asarray(t_grid, float)
    bv = beta(s[:, None], t[None, :])
    bound = slack * kappa1(s)[:, None] * kappa2(np.exp(-t))[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bv > 0, bv / bound, 0.0)
    i, j = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    return float(ratio[i, j]), (float(s[i]), float(t[j]))


# --------------------------------------------------------------------------
# Comparison principle:  y' <= -c kappa(y)  =>  y(t) <= beta_kappa(y(0), c t)
# --------------------------------------------------------------------------


class _ComparisonFlow:
    """Solution of ``z' = -kappa(z)`` tabulated once from a large start value.

    The flow is integrated in ``w = ln z`` so that relative accuracy is kept
    down to the underflow floor.  Any other start ``s <= s_top`` is handled by
    the semigroup property: ``beta(s, t) = Z(tau(s) + t)`` where ``tau(s)`` is
    the time the master trajectory passes through ``s``.
    """

    def __init__(self, kappa: ScalarMonotone, s_top: float = 1e4, rtol: float = 1e-12):
        self.kappa = kappa
        self.rtol = rtol
        self._build(s_top)

    def _wdot(self, w):
        z = np.exp(w)
        return -np.asarray(self.kappa(z), dtype=float) / z

    def _build(self, s_top: float):
        self.s_top = s_top
        self.ts = np.array([0.0])
        self.ws = np.array([math.log(s_top)])
        self.t_floor = math.inf
        self._extend(64.0)

    def _extend(self, until: float):
        rhs = lambda x, u: self._wdot(x)  # noqa: E731
        floor = math.log(UNDERFLOW)
        while self.ts[-1] < until and not math.isfinite(self.t_floor):
            t0 = self.ts[-1]
            span = max(until - t0, t0, 64.0)
            # restart points every ~1% of elapsed time keep the Hermite nodes
            # dense where slow flows would otherwise take huge steps
            geo = np.geomspace(1e-6, 1e12, 1801)
            bp = np.unique(np.concatenate([[0.0, span], geo[(geo > t0) & (geo < t0 + span)] - t0]))
            sol = ode.integrate_piecewise(
                rhs, [[self.ws[-1]]], bp, np.zeros((len(bp) - 1, 1, 1)), rtol=self.rtol, atol=1e-12, blowup=1e300
            )
            t_new = t0 + sol.t[1:]
            w_new = sol.x[1:, 0, 0]
            if sol.status[0] != ode.COMPLETED:
                keep = sol.t[1:] <= sol.t_stop[0]
                t_new, w_new = t_new[keep], w_new[keep]
                self.t_floor = float(t_new[-1]) if len(t_new) else float(t0)
            below = np.flatnonzero(w_new <= floor)
            if len(below):
                k = below[0] + 1
                t_new, w_new = t_new[:k], w_new[:k]
                self.t_floor = float(t_new[-1])
            self.ts = np.concatenate([self.ts, t_new])
            self.ws = np.concatenate([self.ws, w_new])
        dw = self._wdot(self.ws)
        self.w_of_t = CubicHermiteSpline(self.ts, self.ws, dw)
        self.t_of_negw = CubicHermiteSpline(-self.ws, self.ts, -1.0 / dw)

    def tau(self, s):
        return self.t_of_negw(-np.log(s))

    def __call__(self, s, t):
        s, t = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
        if s.size and s.max() > self.s_top:
            self._build(10.0 ** math.ceil(math.log10(float(s.max())) + 1))
        pos = s > 0
        out = np.zeros(s.shape)
        if not pos.any():
            return out
        w_min = math.log(float(s[pos].min()))
        while w_min < self.ws[-1] and not math.isfinite(self.t_floor):
            self._extend(self.ts[-1] * 2.0)
        tq = self.tau(s[pos]) + t[pos]
        need = float(tq.max())
        if need > self.ts[-1] and not math.isfinite(self.t_floor):
            self._extend(need * 1.5)
        z = np.exp(self.w_of_t(np.minimum(tq, self.ts[-1])))
        z = np.where(tq > self.ts[-1], 0.0, z)
        out[pos] = z
        return out


def ode_comparison_bound(kappa: ScalarMonotone, s_top: float = 1e4) -> KLFunction:
    """KL bound for solutions of ``y' <= -c kappa(y)``.

    The returned ``beta`` satisfies ``y(t) <= beta(y(0), c t)``.  An
    inequality written with divisor ``1 + c`` instead corresponds to the
    multiplier ``1 / (1 + c)``.
    """
    problems = ScalarMonotone(fn=kappa.fn, cls=PD).check(default_grid(1e4, 256))
    if problems:
        raise ClassError("kappa must be positive definite: " + "; ".join(problems))
    flow = _ComparisonFlow(kappa, s_top)
    return KLFunction(fn=flow, kind="comparison", label=f"flow(-{kappa.label})", meta={"kappa": kappa.label})


# --------------------------------------------------------------------------
# Decay margins
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DecayMargin:
    """Tabulated ``alpha(s, r) >= 0``: nondecreasing in ``s``, nonincreasing in ``r``.

    Lookup is conservative: ``alpha(v, rho)`` uses the largest grid ``s``
    not above ``v`` and the smallest grid ``r`` not below ``rho``.  Below the
    first positive ``s`` it is ``min(slope[j] * v, values[1, j])``; without
    fitted slopes the ramp is linear to the first grid value.
    """

    s_grid: np.ndarray
    r_grid: np.ndarray
    values: np.ndarray
    vacuous: np.ndarray | None = None
    info: dict = field(default_factory=dict)
    slope: np.ndarray | None = None

    bivariate = True

    def __call__(self, s, r):
        s, r = np.broadcast_arrays(np.asarray(s, float), np.asarray(r, float))
        sg, rg, v = self.s_grid, self.r_grid, self.values
        i = np.clip(np.searchsorted(sg, s, side="right") - 1, 0, len(sg) - 1)
        j = np.clip(np.searchsorted(rg, r, side="left"), 0, len(rg) - 1)
        out = v[i, j]
        first = np.flatnonzero(sg > 0)
        if len(first):
            k = first[0]
            ramp = (s < sg[k]) & (s > 0)
            low = v[k, j] * s / sg[k]
            if self.slope is not None:
                low = np.minimum(self.slope[j] * s, v[k, j])
            out = np.where(ramp, low, out)
        return np.where(s <= 0, 0.0, out)

    def check(self) -> list[str]:
        problems = []
        v = self.values
        if np.any(np.diff(v, axis=0) < 0):
            problems.append("decreasing in s")
        if np.any(np.diff(v, axis=1) > 0):
            problems.append("increasing in r")
        if np.any(v[self.s_grid > 0] <= 0):
            problems.append("not positive for s > 0")
        return problems

    def to_config(self) -> dict:
        return {
            "form": "table",
            "class": "decay",
            "s": self.s_grid.tolist(),
            "r": self.r_grid.tolist(),
            "values": self.values.tolist(),
        }


def dominance_min(vals, key_s, key_r, s_grid, r_grid, guard: float = 0.0, return_arg: bool = False):
    """``out[i, j] = min{vals : key_s >= s_i (1 - guard), key_r <= r_j (1 + guard)}``.

    Empty sets give ``inf`` (and index -1 when ``return_arg``).
    """
    order = np.argsort(key_r, kind="stable")
    vr = vals[order]
    ks = key_s[order]
    kr = key_r[order]
    out = np.full((len(s_grid), len(r_grid)), np.inf)
    arg = np.full(out.shape, -1)
    cut = np.searchsorted(kr, np.asarray(r_grid) * (1 + guard), side="right")
    pos = np.arange(len(vr))
    for i, s in enumerate(s_grid):
        masked = np.where(ks >= s * (1 - guard), vr, np.inf)
        if not len(masked):
            continue
        acc = np.minimum.accumulate(masked)
        where = np.maximum.accumulate(np.where(np.isfinite(masked) & (masked == acc), pos, -1))
        ok = cut > 0
        out[i, ok] = acc[cut[ok] - 1]
        arg[i, ok] = where[cut[ok] - 1]
    if return_arg:
        arg = np.where(arg >= 0, order[np.maximum(arg, 0)], -1)
        return out, arg
    return out


def _compass_refine(V, vdot, chi_inv, x0, nu0, s_lo, r_hi, input_radius=None, step=0.1, iters=120):
    """Lower sampled cell minima of ``-DV f`` by a projected compass search.

    Each row is an independent problem: minimise ``-vdot(x, rho(x) nu)``
    subject to ``V(x) >= s_lo``, ``|x| <= r_hi``, ``|nu| <= 1``, where
    ``rho = chi^-1(V)`` (capped at ``input_radius``).  Only feasible points
    are ever accepted, so results are genuine members of the region.
    """
    n, m = x0.shape[1], nu0.shape[1]
    dim = n + m

    def project(z, rad):
        x, nu = z[:, :n], z[:, n:]
        nx = np.linalg.norm(x, axis=1)
        x = x * np.minimum(1.0, rad / np.maximum(nx, 1e-300))[:, None]
        nn = np.linalg.norm(nu, axis=1)
        nu = nu / np.maximum(nn, 1.0)[:, None]
        return np.concatenate([x, nu], axis=1)

    def value(z, lo):
        x, nu = z[:, :n], z[:, n:]
        v = np.asarray(V(x), float)
        rho = np.asarray(chi_inv(np.maximum(v, 0.0)), float)
        if input_radius is not None:
            rho = np.minimum(rho, input_radius)
        g = -np.asarray(vdot(x, rho[:, None] * nu), float)
        return np.where((v >= lo) & np.isfinite(g), g, np.inf)

    z = project(np.concatenate([x0, nu0], axis=1), r_hi)
    best = value(z, s_lo)
    delta = np.full(len(z), step)
    scale = np.concatenate([np.repeat(r_hi[:, None], n, axis=1), np.ones((len(z), m))], axis=1)
    eye = np.concatenate([np.eye(dim), -np.eye(dim)])
    for _ in range(iters):
        live = delta > 1e-10
        if not live.any():
            break
        idx = np.flatnonzero(live)
        cand = z[idx, None, :] + (delta[idx, None, None] * scale[idx, None, :]) * eye[None, :, :]
        cand = project(cand.reshape(-1, dim), np.repeat(r_hi[idx], 2 * dim))
        vals = value(cand, np.repeat(s_lo[idx], 2 * dim)).reshape(len(idx), 2 * dim)
        k = np.argmin(vals, axis=1)
        improve = vals[np.arange(len(idx)), k] < best[idx]
        acc = idx[improve]
        z[acc] = cand.reshape(len(idx), 2 * dim, dim)[improve, k[improve]]
        best[acc] = vals[improve, k[improve]]
        delta[idx[~improve]] *= 0.5
    return best


def monotone_envelope(table: np.ndarray) -> np.ndarray:
    """Smallest table above ``table`` that is nondecreasing along axis 0 and
    nonincreasing along axis 1."""
    m = np.maximum.accumulate(table, axis=0)
    return np.maximum.accumulate(m[:, ::-1], axis=1)[:, ::-1]


def _decay_samples(V, vdot, chi_inv, n, m, radius, density, n_random, rng, input_radius=None):
    axes = [np.linspace(-radius, radius, density)] * n
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
    rand = rng.uniform(-radius, radius, (n_random, n))
    # coordinates spread over magnitudes too, so small-V regions are covered
    mags = radius * 10.0 ** rng.uniform(-6, 0, (n_random, n))
    logpts = np.where(rng.random((n_random, n)) < 0.5, rand[::-1], mags * rng.choice([-1.0, 1.0], (n_random, n)))
    xi = np.concatenate([grid, rand, logpts])
    xi = xi[np.linalg.norm(xi, axis=1) <= radius * (1 + 1e-12)]
    v = np.asarray(V(xi), float)
    rho = np.asarray(chi_inv(np.maximum(v, 0.0)), float)
    if input_radius is not None:
        rho = np.minimum(rho, input_radius)
    dirs = [np.zeros(m)]
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        dirs += [e, -e]
    if m > 1:
        for c in np.array(np.meshgrid(*[[-1.0, 1.0]] * m)).T.reshape(-1, m):
            dirs.append(c / np.linalg.norm(c))
    scales = [1.0, 0.5]
    xs, mus = [], []
    for d in dirs:
        for sc in scales if np.any(d) else [1.0]:
            xs.append(xi)
            mus.append(rho[:, None] * sc * d[None, :])
    xs = np.concatenate(xs)
    mus = np.concatenate(mus)
    vv = np.tile(v, len(mus) // len(v))
    g = -np.asarray(vdot(xs, mus), float)
    return xs, mus, vv, g


def build_decay_margin(
    V,
    vdot,
    chi: ScalarMonotone,
    s_grid,
    r_grid,
    sample_density: int = 101,
    n: int = 1,
    m: int = 1,
    seed: int = 0,
    n_random: int = 20000,
    guard: float = 0.02,
    input_radius: float | None = None,
    verify: bool = True,
    max_rounds: int = 4,
) -> DecayMargin:
    """Decay margin ``alpha(s, r)`` from a strict-decrease hypothesis.

    Parameters
    ----------
    V : callable
        ``V(x)`` for ``x`` of shape ``(B, n)``.
    vdot : callable
        ``vdot(x, mu)``: the derivative ``DV(x) f(x, mu)``.
    chi : ScalarMonotone
        Trigger gain: decrease is required whenever ``V(x) >= chi(|mu|)``.

    The margin is ``min(alpha0(s, r), s)`` where ``alpha0`` is the sampled
    minimum of ``-DV f`` over the region ``V >= s``, ``|x| <= r``,
    ``|mu| <= chi^-1(V)`` (enlarged by a relative ``guard`` band).  Empty
    regions get ``min(s, 1)``.  The result is re-checked on an independent
    random sample; failed holdout points are folded into the fit and a fresh
    holdout is drawn, up to ``max_rounds`` times.
    """
    rng = np.random.default_rng(seed)
    s_grid = np.unique(np.concatenate([[0.0], np.asarray(s_grid, float)]))
    r_grid = np.unique(np.asarray(r_grid, float))
    radius = float(r_grid[-1])
    chi_inv = inverse(chi)
    xs, mus, vv, g = _decay_samples(V, vdot, chi_inv, n, m, radius, sample_density, n_random, rng, input_radius)
    hold = np.random.default_rng(seed + 7919)
    rounds = max_rounds if verify else 1
    for rnd in range(rounds):
        live = vv > 0
        bad = live & ~(g > 0)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise DecayHypothesisError(
                f"strict decrease fails at x={xs[k].tolist()}, mu={mus[k].tolist()}: DV f = {-g[k]!r}",
                witness={"x": xs[k].tolist(), "mu": mus[k].tolist(), "vdot": float(-g[k])},
            )
        lx, lmu, lv = xs[live], mus[live], vv[live]

        def refine(idx, s_lo, r_hi):
            rho = np.asarray(chi_inv(lv[idx]), float)
            if input_radius is not None:
                rho = np.minimum(rho, input_radius)
            nu = lmu[idx] / np.maximum(rho, 1e-300)[:, None]
            return _compass_refine(
                V, vdot, chi_inv, lx[idx], nu, s_lo * (1 - guard), r_hi * (1 + guard), input_radius
            )

        dm = _margin_table(g[live], lv, np.linalg.norm(lx, axis=1), s_grid, r_grid, guard, refine)
        dm.info.update(samples=int(live.sum()), guard=guard, rounds=rnd + 1)
        if not verify:
            return dm
        hx, hmu, hv, hg = _decay_samples(V, vdot, chi_inv, n, m, radius, 2, n_random, hold, input_radius)
        req = dm(hv, np.linalg.norm(hx, axis=1))
        viol = (hv > 0) & (-hg > -req + 1e-9)
        dm.info.update(holdout=int((hv > 0).sum()), holdout_violations=int(viol.sum()))
        if not viol.any():
            return dm
        # densify with the failed holdout and verify again on fresh samples
        xs, mus = np.concatenate([xs, hx]), np.concatenate([mus, hmu])
        vv, g = np.concatenate([vv, hv]), np.concatenate([g, hg])
    k = int(np.flatnonzero(viol)[0])
    raise DecayHypothesisError(
        f"decay margin fails on holdout at x={hx[k].tolist()}, mu={hmu[k].tolist()} after {rounds} rounds",
        witness={"x": hx[k].tolist(), "mu": hmu[k].tolist(), "vdot": float(-hg[k]), "alpha": float(req[k])},
    )


def _margin_table(g, v, norms, s_grid, r_grid, guard, refine=None) -> DecayMargin:
    alpha0, arg = dominance_min(g, v, norms, s_grid, r_grid, guard, return_arg=True)
    if refine is not None:
        cells = np.argwhere(arg >= 0)
        if len(cells):
            better = refine(arg[cells[:, 0], cells[:, 1]], s_grid[cells[:, 0]], r_grid[cells[:, 1]])
            alpha0[cells[:, 0], cells[:, 1]] = np.minimum(alpha0[cells[:, 0], cells[:, 1]], better)
            # a point of cell (i, j) also lies in every cell (i' <= i, j' >= j)
            alpha0 = np.minimum.accumulate(alpha0[::-1], axis=0)[::-1]
            alpha0 = np.minimum.accumulate(alpha0, axis=1)
    vacuous = ~np.isfinite(alpha0)
    sg = s_grid[:, None] * np.ones_like(alpha0)
    table = np.where(vacuous, np.minimum(sg, 1.0), np.minimum(alpha0, sg))
    table[0, :] = 0.0
    # slope of the ramp below the first grid value, from the samples there
    s1 = s_grid[1] if len(s_grid) > 1 else np.inf
    small = v < s1
    slope = dominance_min(g[small] / v[small], np.zeros(small.sum()), norms[small], [0.0], r_grid, guard)[0]
    slope = np.where(np.isfinite(slope), slope * (1 - guard), 1.0)
    return DecayMargin(s_grid, r_grid, monotone_envelope(table), vacuous, info={}, slope=slope)
