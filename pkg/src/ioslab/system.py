"""Control systems, piecewise-constant input signals and trajectories."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ode
from .expr import Expr, compile_exprs, parse

FREE = "free"
UNIT_BALL = "unit_ball"


class ConstructionError(ValueError):
    """Construction-time invariant violation of a :class:`ControlSystem`."""


def state_names(n: int) -> list[str]:
    return [f"x{i + 1}" for i in range(n)]


def input_names(m: int) -> list[str]:
    return [f"u{j + 1}" for j in range(m)]


@dataclass
class ControlSystem:
    """``x' = f(x, u)``, ``y = h(x)`` with ``f(0, 0) = 0`` and ``h(0) = 0``.

    ``rhs`` and ``output`` are batch callables on arrays of shape ``(B, n)``
    (and ``(B, m)`` for inputs).  When the system comes from expressions the
    expression lists are kept in ``f`` / ``h``; derived systems such as the
    robust closed loop only carry the callables.
    """

    name: str
    n: int
    m: int
    p: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    output: Callable[[np.ndarray], np.ndarray]
    input_domain: str = FREE
    f: list[Expr] | None = None
    h: list[Expr] | None = None
    description: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.input_domain not in (FREE, UNIT_BALL):
            raise ConstructionError(f"unknown input domain {self.input_domain!r}")
        x0 = np.zeros((1, self.n))
        u0 = np.zeros((1, self.m))
        f0 = np.asarray(self.rhs(x0, u0))
        h0 = np.asarray(self.output(x0))
        if f0.shape != (1, self.n) or h0.shape != (1, self.p):
            raise ConstructionError(f"{self.name}: rhs/output shapes {f0.shape}, {h0.shape} do not match dimensions")
        if np.abs(f0).max(initial=0.0) > 1e-12:
            raise ConstructionError(f"{self.name}: f(0, 0) = {f0[0].tolist()} is not zero")
        if np.abs(h0).max(initial=0.0) > 1e-12:
            raise ConstructionError(f"{self.name}: h(0) = {h0[0].tolist()} is not zero")

    @classmethod
    def from_strings(
        cls,
        name: str,
        f: Sequence[str],
        h: Sequence[str],
        m: int,
        input_domain: str = FREE,
        description: str = "",
    ) -> "ControlSystem":
        n = len(f)
        xs, us = state_names(n), input_names(m)
        aliases = {}
        if m == 1:
            aliases["u"] = "u1"
        if n == 1:
            aliases["x"] = "x1"
        f_exprs = [parse(s, xs + us, aliases) for s in f]
        h_exprs = [parse(s, xs, aliases) for s in h]
        return cls.from_exprs(name, f_exprs, h_exprs, m, input_domain, description)

    @classmethod
    def from_exprs(cls, name, f_exprs, h_exprs, m, input_domain=FREE, description=""):
        n, p = len(f_exprs), len(h_exprs)
        xs, us = state_names(n), input_names(m)
        fc = compile_exprs(f_exprs, xs + us)
        hc = compile_exprs(h_exprs, xs)

        def rhs(x, u):
            x = np.asarray(x, dtype=float)
            u = np.asarray(u, dtype=float)
            cols = [x[..., i] for i in range(n)] + [u[..., j] for j in range(m)]
            return np.moveaxis(fc(*cols), 0, -1)

        def output(x):
            x = np.asarray(x, dtype=float)
            return np.moveaxis(hc(*[x[..., i] for i in range(n)]), 0, -1)

        return cls(
            name=name,
            n=n,
            m=m,
            p=p,
            rhs=rhs,
            output=output,
            input_domain=input_domain,
            f=list(f_exprs),
            h=list(h_exprs),
            description=description,
        )

    def output_norm(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.output(np.atleast_2d(x)), axis=-1)

    def check_box(self, box: Sequence[tuple[float, float]], points: int = 9, seed: int = 0) -> None:
        """Raise :class:`DomainError` if f or h fails somewhere on a sampled box."""
        rng = np.random.default_rng(seed)
        axes = [np.linspace(lo, hi, points) for lo, hi in box]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.n)
        u = rng.uniform(-1, 1, (len(grid), self.m))
        self.rhs(grid, u)
        self.output(grid)

    def to_dict(self) -> dict:
        d = {"name": self.name, "n": self.n, "m": self.m, "p": self.p, "input_domain": self.input_domain}
        if self.f is not None:
            d["f"] = [str(e) for e in self.f]
            d["h"] = [str(e) for e in self.h]
        d.update(self.meta)
        return d


# --------------------------------------------------------------------------
# Signals
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InputSignal:
    """Piecewise-constant vector signal on ``[0, T]``.

    ``values[k]`` is held on ``[breakpoints[k], breakpoints[k + 1])``.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if bp.ndim != 1 or len(bp) < 2:
            raise ValueError("need at least two breakpoints")
        if bp[0] != 0.0:
            raise ValueError("signals start at t = 0")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if vals.shape[0] != len(bp) - 1:
            raise ValueError(f"{len(bp) - 1} intervals but {vals.shape[0]} values")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value, horizon: float) -> "InputSignal":
        return cls(np.array([0.0, float(horizon)]), np.atleast_2d(np.asarray(value, dtype=float)))

    @property
    def horizon(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def sup_norm(self) -> float:
        return float(np.linalg.norm(self.values, axis=1).max())

    def __call__(self, t) -> np.ndarray:
        """Right-continuous value at time(s) ``t``; the last value holds at ``T``."""
        idx = np.searchsorted(self.breakpoints, np.asarray(t, dtype=float), side="right") - 1
        idx = np.clip(idx, 0, len(self.values) - 1)
        return self.values[idx]

    def restrict(self, horizon: float) -> "InputSignal":
        bp = self.breakpoints
        if horizon >= bp[-1]:
            return InputSignal(np.append(bp[:-1], horizon), self.values)
        k = int(np.searchsorted(bp, horizon, side="left"))
        return InputSignal(np.append(bp[:k], horizon), self.values[:k])

    def refine(self, breakpoints: np.ndarray) -> np.ndarray:
        """Values on the intervals of a finer breakpoint grid."""
        mids = 0.5 * (breakpoints[:-1] + breakpoints[1:])
        return self(mids)

    def to_dict(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InputSignal":
        return cls(np.asarray(d["breakpoints"], float), np.asarray(d["values"], float))


def merge_breakpoints(signals: Sequence[InputSignal], horizon: float) -> np.ndarray:
    bps = [s.breakpoints[s.breakpoints < horizon] for s in signals]
    bp = np.unique(np.concatenate(bps + [[0.0, horizon]]))
    return bp[bp <= horizon]


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    signal: InputSignal
    stats: dict
    status: str = ode.COMPLETED
    t_status: float | None = None
    message: str | None = None

    @property
    def completed(self) -> bool:
        return self.status == ode.COMPLETED

    def output_norm(self) -> np.ndarray:
        return np.linalg.norm(self.y, axis=1)

    def state_norm(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)

    def to_csv(self, path) -> None:
        n, p = self.x.shape[1], self.y.shape[1]
        m = self.signal.m
        header = ["t"] + state_names(n) + input_names(m) + [f"y{k + 1}" for k in range(p)]
        u = self.signal(self.t)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in np.column_stack([self.t, self.x, u, self.y]):
                w.writerow([f"{v:.17g}" for v in row])


def simulate(
    sys: ControlSystem,
    xi,
    u: InputSignal,
    horizon: float | None = None,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    t_eval=None,
    keep_steps: bool = True,
) -> Trajectory:
    """Simulate ``sys`` from ``xi`` under ``u`` up to ``horizon``.

    The integrator restarts at every breakpoint of ``u``; ``t_eval`` adds
    dense-output samples.  Blow-up (``|x| > 1e8``) and domain errors end the
    trajectory early; the samples computed so far are kept.
    """
    horizon = u.horizon if horizon is None else float(horizon)
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    xi = np.asarray(xi, dtype=float).reshape(1, sys.n)
    if not np.all(np.isfinite(xi)):
        raise ValueError("initial state must be finite")
    sig = u.restrict(horizon)
    bp = sig.breakpoints
    sol = ode.integrate_piecewise(
        sys.rhs, xi, bp, sig.values[:, None, :], rtol=rtol, atol=atol, t_eval=t_eval, keep_steps=keep_steps
    )
    return _trajectory_from(sys, sol, 0, sig, bp)


def _trajectory_from(sys, sol: ode.BatchSolution, i: int, sig: InputSignal, bp) -> Trajectory:
    status = sol.status[i]
    t_stop = float(sol.t_stop[i])
    mask = sol.t <= t_stop + 1e-15 if status != ode.COMPLETED else np.ones(len(sol.t), bool)
    t = sol.t[mask]
    x = sol.x[mask, i, :]
    y = sys.output(x) if len(x) else np.zeros((0, sys.p))
    # breakpoints are always on the grid because the integrator lands on them
    stats = {"steps": sol.steps, "rejected": sol.rejected, "max_error": sol.max_error}
    return Trajectory(
        t=t,
        x=x,
        y=y,
        signal=sig,
        stats=stats,
        status=status,
        t_status=None if status == ode.COMPLETED else t_stop,
        message=sol.messages[i],
    )


@dataclass
class BatchTrajectories:
    """Many trajectories on one shared time grid."""

    t: np.ndarray
    x: np.ndarray  # (K, B, n)
    y: np.ndarray  # (K, B, p)
    status: list[str]
    t_stop: np.ndarray
    breakpoints: np.ndarray
    values: np.ndarray  # (N, B, m)

    def valid_mask(self) -> np.ndarray:
        """(K, B) mask of samples at or before each member's stop time."""
        return self.t[:, None] <= self.t_stop[None, :] + 1e-15

    def ok(self) -> np.ndarray:
        return np.array([s == ode.COMPLETED for s in self.status])


def simulate_batch(
    sys: ControlSystem,
    xis: np.ndarray,
    signals: Sequence[InputSignal] | None = None,
    horizon: float = 1.0,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    t_eval=None,
    keep_steps: bool = True,
    breakpoints: np.ndarray | None = None,
    values: np.ndarray | None = None,
) -> BatchTrajectories:
    """Simulate a batch with a shared step sequence.

    Either pass ``signals`` (one per initial state; breakpoints are merged)
    or the raw ``breakpoints`` and ``values`` of shape ``(N, B, m)``.
    """
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    if signals is not None:
        bp = merge_breakpoints(signals, horizon)
        vals = np.stack([s.refine(bp) for s in signals], axis=1)
    else:
        bp = np.asarray(breakpoints, float)
        vals = np.asarray(values, float)
    sol = ode.integrate_piecewise(sys.rhs, xis, bp, vals, rtol=rtol, atol=atol, t_eval=t_eval, keep_steps=keep_steps)
    K, nb, n = sol.x.shape
    y = sys.output(sol.x.reshape(K * nb, n)).reshape(K, nb, sys.p)
    return BatchTrajectories(sol.t, sol.x, y, sol.status, sol.t_stop, bp, vals)


# --------------------------------------------------------------------------
# Robust closed loop and registry
# --------------------------------------------------------------------------


def close_loop_robust(sys: ControlSystem, lam: Callable[[np.ndarray], np.ndarray]) -> ControlSystem:
    """The system ``x' = f(x, d * lam(|h(x)|))`` driven by unit-ball ``d``."""

    def rhs(x, d):
        x = np.asarray(x, dtype=float)
        d = np.asarray(d, dtype=float)
        gain = np.asarray(lam(np.linalg.norm(sys.output(x), axis=-1)), dtype=float)
        return sys.rhs(x, d * gain[..., None])

    return ControlSystem(
        name=f"{sys.name}_robust",
        n=sys.n,
        m=sys.m,
        p=sys.p,
        rhs=rhs,
        output=sys.output,
        input_domain=UNIT_BALL,
        description=f"robust closed loop of {sys.name}",
        meta={"open_loop": sys.name},
    )


_REGISTRY_SPECS = {
    "paper_counterexample": (["0", "-(2*x2+u)/(1+x1^2)"], ["x2"], 1, "x1' = 0, x2' = -(2 x2 + u)/(1 + x1^2), y = x2"),
    "scalar_stable": (["-x1+u"], ["x1"], 1, "x' = -x + u, y = x"),
    "integrator": (["u"], ["x1"], 1, "x' = u, y = x"),
    "decoupled_2d": (["-x1+u", "-x2"], ["x1"], 1, "x1' = -x1 + u, x2' = -x2, y = x1"),
    "zero_system": (["0"], ["0"], 1, "x' = 0, y = 0"),
}

_registry_cache: dict[str, ControlSystem] | None = None


def builtin_registry() -> dict[str, ControlSystem]:
    global _registry_cache
    if _registry_cache is None:
        _registry_cache = {
            name: ControlSystem.from_strings(name, f, h, m, description=desc)
            for name, (f, h, m, desc) in _REGISTRY_SPECS.items()
        }
    return dict(_registry_cache)


def get_system(name: str) -> ControlSystem:
    reg = builtin_registry()
    if name not in reg:
        raise KeyError(name)
    return reg[name]
