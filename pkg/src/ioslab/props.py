"""Output-stability estimates, falsification search and empirical fits.

Every notion is a template ``lhs(t) <= slack * rhs(t)`` evaluated along
simulated trajectories.  Falsification can only refute: a search that finds
nothing reports its budget so the result is not over-read.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import qmc

from . import ode, parallel
from .comparison import KINF, KLFunction, ScalarMonotone
from .system import (
    UNIT_BALL,
    ControlSystem,
    InputSignal,
    close_loop_robust,
    simulate,
    simulate_batch,
)

NOTIONS = ("IOS", "SIOS", "SIIOS", "ROS", "UBIBS", "UOS", "OL-uniform", "SIIOS-uniform")
REQUIRED = {
    "IOS": ("beta", "gamma"),
    "SIOS": ("beta", "gamma", "sigma1", "sigma2"),
    "SIIOS": ("beta", "gamma"),
    "ROS": ("beta", "lam"),
    "UOS": ("beta",),
    "UBIBS": ("sigma",),
    "OL-uniform": ("sigma",),
    "SIIOS-uniform": ("beta",),
}
# notions quantified over unit-ball disturbances with no input term
UNIFORM = ("ROS", "UOS", "OL-uniform", "SIIOS-uniform")

NO_VIOLATION = "no_violation_found"
VIOLATED = "violated"
UNFIT = "unfit"

ABS_TOL = 1e-9
REL_TOL = 1e-6


class SpecError(ValueError):
    pass


@dataclass
class PropertySpec:
    notion: str
    beta: KLFunction | None = None
    gamma: ScalarMonotone | None = None
    sigma: ScalarMonotone | None = None
    sigma1: ScalarMonotone | None = None
    sigma2: ScalarMonotone | None = None
    lam: ScalarMonotone | None = None
    mode: str = "max"
    slack: float = 1.0

    def __post_init__(self):
        if self.notion not in NOTIONS:
            raise SpecError(f"unknown notion {self.notion!r}; expected one of {', '.join(NOTIONS)}")
        if self.mode not in ("max", "sum"):
            raise SpecError(f"combination mode must be 'max' or 'sum', got {self.mode!r}")
        if not self.slack >= 1.0:
            raise SpecError(f"slack must be >= 1, got {self.slack!r}")
        missing = [k for k in REQUIRED[self.notion] if getattr(self, k) is None]
        if missing:
            raise SpecError(f"{self.notion} needs candidate slot(s): {', '.join(missing)}")

    def comb(self, a, b):
        return np.maximum(a, b) if self.mode == "max" else a + b

    def rhs(self, t, sx, sh, su):
        """Right-hand side for elapsed time ``t``, ``sx = |xi|``,
        ``sh = |h(xi)|`` and ``su = ||u||`` (broadcast together)."""
        n = self.notion
        if n == "IOS":
            return self.comb(self.beta(sx, t), self.gamma(su))
        if n == "SIOS":
            ios = self.comb(self.beta(sx, t), self.gamma(su))
            ol = self.comb(self.sigma1(sh), self.sigma2(su))
            return np.minimum(ios, ol)
        if n == "SIIOS":
            return self.comb(self.beta(sh, t), self.gamma(su))
        if n in ("ROS", "UOS"):
            return self.beta(sx, t) * np.ones_like(su)
        if n == "UBIBS":
            return self.comb(self.sigma(sx), self.sigma(su)) * np.ones_like(t)
        if n == "OL-uniform":
            return self.sigma(sh) * np.ones_like(t) * np.ones_like(su)
        return self.beta(sh, t) * np.ones_like(su)

    @property
    def uses_state_norm(self) -> bool:
        return self.notion == "UBIBS"

    def describe(self) -> dict:
        out = {"notion": self.notion, "mode": self.mode, "slack": self.slack}
        for k in ("beta", "gamma", "sigma", "sigma1", "sigma2", "lam"):
            f = getattr(self, k)
            if f is not None:
                try:
                    out[k] = f.to_config()
                except Exception:
                    out[k] = {"form": "opaque", "label": getattr(f, "label", "")}
        return out


def tolerance(rhs):
    return ABS_TOL + REL_TOL * np.abs(rhs)


@dataclass
class MarginSeries:
    t: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    margin: np.ndarray

    @property
    def min_margin(self) -> float:
        return float(self.margin.min()) if len(self.margin) else math.inf

    @property
    def worst(self) -> int:
        return int(np.argmin(self.margin))

    def violated(self) -> np.ndarray:
        return self.margin < -tolerance(self.rhs)


def evaluate_estimate(spec: PropertySpec, traj, xi) -> MarginSeries:
    """Per-sample ``lhs``, ``slack * rhs`` and ``margin = slack * rhs - lhs``.

    ``||u||`` is the sup norm of the driving signal over the simulated
    horizon.
    """
    xi = np.asarray(xi, float)
    lhs = traj.state_norm() if spec.uses_state_norm else traj.output_norm()
    sx = float(np.linalg.norm(xi))
    sh = float(np.linalg.norm(traj.y[0])) if len(traj.y) else 0.0
    su = traj.signal.sup_norm()
    rhs = spec.slack * np.asarray(spec.rhs(traj.t, sx, sh, su), float) * np.ones_like(traj.t)
    return MarginSeries(traj.t, lhs, rhs, rhs - lhs)


# --------------------------------------------------------------------------
# Falsification
# --------------------------------------------------------------------------


@dataclass
class SearchBudget:
    max_simulations: int = 500
    horizon: float = 20.0
    state_box: float | list = 5.0
    input_bound: float = 1.0
    seed: int = 0
    segments: int = 4
    rtol: float = 1e-8
    atol: float = 1e-10
    samples: int = 201

    def box(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        if np.ndim(self.state_box) == 0:
            r = float(self.state_box)
            return np.full(n, -r), np.full(n, r)
        b = np.asarray(self.state_box, float)
        if b.shape != (n, 2):
            raise SpecError(f"state_box must be a radius or {n} (lo, hi) pairs")
        return b[:, 0], b[:, 1]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FalsificationReport:
    verdict: str
    notion: str
    simulations: int
    seed: int
    min_normalized_margin: float
    witness: dict | None = None
    phase: str | None = None
    domain_errors: int = 0
    budget: dict = field(default_factory=dict)

    @property
    def violated(self) -> bool:
        return self.verdict == VIOLATED

    def to_dict(self) -> dict:
        return asdict(self)


class _Space:
    """Unit-cube parametrisation of (initial state, piecewise-constant input)."""

    def __init__(self, sys: ControlSystem, spec: PropertySpec, budget: SearchBudget):
        self.n, self.m = sys.n, sys.m
        self.lo, self.hi = budget.box(sys.n)
        self.ball = spec.notion in UNIFORM or sys.input_domain == UNIT_BALL
        self.bound = 1.0 if spec.notion in UNIFORM else budget.input_bound
        if sys.input_domain == UNIT_BALL:
            self.bound = min(self.bound, 1.0)
        self.N = budget.segments
        self.dim = self.n + self.N * self.m
        self.bp = np.linspace(0.0, budget.horizon, self.N + 1)

    def decode(self, P: np.ndarray):
        P = np.atleast_2d(P)
        xis = self.lo + P[:, : self.n] * (self.hi - self.lo)
        v = (2.0 * P[:, self.n :] - 1.0).reshape(len(P), self.N, self.m) * self.bound
        if self.ball and self.m > 1:
            nv = np.linalg.norm(v, axis=2, keepdims=True)
            v = v * np.minimum(1.0, self.bound / np.maximum(nv, 1e-300))
        return xis, v.transpose(1, 0, 2)

    def signal(self, values_b: np.ndarray) -> InputSignal:
        return InputSignal(self.bp.copy(), values_b)

    def sweep(self) -> np.ndarray:
        n, m, N = self.n, self.m, self.N
        states = []
        if n <= 10:
            states += [np.array(c, float) for c in np.ndindex(*([2] * n))]
        for k in range(n):
            for a in (1.0, 0.0, 0.75, 0.25, 0.55, 0.45):
                s = np.full(n, 0.5)
                s[k] = a
                states.append(s)
        states.append(np.full(n, 0.5))
        levels = [np.array(c, float) / 2 for c in np.ndindex(*([3] * m))] if m <= 6 else [np.full(m, 0.5)]
        # extreme inputs first, zero input last
        levels.sort(key=lambda c: -float(np.abs(c - 0.5).sum()))
        out = [np.concatenate([s, np.tile(u, N)]) for s in states for u in levels]
        return np.array(out)


def _chunk_scores(spec, sim_sys, space, budget, P, t_eval):
    xis, vals = space.decode(P)
    bt = simulate_batch(
        sim_sys,
        xis,
        horizon=budget.horizon,
        breakpoints=space.bp,
        values=vals,
        rtol=budget.rtol,
        atol=budget.atol,
        t_eval=t_eval,
        keep_steps=True,
    )
    valid = bt.valid_mask()
    if spec.uses_state_norm:
        lhs = np.linalg.norm(bt.x, axis=2)
    else:
        lhs = np.linalg.norm(bt.y, axis=2)
    sx = np.linalg.norm(xis, axis=1)
    sh = np.linalg.norm(bt.y[0], axis=1)
    su = np.linalg.norm(vals, axis=2).max(axis=0)
    rhs = spec.slack * np.asarray(spec.rhs(bt.t[:, None], sx[None, :], sh[None, :], su[None, :]), float)
    rhs = rhs * np.ones_like(lhs)
    margin = rhs - lhs
    viol = (margin < -tolerance(rhs)) & valid
    score = np.where(valid, margin / (1.0 + np.abs(rhs)), np.inf).min(axis=0)
    blown = np.array([s == ode.BLEW_UP for s in bt.status])
    dom = np.array([s == ode.DOMAIN_ERROR for s in bt.status])
    bad = viol.any(axis=0) | blown
    score = np.where(blown, -np.inf, score)
    score = np.where(dom & ~bad, np.inf, score)
    return score, bad, dom


def _confirm(spec, sim_sys, space, budget, p, t_eval):
    xis, vals = space.decode(p[None, :])
    sig = space.signal(vals[:, 0, :])
    traj = simulate(sim_sys, xis[0], sig, budget.horizon, budget.rtol, budget.atol, t_eval=t_eval)
    blow = traj.status == ode.BLEW_UP
    if len(traj.t) == 0:
        return None
    ms = evaluate_estimate(spec, traj, xis[0])
    viol = ms.violated()
    if not (viol.any() or blow):
        return None
    # worst violating sample, or the last sample before blow-up
    k = int(np.argmin(np.where(viol, ms.margin, np.inf))) if viol.any() else len(ms.t) - 1
    return {
        "xi": xis[0].tolist(),
        "signal": sig.to_dict(),
        "time": float(ms.t[k]),
        "lhs": float(ms.lhs[k]),
        "rhs": float(ms.rhs[k]),
        "margin": float(ms.margin[k]),
        "blow_up": bool(blow),
        "status": traj.status,
        "t_status": traj.t_status,
        "horizon": budget.horizon,
        "rtol": budget.rtol,
        "atol": budget.atol,
        "samples": budget.samples,
    }


def falsify(spec: PropertySpec, sys: ControlSystem, budget: SearchBudget | None = None) -> FalsificationReport:
    """Search for a trajectory violating ``spec``.

    Phases: a deterministic corner/axis sweep, Latin-hypercube sampling of
    initial states and piecewise-constant inputs, then coordinate-wise
    refinement around the smallest normalised margin.  The search stops at
    the first batch containing a violation; the worst violation of that batch
    that also violates when re-simulated on its own becomes the witness.
    Blow-up counts as a violation and is flagged in the witness.
    """
    budget = budget or SearchBudget()
    sim_sys = close_loop_robust(sys, spec.lam) if spec.notion == "ROS" else sys
    space = _Space(sim_sys, spec, budget)
    t_eval = np.linspace(0.0, budget.horizon, budget.samples)
    rng = np.random.default_rng(budget.seed)
    state = {"used": 0, "best": math.inf, "best_p": None, "dom": 0}

    def run(P, phase):
        P = P[: budget.max_simulations - state["used"]]
        if not len(P):
            return None
        parts = parallel.chunks(len(P))
        results = parallel.map_ordered(lambda sl: _chunk_scores(spec, sim_sys, space, budget, P[sl], t_eval), parts)
        for sl, (score, bad, dom) in zip(parts, results):
            state["used"] += sl.stop - sl.start
            state["dom"] += int(dom.sum())
            k = int(np.argmin(score))
            if score[k] < state["best"]:
                state["best"], state["best_p"] = float(score[k]), P[sl][k].copy()
            if bad.any():
                idx = np.flatnonzero(bad)
                for i in idx[np.argsort(score[idx], kind="stable")][:10]:
                    w = _confirm(spec, sim_sys, space, budget, P[sl][i], t_eval)
                    if w is not None:
                        return w
        return None

    def report(w, phase):
        return FalsificationReport(
            verdict=VIOLATED if w else NO_VIOLATION,
            notion=spec.notion,
            simulations=state["used"],
            seed=budget.seed,
            min_normalized_margin=state["best"],
            witness=w,
            phase=phase if w else None,
            domain_errors=state["dom"],
            budget=budget.to_dict(),
        )

    total = budget.max_simulations
    sweep = space.sweep()[: max(1, total // 4)]
    w = run(sweep, "sweep")
    if w:
        return report(w, "sweep")
    n_lhs = max(0, total - state["used"] - total // 4)
    if n_lhs:
        P = qmc.LatinHypercube(d=space.dim, rng=rng).random(n_lhs)
        w = run(P, "latin_hypercube")
        if w:
            return report(w, "latin_hypercube")
    p = state["best_p"]
    delta = 0.1
    eye = np.concatenate([np.eye(space.dim), -np.eye(space.dim)])
    while p is not None and state["used"] < total and delta > 1e-4 and math.isfinite(state["best"]):
        before = state["best"]
        cand = np.clip(p[None, :] + delta * eye, 0.0, 1.0)
        w = run(cand, "refinement")
        if w:
            return report(w, "refinement")
        if state["best"] < before:
            p = state["best_p"]
        else:
            delta /= 2
    return report(None, None)


def replay_witness(spec: PropertySpec, sys: ControlSystem, witness: dict) -> dict:
    """Re-simulate a witness record; returns lhs/rhs at the recorded time."""
    sim_sys = close_loop_robust(sys, spec.lam) if spec.notion == "ROS" else sys
    sig = InputSignal.from_dict(witness["signal"])
    h = witness["horizon"]
    t_eval = np.linspace(0.0, h, witness["samples"])
    traj = simulate(sim_sys, witness["xi"], sig, h, witness["rtol"], witness["atol"], t_eval=t_eval)
    ms = evaluate_estimate(spec, traj, witness["xi"])
    k = int(np.argmin(np.abs(ms.t - witness["time"])))
    return {"time": float(ms.t[k]), "lhs": float(ms.lhs[k]), "rhs": float(ms.rhs[k]), "margin": float(ms.margin[k])}


# --------------------------------------------------------------------------
# Empirical fits
# --------------------------------------------------------------------------

FIT_EPS = 1e-6


@dataclass
class SamplePlan:
    s_max: float = 5.0
    levels: int = 26
    states_per_level: int = 12
    signals_per_state: int = 3
    horizon: float = 20.0
    t_points: int = 201
    segments: int = 4
    seed: int = 0
    decay_tol: float = 0.05
    inputs: str = "auto"  # auto | zero | unit_ball | bounded
    lam: ScalarMonotone | None = None
    rtol: float = 1e-8
    atol: float = 1e-10

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.s_max, self.levels)


@dataclass
class FitResult:
    notion: str
    ok: bool
    functions: dict
    reason: str = ""
    spec: PropertySpec | None = None
    samples: int = 0
    decay_ratio: float | None = None

    def to_dict(self) -> dict:
        out = {"notion": self.notion, "ok": self.ok, "reason": self.reason, "samples": self.samples}
        out["decay_ratio"] = self.decay_ratio
        out["functions"] = {k: f.to_config() for k, f in self.functions.items()}
        return out


def envelope_1d(keys, vals, grid) -> np.ndarray:
    """``out[i] = max{vals : keys <= grid[i]}`` (0 if empty), nondecreasing."""
    order = np.argsort(keys, kind="stable")
    k, v = keys[order], np.maximum(vals[order], 0.0)
    acc = np.maximum.accumulate(v) if len(v) else v
    cut = np.searchsorted(k, np.asarray(grid) * (1 + 1e-12) + 1e-15, side="right")
    out = np.where(cut > 0, acc[np.maximum(cut - 1, 0)] if len(acc) else 0.0, 0.0)
    return np.maximum.accumulate(out)


def envelope_kl(keys, vals, grid) -> np.ndarray:
    """``out[i, j] = max{vals[b, j'] : keys[b] <= grid[i], j' >= j}``."""
    tail = np.maximum.accumulate(np.maximum(vals, 0.0)[:, ::-1], axis=1)[:, ::-1]
    order = np.argsort(keys, kind="stable")
    k, v = keys[order], tail[order]
    acc = np.maximum.accumulate(v, axis=0)
    cut = np.searchsorted(k, np.asarray(grid) * (1 + 1e-12) + 1e-15, side="right")
    out = np.zeros((len(grid), vals.shape[1]))
    ok = cut > 0
    out[ok] = acc[cut[ok] - 1]
    return np.maximum.accumulate(out, axis=0)


def _as_k(grid, env, label) -> ScalarMonotone:
    return ScalarMonotone.from_table(grid, env + FIT_EPS * grid, KINF, label=label)


def _as_kl(grid, t, env, label) -> KLFunction:
    vals = env + FIT_EPS * grid[:, None] * np.exp(-t)[None, :]
    return KLFunction.from_table(grid, t, vals, label=label)


def _plan_samples(sys, plan: SamplePlan, uniform: bool, zero_cloud: bool):
    rng = np.random.default_rng(plan.seed)
    n, m, N = sys.n, sys.m, plan.segments
    grid = plan.grid()[1:]
    mode = plan.inputs
    if mode == "auto":
        mode = "unit_ball" if (uniform or sys.input_domain == UNIT_BALL) else "bounded"
    xs, us = [], []
    for s in grid:
        dirs = [np.eye(n)[k] * sg for k in range(n) for sg in (1.0, -1.0)]
        while len(dirs) < plan.states_per_level:
            d = rng.normal(size=n)
            dirs.append(d / np.linalg.norm(d))
        for d in dirs[: max(plan.states_per_level, 2 * n)]:
            for j in range(plan.signals_per_state):
                xs.append(d * s)
                us.append(_draw_signal(rng, mode, m, N, s, j))
    if zero_cloud and mode == "bounded":
        for s in grid:
            for j in range(max(plan.signals_per_state, 3) * 2):
                xs.append(np.zeros(n))
                us.append(_draw_signal(rng, mode, m, N, s, j, exact=True))
    xs.append(np.zeros(n))
    us.append(np.zeros((N, m)))
    return np.array(xs), np.stack(us, axis=1), mode


def _draw_signal(rng, mode, m, N, level, j, exact=False):
    if mode == "zero":
        return np.zeros((N, m))
    if mode == "unit_ball":
        bound = 1.0
    elif exact:
        bound = level
    else:
        # bounded inputs: the zero signal plus random sup-norms up to the
        # level, so large states also meet small inputs
        if j == 0:
            return np.zeros((N, m))
        bound = level * rng.uniform(0.0, 1.0)
        j -= 1
    if j == 0:
        return np.full((N, m), bound / math.sqrt(m))
    if j == 1:
        return np.full((N, m), -bound / math.sqrt(m))
    v = rng.uniform(-1.0, 1.0, (N, m))
    nv = np.linalg.norm(v, axis=1)
    v = v / max(nv.max(), 1e-300) * bound  # sup norm exactly ``bound``
    return v


def fit_overshoot(sys: ControlSystem, notion: str, plan: SamplePlan | None = None) -> FitResult:
    """Tabulated envelopes of trajectory clouds for ``notion``.

    Max-type envelopes are taken over all samples whose key (``|xi|``,
    ``|h(xi)|``, ``||u||`` or ``max(|xi|, ||u||)``) is at most the grid
    level, made monotone and rectified with a ``1e-6 s`` term.  Gains for
    IOS-type notions come from the ``xi = 0`` cloud and the KL part from
    the residual ``max(|y(t)| - gamma(||u||), 0)`` (sum form).
    """
    plan = plan or SamplePlan()
    if notion not in NOTIONS:
        raise SpecError(f"unknown notion {notion!r}")
    uniform = notion in UNIFORM
    sim_sys = sys
    if notion == "ROS":
        if plan.lam is None:
            raise SpecError("fitting ROS needs plan.lam")
        sim_sys = close_loop_robust(sys, plan.lam)
    xs, vals, mode = _plan_samples(sim_sys, plan, uniform, notion in ("IOS", "SIOS", "SIIOS"))
    bp = np.linspace(0.0, plan.horizon, plan.segments + 1)
    t_eval = np.linspace(0.0, plan.horizon, plan.t_points)
    parts = parallel.chunks(len(xs))

    def sim(sl):
        return simulate_batch(
            sim_sys, xs[sl], horizon=plan.horizon, breakpoints=bp, values=vals[:, sl], rtol=plan.rtol,
            atol=plan.atol, t_eval=t_eval, keep_steps=False,
        )

    runs = parallel.map_ordered(sim, parts)
    status = [s for r in runs for s in r.status]
    if any(s != ode.COMPLETED for s in status):
        k = next(i for i, s in enumerate(status) if s != ode.COMPLETED)
        return FitResult(notion, False, {}, f"{status[k]} during sampling from xi={xs[k].tolist()}", samples=len(xs))
    # every chunk shares the same output grid because keep_steps is off
    t = runs[0].t
    y = np.concatenate([np.linalg.norm(r.y, axis=2) for r in runs], axis=1).T  # (B, K)
    xn = np.concatenate([np.linalg.norm(r.x, axis=2) for r in runs], axis=1).T
    sx = np.linalg.norm(xs, axis=1)
    sh = y[:, 0]
    su = np.linalg.norm(vals, axis=2).max(axis=0)
    grid = plan.grid()
    funcs: dict = {}
    decay = None

    def kl_fit(keys, resid, label):
        nonlocal decay
        env = envelope_kl(keys, resid, grid)
        head = env[:, 0]
        tail = env[:, -1]
        ratio = np.where(head > 1e-12, tail / np.maximum(head, 1e-300), 0.0)
        decay = float(ratio.max()) if len(ratio) else 0.0
        return env, decay

    zero = sx == 0
    if notion == "UBIBS":
        env = envelope_1d(np.maximum(sx, su), xn.max(axis=1), grid)
        assert np.all(np.diff(env) >= 0)
        funcs["sigma"] = _as_k(grid, env, "sigma")
        spec = PropertySpec("UBIBS", sigma=funcs["sigma"], slack=1.1)
    elif notion == "OL-uniform":
        env = envelope_1d(sh, y.max(axis=1), grid)
        funcs["sigma"] = _as_k(grid, env, "sigma")
        spec = PropertySpec("OL-uniform", sigma=funcs["sigma"], slack=1.1)
    elif notion in ("UOS", "ROS", "SIIOS-uniform"):
        keys = sh if notion == "SIIOS-uniform" else sx
        env, decay = kl_fit(keys, y, "beta")
        if decay > plan.decay_tol:
            return FitResult(notion, False, {}, f"no decay within horizon (tail/head ratio {decay:.3g})", samples=len(xs), decay_ratio=decay)
        funcs["beta"] = _as_kl(grid, t, env, "beta")
        spec = PropertySpec(notion, beta=funcs["beta"], lam=plan.lam if notion == "ROS" else None, slack=1.1)
    else:
        gam_env = envelope_1d(su[zero], y[zero].max(axis=1), grid)
        gamma = _as_k(grid, gam_env, "gamma")
        funcs["gamma"] = gamma
        resid = y - gamma(su)[:, None]
        keys = sh if notion == "SIIOS" else sx
        env, decay = kl_fit(keys, resid, "beta")
        if decay > plan.decay_tol:
            return FitResult(notion, False, funcs, f"no decay within horizon (tail/head ratio {decay:.3g})", samples=len(xs), decay_ratio=decay)
        funcs["beta"] = _as_kl(grid, t, env, "beta")
        if notion == "SIOS":
            s1 = envelope_1d(sh, (y - gamma(su)[:, None]).max(axis=1), grid)
            funcs["sigma1"] = _as_k(grid, s1, "sigma1")
            funcs["sigma2"] = gamma
        spec = PropertySpec(
            notion, beta=funcs["beta"], gamma=gamma, sigma1=funcs.get("sigma1"), sigma2=funcs.get("sigma2"),
            mode="sum", slack=1.1,
        )
    return FitResult(notion, True, funcs, "", spec=spec, samples=len(xs), decay_ratio=decay)


# --------------------------------------------------------------------------
# Implication audit
# --------------------------------------------------------------------------


def output_gain_envelope(sys: ControlSystem, grid, samples: int = 4000, seed: int = 0) -> ScalarMonotone:
    """Class K-infinity ``a`` with ``|h(xi)| <= a(|xi|)`` on sampled states.

    Table values are shifted one grid cell up and scaled by 1.01 so that
    states between grid radii are covered too.
    """
    rng = np.random.default_rng(seed)
    grid = np.asarray(grid, float)
    top = grid[-1]
    d = rng.normal(size=(samples, sys.n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    eye = np.concatenate([np.eye(sys.n), -np.eye(sys.n)])
    d = np.concatenate([eye, d])
    pts = (d[:, None, :] * grid[None, 1:, None]).reshape(-1, sys.n)
    inner = d * rng.uniform(0, top, (len(d), 1))
    pts = np.concatenate([pts, inner])
    env = envelope_1d(np.linalg.norm(pts, axis=1), sys.output_norm(pts), grid)
    up = np.concatenate([env[1:], env[-1:]])
    up[0] = 0.0
    return ScalarMonotone.from_table(grid, np.maximum.accumulate(up * 1.01) + FIT_EPS * grid, KINF, label="a_h")


@dataclass
class AuditReport:
    system: str
    rows: list[dict]
    consistent: bool
    problems: list[str]

    def verdict(self, notion: str) -> str | None:
        for r in self.rows:
            if r["notion"] == notion:
                return r["verdict"]
        return None

    def to_dict(self) -> dict:
        return asdict(self)


def implication_audit(
    sys: ControlSystem,
    specs: dict | None = None,
    budget: SearchBudget | None = None,
    plan: SamplePlan | None = None,
) -> AuditReport:
    """Falsify SIIOS, IOS and ROS at one budget and check the implications.

    Missing specs are fitted.  A SIIOS pass must come with IOS and ROS passes;
    anything else points at the tooling or at an under-budgeted search.
    """
    from .converse import small_gain_lambda, tabulate_gain

    specs = dict(specs or {})
    budget = budget or SearchBudget()
    plan = plan or SamplePlan(s_max=float(np.max(np.abs(budget.box(sys.n)))), horizon=budget.horizon)
    indep = SearchBudget(**{**budget.to_dict(), "seed": budget.seed + 1})
    rows, problems = [], []

    def record(notion, spec, source, reason=""):
        if spec is None:
            rows.append({"notion": notion, "verdict": UNFIT, "source": source, "reason": reason})
            return UNFIT
        rep = falsify(spec, sys, indep)
        rows.append(
            {
                "notion": notion,
                "verdict": rep.verdict,
                "source": source,
                "simulations": rep.simulations,
                "min_normalized_margin": rep.min_normalized_margin,
                "witness": rep.witness,
            }
        )
        return rep.verdict

    # SIIOS
    if "SIIOS" in specs:
        v_siios = record("SIIOS", specs["SIIOS"], "given")
    else:
        fit = fit_overshoot(sys, "SIIOS", plan)
        v_siios = record("SIIOS", fit.spec, "fitted", fit.reason)
    siios_spec = specs.get("SIIOS") or (fit.spec if "SIIOS" not in specs else None)

    # IOS: from SIIOS through |h(xi)| <= a_h(|xi|) when available
    if "IOS" in specs:
        v_ios = record("IOS", specs["IOS"], "given")
    elif v_siios == NO_VIOLATION and siios_spec is not None:
        a_h = output_gain_envelope(sys, plan.grid(), seed=plan.seed)
        b = siios_spec.beta
        beta = KLFunction.from_callable(lambda s, t: b(a_h(s), t), label="beta(a_h(s), t)")
        ios = PropertySpec("IOS", beta=beta, gamma=siios_spec.gamma, mode=siios_spec.mode, slack=siios_spec.slack)
        v_ios = record("IOS", ios, "derived from SIIOS")
    else:
        fit = fit_overshoot(sys, "IOS", plan)
        v_ios = record("IOS", fit.spec, "fitted", fit.reason)

    # ROS with the small-gain lambda from an output-Lagrange fit
    if "ROS" in specs:
        v_ros = record("ROS", specs["ROS"], "given")
    else:
        ol = fit_overshoot(sys, "SIOS", plan)
        if not ol.ok:
            v_ros = record("ROS", None, "fitted", f"no output-Lagrange fit: {ol.reason}")
        else:
            lam = tabulate_gain(small_gain_lambda(ol.functions["sigma1"], ol.functions["sigma2"], rectify=True))
            ros_fit = fit_overshoot(sys, "ROS", SamplePlan(**{**plan.__dict__, "lam": lam}))
            v_ros = record("ROS", ros_fit.spec, "fitted", ros_fit.reason)

    if v_siios == NO_VIOLATION:
        for notion, v in (("IOS", v_ios), ("ROS", v_ros)):
            if v != NO_VIOLATION:
                problems.append(f"SIIOS passed but {notion} verdict is {v}")
    return AuditReport(sys.name, rows, not problems, problems)
