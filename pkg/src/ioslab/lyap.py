"""Grid checks of Lyapunov-type certificates for output stability.

A certificate bundles ``V``, sandwich bounds ``alpha1``/``alpha2``, a trigger
gain ``chi`` and a decay term.  Checks never prove anything; they report the
worst margin on the grid together with a reproducible witness.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import ode
from .comparison import (
    PD,
    ClassError,
    DecayMargin,
    ScalarMonotone,
    invert,
    ode_comparison_bound,
)
from .expr import Expr, NotDifferentiableError, compile_exprs, differentiate, parse
from .system import ControlSystem, InputSignal, simulate, simulate_batch, state_names

VARIANTS = ("IOS-LF", "SIOS-LF", "SIIOS-LF", "ROS-LF", "UOS-LF")
TRIGGERS = ("V-nonstrict", "V-strict", "output", "none")
DEFAULT_TRIGGER = {"IOS-LF": "V-nonstrict", "SIOS-LF": "V-nonstrict", "SIIOS-LF": "V-nonstrict",
                   "ROS-LF": "output", "UOS-LF": "none"}
SANDWICH_TOL = 1e-9
CHUNK_PAIRS = 400_000


class CertificateError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StateDecay:
    """Decay term given as a function of the state and ``V`` (``decay(x, v)``)."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    expr: Expr | None = None

    @classmethod
    def from_expr(cls, text: str | Expr, n: int):
        names = state_names(n) + ["V"]
        e = parse(text, names, aliases={"x": "x1"} if n == 1 else None) if isinstance(text, str) else text
        fc = compile_exprs([e], names)
        return cls(fn=lambda x, v: fc(*[x[:, k] for k in range(n)], v)[0], expr=e)

    def to_config(self) -> dict:
        return {"form": "expr", "class": "decay-state", "expr": str(self.expr)}


class RescaledDecay:
    """Decay after ``W = rho(V)``: ``rho'(rho^-1(w)) * alpha3(rho^-1(w), r)``."""

    bivariate = True

    def __init__(self, base, rho: ScalarMonotone):
        self.base = base
        self.rho = rho

    def __call__(self, w, r):
        v = invert(self.rho, np.asarray(w, float))
        return self.rho.derivative(v) * _decay_eval(self.base, v, r, None)


def _decay_eval(decay, v, r, x):
    if decay is None:
        return np.zeros_like(np.asarray(v, float))
    if isinstance(decay, StateDecay):
        return decay.fn(x, v)
    if getattr(decay, "bivariate", False) or isinstance(decay, DecayMargin):
        return decay(v, r)
    return decay(v)


@dataclass(eq=False)
class CandidateLyapunov:
    """Candidate function with everything needed to check it.

    ``grad`` is the symbolic gradient when available; otherwise central
    differences with relative step ``h_fd`` are used.  Points where
    ``|singular(x)| < singular_band`` are excluded from gradient checks.
    """

    V: Callable[[np.ndarray], np.ndarray]
    n: int
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    expr: Expr | None = None
    h_fd: float = 1e-6
    alpha1: ScalarMonotone | None = None
    alpha2: ScalarMonotone | None = None
    sandwich_mode: str | None = None
    chi: ScalarMonotone | None = None
    decay: object = None
    trigger: str | None = None
    singular: Callable[[np.ndarray], np.ndarray] | None = None
    singular_band: float = 1e-3
    label: str = ""
    singular_expr: Expr | None = None

    @property
    def gradient_mode(self) -> str:
        return "symbolic" if self.grad is not None else "finite-difference"

    @classmethod
    def from_expr(cls, text: str | Expr, n: int, gradient: str = "auto", singular: str | None = None, **kw):
        names = state_names(n)
        aliases = {"x": "x1"} if n == 1 else None
        e = parse(text, names, aliases) if isinstance(text, str) else text
        fc = compile_exprs([e], names)
        V = lambda x: fc(*[x[:, k] for k in range(n)])[0]  # noqa: E731
        grad = None
        if gradient in ("auto", "symbolic"):
            try:
                ge = [differentiate(e, v) for v in names]
                gc = compile_exprs(ge, names)
                grad = lambda x: np.moveaxis(gc(*[x[:, k] for k in range(n)]), 0, -1)  # noqa: E731
            except NotDifferentiableError:
                if gradient == "symbolic":
                    raise
        sing = None
        sexpr = None
        if singular:
            sexpr = parse(singular, names, aliases)
            sc = compile_exprs([sexpr], names)
            sing = lambda x: sc(*[x[:, k] for k in range(n)])[0]  # noqa: E731
        return cls(V=V, n=n, grad=grad, expr=e, singular=sing, singular_expr=sexpr, label=str(e), **kw)

    def value(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        return np.asarray(self.V(x), float) * np.ones(len(x))

    def gradient(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if self.grad is not None:
            return np.asarray(self.grad(x), float) * np.ones_like(x)
        g = np.empty_like(x)
        for k in range(self.n):
            h = self.h_fd * np.maximum(np.abs(x[:, k]), 1e-3)
            xp, xm = x.copy(), x.copy()
            xp[:, k] += h
            xm[:, k] -= h
            g[:, k] = (self.value(xp) - self.value(xm)) / (2 * h)
        return g

    def singular_mask(self, x) -> np.ndarray:
        if self.singular is None:
            return np.zeros(len(x), bool)
        return np.abs(np.asarray(self.singular(x), float) * np.ones(len(x))) < self.singular_band

    def decay_value(self, v, r, x=None):
        return _decay_eval(self.decay, v, r, x)

    def describe(self) -> dict:
        def cfg(f):
            if f is None:
                return None
            try:
                return f.to_config()
            except Exception:
                return {"form": "opaque", "label": getattr(f, "label", type(f).__name__)}

        return {
            "V": str(self.expr) if self.expr is not None else self.label,
            "gradient": self.gradient_mode,
            "alpha1": cfg(self.alpha1),
            "alpha2": cfg(self.alpha2),
            "sandwich_mode": self.sandwich_mode,
            "chi": cfg(self.chi),
            "decay": cfg(self.decay),
            "trigger": self.trigger,
            "singular": str(self.singular_expr) if self.singular_expr is not None else None,
        }


@dataclass
class CertificateReport:
    variant: str
    trigger: str
    verdicts: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)
    witnesses: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v in ("pass", "vacuous", "skipped") for v in self.verdicts.values())

    def merge(self, other: "CertificateReport") -> "CertificateReport":
        for k in ("verdicts", "margins", "witnesses", "grid", "counts"):
            getattr(self, k).update(getattr(other, k))
        self.warnings += other.warnings
        self.notes += other.notes
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _axes(box, grid, dim):
    """Per-axis sample arrays from a box (radius or (lo, hi) pairs) and a
    resolution (int or per-axis ints)."""
    if np.ndim(box) == 0:
        box = [(-float(box), float(box))] * dim
    box = [tuple(map(float, b)) for b in box]
    if len(box) != dim:
        raise CertificateError(f"box has {len(box)} axes, expected {dim}")
    res = [int(grid)] * dim if np.ndim(grid) == 0 else [int(g) for g in grid]
    if any(r < 2 for r in res):
        raise CertificateError("grid resolution must be at least 2 per axis")
    return [np.linspace(lo, hi, r) for (lo, hi), r in zip(box, res)], box, res


def _tensor(axes):
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(axes))


def state_grid(box, grid, n, exclude=None):
    """Tensor grid; ``exclude`` is a list of (axis, lo, hi) open bands to drop."""
    axes, box, res = _axes(box, grid, n)
    if exclude:
        for k, lo, hi in exclude:
            a = axes[k]
            axes[k] = a[(a <= lo) | (a >= hi)]
    return _tensor(axes), {"box": box, "resolution": res}


def check_sandwich(cand: CandidateLyapunov, sys: ControlSystem, box, grid, exclude=None) -> CertificateReport:
    """``alpha1(|h|) <= V`` and ``V <= alpha2(|x|)`` (or ``alpha2(|h|)``)."""
    X, gdesc = state_grid(box, grid, sys.n, exclude)
    rep = CertificateReport(variant="", trigger="", grid={"sandwich": gdesc})
    V = cand.value(X)
    hn = sys.output_norm(X)
    xn = np.linalg.norm(X, axis=1)
    if cand.alpha1 is not None:
        m = V - cand.alpha1(hn)
        _verdict(rep, "sandwich_lower", m, X, {"V": V, "bound": cand.alpha1(hn)}, SANDWICH_TOL)
    else:
        rep.verdicts["sandwich_lower"] = "skipped"
    if cand.alpha2 is not None:
        if cand.sandwich_mode not in ("state", "output"):
            raise CertificateError("sandwich_mode must be 'state' or 'output' when alpha2 is given")
        arg = xn if cand.sandwich_mode == "state" else hn
        m = cand.alpha2(arg) - V
        _verdict(rep, "sandwich_upper", m, X, {"V": V, "bound": cand.alpha2(arg)}, SANDWICH_TOL)
    else:
        rep.verdicts["sandwich_upper"] = "skipped"
    if np.any(V < -SANDWICH_TOL):
        k = int(np.argmin(V))
        rep.warnings.append(f"V is negative at x={X[k].tolist()} (V={V[k]!r})")
    return rep


def _verdict(rep, name, margin, X, extra, tol):
    k = int(np.argmin(margin))
    rep.margins[name] = float(margin[k])
    rep.counts[name] = int(len(margin))
    if margin[k] < -tol:
        rep.verdicts[name] = "fail"
        rep.witnesses[name] = {"x": X[k].tolist(), "margin": float(margin[k]), **{a: float(b[k]) for a, b in extra.items()}}
    else:
        rep.verdicts[name] = "pass"


def _trigger_mask(cand, trigger, V, hn, mun):
    if trigger == "none":
        return np.ones_like(V, bool)
    level = cand.chi(mun)
    if trigger == "V-nonstrict":
        return V >= level
    if trigger == "V-strict":
        return V > level
    return hn >= level


def check_dissipation(
    cand: CandidateLyapunov,
    sys: ControlSystem,
    variant: str,
    box,
    input_box,
    grid,
    input_grid=None,
    trigger: str | None = None,
    exclude=None,
    atol: float = 1e-9,
    rtol: float = 0.0,
) -> CertificateReport:
    """Check ``DV(x) f(x, mu) <= -decay + atol + rtol * |decay|`` wherever
    the trigger holds on the state grid times the input grid.

    ``decay`` is ``alpha3(V, |x|)`` for IOS/ROS/UOS variants, ``alpha3(V)``
    for SIIOS and 0 for SIOS.  UOS-LF has no trigger and only uses inputs in
    the closed unit ball.
    """
    if variant not in VARIANTS:
        raise CertificateError(f"unknown variant {variant!r}")
    trigger = trigger or cand.trigger or DEFAULT_TRIGGER[variant]
    if trigger not in TRIGGERS:
        raise CertificateError(f"unknown trigger form {trigger!r}")
    if trigger != "none" and cand.chi is None:
        raise CertificateError(f"{variant} with trigger {trigger} needs chi")
    X, gdesc = state_grid(box, grid, sys.n, exclude)
    uaxes, ubox, ures = _axes(input_box, grid if input_grid is None else input_grid, sys.m)
    U = _tensor(uaxes)
    if variant == "UOS-LF":
        U = U[np.linalg.norm(U, axis=1) <= 1.0 + 1e-12]
    rep = CertificateReport(variant=variant, trigger=trigger)
    rep.grid["dissipation"] = {**gdesc, "input_box": ubox, "input_resolution": ures}
    sing = cand.singular_mask(X)
    if sing.any():
        rep.notes.append(f"{int(sing.sum())} grid states inside the singular band excluded")
    X = X[~sing]
    V = cand.value(X)
    G = cand.gradient(X)
    hn = sys.output_norm(X)
    xn = np.linalg.norm(X, axis=1)
    mun_all = np.linalg.norm(U, axis=1)
    if variant == "SIOS-LF":
        dec = np.zeros_like(V)
    else:
        dec = np.asarray(cand.decay_value(V, xn, X), float) * np.ones_like(V)
    worst = (-np.inf, None)
    n_trig = 0
    n_viol = 0
    per = max(1, CHUNK_PAIRS // max(1, len(U)))
    for start in range(0, len(X), per):
        sl = slice(start, start + per)
        xs = X[sl]
        B = len(xs)
        XX = np.repeat(xs, len(U), axis=0)
        UU = np.tile(U, (B, 1))
        trig = _trigger_mask(cand, trigger, np.repeat(V[sl], len(U)), np.repeat(hn[sl], len(U)), np.tile(mun_all, B))
        if not trig.any():
            continue
        f = sys.rhs(XX[trig], UU[trig])
        dvf = np.einsum("ij,ij->i", np.repeat(G[sl], len(U), axis=0)[trig], f)
        d = np.repeat(dec[sl], len(U))[trig]
        excess = dvf + d - (atol + rtol * np.abs(d))
        n_trig += int(trig.sum())
        n_viol += int((excess > 0).sum())
        k = int(np.argmax(excess))
        if excess[k] > worst[0]:
            idx = np.flatnonzero(trig)[k]
            worst = (
                float(excess[k]),
                {
                    "x": XX[idx].tolist(),
                    "mu": UU[idx].tolist(),
                    "V": float(np.repeat(V[sl], len(U))[idx]),
                    "dvf": float(dvf[k]),
                    "decay": float(d[k]),
                    "excess": float(excess[k]),
                },
            )
    rep.counts["dissipation_points"] = int(len(X) * len(U))
    rep.counts["dissipation_triggered"] = n_trig
    rep.counts["dissipation_violations"] = n_viol
    if n_trig == 0:
        rep.verdicts["dissipation"] = "vacuous"
        rep.warnings.append("trigger never active on the grid: dissipation check is vacuous")
        return rep
    rep.margins["dissipation"] = -worst[0]
    if worst[0] > 0:
        rep.verdicts["dissipation"] = "fail"
        rep.witnesses["dissipation"] = worst[1]
    else:
        rep.verdicts["dissipation"] = "pass"
    if trigger in ("V-nonstrict", "V-strict") and variant != "UOS-LF":
        try:
            need = float(invert(cand.chi, float(V.max()))) if V.max() > 0 else 0.0
            have = float(np.min([max(abs(lo), abs(hi)) for lo, hi in ubox]))
            if need > have:
                rep.notes.append(
                    f"chi coverage: inputs up to |mu| = {need:.6g} can trigger, the input box only reaches {have:.6g}"
                )
        except Exception:
            pass
    return rep


def dissipation_margin(cand: CandidateLyapunov, sys: ControlSystem, x, mu, variant: str = "IOS-LF") -> np.ndarray:
    """Pointwise ``-decay - DV f`` (positive = satisfied) at ``(x, mu)``."""
    x = np.atleast_2d(np.asarray(x, float))
    mu = np.atleast_2d(np.asarray(mu, float))
    V = cand.value(x)
    dvf = np.einsum("ij,ij->i", cand.gradient(x), sys.rhs(x, mu))
    if variant == "SIOS-LF":
        dec = np.zeros_like(V)
    else:
        dec = np.asarray(cand.decay_value(V, np.linalg.norm(x, axis=1), x), float) * np.ones_like(V)
    return -dec - dvf


def rescale_certificate(cand: CandidateLyapunov, rho: ScalarMonotone) -> CandidateLyapunov:
    """``W = rho(V)`` with transformed bounds, trigger and decay."""
    problems = rho.check()
    if rho.cls != "Kinf" or problems:
        raise ClassError("rho must be class Kinf: " + ("; ".join(problems) or f"tagged {rho.cls}"))
    if rho.derivative is None:
        raise CertificateError("rho must be differentiable (derivative not available)")
    V0, G0 = cand.V, cand.gradient

    def V(x):
        return rho(V0(x))

    def grad(x):
        return rho.derivative(cand.value(x))[:, None] * G0(x)

    def comp(f):
        if f is None:
            return None
        return ScalarMonotone.from_callable(lambda s: rho(f(s)), "Kinf" if f.cls == "Kinf" else "K",
                                            label=f"rho o {f.label}")

    chi = cand.chi
    if chi is not None and (cand.trigger or "V-nonstrict").startswith("V"):
        chi = comp(chi)
    decay = None if cand.decay is None else RescaledDecay(cand.decay, rho)
    if isinstance(cand.decay, StateDecay):
        base = cand.decay
        decay = StateDecay(fn=lambda x, w: rho.derivative(invert(rho, w)) * base.fn(x, invert(rho, w)))
    return replace(
        cand,
        V=V,
        grad=grad,
        expr=None,
        alpha1=comp(cand.alpha1),
        alpha2=comp(cand.alpha2),
        chi=chi,
        decay=decay,
        label=f"{rho.label}({cand.label})",
    )


def dini_decrease_along_flow(cand: CandidateLyapunov, sys: ControlSystem, xi, mu, dt_list=(1e-2, 1e-3, 1e-4)):
    """Forward difference quotients ``(V(x(dt)) - V(xi)) / dt`` under constant ``mu``."""
    xi = np.asarray(xi, float)
    if cand.singular_mask(xi[None, :])[0]:
        raise CertificateError(f"xi={xi.tolist()} lies in the singular band")
    dts = np.sort(np.asarray(dt_list, float))
    sig = InputSignal.constant(np.atleast_1d(np.asarray(mu, float)), dts[-1])
    traj = simulate(sys, xi, sig, dts[-1], rtol=1e-12, atol=1e-14, t_eval=dts, keep_steps=False)
    if traj.status != ode.COMPLETED:
        raise CertificateError(f"trajectory ended with {traj.status}: {traj.message}")
    v0 = cand.value(xi[None, :])[0]
    idx = [int(np.argmin(np.abs(traj.t - d))) for d in dt_list]
    return np.array([(cand.value(traj.x[i][None, :])[0] - v0) / dt for i, dt in zip(idx, dt_list)])


def dini_batch(cand: CandidateLyapunov, sys: ControlSystem, X, MU, dt: float = 1e-3) -> np.ndarray:
    """Forward quotients at one ``dt`` for many ``(xi, mu)`` pairs."""
    X = np.atleast_2d(np.asarray(X, float))
    MU = np.atleast_2d(np.asarray(MU, float))
    bt = simulate_batch(sys, X, horizon=dt, breakpoints=np.array([0.0, dt]), values=MU[None, :, :],
                        rtol=1e-12, atol=1e-14, keep_steps=False)
    return (cand.value(bt.x[-1]) - cand.value(X)) / dt


def _ball_samples(n: int, R: float, per_axis: int = 21, cap: int = 4000) -> np.ndarray:
    axes = np.linspace(-R, R, per_axis)
    if per_axis**n <= cap:
        pts = _tensor([axes] * n)
    else:
        pts = np.random.default_rng(0).uniform(-R, R, (cap, n))
        pts = np.concatenate([pts, R * np.eye(n), -R * np.eye(n)])
    return pts[np.linalg.norm(pts, axis=1) <= R * (1 + 1e-12)]


@dataclass
class Prediction:
    t: np.ndarray
    envelope: np.ndarray
    output: np.ndarray
    ok: bool
    witness: dict | None
    level: float
    radius: float

    def to_dict(self) -> dict:
        return {"ok": self.ok, "witness": self.witness, "level": self.level, "radius": self.radius,
                "max_ratio": float(np.max(self.output / np.maximum(self.envelope, 1e-300), initial=0.0))}


def predict_bound(cand: CandidateLyapunov, sys: ControlSystem, xi, u: InputSignal, horizon=None,
                  c: float = 1.0, factor: float = 1.05, rtol: float = 1e-9) -> Prediction:
    """Envelope ``alpha1^-1(max(beta_kappa(V(xi), c t), level))`` versus simulation.

    ``kappa(v) = alpha3(v, R)`` with ``R`` the largest state norm along the
    simulated trajectory.  The level is ``chi(||u||)`` for V-triggers and
    ``alpha2(chi(||u||))`` for the output trigger.
    """
    if cand.alpha1 is None or cand.decay is None:
        raise CertificateError("prediction needs alpha1 and a nonzero decay")
    xi = np.asarray(xi, float)
    horizon = u.horizon if horizon is None else horizon
    traj = simulate(sys, xi, u, horizon, rtol=rtol, atol=rtol * 1e-3, t_eval=np.linspace(0, horizon, 401))
    R = float(traj.state_norm().max())
    su = u.restrict(horizon).sup_norm()
    trig = cand.trigger or "V-nonstrict"
    if su == 0.0:
        level = 0.0
    elif trig == "output":
        if cand.alpha2 is None or cand.sandwich_mode != "output":
            raise CertificateError("output-trigger prediction needs an output-mode alpha2")
        level = float(cand.alpha2(cand.chi(su)))
    else:
        level = float(cand.chi(su))
    V0 = float(cand.value(xi[None, :])[0])
    yn = traj.output_norm()
    if V0 == 0.0:
        env = np.full_like(traj.t, float(invert(cand.alpha1, level)) if level > 0 else 0.0)
    else:
        if isinstance(cand.decay, StateDecay):
            # state-based decay: worst case over sampled states in the R-ball
            pts = _ball_samples(cand.n, R)

            def kfn(v):
                v = np.asarray(v, float)
                vals = cand.decay.fn(np.repeat(pts, v.size, axis=0), np.tile(v.reshape(-1), len(pts)))
                return vals.reshape(len(pts), -1).min(axis=0).reshape(v.shape)
        else:
            def kfn(v):
                v = np.asarray(v, float)
                return np.asarray(cand.decay_value(v, np.full(np.shape(v), R), None), float)

        kappa = ScalarMonotone.from_callable(kfn, PD, label="kappa")
        beta = ode_comparison_bound(kappa, s_top=max(10.0, 10 * V0))
        vb = np.maximum(beta(V0, c * traj.t), level)
        env = invert(cand.alpha1, vb)
    bad = yn > factor * env + 1e-12
    witness = None
    if bad.any():
        k = int(np.argmax(yn - factor * env))
        witness = {"t": float(traj.t[k]), "output": float(yn[k]), "envelope": float(env[k])}
    return Prediction(traj.t, np.asarray(env, float), yn, not bad.any(), witness, level, R)
