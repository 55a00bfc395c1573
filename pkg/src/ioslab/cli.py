"""Command-line front end: ``ioslab run | validate | registry``.

Exit codes: 0 everything passed, 1 the tool worked and found a violation or
failed check, 2 configuration error, 3 runtime or domain error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import os
import sys as _sys
import time
import traceback

import numpy as np

from . import __version__, parallel
from . import config as C
from .comparison import (
    ComparisonError,
    FactorizationError,
    TimeThresholds,
    build_decay_margin,
    compose,
    invert,
    kl_exponential_factorization,
    ode_comparison_bound,
    verify_factorization,
)
from .converse import ConverseError, WeightFunction, construct_converse, small_gain_lambda, tabulate_gain
from .expr import ExprError, compile_exprs, parse
from .lyap import (
    CandidateLyapunov,
    CertificateError,
    check_dissipation,
    check_sandwich,
    dissipation_margin,
    predict_bound,
    rescale_certificate,
)
from .props import (
    NO_VIOLATION,
    VIOLATED,
    falsify,
    fit_overshoot,
    implication_audit,
    replay_witness,
    SearchBudget,
)
from .system import InputSignal, builtin_registry, close_loop_robust, simulate

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class TaskResult:
    def __init__(self, body: dict, passed: bool, warnings=None, artifacts=None):
        self.body = body
        self.passed = passed
        self.warnings = list(warnings or [])
        self.artifacts = dict(artifacts or {})


def clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


# --------------------------------------------------------------------------
# Tasks
# --------------------------------------------------------------------------


def task_simulate(cfg, sys, seed, out):
    b = cfg["simulate"]
    horizon = float(b["horizon"])
    sig = C.build_signal(b.get("signal"), sys.m, horizon)
    rtol, atol = float(b.get("rtol", 1e-8)), float(b.get("atol", 1e-10))
    samples = int(b.get("samples", 201))
    te = np.linspace(0, horizon, samples)
    traj = simulate(sys, b["xi"], sig, horizon, rtol=rtol, atol=atol, t_eval=te)
    body = {
        "status": traj.status,
        "t_status": traj.t_status,
        "message": traj.message,
        "final_state": traj.x[-1].tolist(),
        "final_output": traj.y[-1].tolist(),
        "samples": len(traj.t),
        "stats": traj.stats,
        "sup_output": float(traj.output_norm().max()),
    }
    passed = traj.completed
    ref = b.get("reference")
    if ref:
        # endpoint error against closed-form state components in t
        exprs = [parse(e, ["t"]) for e in ref]
        fn = compile_exprs(exprs, ["t"])
        exact = np.asarray(fn(np.array(horizon)), float).reshape(-1)

        def err(rt):
            tr = simulate(sys, b["xi"], sig, horizon, rtol=rt, atol=rt * 1e-2, keep_steps=False, t_eval=[horizon])
            return float(np.abs(tr.x[-1] - exact).max())

        e1 = err(rtol)
        check = {"endpoint_error": e1, "tolerance": float(b.get("error_tol", 1e-6))}
        check["within_tolerance"] = e1 <= check["tolerance"]
        passed = passed and check["within_tolerance"]
        if b.get("halving_check"):
            e2 = err(rtol / 2)
            check["endpoint_error_half_rtol"] = e2
            check["error_ratio"] = e1 / e2 if e2 > 0 else "inf"
            check["ratio_required"] = float(b.get("ratio_required", 4.0))
            check["ratio_ok"] = e2 == 0 or e1 / e2 >= check["ratio_required"]
            passed = passed and check["ratio_ok"]
        body["reference_check"] = check
    arts = {}
    if out:
        traj.to_csv(os.path.join(out, "trajectory.csv"))
        arts["trajectory"] = "trajectory.csv"
    return TaskResult(body, passed, artifacts=arts)


def task_falsify(cfg, sys, seed, out):
    b = cfg["falsify"]
    spec = C.build_spec(b["spec"])
    budget = C.build_budget(b.get("budget"), seed)
    rep = falsify(spec, sys, budget)
    body = {"spec": spec.describe(), **rep.to_dict()}
    arts = {}
    if rep.verdict == VIOLATED:
        body["replay"] = replay_witness(spec, sys, rep.witness)
        if out:
            w = rep.witness
            sim_sys = close_loop_robust(sys, spec.lam) if spec.notion == "ROS" else sys
            sig = InputSignal.from_dict(w["signal"])
            tr = simulate(sim_sys, w["xi"], sig, w["horizon"], rtol=w["rtol"], atol=w["atol"],
                          t_eval=np.linspace(0, w["horizon"], w["samples"]))
            tr.to_csv(os.path.join(out, "witness.csv"))
            arts["witness"] = "witness.csv"
    return TaskResult(body, rep.verdict == NO_VIOLATION, artifacts=arts)


def _candidate(b, sys):
    cand = CandidateLyapunov.from_expr(
        b["V"], sys.n, b.get("gradient", "auto"), b.get("singular"),
        alpha1=C.build_function(b["alpha1"], "alpha1") if "alpha1" in b else None,
        alpha2=C.build_function(b["alpha2"], "alpha2") if "alpha2" in b else None,
        sandwich_mode=b.get("sandwich_mode"),
        chi=C.build_function(b["chi"], "chi") if "chi" in b else None,
        decay=C.build_decay(b.get("decay"), sys.n),
        trigger=b.get("trigger"),
    )
    if "singular_band" in b:
        cand.singular_band = float(b["singular_band"])
    if "h_fd" in b:
        cand.h_fd = float(b["h_fd"])
    if "rescale" in b:
        cand = rescale_certificate(cand, C.build_function(b["rescale"], "rescale"))
    return cand


def task_certificate(cfg, sys, seed, out):
    b = cfg["check-certificate"]
    cand = _candidate(b, sys)
    exclude = [tuple(e) for e in b.get("exclude", [])] or None
    grid = b["grid"]
    rep = None
    if "alpha1" in b or "alpha2" in b:
        rep = check_sandwich(cand, sys, b["box"], grid, exclude)
    d = check_dissipation(cand, sys, b["variant"], b["box"], b.get("input_box", b["box"]), grid,
                          b.get("input_grid"), b.get("trigger"), exclude,
                          float(b.get("atol", 1e-9)), float(b.get("rtol", 0.0)))
    if rep is None:
        rep = d
    else:
        rep.merge(d)
        rep.variant, rep.trigger = d.variant, d.trigger
    body = {"certificate": cand.describe(), "variant": rep.variant, "box": b["box"],
            "input_box": b.get("input_box", b["box"]), "grid": grid, **rep.to_dict()}
    probes = []
    for p in b.get("probes", []):
        x = np.asarray(p["x"], float)[None, :]
        mu = np.asarray(p.get("mu", [0.0] * sys.m), float)[None, :]
        grad = cand.gradient(x)
        dvf = float(np.einsum("ij,ij->i", grad, sys.rhs(x, mu))[0])
        probes.append({"x": x[0].tolist(), "mu": mu[0].tolist(), "V": float(cand.value(x)[0]), "dvf": dvf,
                       "margin": float(dissipation_margin(cand, sys, x, mu, b["variant"])[0])})
    if probes:
        body["probes"] = probes
    passed = rep.passed
    if "predict" in b:
        p = b["predict"]
        sig = C.build_signal(p.get("signal"), sys.m, float(p["horizon"]))
        pr = predict_bound(cand, sys, p["xi"], sig, float(p["horizon"]))
        body["prediction"] = pr.to_dict()
        passed = passed and pr.ok
    return TaskResult(body, passed, warnings=rep.warnings)


def task_fit(cfg, sys, seed, out):
    b = cfg["fit"]
    plan = C.build_plan(b.get("plan"), seed)
    budget = C.build_budget(b.get("budget"), seed)
    fits, passed, warnings = [], True, []
    for notion in b.get("notions", []):
        fr = fit_overshoot(sys, notion, plan)
        row = fr.to_dict()
        if fr.ok and b.get("check", True):
            rep = falsify(fr.spec, sys, SearchBudget(**{**budget.to_dict(), "seed": budget.seed + 1}))
            row["independent_check"] = {"verdict": rep.verdict, "simulations": rep.simulations,
                                        "min_normalized_margin": rep.min_normalized_margin}
            passed = passed and rep.verdict == NO_VIOLATION
        elif not fr.ok:
            warnings.append(f"{notion}: {fr.reason}")
        fits.append(row)
    body = {"plan": {k: v for k, v in plan.__dict__.items() if k != "lam"}, "fits": fits}
    if b.get("audit"):
        specs = {k: C.build_spec(v) for k, v in b.get("specs", {}).items()}
        a = implication_audit(sys, specs, budget, plan)
        body["audit"] = a.to_dict()
        passed = passed and a.consistent
    return TaskResult(body, passed, warnings=warnings)


def task_converse(cfg, sys, seed, out):
    b = cfg["construct-converse"]
    budget = C.build_converse_budget(b.get("budget"), seed)
    lam = C.build_function(b["lam"], "lam") if "lam" in b else None
    if lam is not None and lam.expr is None and lam.table is None:
        lam = tabulate_gain(lam)
    res = construct_converse(
        sys, lam=lam, radius=float(b.get("radius", 3.0)), points=int(b.get("points", 11)), budget=budget,
        weight=WeightFunction(**b.get("weight", {})),
        beta=C.build_kl(b["beta"]) if "beta" in b else None,
        delta=float(b.get("delta", 1e-3)), holdout_points=int(b.get("holdout_points", 200)),
        fit_plan=C.build_plan(b.get("plan"), seed) if "plan" in b else None,
    )
    arts = {}
    if out and res.bundle is not None:
        res.bundle.save(os.path.join(out, "bundle.json"))
        arts["bundle"] = "bundle.json"
    return TaskResult(res.to_dict(), res.ok, warnings=[] if res.ok else [res.reason], artifacts=arts)


def _grid(spec):
    if isinstance(spec, list):
        return np.asarray(spec, float)
    lo, hi, pts = float(spec["lo"]), float(spec["hi"]), int(spec["points"])
    if spec.get("scale", "lin") == "log":
        return np.geomspace(lo, hi, pts)
    return np.linspace(lo, hi, pts)


def _ref(expr, names, *args):
    fn = compile_exprs([parse(expr, names)], names)
    return np.asarray(fn(*args), float)[0]


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300), initial=0.0))


def _kl_op(op, sys):
    name = op["op"]
    tol = float(op.get("tol", 1e-9))
    if name == "invert":
        f = C.build_function(op["f"], "f")
        y = np.atleast_1d(np.asarray(op["y"], float))
        s = invert(f, y, float(op.get("inv_tol", 1e-12)))
        out = {"s": s.tolist(), "residual": float(np.max(np.abs(f(s) - y)))}
        if "expected" in op:
            out["error"] = float(np.max(np.abs(s - np.asarray(op["expected"], float))))
            out["ok"] = out["error"] <= tol
        return out
    if name == "compose":
        f, g = C.build_function(op["f"], "f"), C.build_function(op["g"], "g")
        h = compose(f, g)
        s = _grid(op["s"])
        out = {"class": h.cls, "values": h(s).tolist()}
        if "reference" in op:
            out["error"] = float(np.max(np.abs(h(s) - _ref(op["reference"], ["s"], s))))
            out["ok"] = out["error"] <= tol
        return out
    if name == "time_threshold":
        beta = C.build_kl(op["beta"])
        tt = TimeThresholds(beta)
        vals = [tt(float(r), float(s)) for r, s in op["queries"]]
        out = {"thresholds": vals}
        if "expected" in op:
            out["error"] = float(np.max(np.abs(np.asarray(vals) - np.asarray(op["expected"], float))))
            out["ok"] = out["error"] <= tol
        return out
    if name == "factorize":
        beta = C.build_kl(op["beta"])
        sg, tg = _grid(op["s_grid"]), _grid(op["t_grid"])
        try:
            k1, k2 = kl_exponential_factorization(beta, sg, tg)
        except FactorizationError as exc:
            return {"ok": False, "error": str(exc), "worst": exc.worst}
        ratio, worst = verify_factorization(beta, k1, k2, sg, tg)
        fine = int(op.get("holdout_factor", 10))
        sf = np.geomspace(sg[0], sg[-1], len(sg) * fine) if op["s_grid"].get("scale") == "log" else \
            np.linspace(sg[0], sg[-1], len(sg) * fine)
        tf = np.linspace(tg[0], tg[-1], len(tg) * fine)
        hr, hw = verify_factorization(beta, k1, k2, sf, tf)
        slack = float(op.get("slack", 1.05))
        return {"ok": ratio <= 1.0 and hr <= slack, "grid_ratio": ratio, "grid_worst": worst,
                "holdout_ratio": hr, "holdout_worst": hw, "slack": slack,
                "kappa1_at": {"s": sg[:: max(1, len(sg) // 8)].tolist(), "values": k1(sg[:: max(1, len(sg) // 8)]).tolist()}}
    if name == "comparison_bound":
        kappa = C.build_function(op["kappa"], "kappa")
        bk = ode_comparison_bound(kappa, s_top=float(op.get("s_top", 1e4)))
        s, t = np.meshgrid(_grid(op["s"]), _grid(op["t"]), indexing="ij")
        vals = bk(s, t)
        out = {"min": float(vals.min()), "max": float(vals.max())}
        if "reference" in op:
            out["max_rel_error"] = _rel(vals, _ref(op["reference"], ["s", "t"], s, t))
            out["ok"] = out["max_rel_error"] <= tol
        return out
    if name == "small_gain":
        lam = small_gain_lambda(C.build_function(op["sigma1"], "sigma1"), C.build_function(op["sigma2"], "sigma2"),
                                rectify=bool(op.get("rectify", False)))
        s = _grid(op["s"])
        out = {"values": lam(s).tolist()}
        if "reference" in op:
            out["error"] = float(np.max(np.abs(lam(s) - _ref(op["reference"], ["s"], s))))
            out["ok"] = out["error"] <= tol
        return out
    if name == "decay_margin":
        if sys is None:
            raise C.ConfigError(["decay_margin needs a system"])
        cand = CandidateLyapunov.from_expr(op["V"], sys.n)
        chi = C.build_function(op["chi"], "chi")

        def vdot(x, mu):
            return np.einsum("ij,ij->i", cand.gradient(x), sys.rhs(x, mu))

        dm = build_decay_margin(cand.value, vdot, chi, _grid(op["s_grid"]), _grid(op["r_grid"]),
                                int(op.get("sample_density", 101)), sys.n, sys.m, int(op.get("seed", 0)),
                                input_radius=op.get("input_radius"))
        out = {"info": dm.info, "problems": dm.check(), "margin": dm.to_config()}
        if "reference_lower" in op:
            S, R = np.meshgrid(dm.s_grid, dm.r_grid, indexing="ij")
            ref = _ref(op["reference_lower"], ["s", "r"], S, R)
            live = ~dm.vacuous & (S > 0)
            gap = dm.values - ref
            out["min_gap"] = float(gap[live].min()) if live.any() else 0.0
            out["ok"] = out["min_gap"] >= -1e-12 and not out["problems"]
        else:
            out["ok"] = not out["problems"]
        return out
    raise C.ConfigError([f"unknown kl-tools op {name!r}"])


def task_kl(cfg, sys, seed, out):
    results = []
    for op in cfg["kl-tools"]["operations"]:
        r = _kl_op(op, sys)
        results.append({"op": op["op"], **r})
    passed = all(r.get("ok", True) for r in results)
    return TaskResult({"operations": results}, passed)


TASK_RUNNERS = {
    "simulate": task_simulate,
    "falsify": task_falsify,
    "check-certificate": task_certificate,
    "fit": task_fit,
    "construct-converse": task_converse,
    "kl-tools": task_kl,
}


# --------------------------------------------------------------------------
# Entry points
# --------------------------------------------------------------------------


def execute(cfg: dict, out: str | None = None) -> tuple[int, dict]:
    """Validate and run ``cfg``; returns ``(exit_code, report)``."""
    started = time.time()
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    report = {
        "schema_version": 1,
        "tool": {"name": "ioslab", "version": __version__},
        "config_hash": C.config_hash(cfg),
        "task": cfg.get("task"),
        "seed": cfg.get("seed", 0),
    }
    problems = C.validate(cfg)
    if problems:
        report.update(status="config_error", exit_code=EXIT_CONFIG, problems=problems)
        return EXIT_CONFIG, _finish(report, started, stamp)
    sys = C.build_system(cfg["system"]) if "system" in cfg else None
    if sys is not None:
        report["system"] = sys.to_dict()
    if out:
        os.makedirs(out, exist_ok=True)
    try:
        res = TASK_RUNNERS[cfg["task"]](cfg, sys, cfg.get("seed", 0), out)
    except C.ConfigError as exc:
        report.update(status="config_error", exit_code=EXIT_CONFIG, problems=exc.problems)
        return EXIT_CONFIG, _finish(report, started, stamp)
    except (ArithmeticError, ExprError, ComparisonError, CertificateError, ConverseError, RuntimeError,
            ValueError, AssertionError) as exc:
        report.update(status="runtime_error", exit_code=EXIT_RUNTIME,
                      error={"type": type(exc).__name__, "message": str(exc)})
        return EXIT_RUNTIME, _finish(report, started, stamp)
    code = EXIT_OK if res.passed else EXIT_VIOLATION
    report.update(status="passed" if res.passed else "violations_found", exit_code=code,
                  result=res.body, warnings=res.warnings, artifacts=res.artifacts)
    return code, _finish(report, started, stamp)


def _finish(report, started, stamp):
    report["timestamp"] = {"utc": stamp, "wall_clock_s": round(time.time() - started, 3)}
    return clean(report)


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=False) + "\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ioslab", description="Output-stability laboratory")
    sub = ap.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="run a config")
    val = sub.add_parser("validate", help="validate a config without simulating")
    reg = sub.add_parser("registry", help="list built-in systems")
    for p in (run, val):
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
        p.add_argument("--seed", type=int)
    run.add_argument("--out", metavar="DIR")
    run.add_argument("--jobs", type=int)
    reg.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    if args.cmd == "registry":
        systems = {k: s.to_dict() for k, s in builtin_registry().items()}
        if args.json:
            print(json.dumps(systems, indent=2))
        else:
            for k, s in systems.items():
                f = "; ".join(s["f"])
                print(f"{k}: n={s['n']} m={s['m']} p={s['p']}  f = [{f}]")
        return EXIT_OK

    try:
        cfg = C.apply_overrides(C.load(args.config), args.overrides)
    except C.ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=_sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg["seed"] = args.seed

    if args.cmd == "validate":
        problems = C.validate(cfg)
        for p in problems:
            print(p)
        return EXIT_CONFIG if problems else EXIT_OK

    if args.jobs is not None:
        parallel.set_jobs(args.jobs)
    out = args.out or cfg.get("outputs", {}).get("dir")
    try:
        code, report = execute(cfg, out)
    except Exception as exc:  # last-resort mapping to the runtime exit code
        traceback.print_exc()
        print(f"runtime error: {exc}", file=_sys.stderr)
        return EXIT_RUNTIME
    text = dumps(report)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "report.json"), "w") as fh:
            fh.write(text)
    else:
        _sys.stdout.write(text)
    if code == EXIT_CONFIG:
        for p in report.get("problems", []):
            print(f"config error: {p}", file=_sys.stderr)
    elif code == EXIT_RUNTIME:
        print(f"runtime error: {report['error']['message']}", file=_sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
