"""Run configuration: loading, overrides, validation and object building.

Validation never simulates.  It collects every problem it can find so a
user can fix a config in one pass.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from typing import Any

import numpy as np

from .comparison import (
    CLASSES,
    ComparisonError,
    DecayMargin,
    KLFunction,
    ScalarMonotone,
    function_from_config,
    kl_from_config,
)
from .converse import ConverseBudget, WeightFunction
from .expr import ExprError
from .lyap import VARIANTS, TRIGGERS, StateDecay
from .props import NOTIONS, REQUIRED, PropertySpec, SamplePlan, SearchBudget
from .system import FREE, UNIT_BALL, ControlSystem, InputSignal, builtin_registry

SCHEMA_VERSIONS = (1,)
TASKS = ("simulate", "falsify", "check-certificate", "fit", "construct-converse", "kl-tools")
KL_OPS = ("invert", "compose", "time_threshold", "factorize", "comparison_bound", "small_gain", "decay_margin")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def suggest(name: str, options) -> str | None:
    best = min(options, key=lambda o: (levenshtein(name, o), o), default=None)
    return best


# --------------------------------------------------------------------------
# Loading and overrides
# --------------------------------------------------------------------------


def load(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc.msg} at line {exc.lineno} column {exc.colno}"]) from exc
    if not isinstance(data, dict):
        raise ConfigError(["config must be a JSON object"])
    return data


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """``a.b.c=value``; the value is read as JSON, falling back to a string."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# --------------------------------------------------------------------------
# Builders (raise on the first problem; validate() collects them all)
# --------------------------------------------------------------------------


def build_system(spec) -> ControlSystem:
    if isinstance(spec, str):
        reg = builtin_registry()
        if spec not in reg:
            raise ConfigError([f"unknown registry system {spec!r}; did you mean {suggest(spec, reg)!r}?"])
        return reg[spec]
    if not isinstance(spec, dict):
        raise ConfigError(["system must be a registry name or an object with f, h and m"])
    missing = [k for k in ("f", "h", "m") if k not in spec]
    if missing:
        raise ConfigError([f"inline system misses {', '.join(missing)}"])
    dom = spec.get("input_domain", FREE)
    if dom not in (FREE, UNIT_BALL):
        raise ConfigError([f"input_domain must be {FREE!r} or {UNIT_BALL!r}"])
    return ControlSystem.from_strings(spec.get("name", "inline"), spec["f"], spec["h"], int(spec["m"]), dom)


def build_function(d, what: str = "function") -> ScalarMonotone:
    if not isinstance(d, dict):
        raise ConfigError([f"{what}: expected an object with form/class"])
    klass = d.get("class", "K")
    if klass not in CLASSES:
        raise ConfigError([f"{what}: unknown class {klass!r}; expected one of {', '.join(CLASSES)}"])
    f = function_from_config(d)
    probs = f.check()
    if probs:
        raise ConfigError([f"{what}: not class {klass}: " + "; ".join(probs)])
    return f


def build_kl(d, what: str = "beta") -> KLFunction:
    if not isinstance(d, dict):
        raise ConfigError([f"{what}: expected an object with form/class"])
    b = kl_from_config(d)
    probs = b.check()
    if probs:
        raise ConfigError([f"{what}: not class KL: " + "; ".join(probs)])
    return b


class _BivariateExpr:
    bivariate = True

    def __init__(self, text):
        from .expr import compile_exprs, parse

        self.expr = parse(text, ["s", "r"])
        self._fn = compile_exprs([self.expr], ["s", "r"])

    def __call__(self, s, r):
        return self._fn(np.asarray(s, float), np.asarray(r, float))[0]

    def to_config(self):
        return {"form": "expr", "class": "decay", "expr": str(self.expr)}


def build_decay(d, n: int):
    """Decay term: bivariate ``alpha3(s, r)``, univariate, state-based or none."""
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigError(["decay: expected an object"])
    klass = d.get("class")
    if klass == "decay":
        if d.get("form", "expr") == "table":
            return DecayMargin(np.asarray(d["s"], float), np.asarray(d["r"], float), np.asarray(d["values"], float))
        return _BivariateExpr(d["expr"])
    if klass == "decay-state":
        return StateDecay.from_expr(d["expr"], n)
    return build_function(d, "decay")


def build_spec(d: dict) -> PropertySpec:
    if not isinstance(d, dict) or "notion" not in d:
        raise ConfigError(["spec needs a notion"])
    kw: dict[str, Any] = {}
    for slot in ("gamma", "sigma", "sigma1", "sigma2", "lam"):
        if slot in d:
            kw[slot] = build_function(d[slot], f"spec.{slot}")
    if "beta" in d:
        kw["beta"] = build_kl(d["beta"], "spec.beta")
    return PropertySpec(d["notion"], mode=d.get("mode", "max"), slack=float(d.get("slack", 1.0)), **kw)


def _dataclass_from(cls, d: dict | None, what: str, **extra):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        hints = [f"{u!r} (did you mean {suggest(u, names)!r}?)" for u in unknown]
        raise ConfigError([f"{what}: unknown field(s) " + ", ".join(hints)])
    d.update(extra)
    if "state_box" in d and isinstance(d["state_box"], list):
        d["state_box"] = [tuple(b) for b in d["state_box"]] if np.ndim(d["state_box"]) == 2 else d["state_box"]
    return cls(**d)


def build_budget(d, seed) -> SearchBudget:
    return _dataclass_from(SearchBudget, d, "budget", **({"seed": seed} if seed is not None else {}))


def build_plan(d, seed) -> SamplePlan:
    d = dict(d or {})
    lam = d.pop("lam", None)
    plan = _dataclass_from(SamplePlan, d, "plan", **({"seed": seed} if seed is not None else {}))
    if lam is not None:
        plan.lam = build_function(lam, "plan.lam")
    return plan


def build_converse_budget(d, seed) -> ConverseBudget:
    return _dataclass_from(ConverseBudget, d, "budget", **({"seed": seed} if seed is not None else {}))


def build_signal(d, m: int, horizon: float | None) -> InputSignal:
    if d is None:
        return InputSignal.constant(np.zeros(m), horizon)
    if "constant" in d:
        return InputSignal.constant(np.atleast_1d(np.asarray(d["constant"], float)), d.get("horizon", horizon))
    return InputSignal.from_dict(d)


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def _try(problems: list, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ConfigError as exc:
        problems.extend(exc.problems)
    except (ComparisonError, ExprError, ValueError, KeyError, TypeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        where = kw.get("what") or (args[1] if len(args) > 1 and isinstance(args[1], str) else "")
        problems.append(f"{where + ': ' if where else ''}{type(exc).__name__}: {msg}")
    return None


def validate(cfg: dict) -> list[str]:
    """All problems found in ``cfg`` (empty list means valid)."""
    problems: list[str] = []
    ver = cfg.get("schema_version")
    if ver not in SCHEMA_VERSIONS:
        problems.append(f"schema_version must be one of {list(SCHEMA_VERSIONS)} (got {ver!r})")
    task = cfg.get("task")
    if task not in TASKS:
        hint = f"; did you mean {suggest(task, TASKS)!r}?" if isinstance(task, str) else ""
        problems.append(f"task must be one of {', '.join(TASKS)} (got {task!r}){hint}")
    present = [t for t in TASKS if t in cfg]
    if len(present) > 1:
        problems.append(f"exactly one task block allowed, found {', '.join(present)}")
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        problems.append("seed must be an unsigned 64-bit integer")
        seed = 0
    if "system" not in cfg and task != "kl-tools":
        problems.append("missing 'system' (registry name or inline definition)")
        sys = None
    else:
        sys = _try(problems, build_system, cfg["system"]) if "system" in cfg else None
    if task in TASKS:
        block = cfg.get(task)
        if not isinstance(block, dict):
            problems.append(f"missing task block {task!r}")
        else:
            _VALIDATORS[task](block, sys, seed, problems)
    return problems


def _v_simulate(b, sys, seed, problems):
    if "xi" not in b:
        problems.append("simulate.xi is required")
    elif sys is not None and len(b["xi"]) != sys.n:
        problems.append(f"simulate.xi has {len(b['xi'])} entries, system has n={sys.n}")
    if not float(b.get("horizon", 0)) > 0:
        problems.append("simulate.horizon must be positive")
    if sys is not None:
        _try(problems, build_signal, b.get("signal"), sys.m, float(b.get("horizon", 1.0)))


def _v_falsify(b, sys, seed, problems):
    if "spec" not in b:
        problems.append("falsify.spec is required")
    else:
        _v_spec(b["spec"], problems, "falsify.spec")
    _try(problems, build_budget, b.get("budget"), seed)


def _v_spec(d, problems, where):
    if not isinstance(d, dict):
        problems.append(f"{where} must be an object")
        return
    notion = d.get("notion")
    if notion not in NOTIONS:
        problems.append(f"{where}.notion must be one of {', '.join(NOTIONS)} (got {notion!r})")
        return
    for slot in REQUIRED[notion]:
        if slot not in d:
            problems.append(f"{where}: {notion} needs slot {slot!r}")
    for slot in ("gamma", "sigma", "sigma1", "sigma2", "lam"):
        if slot in d:
            _try(problems, build_function, d[slot], f"{where}.{slot}")
    if "beta" in d:
        _try(problems, build_kl, d["beta"], f"{where}.beta")
    if d.get("mode", "max") not in ("max", "sum"):
        problems.append(f"{where}.mode must be 'max' or 'sum'")
    if not float(d.get("slack", 1.0)) >= 1.0:
        problems.append(f"{where}.slack must be >= 1")


def _v_cert(b, sys, seed, problems):
    if b.get("variant") not in VARIANTS:
        problems.append(f"check-certificate.variant must be one of {', '.join(VARIANTS)} (got {b.get('variant')!r})")
    if "V" not in b:
        problems.append("check-certificate.V is required")
    if b.get("trigger") is not None and b["trigger"] not in TRIGGERS:
        problems.append(f"check-certificate.trigger must be one of {', '.join(TRIGGERS)}")
    for slot in ("alpha1", "alpha2", "chi"):
        if slot in b:
            _try(problems, build_function, b[slot], f"check-certificate.{slot}")
    if "alpha2" in b and b.get("sandwich_mode") not in ("state", "output"):
        problems.append("check-certificate.sandwich_mode must be 'state' or 'output' when alpha2 is given")
    for k in ("box", "grid"):
        if k not in b:
            problems.append(f"check-certificate.{k} is required")
    if sys is not None:
        if "decay" in b:
            _try(problems, build_decay, b["decay"], sys.n)
        if "V" in b:
            from .lyap import CandidateLyapunov

            _try(problems, CandidateLyapunov.from_expr, b["V"], sys.n, b.get("gradient", "auto"), b.get("singular"))


def _v_fit(b, sys, seed, problems):
    notions = b.get("notions", [])
    if not notions and not b.get("audit"):
        problems.append("fit.notions must list at least one notion (or set audit)")
    for n in notions:
        if n not in NOTIONS:
            problems.append(f"fit.notions: unknown notion {n!r}; did you mean {suggest(n, NOTIONS)!r}?")
    _try(problems, build_plan, b.get("plan"), seed)
    _try(problems, build_budget, b.get("budget"), seed)


def _v_converse(b, sys, seed, problems):
    if "lam" in b:
        _try(problems, build_function, b["lam"], "construct-converse.lam")
    if "beta" in b:
        _try(problems, build_kl, b["beta"], "construct-converse.beta")
    _try(problems, build_converse_budget, b.get("budget"), seed)
    w = b.get("weight", {})
    _try(problems, lambda: WeightFunction(**w))


def _v_kl(b, sys, seed, problems):
    ops = b.get("operations")
    if not isinstance(ops, list) or not ops:
        problems.append("kl-tools.operations must be a nonempty list")
        return
    for i, op in enumerate(ops):
        where = f"kl-tools.operations[{i}]"
        name = op.get("op") if isinstance(op, dict) else None
        if name not in KL_OPS:
            hint = f"; did you mean {suggest(name, KL_OPS)!r}?" if isinstance(name, str) else ""
            problems.append(f"{where}.op must be one of {', '.join(KL_OPS)}{hint}")
            continue
        for k, v in op.items():
            if k in ("f", "g", "kappa", "sigma1", "sigma2", "chi"):
                _try(problems, build_function, v, f"{where}.{k}")
            elif k == "beta":
                _try(problems, build_kl, v, f"{where}.beta")


_VALIDATORS = {
    "simulate": _v_simulate,
    "falsify": _v_falsify,
    "check-certificate": _v_cert,
    "fit": _v_fit,
    "construct-converse": _v_converse,
    "kl-tools": _v_kl,
}
