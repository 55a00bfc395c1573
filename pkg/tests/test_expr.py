import math

import numpy as np
import pytest

from ioslab.expr import (
    DomainError,
    NotDifferentiableError,
    ParseError,
    compile_exprs,
    differentiate,
    evaluate,
    parse,
    to_string,
)

F2 = "-(2*x2+u)/(1+x1^2)"
VARS = ["x1", "x2", "u"]


def test_counterexample_rhs_values():
    e = parse(F2, VARS)
    assert evaluate(e, {"x1": 0, "x2": 1, "u": 0}) == -2
    assert evaluate(e, {"x1": 1, "x2": 1, "u": 1}) == -1.5


def test_zero_cases():
    assert evaluate(parse("x2^2", ["x2"]), {"x2": 0}) == 0
    assert evaluate(parse("0", []), {}) == 0


def test_syntax_error_position():
    with pytest.raises(ParseError) as ei:
        parse("2*+x", ["x"])
    assert ei.value.position == 2


def test_undeclared_variable():
    with pytest.raises(ParseError, match="y"):
        parse("x + y", ["x"])


def test_empty_text():
    with pytest.raises(ParseError):
        parse("   ", ["x"])


@pytest.mark.parametrize(
    "text,env,value",
    [
        ("2^3^2", {}, 512.0),
        ("-2^2", {}, -4.0),
        ("8/4/2", {}, 1.0),
        ("1-2-3", {}, -4.0),
        ("2*3+4", {}, 10.0),
        ("abs(-3)", {}, 3.0),
        ("sqrt(x)*ln(exp(x))", {"x": 4.0}, 8.0),
    ],
)
def test_precedence(text, env, value):
    assert evaluate(parse(text, list(env)), env) == pytest.approx(value)


@pytest.mark.parametrize("text,env", [("1/x", {"x": 0.0}), ("ln(x)", {"x": 0.0}), ("sqrt(x)", {"x": -1.0}),
                                      ("x^0.5", {"x": -2.0})])
def test_domain_errors(text, env):
    e = parse(text, list(env))
    with pytest.raises(DomainError) as ei:
        evaluate(e, env)
    assert ei.value.span is not None


def test_noninteger_power_needs_positive_base():
    e = parse("((1+x1^2)*abs(x2))^(1+x1^2)", ["x1", "x2"])
    assert evaluate(e, {"x1": 1.0, "x2": 0.5}) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        evaluate(parse("x^(1+y^2)", ["x", "y"]), {"x": -1.0, "y": 0.5})


def test_derivatives():
    assert evaluate(differentiate(parse("x2^2", ["x2"]), "x2"), {"x2": 3}) == 6
    d = differentiate(parse(F2, VARS), "x1")
    assert evaluate(d, {"x1": 1, "x2": 1, "u": 0}) == pytest.approx(1.0)
    assert evaluate(differentiate(parse("7.5", ["x"]), "x"), {"x": 2}) == 0


def test_abs_not_differentiable():
    with pytest.raises(NotDifferentiableError, match="Dini|finite"):
        differentiate(parse("abs(x)", ["x"]), "x")


CORPUS = [F2, "x2^2", "((1+x1^2)*abs(x2))^(1+x1^2)", "-x1+u", "2*V/(1+x1^2)", "s*exp(-t)", "s/(1+s*t)",
          "-(-x)", "a-(b-c)", "(a^b)^c", "a^-b", "sin(cos(x))*-2"]


@pytest.mark.parametrize("text", CORPUS)
def test_print_parse_fixpoint(text):
    e = parse(text)
    p = to_string(e)
    assert to_string(parse(p)) == p
    assert parse(p) == e


def test_compile_matches_evaluate_and_reports_point():
    e = parse(F2, VARS)
    fn = compile_exprs([e], VARS)
    x1 = np.linspace(-2, 2, 7)
    got = fn(x1, 1.0, 0.5)[0]
    want = [evaluate(e, {"x1": a, "x2": 1.0, "u": 0.5}) for a in x1]
    np.testing.assert_allclose(got, want, rtol=1e-15)
    bad = compile_exprs([parse("1/x", ["x"])], ["x"])
    with pytest.raises(DomainError) as ei:
        bad(np.array([1.0, 0.0]))
    assert ei.value.point is not None


def _random_expr(rng, depth):
    if depth == 0 or rng.random() < 0.25:
        return rng.choice(["x", "y", f"{rng.uniform(0.5, 2.0):.3f}"])
    kind = rng.integers(0, 3)
    if kind == 0:
        op = rng.choice(["-", "exp", "ln", "sqrt", "sin", "cos"])
        a = _random_expr(rng, depth - 1)
        return f"-({a})" if op == "-" else f"{op}({a})"
    if kind == 1:
        return f"({_random_expr(rng, depth - 1)})^{rng.integers(2, 4)}"
    op = rng.choice(["+", "-", "*", "/"])
    return f"({_random_expr(rng, depth - 1)}){op}({_random_expr(rng, depth - 1)})"


def test_random_derivatives_match_central_differences():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 1000:
        e = parse(_random_expr(rng, int(rng.integers(1, 7))), ["x", "y"])
        var = "x" if rng.random() < 0.5 else "y"
        d = differentiate(e, var)
        env = {"x": rng.uniform(0.2, 2.0), "y": rng.uniform(0.2, 2.0)}
        h = 1e-6
        try:
            sym = evaluate(d, env)
            hi = evaluate(e, {**env, var: env[var] + h})
            lo = evaluate(e, {**env, var: env[var] - h})
            mid = evaluate(e, env)
        except (DomainError, OverflowError):
            continue
        # skip near-singular samples where the difference quotient is meaningless
        if not all(math.isfinite(v) and abs(v) < 1e4 for v in (sym, hi, lo, mid)):
            continue
        fd = (hi - lo) / (2 * h)
        assert abs(sym - fd) <= 1e-4 * max(1.0, abs(sym)), (to_string(e), var, env, sym, fd)
        checked += 1
