import numpy as np
import pytest

from ioslab.comparison import KINF, ClassError, ScalarMonotone, function_from_config
from ioslab.converse import (
    ConverseBudget,
    ConverseBundle,
    ValueFunctionEstimate,
    WeightFunction,
    assemble_ios_candidate,
    construct_converse,
    empirical_decay_certificate,
    forward_differences,
    sigma1_dominates_identity,
    small_gain_lambda,
    tabulate_gain,
    zero_output_set_test,
)
from ioslab.system import close_loop_robust, get_system

FAST = ConverseBudget(horizon=20, random_signals=8, path_signals=4, time_points=32, refine_points=9)


def kinf(text):
    return ScalarMonotone.from_expr(text, KINF)


def closed(name, lam="s/2"):
    return close_loop_robust(get_system(name), tabulate_gain(kinf(lam)))


def test_weight_function():
    k = WeightFunction(1.0, 2.0)
    t = np.linspace(0, 30, 301)
    assert k(0.0) == 1.0
    assert np.all(np.diff(k(t)) > 0) and np.all(k.derivative(t) > 0)
    assert np.all((k(t) >= 1.0) & (k(t) <= 2.0))
    assert k.c3 == 0.25
    with pytest.raises(ValueError):
        WeightFunction(2.0, 1.0)


@pytest.mark.parametrize("s1,s2", [("s", "s"), ("2*s", "s"), ("s^2", "sqrt(s)")])
def test_small_gain_examples(s1, s2):
    lam = small_gain_lambda(kinf(s1), kinf(s2))
    s = np.linspace(0, 20, 81)
    want = s / 4 if s1 == "s" else s / 8
    np.testing.assert_allclose(lam(s), want, atol=1e-9)
    assert lam.check() == []


def test_small_gain_requires_kinf_and_rectify():
    with pytest.raises(ClassError):
        small_gain_lambda(ScalarMonotone.from_expr("s", "K"), kinf("s"))
    half = kinf("s/2")
    assert not sigma1_dominates_identity(half)
    lam = small_gain_lambda(half, kinf("s"), rectify=True)
    np.testing.assert_allclose(lam(np.array([4.0])), [1.0])


def test_zero_output_set():
    ce = closed("paper_counterexample")
    assert zero_output_set_test(ce, [0.0, 0.0], FAST)["in_D"]
    assert zero_output_set_test(closed("decoupled_2d"), [0.0, 5.0], FAST)["in_D"]
    out = zero_output_set_test(ce, [2.0, 0.3], FAST)
    assert not out["in_D"] and "witness" in out


def test_omega_examples():
    vfe = ValueFunctionEstimate(closed("scalar_stable"), budget=FAST)
    assert vfe.omega([[1.0]])[0] == pytest.approx(1.0, abs=1e-9)
    ce = ValueFunctionEstimate(closed("paper_counterexample"), budget=FAST)
    om = ce.omega([[0.0, 0.7], [3.0, -0.7], [1.0, 0.0]])
    np.testing.assert_allclose(om, [0.7, 0.7, 0.0], atol=1e-9)


def test_omega_budget_monotone():
    X = np.random.default_rng(0).uniform(-2, 2, (10, 2))
    small = ValueFunctionEstimate(closed("paper_counterexample"), budget=FAST).omega(X)
    bigger = ConverseBudget(**{**FAST.to_dict(), "random_signals": 16, "rounds": 2})
    big = ValueFunctionEstimate(closed("paper_counterexample"), budget=bigger).omega(X)
    assert np.all(big >= small - 1e-12)


def test_weighted_value_scalar_oracle():
    vfe = ValueFunctionEstimate(closed("scalar_stable"), budget=FAST)
    W = vfe.weighted_value([[1.0]])[0]
    t = np.linspace(0, 20, 200001)
    oracle = np.max(np.exp(-t / 2) * (2 - np.exp(-t)))
    assert 1.0 <= W <= 2.0
    assert W == pytest.approx(oracle, rel=0.02)


def test_weighted_value_ratio_bounds():
    vfe = ValueFunctionEstimate(closed("paper_counterexample"), budget=FAST)
    X = np.random.default_rng(3).uniform(-2, 2, (30, 2))
    W, om = vfe.weighted_value(X), vfe.omega(X)
    assert np.all(W >= om * (1 - 1e-12)) and np.all(W <= 2 * om * (1 + 1e-12))


def test_forward_differences_and_margin():
    vfe = ValueFunctionEstimate(closed("scalar_stable"), budget=FAST)
    X = np.array([[-1.5], [-0.5], [0.0], [0.5], [1.5]])
    fd = forward_differences(vfe, X, 1e-3)
    live = fd["W0"] > 0
    assert np.all(fd["diff"][live] < 0)
    cert = empirical_decay_certificate(vfe, X, np.linspace(0.5, 3, 4), np.array([1.0, 2.0]))
    assert cert.nonnegative == 0
    assert cert.samples == 8  # the origin lies in D and is skipped
    assert np.all(cert.margin.values[1:][~cert.margin.vacuous[1:]] > 0)


def test_counterexample_margin_shrinks_with_r():
    vfe = ValueFunctionEstimate(closed("paper_counterexample"), budget=FAST)
    X = np.array([[a, b] for a in (0.0, 1.0, 2.0, 3.0) for b in (-1.0, 1.0)])
    cert = empirical_decay_certificate(vfe, X, np.array([1.0]), np.array([1.5, 2.5, 3.5]))
    assert cert.nonnegative == 0
    row = cert.margin.values[-1]
    assert row[0] > row[1] > row[2] > 0


def test_pipeline_scalar_and_bundle(tmp_path):
    res = construct_converse(get_system("scalar_stable"), lam=tabulate_gain(kinf("s/2")), radius=2.0, points=9,
                             budget=FAST, holdout_points=50)
    assert res.ok, res.reason
    assert res.holdout["fraction"] >= 0.95
    p = tmp_path / "bundle.json"
    res.bundle.save(p)
    b = ConverseBundle.load(p)
    np.testing.assert_array_equal(b.W, res.bundle.W)
    lam = function_from_config(b.lam)
    cand = assemble_ios_candidate(b, get_system("scalar_stable"), lam)
    x = np.array([[0.3], [-1.2]])
    np.testing.assert_allclose(cand.value(x), res.candidate.value(x))


def test_pipeline_zero_system_rejected():
    res = construct_converse(get_system("zero_system"), lam=tabulate_gain(kinf("s/2")), radius=1.0, points=5,
                             budget=FAST)
    assert not res.ok
    assert "alpha1" in res.reason
