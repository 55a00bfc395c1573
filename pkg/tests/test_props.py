import numpy as np
import pytest

from ioslab.comparison import KINF, KLFunction, ScalarMonotone
from ioslab.props import (
    NO_VIOLATION,
    UNFIT,
    VIOLATED,
    PropertySpec,
    SamplePlan,
    SearchBudget,
    SpecError,
    evaluate_estimate,
    falsify,
    fit_overshoot,
    implication_audit,
    replay_witness,
)
from ioslab.system import InputSignal, get_system, simulate


def kinf(text):
    return ScalarMonotone.from_expr(text, KINF)


def kl(text):
    return KLFunction.from_expr(text)


def ios(beta="s*exp(-t)", gamma="s", mode="max", slack=1.0):
    return PropertySpec("IOS", beta=kl(beta), gamma=kinf(gamma), mode=mode, slack=slack)


def test_spec_slots_and_slack():
    with pytest.raises(SpecError, match="gamma"):
        PropertySpec("IOS", beta=kl("s*exp(-t)"))
    with pytest.raises(SpecError):
        ios(slack=0.5)
    with pytest.raises(SpecError):
        PropertySpec("XYZ")


def test_estimate_scalar_stable_sum_form():
    sys = get_system("scalar_stable")
    tr = simulate(sys, [1.0], InputSignal.constant([0.5], 5.0), 5.0, t_eval=np.linspace(0, 5, 101))
    ms = evaluate_estimate(ios(mode="sum"), tr, [1.0])
    assert ms.min_margin >= 0
    np.testing.assert_allclose(tr.x[:, 0], np.exp(-tr.t) + 0.5 * (1 - np.exp(-tr.t)), atol=1e-7)


def test_estimate_zero_state_zero_input():
    for name in ("scalar_stable", "paper_counterexample", "decoupled_2d"):
        sys = get_system(name)
        tr = simulate(sys, np.zeros(sys.n), InputSignal.constant(np.zeros(sys.m), 3.0), 3.0)
        ms = evaluate_estimate(ios(), tr, np.zeros(sys.n))
        assert np.all(ms.lhs == 0) and np.all(ms.margin >= 0)


def test_estimate_integrator_eventually_negative():
    sys = get_system("integrator")
    tr = simulate(sys, [0.0], InputSignal.constant([1.0], 20.0), 20.0, t_eval=np.linspace(0, 20, 41))
    ms = evaluate_estimate(ios(gamma="10*s"), tr, [0.0])
    assert ms.margin[-1] < 0


def test_max_form_below_sum_form():
    sys = get_system("decoupled_2d")
    sig = InputSignal(np.array([0.0, 1.0, 4.0]), np.array([[0.7], [-0.2]]))
    tr = simulate(sys, [1.0, -2.0], sig, 4.0, t_eval=np.linspace(0, 4, 41))
    a = evaluate_estimate(ios(mode="max"), tr, [1.0, -2.0])
    b = evaluate_estimate(ios(mode="sum"), tr, [1.0, -2.0])
    assert np.all(a.rhs <= b.rhs)


def test_falsify_integrator():
    rep = falsify(ios(gamma="10*s"), get_system("integrator"), SearchBudget(max_simulations=200))
    assert rep.verdict == VIOLATED
    assert rep.simulations <= 200
    w = rep.witness
    assert w["lhs"] > w["rhs"]
    again = replay_witness(ios(gamma="10*s"), get_system("integrator"), w)
    assert again["lhs"] == w["lhs"] and again["rhs"] == w["rhs"]


def test_falsify_is_deterministic():
    spec = ios(gamma="10*s")
    sys = get_system("integrator")
    a = falsify(spec, sys, SearchBudget(max_simulations=200, seed=3))
    b = falsify(spec, sys, SearchBudget(max_simulations=200, seed=3))
    assert a.to_dict() == b.to_dict()


def test_falsify_counterexample_siios():
    spec = PropertySpec("SIIOS", beta=kl("s*exp(-t)"), gamma=kinf("s"))
    rep = falsify(spec, get_system("paper_counterexample"), SearchBudget(max_simulations=500, state_box=50))
    assert rep.verdict == VIOLATED
    assert abs(rep.witness["xi"][0]) >= 30
    vals = np.asarray(rep.witness["signal"]["values"])
    assert np.all(vals == 0)


def test_counterexample_ios_bound_holds():
    spec = PropertySpec("IOS", beta=kl("s*exp(-2*t/(1+s^2))"), gamma=kinf("s"), mode="sum")
    rep = falsify(spec, get_system("paper_counterexample"), SearchBudget(max_simulations=300))
    assert rep.verdict == NO_VIOLATION
    assert rep.budget["max_simulations"] == 300


def test_ubibs_blow_up_counts():
    spec = PropertySpec("UBIBS", sigma=kinf("10*s"))
    rep = falsify(spec, get_system("integrator"), SearchBudget(max_simulations=100, horizon=50))
    assert rep.verdict == VIOLATED


def test_fit_ubibs_scalar_stable():
    fit = fit_overshoot(get_system("scalar_stable"), "UBIBS", SamplePlan(levels=11, states_per_level=6))
    assert fit.ok
    s = np.linspace(0, 5, 11)
    sig = fit.functions["sigma"](s)
    assert np.all(np.diff(sig) >= 0)
    assert np.all(sig >= s * (1 - 1e-9)) and np.all(sig <= 2 * s + 1e-9)


def test_fit_ol_uniform_decoupled():
    fit = fit_overshoot(get_system("decoupled_2d"), "OL-uniform", SamplePlan(levels=11, states_per_level=6))
    assert fit.ok
    s = np.linspace(0.5, 5, 10)
    sig = fit.functions["sigma"](s)
    # envelopes are shifted up by one grid cell (0.5 here) to stay sound between levels
    assert np.all(sig >= s) and np.all(sig <= s + 0.5 + 1e-5 * s + 1e-9)


def test_fit_zero_system_is_zero():
    fit = fit_overshoot(get_system("zero_system"), "IOS", SamplePlan(levels=6, states_per_level=4))
    for f in fit.functions.values():
        vals = f(np.linspace(0, 5, 6)[:, None], np.linspace(0, 5, 6)[None, :]) if hasattr(f, "table") and \
            isinstance(f, KLFunction) else f(np.linspace(0, 5, 6))
        assert np.all(np.asarray(vals) <= 1e-5 * 5 + 1e-12)


def test_fit_unfit_without_decay():
    fit = fit_overshoot(get_system("integrator"), "IOS", SamplePlan(levels=6, states_per_level=4))
    assert not fit.ok and "decay" in fit.reason


def test_fitted_ios_survives_independent_search():
    sys = get_system("scalar_stable")
    fit = fit_overshoot(sys, "IOS", SamplePlan(levels=16, states_per_level=8, seed=4))
    assert fit.ok
    spec = PropertySpec("IOS", beta=fit.spec.beta, gamma=fit.spec.gamma, mode=fit.spec.mode, slack=1.1)
    rep = falsify(spec, sys, SearchBudget(max_simulations=300, seed=5))
    assert rep.verdict == NO_VIOLATION


def test_audit_zero_and_counterexample():
    budget = SearchBudget(max_simulations=150)
    z = implication_audit(get_system("zero_system"), budget=budget)
    assert z.consistent and all(r["verdict"] == NO_VIOLATION for r in z.rows)
    specs = {
        "SIIOS": PropertySpec("SIIOS", beta=kl("s*exp(-t)"), gamma=kinf("s")),
        "IOS": PropertySpec("IOS", beta=kl("s*exp(-2*t/(1+s^2))"), gamma=kinf("s"), mode="sum"),
        "ROS": PropertySpec("ROS", beta=kl("s*exp(-t/(1+s^2))"), lam=kinf("s/2")),
    }
    c = implication_audit(get_system("paper_counterexample"), specs, SearchBudget(max_simulations=300, state_box=50))
    assert c.verdict("SIIOS") == VIOLATED
    assert c.verdict("IOS") == NO_VIOLATION
    assert c.consistent


def test_audit_integrator_unfit():
    a = implication_audit(get_system("integrator"), budget=SearchBudget(max_simulations=100))
    assert {r["verdict"] for r in a.rows} == {UNFIT}
    assert a.consistent
