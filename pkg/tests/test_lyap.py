import numpy as np
import pytest

from ioslab.comparison import KINF, ClassError, ScalarMonotone
from ioslab.lyap import (
    CandidateLyapunov,
    CertificateError,
    StateDecay,
    check_dissipation,
    check_sandwich,
    dini_batch,
    dini_decrease_along_flow,
    dissipation_margin,
    predict_bound,
    rescale_certificate,
)
from ioslab.system import InputSignal, get_system

CE = get_system("paper_counterexample")
U_TEXT = "((1 + x1^2)*abs(x2))^(1 + x1^2)"


def kinf(text):
    return ScalarMonotone.from_expr(text, KINF)


def pd(text):
    return ScalarMonotone.from_expr(text, "PD")


def v_cert(**kw):
    base = dict(alpha1=kinf("s^2"), alpha2=kinf("s^2"), sandwich_mode="output", chi=kinf("s^2"),
                decay=StateDecay.from_expr("2*V/(1+x1^2)", 2), trigger="V-nonstrict")
    base.update(kw)
    return CandidateLyapunov.from_expr("x2^2", 2, **base)


def test_sandwich_examples():
    rep = check_sandwich(v_cert(), CE, 5, 21)
    assert rep.passed and rep.margins["sandwich_lower"] == 0.0
    full = CandidateLyapunov.from_expr("x1^2 + x2^2", 2, alpha2=kinf("s^2"), sandwich_mode="state")
    assert check_sandwich(full, CE, 3, 13).passed
    bad = v_cert(alpha1=kinf("2*s^2"))
    rep = check_sandwich(bad, CE, 2, 5)
    assert rep.verdicts["sandwich_lower"] == "fail"
    w = rep.witnesses["sandwich_lower"]
    assert w["x"][1] != 0


def test_sandwich_mode_must_be_explicit():
    with pytest.raises(CertificateError, match="mode"):
        check_sandwich(v_cert(sandwich_mode=None), CE, 2, 5)


def test_dissipation_counterexample_passes():
    rep = check_dissipation(v_cert(), CE, "IOS-LF", 10, 10, 41)
    assert rep.passed
    assert rep.counts["dissipation_triggered"] > 0
    assert rep.counts["dissipation_violations"] == 0


def test_dissipation_second_certificate():
    cand = CandidateLyapunov.from_expr(U_TEXT, 2, singular="x2", chi=kinf("s"), decay=pd("s"), trigger="output")
    assert cand.gradient_mode == "finite-difference"
    rep = check_dissipation(cand, CE, "ROS-LF", [[-3, 3], [-3, 3]], 3, 41, exclude=[(1, -1e-3, 1e-3)], rtol=1e-6)
    assert rep.passed, rep.witnesses


def test_uniform_decay_refuted_at_documented_point():
    cand = v_cert(decay=pd("s"))
    m = dissipation_margin(cand, CE, np.array([[3.0, 1.0]]), np.array([[0.0]]), "SIIOS-LF")
    # DVf = -0.4 while the uniform decay demands -1
    assert m[0] == pytest.approx(-0.6, abs=1e-12)
    rep = check_dissipation(cand, CE, "SIIOS-LF", [[-3, 3], [-1, 1]], 1, 7)
    assert rep.verdicts["dissipation"] == "fail"
    w = rep.witnesses["dissipation"]
    x, mu = np.array([w["x"]]), np.array([w["mu"]])
    assert dissipation_margin(cand, CE, x, mu, "SIIOS-LF")[0] == pytest.approx(-w["excess"], abs=1e-9)


def test_vacuous_trigger_warns():
    cand = v_cert(chi=kinf("1000*s"))
    rep = check_dissipation(cand, CE, "IOS-LF", [[-1, 1], [-0.001, 0.001]], [[5, 6]], 5)
    assert rep.passed
    assert any("vacuous" in w for w in rep.warnings)


def test_trigger_monotonicity_and_strict_forms():
    weak = v_cert(decay=pd("s"))
    strong = v_cert(decay=pd("s"), chi=kinf("4*s^2"))
    a = check_dissipation(weak, CE, "SIIOS-LF", 2, 2, 9)
    b = check_dissipation(strong, CE, "SIIOS-LF", 2, 2, 9)
    assert b.counts["dissipation_triggered"] <= a.counts["dissipation_triggered"]
    good = v_cert()
    ns = check_dissipation(good, CE, "IOS-LF", 3, 3, 13, trigger="V-nonstrict")
    st = check_dissipation(good, CE, "IOS-LF", 3, 3, 13, trigger="V-strict")
    assert ns.passed and st.passed
    assert st.counts["dissipation_triggered"] <= ns.counts["dissipation_triggered"]


def test_uos_variant_uses_unit_ball():
    cand = CandidateLyapunov.from_expr("x1^2", 1, decay=pd("s"))
    sys = get_system("scalar_stable")
    rep = check_dissipation(cand, sys, "UOS-LF", 2, 1, 9)
    assert rep.verdicts["dissipation"] == "fail"  # |mu| <= 1 only, but x near 0 cannot beat mu = 1
    assert rep.trigger == "none"


def test_rescale():
    same = rescale_certificate(v_cert(), kinf("s"))
    x = np.random.default_rng(0).uniform(-3, 3, (20, 2))
    np.testing.assert_allclose(same.value(x), v_cert().value(x))
    sq = rescale_certificate(v_cert(), kinf("s^2"))
    np.testing.assert_allclose(sq.value(x), x[:, 1] ** 4)
    assert check_dissipation(sq, CE, "IOS-LF", 5, 5, 21).passed
    bad = ScalarMonotone.from_callable(lambda s: np.sin(s), KINF, label="sin")
    with pytest.raises((CertificateError, ClassError)):
        rescale_certificate(v_cert(), bad)


def test_dini_quotients():
    sys = get_system("scalar_stable")
    cand = CandidateLyapunov.from_expr("x1^2", 1)
    q = dini_decrease_along_flow(cand, sys, [1.0], [0.0])
    assert q[-1] == pytest.approx(-2.0, rel=1e-2)
    assert np.all(dini_decrease_along_flow(cand, sys, [0.0], [0.0]) == 0)
    q = dini_decrease_along_flow(v_cert(), CE, [0.0, 1.0], [0.0])
    assert q[-1] == pytest.approx(-4.0, rel=1e-2)
    ucand = CandidateLyapunov.from_expr(U_TEXT, 2, singular="x2")
    with pytest.raises(CertificateError):
        dini_decrease_along_flow(ucand, CE, [1.0, 0.0], [0.0])


def test_symbolic_gradient_matches_dini():
    rng = np.random.default_rng(11)
    X = rng.uniform(-3, 3, (100, 2))
    MU = rng.uniform(-3, 3, (100, 1))
    cand = CandidateLyapunov.from_expr("x2^2 + x1^2*x2^2", 2)
    exact = np.einsum("ij,ij->i", cand.gradient(X), CE.rhs(X, MU))
    q = dini_batch(cand, CE, X, MU, dt=1e-4)
    assert np.all(np.abs(q - exact) <= 1e-2 * np.maximum(np.abs(exact), 1e-2))


def test_prediction_examples():
    sys = get_system("scalar_stable")
    cand = CandidateLyapunov.from_expr("x1^2", 1, alpha1=kinf("s^2"), alpha2=kinf("s^2"), sandwich_mode="state",
                                       chi=kinf("4*s^2"), decay=pd("2*s"))
    p = predict_bound(cand, sys, [1.0], InputSignal.constant([0.0], 5.0))
    assert p.ok
    assert np.all(p.envelope >= np.exp(-p.t) * (1 - 1e-6))
    z = predict_bound(cand, sys, [0.0], InputSignal.constant([0.0], 5.0))
    assert z.ok and np.all(z.envelope == 0) and np.all(z.output == 0)
    ce = predict_bound(v_cert(), CE, [5.0, 1.0], InputSignal.constant([0.0], 20.0))
    assert ce.ok
    # V decays at rate 2/(1+R^2) with R = |xi|; the output envelope is sqrt(V)
    assert ce.envelope[-1] == pytest.approx(np.exp(-20 / 27), rel=1e-3)
    assert ce.output[-1] == pytest.approx(np.exp(-2 * 20 / 26), rel=1e-6)
