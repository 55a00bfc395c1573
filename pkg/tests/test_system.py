import csv

import numpy as np
import pytest

from ioslab import ode
from ioslab.system import (
    UNIT_BALL,
    ConstructionError,
    ControlSystem,
    InputSignal,
    builtin_registry,
    close_loop_robust,
    get_system,
    simulate,
    simulate_batch,
)


def test_registry_contents():
    reg = builtin_registry()
    assert {"paper_counterexample", "scalar_stable", "integrator", "decoupled_2d", "zero_system"} <= set(reg)
    ce = reg["paper_counterexample"]
    assert (ce.n, ce.m, ce.p) == (2, 1, 1)
    np.testing.assert_allclose(ce.rhs(np.array([[1.0, 1.0]]), np.array([[1.0]])), [[0.0, -1.5]])


def test_unknown_registry_name():
    with pytest.raises(KeyError):
        get_system("scalar_stabel")


def test_equilibrium_required():
    with pytest.raises(ConstructionError, match="f\\(0, 0\\)"):
        ControlSystem.from_strings("bad", ["1 - x1"], ["x1"], 1)
    with pytest.raises(ConstructionError, match="h\\(0\\)"):
        ControlSystem.from_strings("bad", ["-x1"], ["x1 + 1"], 1)


def test_signal_basics():
    sig = InputSignal(np.array([0.0, 1.0, 3.0]), np.array([[3.0, 4.0], [0.0, -1.0]]))
    assert sig.sup_norm() == 5.0
    np.testing.assert_array_equal(sig(np.array([0.0, 0.999, 1.0, 3.0])), [[3, 4], [3, 4], [0, -1], [0, -1]])
    assert InputSignal.from_dict(sig.to_dict()).to_dict() == sig.to_dict()
    with pytest.raises(ValueError):
        InputSignal(np.array([0.0, 1.0, 1.0]), np.zeros((2, 1)))


def test_scalar_decay_matches_closed_form():
    sys = get_system("scalar_stable")
    tr = simulate(sys, [1.0], InputSignal.constant([0.0], 2.0), 2.0, rtol=1e-10, atol=1e-12, t_eval=[0.5, 1.0, 2.0])
    assert tr.completed
    for t in (0.5, 1.0, 2.0):
        k = int(np.argmin(np.abs(tr.t - t)))
        assert tr.x[k, 0] == pytest.approx(np.exp(-t), rel=1e-9)


def test_piecewise_input_is_exact_at_breakpoints():
    sys = get_system("integrator")
    sig = InputSignal(np.array([0.0, 1.0, 2.0]), np.array([[1.0], [-2.0]]))
    tr = simulate(sys, [0.0], sig, 2.0)
    assert 1.0 in tr.t
    assert tr.x[tr.t == 1.0][0, 0] == pytest.approx(1.0, abs=1e-12)
    assert tr.x[-1, 0] == pytest.approx(-1.0, abs=1e-12)


def test_blow_up_is_reported():
    sys = ControlSystem.from_strings("quad", ["x1^2"], ["x1"], 1)
    tr = simulate(sys, [1.0], InputSignal.constant([0.0], 2.0), 2.0)
    assert tr.status == ode.BLEW_UP
    assert tr.t_status < 1.0 + 1e-6


def test_domain_error_is_reported():
    # x' = -sqrt(x) reaches 0 at t = 2 and the next stage leaves the domain
    sys = ControlSystem.from_strings("dom", ["-sqrt(x1)"], ["x1"], 1)
    tr = simulate(sys, [1.0], InputSignal.constant([0.0], 5.0), 5.0)
    assert tr.status == ode.DOMAIN_ERROR
    assert tr.message
    assert len(tr.t) > 1 and tr.t[-1] <= 2.0 + 1e-6


def test_singularity_stops_with_diagnostic():
    sys = ControlSystem.from_strings("sing", ["-1/(x1 - 1) - 1"], ["x1"], 1)
    tr = simulate(sys, [0.5], InputSignal.constant([0.0], 5.0), 5.0)
    assert not tr.completed
    assert tr.t_status < 1.0


def test_batch_equals_single_runs():
    sys = get_system("decoupled_2d")
    xis = np.array([[1.0, 2.0], [-1.0, 0.5], [0.0, 0.0]])
    sigs = [InputSignal.constant([0.3], 4.0), InputSignal(np.array([0.0, 2.0, 4.0]), np.array([[1.0], [-1.0]])),
            InputSignal.constant([0.0], 4.0)]
    bt = simulate_batch(sys, xis, sigs, horizon=4.0, t_eval=[4.0], rtol=1e-10, atol=1e-12)
    for i in range(3):
        tr = simulate(sys, xis[i], sigs[i], 4.0, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(bt.x[-1, i], tr.x[-1], atol=1e-8)


def test_robust_closed_loop():
    base = get_system("scalar_stable")
    cl = close_loop_robust(base, lambda s: 0.5 * s)
    assert cl.input_domain == UNIT_BALL
    np.testing.assert_allclose(cl.rhs(np.array([[2.0]]), np.array([[1.0]])), [[-1.0]])


def test_trajectory_csv(tmp_path):
    sys = get_system("scalar_stable")
    tr = simulate(sys, [1.0], InputSignal.constant([0.5], 1.0), 1.0, t_eval=np.linspace(0, 1, 5))
    p = tmp_path / "t.csv"
    tr.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["t", "x1", "u1", "y1"]
    assert len(rows) == len(tr.t) + 1
    assert float(rows[1][2]) == 0.5


def _dp5_fixed(f, x0, T, steps):
    h = T / steps
    x = x0
    for _ in range(steps):
        k = [f(x)]
        for i in range(1, 6):
            k.append(f(x + h * sum(a * kj for a, kj in zip(ode.A[i], k))))
        x = x + h * sum(b * kj for b, kj in zip(ode.B, k))
    return x


def test_tableau_is_fifth_order():
    # halving a fixed step must cut the error by about 2^5
    errs = [abs(_dp5_fixed(lambda x: -x, 1.0, 1.0, n) - np.exp(-1.0)) for n in (4, 8)]
    assert 24 < errs[0] / errs[1] < 40


def test_tighter_tolerance_reduces_error():
    sys = ControlSystem.from_strings("decay", ["-x1"], ["x1"], 1)
    err = []
    for rtol in (1e-6, 1e-8, 1e-10):
        tr = simulate(sys, [1.0], InputSignal.constant([0.0], 1.0), 1.0, rtol=rtol, atol=rtol * 1e-2, t_eval=[1.0])
        err.append(abs(tr.x[-1, 0] - np.exp(-1.0)))
    assert err[0] > err[1] > err[2]
    assert err[1] <= 1e-6
