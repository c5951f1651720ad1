import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lqgdelay.det_solvers import PhiPath, RiccatiSolution, solve_mean_case1
from lqgdelay.model import ModelSpec, SpecStructureError
from lqgdelay.oracle import tree_solve_hamiltonian
from lqgdelay.strategies import (case1_feedback, case2_closed_form, case2_solve, case2_strategy, feedback_json,
                                 history_strategy, stationarity_residual, strategy_from_ypath)
from lqgdelay.timegrid import PathRangeError

from conftest import case1_spec, case2_spec, delayed_spec


def _fixed(sm, P, phi):
    g = sm.grid
    n = sm.dims.n
    return (RiccatiSolution(g, np.full((g.K + 1, n, n), P)),
            PhiPath(g, np.full((g.K + 1, n), phi), np.zeros((g.K, n))))


def test_zero_costate_gives_zero_control(dspec):
    g = dspec.grid(1 / 16)
    s = strategy_from_ypath(dspec, g, np.zeros(g.K + g.q + 1))
    assert s.is_open_loop()
    assert np.all(s.offset == 0.0)
    assert np.allclose(s.eta, -0.2)


def test_zero_tail_effect():
    spec = delayed_spec(B=0.0, Btil=1.0, Nc=1.0, Nctil=0.5)
    g = spec.grid(1 / 16)
    K, q = g.K, g.q
    c = 0.7
    y = np.zeros(K + q + 1)
    y[:K + 1] = c
    u = strategy_from_ypath(spec, g, y).offset[:, 0]
    s = np.arange(K)
    # Nctil is zero from T on, so the weight drops to Nc when s + q reaches K
    expected = np.where(s + q < K, -c / 1.5, np.where(s + q == K, -c / 1.0, 0.0))
    assert np.allclose(u, expected, atol=1e-15)


def test_missing_pad_is_range_error(dspec):
    g = dspec.grid(1 / 16)
    with pytest.raises(PathRangeError):
        strategy_from_ypath(dspec, g, np.zeros(g.K + 1))


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_costate_map_is_linear(alpha, beta, seed):
    spec = delayed_spec()
    g = spec.grid(1 / 8)
    rng = np.random.default_rng(seed)
    y1, y2 = rng.normal(size=(2, g.K + g.q + 1))
    f = lambda y: strategy_from_ypath(spec, g, y).offset
    assert np.allclose(f(alpha * y1 + beta * y2), alpha * f(y1) + beta * f(y2), atol=1e-12)


def test_feedback_zero_riccati(c1spec):
    sm = c1spec.sample(c1spec.grid(1 / 8))
    P, phi = _fixed(sm, 0.0, 0.0)
    for form in ("continuous", "discrete"):
        s = case1_feedback(sm, P, phi, form)
        x = np.linspace(-2, 2, 9)[:, None]
        assert all(np.all(s.control(k, x) == 0.0) for k in range(sm.grid.K))


def test_feedback_unit_riccati():
    spec = case1_spec(B=1.0, Nc=0.5, Nctil=0.5)
    sm = spec.sample(spec.grid(1 / 8))
    P, phi = _fixed(sm, 1.0, 0.0)
    s = case1_feedback(sm, P, phi, "continuous")
    x = np.linspace(-2, 2, 9)[:, None]
    # the weight falls back to Nc alone once s + q reaches K
    for k in range(sm.grid.K - sm.grid.q):
        assert np.allclose(s.control(k, x), -x, atol=1e-15)
    with pytest.raises(ValueError):
        case1_feedback(sm, P, phi, "implicit")


def test_feedback_json_roundtrip(c1spec):
    g = c1spec.grid(1 / 8)
    _, _, _, P, phi = solve_mean_case1(c1spec, g)
    s = case1_feedback(c1spec.sample(g), P, phi)
    d = json.loads(feedback_json(s, P, phi))
    assert d["form"] == "continuous"
    assert np.allclose(d["P"], P.P)
    with pytest.raises(ValueError):
        s.path()


def test_discrete_feedback_reproduces_tree_controls(c1spec):
    sm = c1spec.sample(c1spec.grid(1 / 8))
    _, _, m, P, phi = solve_mean_case1(sm)
    sol = tree_solve_hamiltonian(sm, sm.grid.K, m)
    s = case1_feedback(sm, P, phi, "discrete")
    for k in range(sm.grid.K):
        assert np.allclose(s.control(k, sol.x[k]), sol.u[k], atol=1e-12)


def test_continuous_feedback_first_order_in_h():
    spec = ModelSpec.scalar(0.25, 0.125, 0.125, A=0.1, B=1.0, Bhat=0.8, sigma=0.5, R=1.0,
                            Rtil=0.5, Nc=1.0, Nctil=0.5, M=1.0, a=1.0, xi_hist=0.5, eta_hist=-0.2)
    errs = []
    for h in (1 / 8, 1 / 16, 1 / 32):
        sm = spec.sample(spec.grid(h))
        _, _, m, P, phi = solve_mean_case1(sm)
        sol = tree_solve_hamiltonian(sm, sm.grid.K, m)
        s = case1_feedback(sm, P, phi, "continuous")
        errs.append(max(np.max(np.abs(s.control(k, sol.x[k]) - sol.u[k])) for k in range(sm.grid.K)))
    assert 1.6 <= errs[0] / errs[1] <= 2.4
    assert 1.6 <= errs[1] / errs[2] <= 2.4


def test_history_strategy(dspec):
    g = dspec.grid(1 / 8)
    s = history_strategy(dspec, g, 0.3)
    assert np.all(s.offset == 0.3)
    assert np.allclose(s.control(-1, np.zeros((4, 1))), -0.2)
    buf = io.StringIO()
    s.to_csv(buf)
    assert buf.getvalue().count("\n") == g.K + g.q + 1


def test_perturbed_adds_bump_and_scales_gain(c1spec):
    g = c1spec.grid(1 / 8)
    _, _, _, P, phi = solve_mean_case1(c1spec, g)
    s = case1_feedback(c1spec.sample(g), P, phi)
    d = s.perturbed(np.ones((g.K, 1)), 2.0)
    assert np.allclose(d.offset, s.offset + 1.0)
    assert np.allclose(d.gain, 2.0 * s.gain)


# --- Case II ------------------------------------------------------------------

def test_case2_closed_forms(c2spec):
    g = c2spec.grid(1 / 16)
    cs = case2_solve(c2spec, g)
    worst, checked = 0.0, 0
    for s in range(g.K + 1):
        t = s * g.h
        cf = case2_closed_form(t + g.delta, g.T, g.delta, 0.5)
        if cf is not None:
            worst = max(worst, abs(cs.at_time(t + g.delta) - cf))
            checked += 1
    assert checked >= 3 * g.p
    assert worst <= 1e-12


def test_case2_cell_degrees(c2spec):
    g = c2spec.grid(1 / 16)
    cs = case2_solve(c2spec, g)
    for j, cell in enumerate(cs.cells):
        k = (g.K - 1 - j) // g.p + 1        # 1 on the last delta-interval
        assert len(cell.trim(tol=1e-14).coef) - 1 == k - 1
    assert cs.zbar_zero


def test_case2_terminal_window(c2spec):
    g = c2spec.grid(1 / 16)
    cs = case2_solve(c2spec, g)
    assert np.all(cs.ybar[g.K - g.p:g.K + 1] == -1.0)
    assert np.all(cs.ybar[g.K + 1:] == 0.0)
    assert cs.at_time(g.T + 0.1) == 0.0


def test_case2_control_formula(c2spec):
    g = c2spec.grid(1 / 16)
    cs = case2_solve(c2spec, g)
    s = case2_strategy(c2spec, g, cs)
    u = s.offset[:, 0]
    idx = np.arange(g.K - g.q)
    assert np.allclose(u[idx], -1.0 / 1.5 * cs.ybar[idx + g.p], atol=1e-15)
    assert stationarity_residual(c2spec, g, s, cs.ybar) <= 1e-12


def test_case2_structure_error():
    spec = case2_spec(A=0.1)
    with pytest.raises(SpecStructureError):
        case2_solve(spec, spec.grid(1 / 8))
    spec = ModelSpec.scalar(2.0, 0.5, 0.25, Atil=0.5, Btil=1.0, Nc=1.0, M=1.0)
    with pytest.raises(SpecStructureError):
        case2_solve(spec, spec.grid(1 / 8))


def test_case2_csv(c2spec):
    g = c2spec.grid(1 / 8)
    buf = io.StringIO()
    case2_solve(c2spec, g).to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,ybar,ybar_shift_delta,zbar"
    assert len(lines) == g.K + 2


def test_stationarity_residual_of_mean_costate(c1spec):
    g = c1spec.grid(1 / 16)
    pair, *_ = solve_mean_case1(c1spec, g)
    # the mean control pairs with the one-step-ahead costate; the tail is zero
    y = np.vstack([pair.y()[1:], np.zeros((1, 1))])
    s = strategy_from_ypath(c1spec, g, y)
    assert np.allclose(s.offset, pair.Eu[g.q:], atol=1e-12)
    assert stationarity_residual(c1spec, g, s, y) <= 1e-9
