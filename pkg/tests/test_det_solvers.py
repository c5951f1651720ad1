import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from lqgdelay.det_solvers import (ConvergenceError, DivergenceError, forward_sweep,
                                  mean_system_residual, phi_from_forcing, solve_afbodde,
                                  solve_mean_case1, solve_phi, solve_riccati)
from lqgdelay.model import Dimensions, ModelSpec, validate_spec
from lqgdelay.oracle import tree_solve_hamiltonian

from conftest import case1_spec, delayed_spec


def _times(g):
    return np.arange(g.K + 1) * g.h


def test_riccati_linear_closed_form():
    spec = ModelSpec.scalar(1.0, 0.25, 0.25, R=0.7, Rtil=0.3, Nc=1.0, M=2.0)
    g = spec.grid(0.125)
    P = solve_riccati(spec, g).P[:, 0, 0]
    t = _times(g)
    # the last delta window sees Rtil = 0 past T
    r = np.where(t[:-1] < 0.75 - 1e-12, 1.0, 0.7)
    expected = 2.0 + np.append(np.cumsum((r * g.h)[::-1])[::-1], 0.0)
    assert np.allclose(P, expected, atol=1e-12)
    spec = ModelSpec.scalar(1.0, 0.25, 0.25, R=1.5, Nc=1.0, M=2.0)
    P = solve_riccati(spec, g).P[:, 0, 0]
    assert np.allclose(P, 2.0 + 1.5 * (1.0 - t), atol=1e-12)


def test_riccati_separable_closed_form():
    spec = ModelSpec.scalar(1.0, 0.25, 0.25, B=1.0, Nc=1.0, M=3.0)
    g = spec.grid(1 / 32)
    P = solve_riccati(spec, g).P[:, 0, 0]
    assert np.allclose(P, 3.0 / (1.0 + 3.0 * (1.0 - _times(g))), atol=1e-12)


def test_riccati_zero():
    spec = ModelSpec.scalar(1.0, 0.25, 0.25, Nc=1.0, M=0.0)
    assert not np.any(solve_riccati(spec, spec.grid(0.25)).P)


def test_riccati_divergence():
    spec = ModelSpec.scalar(1.0, 0.25, 0.25, A=40.0, R=1.0, Nc=1.0, M=1.0)
    with pytest.raises(DivergenceError):
        solve_riccati(spec, spec.grid(1 / 64))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_riccati_symmetric_psd_random(seed):
    r = np.random.default_rng(seed)
    n = 2
    X = r.normal(size=(n, n))
    Rm = X @ X.T
    spec = ModelSpec(Dimensions(n, 1, 1, 1), 1.0, 0.25, 0.25, A=r.normal(size=(n, n)),
                     B=r.normal(size=(n, 1)), R=Rm, Nc=np.eye(1), M=np.eye(n) * r.uniform(0, 2))
    assert validate_spec(spec).ok
    P = solve_riccati(spec, spec.grid(1 / 16)).P
    assert np.max(np.abs(P - np.transpose(P, (0, 2, 1)))) == 0.0
    assert min(np.linalg.eigvalsh(Ps)[0] for Ps in P) >= -1e-10


def test_phi_zero_cases():
    spec = case1_spec(eta_hist=0.0)
    g = spec.grid(1 / 16)
    P = solve_riccati(spec, g)
    assert not np.any(solve_phi(spec, g, P, np.zeros(g.K)).phi)
    spec = case1_spec(Bhat=0.0)
    phi = solve_phi(spec, g, P, np.ones(g.K))
    assert not np.any(phi.phi)


def _phi_reference(A, B, Q, G, M, c, T):
    """Continuous Riccati and phi ODEs solved backward with a tight tolerance."""
    def rhs(t, z):
        P, phi = z
        return [-(2 * A * P + Q - P * B * G * B * P), -((A - B * G * B * P) * phi + P * c)]
    sol = solve_ivp(rhs, (T, 0.0), [M, 0.0], rtol=1e-12, atol=1e-13, dense_output=True)
    return sol.sol


def test_phi_first_order_against_ode():
    A, B, Q, G, M, c = 0.3, 1.0, 1.0, 1.0, 1.0, 0.7
    spec = ModelSpec.scalar(1.0, 0.25, 0.25, A=A, B=B, R=Q, Nc=1.0 / G, M=M)
    ref = _phi_reference(A, B, Q, G, M, c, 1.0)
    errs = []
    for h in (1 / 8, 1 / 16, 1 / 32, 1 / 64):
        g = spec.grid(h)
        sm = spec.sample(g)
        phi = phi_from_forcing(sm, solve_riccati(sm), np.full((g.K, 1), c))
        errs.append(abs(phi.phi[0, 0] - ref(0.0)[1]))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 1.6) & (ratios < 2.4)), ratios


def test_afbodde_trivial_costate():
    spec = delayed_spec(R=0.0, Rtil=0.0, M=0.0)
    g = spec.grid(1 / 16)
    sm = spec.sample(g)
    pair, rep = solve_afbodde(sm, mode="idiosyncratic")
    assert rep.converged and not np.any(pair.y())
    x = forward_sweep(sm, np.zeros((g.K, 1)), sm.a, sm.xi, sm.eta, sm.Btil[:g.K], None)
    assert np.allclose(pair.x(), x, atol=1e-14)


def test_afbodde_matches_riccati_without_delay_coupling():
    spec = case1_spec()
    g = spec.grid(1 / 16)
    pair, _ = solve_afbodde(spec, g, mode="idiosyncratic")
    P = solve_riccati(spec, g).P[:, 0, 0]
    assert np.max(np.abs(pair.y()[:g.K + 1, 0] - P * pair.x()[g.p:, 0])) <= 1e-6


def test_afbodde_matches_tree_mean():
    spec = delayed_spec(Atil=0.2, Btil=1.0)
    depth = 8
    sm = spec.sample(spec.grid(spec.T / depth))
    pair, rep = solve_afbodde(sm, mode="idiosyncratic")
    assert rep.converged and rep.damping < 0.5   # plain damping 0.5 diverges here
    sol = tree_solve_hamiltonian(sm, depth, None)
    assert np.max(np.abs(sol.mean("y")[:, 0] - pair.y()[:depth + 1, 0])) < 1e-9
    assert np.max(np.abs(sol.mean("x")[:, 0] - pair.x()[sm.grid.p:, 0])) < 1e-9


def test_afbodde_residual_and_zero_tail():
    spec = delayed_spec()
    g = spec.grid(1 / 16)
    sm = spec.sample(g)
    for mode, forcing in (("idiosyncratic", None), ("common", np.full((g.K, 1), 0.3))):
        pair, rep = solve_afbodde(sm, mode=mode, extra_forcing=forcing)
        assert rep.converged and rep.residual <= 1e-10
        assert np.all(pair.y()[g.K + 1:] == 0.0)
        assert abs(pair.y()[g.K, 0] - sm.M[0, 0] * pair.x()[-1, 0]) < 1e-9
        if mode == "idiosyncratic":
            a, xi, uh, lag = sm.a, sm.xi, sm.eta, sm.Btil[:g.K]
        else:
            a, xi, uh, lag = np.zeros(1), np.zeros((g.p, 1)), np.zeros((g.q, 1)), (sm.Btil + sm.Bhat)[:g.K]
        res = mean_system_residual(sm, pair.x(), pair.y(), pair.Eu[g.q:], a, xi, uh, lag, forcing)
        assert res <= 1e-9


def test_afbodde_nonconvergence_reports():
    spec = delayed_spec()
    with pytest.raises(ConvergenceError) as exc:
        solve_afbodde(spec, spec.grid(1 / 16), max_iter=3)
    assert exc.value.report.iterations == 3 and not exc.value.report.converged


def test_refinement_first_order():
    spec = delayed_spec()
    vals = [solve_afbodde(spec, spec.grid(h))[0].y()[0, 0] for h in (1 / 8, 1 / 16, 1 / 32)]
    ratio = abs(vals[0] - vals[1]) / abs(vals[1] - vals[2])
    assert 1.6 <= ratio <= 2.4


def test_mean_case1_reductions():
    spec = case1_spec(Bhat=0.0)
    g = spec.grid(1 / 16)
    pair, rep, m, P, phi = solve_mean_case1(spec, g)
    assert np.allclose(pair.y()[:g.K + 1, 0], P.P[:, 0, 0] * pair.x()[g.p:, 0], atol=1e-12)
    pair, *_ = solve_mean_case1(case1_spec(M=0.0, R=0.0, Rtil=0.0), g)
    assert not np.any(pair.y())


def test_mean_case1_fixed_point_residual():
    spec = case1_spec()
    g = spec.grid(1 / 16)
    sm = spec.sample(g)
    pair, rep, m, P, phi = solve_mean_case1(sm)
    res = mean_system_residual(sm, pair.x(), pair.y(), pair.Eu[g.q:], sm.a, sm.xi, sm.eta,
                               (sm.Btil + sm.Bhat)[:g.K], None)
    assert rep.converged and res <= 1e-9
