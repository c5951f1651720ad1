import json

import numpy as np
import pytest

from lqgdelay.det_solvers import solve_afbodde, solve_riccati
from lqgdelay.model import AssumptionViolation, ModelSpec
from lqgdelay.oracle import (ScenarioTree, brute_force_optimize, decomposition_check,
                             stationarity_residuals, tree_cost, tree_solve_hamiltonian)

from conftest import delayed_spec, random_scalar_spec


def _small(**kw):
    base = dict(A=0.1, Atil=0.3, B=1.0, Btil=0.2, Bhat=0.8, sigma=0.5, R=1.0, Rtil=0.5,
                Nc=1.0, Nctil=0.5, M=1.0, a=1.0, xi_hist=0.5, eta_hist=-0.2)
    base.update(kw)
    return ModelSpec.scalar(0.5, 0.25, 0.25, **base)


def test_tree_shape_and_increments():
    t = ScenarioTree(3, 0.25, 1, 1)
    assert t.branching == 4 and t.node_count() == 1 + 4 + 16 + 64
    inc_i, inc_0 = t.increments()
    for inc in (inc_i, inc_0):
        assert np.allclose(inc.mean(axis=0), 0.0)
        assert np.allclose((inc ** 2).mean(axis=0), 0.25)
    assert np.allclose((inc_i * inc_0).mean(), 0.0)
    with pytest.raises(ValueError):
        ScenarioTree(9, 0.1, 1, 0)


def test_tree_projection_roundtrip():
    t = ScenarioTree(3, 0.25, 1, 1)
    i1, i2 = t.project(3, "idio"), t.project(3, "common")
    pairs = set(zip(i1.tolist(), i2.tolist()))
    assert len(pairs) == 64 and max(i1) == 7 and max(i2) == 7


def test_zero_weights_give_zero_costate():
    spec = _small(R=0.0, Rtil=0.0, M=0.0, Bhat=0.0)
    sol = tree_solve_hamiltonian(spec, 4)
    assert all(np.all(np.abs(u) <= 1e-15) for u in sol.u)
    assert all(np.all(np.abs(y) <= 1e-15) for y in sol.y)
    # forward path is driven by noise and histories alone
    x1 = sol.x[1][:, 0]
    h = 0.125
    drift = 0.1 * 1.0 + 0.3 * 0.5 + 1.0 * sol.u[0][0, 0] + 0.2 * -0.2
    assert np.allclose(np.sort(x1), 1.0 + h * drift + np.array([-0.5, 0.5]) * np.sqrt(h))


def test_depth_two_matches_riccati():
    spec = ModelSpec.scalar(1.0, 0.5, 0.5, A=0.3, B=1.0, sigma=0.5, R=1.0, Nc=1.0, M=2.0, a=1.0)
    sol = tree_solve_hamiltonian(spec, 2)
    P = solve_riccati(spec, spec.grid(0.5)).P[:, 0, 0]
    for s in range(3):
        assert np.allclose(sol.y[s], P[s] * sol.x[s], atol=1e-10)


def test_stationarity_depth_four():
    spec = _small()
    sol = tree_solve_hamiltonian(spec, 4)
    assert spec.grid(0.125).p == 2
    assert np.max(stationarity_residuals(sol, spec)) <= 1e-10
    assert sol.max_residual() <= 1e-10


def test_terminal_condition(dspec):
    sol = tree_solve_hamiltonian(dspec, 4)
    assert np.allclose(sol.y[-1], 1.0 * sol.x[-1], atol=1e-14)


def test_brute_force_agrees():
    rng = np.random.default_rng(7)
    for _ in range(3):
        spec = random_scalar_spec(rng, T=0.5, delta=0.25, theta=0.25)
        ham = tree_solve_hamiltonian(spec, 2)
        bf = brute_force_optimize(spec, 2)
        for a, b in zip(ham.u, bf.u):
            assert np.allclose(a, b, atol=1e-9)


def test_brute_force_zero_source():
    spec = _small(a=0.0, xi_hist=0.0, eta_hist=0.0, Bhat=0.0)
    bf = brute_force_optimize(spec, 4, None)
    # with zero data the tree is symmetric under flipping every increment, so the root control vanishes
    assert np.allclose(bf.u[0], 0.0, atol=1e-14)
    spec = _small(a=0.0, xi_hist=0.0, eta_hist=0.0, sigma=0.0)
    bf = brute_force_optimize(spec, 4, None)
    assert all(np.allclose(u, 0.0, atol=1e-14) for u in bf.u)


def test_brute_force_beats_random_perturbations():
    spec = _small()
    bf = brute_force_optimize(spec, 4)
    J0 = tree_cost(spec, 4, bf.u)
    assert J0 == pytest.approx(bf.residuals["cost"], rel=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(50):
        pert = [u + 0.1 * rng.normal(size=u.shape) for u in bf.u]
        assert tree_cost(spec, 4, pert) >= J0 - 1e-12


def test_brute_force_rejects_indefinite():
    spec = _small(Nc=-5.0, Nctil=0.0, R=0.0, Rtil=0.0)
    with pytest.raises(AssumptionViolation):
        brute_force_optimize(spec, 2)


def test_decomposition_trivial_split():
    spec = _small(Bhat=0.0)
    sm = spec.sample(spec.grid(0.125))
    r = decomposition_check(sm, 4, None, (sm.a, np.zeros(1), sm.xi, np.zeros_like(sm.xi)))
    assert r <= 1e-10


def test_decomposition_generic_and_common_noise():
    spec = _small(sigma0=0.3)
    sm = spec.sample(spec.grid(0.125))
    rng = np.random.default_rng(1)
    m0 = rng.normal(size=(4, 1))
    for _ in range(3):
        a1 = rng.normal(size=1)
        xi1 = rng.normal(size=sm.xi.shape)
        eta1 = rng.normal(size=sm.eta.shape)
        split = (a1, sm.a - a1, xi1, sm.xi - xi1, eta1, sm.eta - eta1)
        assert decomposition_check(sm, 4, m0, split) <= 1e-9
        assert decomposition_check(sm, 4, m0, split, include_common=True) <= 1e-9
    with pytest.raises(ValueError):
        decomposition_check(sm, 4, m0, (1.0, 2.0, 3.0))
    with pytest.raises(ValueError):
        decomposition_check(sm, 4, m0, (np.zeros(2), np.zeros(2), sm.xi, sm.xi))


def test_solution_is_linear_in_data():
    spec = _small(Bhat=0.0)
    m0 = np.linspace(0.1, 0.4, 4)[:, None]
    one = tree_solve_hamiltonian(spec, 4, m0)
    two = tree_solve_hamiltonian(_small(Bhat=0.0, sigma=0.0, a=2.0, xi_hist=1.0, eta_hist=-0.4), 4, 2 * m0)
    noise_free = tree_solve_hamiltonian(_small(Bhat=0.0, sigma=0.0), 4, m0)
    # doubling data and forcing doubles the noise-free part; the mean path is noise-free
    for a, b in zip(noise_free.y, two.y):
        assert np.allclose(b, 2 * a[:1], atol=1e-12)
    assert np.allclose(one.mean("y"), noise_free.mean("y"), atol=1e-12)


def test_martingale_property():
    spec = _small()
    sm = spec.sample(spec.grid(0.125))
    sol = tree_solve_hamiltonian(sm, 4)
    K, p, h = 4, sm.grid.p, sm.grid.h
    b = sol.tree.branching
    for s in range(K):
        nodes = len(sol.y[s])
        ey1 = sol.y[s + 1].reshape(nodes, b).mean(axis=1)
        eyp = sol.y[s + p + 1].reshape(nodes, -1).mean(axis=1) if s + p + 1 <= K else 0.0
        Q = sm.R[s, 0, 0] + (sm.Rtil[s + p, 0, 0] if s + p < K else 0.0)
        drift = sm.A[s, 0, 0] * ey1 + (sm.Atil[s + p, 0, 0] * eyp if s + p < K else 0.0) + Q * sol.x[s][:, 0]
        assert np.allclose(sol.y[s][:, 0] - ey1, h * drift, atol=1e-12)


def test_z_from_martingale_difference():
    spec = _small()
    sol = tree_solve_hamiltonian(spec, 4)
    z = sol.z()
    h = sol.tree.h
    inc, _ = sol.tree.increments()
    for s in range(4):
        ch = sol.y[s + 1].reshape(len(sol.y[s]), 2)
        rebuilt = ch.mean(axis=1, keepdims=True) + z[s][:, 0, 0][:, None] * inc[:, 0][None]
        assert np.allclose(rebuilt, ch, atol=1e-12)
    assert np.allclose(np.array(z[0]).ravel()[0], (sol.y[1][1, 0] - sol.y[1][0, 0]) / (2 * np.sqrt(h)))


def test_first_order_continuum_convergence():
    spec = ModelSpec.scalar(0.5, 0.125, 0.125, A=0.1, Atil=0.3, B=1.0, Btil=0.2, sigma=0.5, R=1.0,
                            Rtil=0.5, Nc=1.0, Nctil=0.5, M=1.0, a=1.0, xi_hist=0.5, eta_hist=-0.2)
    fine = [solve_afbodde(spec, spec.grid(h))[0].y()[0, 0] for h in (1 / 512, 1 / 1024)]
    ref = 2 * fine[1] - fine[0]
    errs = [abs(tree_solve_hamiltonian(spec, d).y[0][0, 0] - ref) for d in (4, 8)]
    assert 1.6 <= errs[0] / errs[1] <= 2.4


def test_json_dump(dspec):
    sol = tree_solve_hamiltonian(dspec, 4)
    d = json.loads(sol.to_json())
    assert d["depth"] == 4 and len(d["x"]) == 5 and len(d["u"]) == 4
    assert set(d["residuals"]) == {"dynamics", "stationarity", "adjoint"}


def test_depth_limits(dspec):
    with pytest.raises(ValueError):
        tree_solve_hamiltonian(dspec, 2)      # delay longer than the tree
    spec = delayed_spec().replace(T=2.0)
    with pytest.raises(ValueError):
        tree_solve_hamiltonian(spec, 16)
