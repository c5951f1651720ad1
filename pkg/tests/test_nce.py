import io

import numpy as np
import pytest

from lqgdelay import rng
from lqgdelay.det_solvers import solve_mean_case1
from lqgdelay.model import load_spec, shipped_models
from lqgdelay.nce import NceField, compute_m0_case1, compute_m0_general
from lqgdelay.oracle import tree_solve_hamiltonian

from conftest import case1_spec, delayed_spec


def test_zero_coupling_gives_zero_field():
    spec = delayed_spec(Bhat=0.0)
    f = compute_m0_general(spec, spec.grid(1 / 16))
    assert not np.any(f.m0)
    f1 = compute_m0_case1(case1_spec(Bhat=0.0), spec.grid(1 / 16))
    assert not np.any(f1.m0)


def test_zero_costate_leaves_history_only():
    spec = delayed_spec(M=0.0, R=0.0, Rtil=0.0)
    g = spec.grid(1 / 16)
    f = compute_m0_general(spec, g)
    assert np.allclose(f.m0[:g.q], 0.8 * -0.2)
    assert not np.any(f.m0[g.q:])


def test_field_is_sum_of_parts_and_reads_history(dspec):
    g = dspec.grid(1 / 16)
    f = compute_m0_general(dspec, g)
    assert np.array_equal(f.m0, f.sigma1 + f.sigma2)
    assert np.allclose(f.m0[:g.q], 0.8 * -0.2)
    assert all(r.converged for r in f.reports)


def test_case1_and_general_routes_agree():
    for kw in ({}, {"Bhat": -0.6, "A": -0.3}, {"M": 0.0, "eta_hist": 0.7}):
        spec = case1_spec(**kw)
        g = spec.grid(1 / 16)
        d = np.max(np.abs(compute_m0_case1(spec, g).m0 - compute_m0_general(spec, g).m0))
        assert d <= 1e-8


def test_case1_route_rejects_delayed_drift(dspec):
    with pytest.raises(ValueError):
        compute_m0_case1(dspec, dspec.grid(1 / 16))


def test_terminal_window_with_zero_terminal_weight():
    # the control paired with y_K = M x_K = 0 vanishes, so the population term it drives vanishes
    spec = case1_spec(M=0.0)
    g = spec.grid(1 / 16)
    pair, *_ = solve_mean_case1(spec, g)
    assert pair.y()[g.K, 0] == 0.0
    assert pair.Eu[-1, 0] == 0.0


def test_m0_matches_population_walking_the_tree(dspec):
    """Agents draw Rademacher increments and play the exact tree controls."""
    depth = 8
    sm = dspec.sample(dspec.grid(dspec.T / depth))
    g = sm.grid
    f = compute_m0_general(sm)
    sol = tree_solve_hamiltonian(sm, depth, f)
    N = 4096
    bits = (rng.signs(11, [0], np.arange(N), np.arange(depth), 1)[0, :, :, 0] > 0).astype(int)
    idx = np.zeros(N, dtype=int)
    for s in range(depth - g.q):
        u = sol.u[s][idx, 0]
        est = 0.8 * u.mean()
        se = 0.8 * u.std(ddof=1) / np.sqrt(N)
        assert abs(est - f.m0[s + g.q, 0]) <= 3 * se + 1e-9
        idx = idx * 2 + bits[:, s]
    # the exact tree average is the field itself
    means = sol.mean("u")[:, 0]
    assert np.allclose(0.8 * means[:depth - g.q], f.m0[g.q:, 0], atol=1e-9)


def test_shipped_models_picard():
    for path in shipped_models().values():
        spec = load_spec(path)
        f = compute_m0_general(spec, spec.grid(min(spec.delta, spec.theta) / 4))
        for r in f.reports:
            assert r.converged and r.residual <= 1e-9 and r.iterations <= 500


def test_csv_and_zero():
    spec = delayed_spec()
    g = spec.grid(1 / 8)
    f = compute_m0_general(spec, g)
    buf = io.StringIO()
    f.to_csv(buf)
    rows = buf.getvalue().splitlines()
    assert rows[0] == "t,m0_0,sigma1_0,sigma2_0" and len(rows) == g.K + 1
    assert not np.any(NceField.zero(g, 1).m0)
