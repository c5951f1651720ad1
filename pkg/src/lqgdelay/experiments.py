"""Population-size sweeps: convergence rates and the epsilon-Nash scan."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .det_solvers import solve_mean_case1
from .model import ModelSpec, SampledModel, SpecStructureError
from .nce import NceField
from .population_sim import (NoiseConfig, control_average_error, deviation_run, exact_moments,
                             path_costs, rate_fit, simulate_population, sup_node_mean)
from .strategies import Strategy, _check_case2, case1_feedback, case2_strategy

CTRL_WINDOW = (-1.3, -0.7)
COST_WINDOW = (-0.8, -0.3)
DEFAULT_NS = (4, 8, 16, 32, 64)


def open_loop_field(sm: SampledModel, strategy: Strategy) -> NceField:
    """Population term of an open-loop strategy played by everyone."""
    g = sm.grid
    u = np.vstack([strategy.eta, strategy.offset])       # nodes -q..K-1
    m0 = np.einsum("sij,sj->si", sm.Bhat[:g.K], u[:g.K])
    return NceField(g, m0, m0.copy(), np.zeros_like(m0))


def limit_strategy(sm: SampledModel, form: str = "discrete") -> tuple[Strategy, NceField]:
    """Decentralised strategy and its consistent field for Case I or Case II specs."""
    if sm.is_case1():
        _, rep, m, P, phi = solve_mean_case1(sm)
        field_ = NceField(sm.grid, m, m.copy(), np.zeros_like(m), (rep,))
        return case1_feedback(sm, P, phi, form), field_
    try:
        _check_case2(sm)
    except SpecStructureError:
        raise SpecStructureError("rate experiments need a Case I or Case II spec") from None
    st = case2_strategy(sm)
    return st, open_loop_field(sm, st)


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    """Mean over everything and SE from the replication axis (axis 0)."""
    per_rep = v.reshape(v.shape[0], -1).mean(axis=1)
    se = float(per_rep.std(ddof=1) / np.sqrt(len(per_rep))) if len(per_rep) > 1 else 0.0
    return float(per_rep.mean()), se


def default_bump(sm: SampledModel, amp: float = 0.1) -> np.ndarray:
    return np.full((sm.grid.K, sm.dims.k), amp)


@dataclass
class ScanResult:
    kind: str
    Ns: list
    columns: list
    rows: list
    slopes: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])


def _fit(Ns, vals):
    vals = np.asarray(vals, float)
    if np.any(vals <= 0) or len(vals) < 3:
        return (float("nan"), float("nan"), float("nan"))
    return rate_fit(Ns, vals)


def rate_scan(spec: ModelSpec | SampledModel, h: float | None = None, Ns=DEFAULT_NS,
              reps: int = 2000, seed: int = 0, form: str = "discrete",
              bump: np.ndarray | None = None) -> ScanResult:
    """Monte Carlo sweep over N of the approximation errors between the N-agent and limit systems.

    Per N: control-average MSE, E|x_cent - x_dec|^2, E|l - p|^2 for agent 0
    deviating by ``bump``, the cost gap |E(C_cent - C_dec)| and the pathwise
    E|C_cent - C_dec|; plus the exact cost gap from moment propagation.
    """
    sm = spec if isinstance(spec, SampledModel) else spec.sample(spec.grid(h if h else min(spec.delta, spec.theta) / 4))
    g = sm.grid
    Ns = list(Ns)
    if len(Ns) < 3 or any(b <= a for a, b in zip(Ns, Ns[1:])) or Ns[0] < 2:
        raise ValueError("N list must be strictly increasing, >= 3 entries, N >= 2")
    st, f = limit_strategy(sm, form)
    dev = st.perturbed(default_bump(sm) if bump is None else bump)
    cols = ["N", "ctrl_mse", "ctrl_mse_se", "state_gap", "state_gap_se", "dev_gap", "dev_gap_se",
            "cost_gap", "cost_gap_se", "cost_gap_path", "cost_gap_path_se", "cost_gap_exact"]
    rows = []
    for N in Ns:
        nz = NoiseConfig(seed, N, reps)
        cent = simulate_population(sm, g, st, nz, "centralized")
        dec = simulate_population(sm, g, st, nz, "decentralized", f)
        ae = control_average_error(cent, f)
        sg = sup_node_mean(np.sum((cent.states - dec.states) ** 2, axis=-1))
        cc = path_costs(sm, g, cent.states, cent.controls)
        cd = path_costs(sm, g, dec.states, dec.controls)
        lit, lit_se = _mean_se(cc - cd)
        pw, pw_se = _mean_se(np.abs(cc - cd))
        l_run, p_states, _ = deviation_run(sm, g, nz, 0, dev, st, f)
        dg = sup_node_mean(np.sum((l_run.states[:, 0] - p_states) ** 2, axis=-1)[:, None])
        ex = exact_moments(sm, g, st, N, f)
        rows.append([N, ae.value, ae.stderr, sg[0], sg[1], dg[0], dg[1], abs(lit), lit_se,
                     pw, pw_se, ex.cost_gap])
    res = ScanResult("rate-scan", Ns, cols, rows)
    for name in ("ctrl_mse", "state_gap", "dev_gap", "cost_gap", "cost_gap_path", "cost_gap_exact"):
        res.slopes[name] = _fit(Ns, res.column(name))
    inside = lambda s, w: bool(w[0] <= s <= w[1])
    res.checks = {"ctrl_mse": inside(res.slopes["ctrl_mse"][0], CTRL_WINDOW),
                  "state_gap": inside(res.slopes["state_gap"][0], CTRL_WINDOW),
                  "dev_gap": inside(res.slopes["dev_gap"][0], CTRL_WINDOW)}
    res.extra = {"cost_gap_in_window": inside(res.slopes["cost_gap"][0], COST_WINDOW),
                 "cost_gap_exact_in_window": inside(res.slopes["cost_gap_exact"][0], COST_WINDOW)}
    return res


def deviation_family(sm: SampledModel, st: Strategy, amplitudes=(0.1, 0.3),
                     gain_scales=(0.8, 1.2)) -> list[tuple[str, Strategy]]:
    """Open-loop bumps (constant up/down, ramp) and feedback-gain rescalings."""
    g = sm.grid
    k = sm.dims.k
    ramp = (np.arange(g.K) * g.h / g.T)[:, None] * np.ones(k)
    out = []
    for amp in amplitudes:
        out.append((f"const+{amp}", st.perturbed(np.full((g.K, k), amp))))
        out.append((f"const-{amp}", st.perturbed(np.full((g.K, k), -amp))))
        out.append((f"ramp{amp}", st.perturbed(amp * ramp)))
    if not st.is_open_loop():
        for sc in gain_scales:
            out.append((f"gain*{sc}", st.perturbed(None, sc)))
    return out


def nash_scan(spec: ModelSpec | SampledModel, h: float | None = None, Ns=DEFAULT_NS,
              reps: int = 2000, seed: int = 0, form: str = "discrete",
              amplitudes=(0.1, 0.3), gain_scales=(0.8, 1.2)) -> ScanResult:
    """Observed epsilon(N) over a deviation family and its 1/sqrt(N) envelope.

    ``eps_obs(N) = max(0, max_dev [C_0(ubar) - C_0(u_dev)])`` for agent 0
    with common random numbers.  The certificate is
    ``E|C(ubar) - C_lim(ubar)| + max_dev E|C(u_dev) - C_lim(u_dev)|``, which
    bounds the cost advantage any listed deviation can have; the envelope
    constant is ``C_hat = max_N sqrt(N) * certificate(N)``.
    """
    sm = spec if isinstance(spec, SampledModel) else spec.sample(spec.grid(h if h else min(spec.delta, spec.theta) / 4))
    g = sm.grid
    Ns = list(Ns)
    if len(Ns) < 3 or any(b <= a for a, b in zip(Ns, Ns[1:])) or Ns[0] < 2:
        raise ValueError("N list must be strictly increasing, >= 3 entries, N >= 2")
    st, f = limit_strategy(sm, form)
    fam = deviation_family(sm, st, amplitudes, gain_scales)
    cols = ["N", "eps_obs", "eps_obs_se", "certificate", "best_deviation"]
    rows, raw = [], []
    for N in Ns:
        nz = NoiseConfig(seed, N, reps)
        base, p_states, p_controls = deviation_run(sm, g, nz, 0, st, st, f)
        c_base = path_costs(sm, g, base.states[:, 0], base.controls[:, 0])
        c_lim = path_costs(sm, g, p_states, p_controls)
        cert_base = float(np.mean(np.abs(c_base - c_lim)))
        best, best_se, best_name, cert_dev = -np.inf, 0.0, "", 0.0
        for name, dev in fam:
            l_run, pd_states, pd_controls = deviation_run(sm, g, nz, 0, dev, st, f)
            c_dev = path_costs(sm, g, l_run.states[:, 0], l_run.controls[:, 0])
            c_dlim = path_costs(sm, g, pd_states, pd_controls)
            gain, se = _mean_se(c_base - c_dev)
            if gain > best:
                best, best_se, best_name = gain, se, name
            cert_dev = max(cert_dev, float(np.mean(np.abs(c_dev - c_dlim))))
        raw.append(best)
        rows.append([N, max(0.0, best), best_se, cert_base + cert_dev, best_name])
    res = ScanResult("nash-scan", Ns, cols, rows)
    eps = res.column("eps_obs").astype(float)
    cert = res.column("certificate").astype(float)
    C_hat = float(np.max(np.sqrt(Ns) * cert))
    env = C_hat / np.sqrt(np.asarray(Ns, float))
    res.extra = {"C_hat": C_hat, "envelope": env.tolist(), "raw_best": raw}
    res.slopes["certificate"] = _fit(Ns, cert)
    res.checks = {"non_increasing": bool(np.all(np.diff(eps) <= 0.0)),
                  "bounded": bool(np.all(eps <= env))}
    return res
