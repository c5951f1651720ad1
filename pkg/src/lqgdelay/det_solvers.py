"""Deterministic backward/forward solvers on the grid.

All solvers work on the Euler discretisation of the controlled dynamics,

    x_{s+1} = x_s + h [A_s x_s + Atil_s x_{s-p} + B_s u_s + C_s u_{s-q} + f_s],

and the exact optimality system of the discretised quadratic cost:

    y_K = M x_K,   y_j = 0 for j > K,
    y_s = (I + h A_s)^T y_{s+1} + h Atil_{s+p}^T y_{s+p+1} + h (R_s + Rtil_{s+p}) x_s,
    (Nc_s + Nctil_{s+q}) u_s + B_s^T y_{s+1} + Btil_{s+q}^T y_{s+q+1} = 0.

The control at node ``s`` pairs with the one-step-ahead costate; see
:func:`control_costate`.  The lag coefficient ``C`` is ``Btil`` for the
individual problem and ``Btil + Bhat`` once the population coupling is
folded in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec, SampledModel
from .timegrid import DelayedPath, TimeGrid, costate_path, state_path

PICARD_DAMPING = 0.5
PICARD_TOL = 1e-10
PICARD_MAX_ITER = 500
BLOWUP = 1e12
GROWTH = 1e3
MIN_DAMPING = 1 / 64


class DivergenceError(ArithmeticError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, report: "PicardReport"):
        super().__init__(msg)
        self.report = report


@dataclass
class PicardReport:
    iterations: int
    residual: float
    converged: bool
    trace: list = field(default_factory=list)
    damping: float = PICARD_DAMPING

    def to_json(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual,
                "converged": self.converged, "damping": self.damping, "trace": list(self.trace)}


@dataclass(frozen=True)
class RiccatiSolution:
    grid: TimeGrid
    P: np.ndarray  # (K+1, n, n)

    def at(self, s: int) -> np.ndarray:
        return self.P[s]


@dataclass(frozen=True)
class PhiPath:
    grid: TimeGrid
    phi: np.ndarray  # (K+1, n)
    forcing: np.ndarray  # (K, n), the m0 values that drove it


@dataclass(frozen=True)
class MeanPair:
    """Mean state on nodes -p..K and mean costate on 0..K+pad (zero tail)."""
    grid: TimeGrid
    Ex: DelayedPath
    Ey: DelayedPath
    Eu: np.ndarray  # (q + K, k): control on nodes -q..K-1

    def x(self) -> np.ndarray:
        return self.Ex.values

    def y(self) -> np.ndarray:
        return self.Ey.values


def _as_sampled(spec, grid) -> SampledModel:
    return spec if isinstance(spec, SampledModel) else spec.sample(grid)


# --- discrete building blocks -------------------------------------------------

def controls_from_costate(sm: SampledModel, y: np.ndarray) -> np.ndarray:
    """Stationarity: u_s = -(Nc_s+Nctil_{s+q})^{-1}(B_s^T y_{s+1} + Btil_{s+q}^T y_{s+q+1}), s=0..K-1.

    ``y`` holds nodes 0..K+pad along axis 0 (extra trailing axes allowed
    before the vector axis are not supported; pass one path).
    """
    K, q = sm.grid.K, sm.grid.q
    rhs = np.einsum("sjk,sj->sk", sm.B[:K], y[1:K + 1]) \
        + np.einsum("sjk,sj->sk", sm.Btil[q:K + q], y[q + 1:K + q + 1])
    return -np.einsum("skl,sl->sk", sm.Ginv, rhs)


def forward_sweep(sm: SampledModel, u: np.ndarray, a: np.ndarray, xi: np.ndarray,
                  uhist: np.ndarray, lag_coef: np.ndarray, forcing: np.ndarray | None) -> np.ndarray:
    """Euler forward pass; ``u`` on nodes 0..K-1, returns x on nodes -p..K."""
    g = sm.grid
    K, p, q, h = g.K, g.p, g.q, g.h
    n = sm.dims.n
    x = np.zeros((p + K + 1, n))
    x[:p] = xi
    x[p] = a
    for s in range(K):
        ulag = uhist[s] if s < q else u[s - q]
        drift = sm.A[s] @ x[p + s] + sm.Atil[s] @ x[s] + sm.B[s] @ u[s] + lag_coef[s] @ ulag
        if forcing is not None:
            drift = drift + forcing[s]
        x[p + s + 1] = x[p + s] + h * drift
        if not np.all(np.isfinite(x[p + s + 1])) or np.max(np.abs(x[p + s + 1])) > BLOWUP:
            raise DivergenceError(f"forward sweep blew up at node {s + 1}")
    return x


def backward_sweep(sm: SampledModel, x: np.ndarray) -> np.ndarray:
    """Backward pass for the costate given the state on nodes -p..K."""
    g = sm.grid
    K, p, h = g.K, g.p, g.h
    n = sm.dims.n
    y = np.zeros((K + g.pad + 1, n))
    y[K] = sm.M @ x[p + K]
    for s in range(K - 1, -1, -1):
        y[s] = (y[s + 1] + h * (sm.A[s].T @ y[s + 1] + sm.Atil[s + p].T @ y[s + p + 1])
                + h * sm.Qx[s] @ x[p + s])
    return y


def mean_system_residual(sm: SampledModel, x: np.ndarray, y: np.ndarray, u: np.ndarray,
                         a, xi, uhist, lag_coef, forcing=None) -> float:
    """Sup-norm residual of the discrete forward, backward and stationarity equations."""
    g = sm.grid
    K, p, q, h = g.K, g.p, g.q, g.h
    res = [np.max(np.abs(x[:p] - xi)) if p else 0.0, np.max(np.abs(x[p] - a))]
    for s in range(K):
        ulag = uhist[s] if s < q else u[s - q]
        drift = sm.A[s] @ x[p + s] + sm.Atil[s] @ x[s] + sm.B[s] @ u[s] + lag_coef[s] @ ulag
        if forcing is not None:
            drift = drift + forcing[s]
        res.append(np.max(np.abs(x[p + s + 1] - x[p + s] - h * drift)))
        back = (y[s + 1] + h * (sm.A[s].T @ y[s + 1] + sm.Atil[s + p].T @ y[s + p + 1])
                + h * sm.Qx[s] @ x[p + s])
        res.append(np.max(np.abs(y[s] - back)))
        stat = sm.Nsum[s] @ u[s] + sm.B[s].T @ y[s + 1] + sm.Btil[s + q].T @ y[s + q + 1]
        res.append(np.max(np.abs(stat)))
    res.append(np.max(np.abs(y[K] - sm.M @ x[p + K])))
    res.append(np.max(np.abs(y[K + 1:])) if g.pad else 0.0)
    return float(max(res))


def control_costate(y: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """One-step-ahead costate ``yhat_s = y_{s+1}`` on nodes 0..K+pad.

    With ``yhat`` the discrete stationarity reads exactly like the
    continuous one: ``(Nc+Nctil_{s+q}) u_s + B_s^T yhat_s + Btil_{s+q}^T yhat_{s+q} = 0``.
    """
    out = np.zeros_like(y)
    out[:-1] = y[1:]
    out[grid.K:] = 0.0
    return out


# --- Riccati decoupling (Case I) ----------------------------------------------

def solve_riccati(spec: ModelSpec | SampledModel, grid: TimeGrid | None = None) -> RiccatiSolution:
    """Backward Riccati recursion of the Euler-discretised LQ problem.

    ``P_s = (I+hA)^T [S - h S B Gamma^{-1} B^T S] (I+hA) + h (R_s + Rtil_{s+p})``
    with ``S = P_{s+1}`` and ``Gamma = Nc_s + Nctil_{s+q} + h B^T S B``: the
    first-order-consistent scheme whose feedback is exactly optimal for the
    discrete problem.  Delay couplings Atil/Btil are ignored (Case I).
    """
    sm = _as_sampled(spec, grid)
    g = sm.grid
    K, h = g.K, g.h
    n = sm.dims.n
    I = np.eye(n)
    P = np.zeros((K + 1, n, n))
    P[K] = 0.5 * (sm.M + sm.M.T)
    for s in range(K - 1, -1, -1):
        S = P[s + 1]
        B = sm.B[s]
        Gam = sm.Nsum[s] + h * B.T @ S @ B
        core = S - h * S @ B @ np.linalg.solve(Gam, B.T @ S)
        F = I + h * sm.A[s]
        Ps = F.T @ core @ F + h * sm.Qx[s]
        Ps = 0.5 * (Ps + Ps.T)
        if not np.all(np.isfinite(Ps)) or np.max(np.abs(Ps)) > BLOWUP:
            raise DivergenceError(f"Riccati solution diverged at node {s}")
        P[s] = Ps
    return RiccatiSolution(g, P)


def _closed_loop_terms(sm: SampledModel, P: RiccatiSolution, s: int):
    h = sm.grid.h
    S = P.P[s + 1]
    B = sm.B[s]
    Gam = sm.Nsum[s] + h * B.T @ S @ B
    F = np.eye(sm.dims.n) + h * sm.A[s]
    return S, B, Gam, F


def forcing_from_lagged_costate(sm: SampledModel, ylag: np.ndarray) -> np.ndarray:
    """m_s = -Bhat_s (Nc+Nctil)^{-1}_{s-q} B_{s-q}^T ylag_s for s >= q; Bhat_s eta_{s-q} below q."""
    g = sm.grid
    K, q = g.K, g.q
    m = np.zeros((K, sm.dims.n))
    for s in range(K):
        if s < q:
            m[s] = sm.Bhat[s] @ sm.eta[s]
        else:
            m[s] = -sm.Bhat[s] @ sm.Ginv[s - q] @ sm.B[s - q].T @ ylag[s]
    return m


def phi_from_forcing(sm: SampledModel, P: RiccatiSolution, m: np.ndarray) -> PhiPath:
    g = sm.grid
    K, h = g.K, g.h
    n = sm.dims.n
    phi = np.zeros((K + 1, n))
    for s in range(K - 1, -1, -1):
        S, B, Gam, F = _closed_loop_terms(sm, P, s)
        L = F.T @ (np.eye(n) - h * S @ B @ np.linalg.solve(Gam, B.T))
        phi[s] = L @ (phi[s + 1] + h * S @ m[s])
    return PhiPath(g, phi, np.array(m, dtype=float))


def solve_phi(spec: ModelSpec | SampledModel, grid: TimeGrid | None, P: RiccatiSolution,
              ymean_lagged: np.ndarray) -> PhiPath:
    """Backward recursion for the Riccati offset ``phi`` with ``phi_K = 0``.

    ``ymean_lagged[s]`` (s = 0..K-1) is the mean costate that sets the
    population's lagged control, i.e. the value paired with ``u_{s-q}``;
    entries for ``s < q`` are ignored because the history ``eta`` applies.
    """
    sm = _as_sampled(spec, grid)
    ylag = np.asarray(ymean_lagged, dtype=float).reshape(sm.grid.K, sm.dims.n)
    return phi_from_forcing(sm, P, forcing_from_lagged_costate(sm, ylag))


def case1_mean_given_forcing(sm: SampledModel, P: RiccatiSolution, phi: PhiPath,
                             m: np.ndarray, a=None):
    """Mean state/control/costate under the exact discrete Riccati feedback."""
    g = sm.grid
    K, p, h = g.K, g.p, g.h
    n, k = sm.dims.n, sm.dims.k
    x = np.zeros((p + K + 1, n))
    x[:p] = sm.xi
    x[p] = sm.a if a is None else a
    u = np.zeros((K, k))
    for s in range(K):
        S, B, Gam, F = _closed_loop_terms(sm, P, s)
        u[s] = -np.linalg.solve(Gam, B.T @ (S @ F @ x[p + s] + h * S @ m[s] + phi.phi[s + 1]))
        x[p + s + 1] = F @ x[p + s] + h * (B @ u[s] + m[s])
    y = np.zeros((K + g.pad + 1, n))
    y[:K + 1] = np.einsum("sij,sj->si", P.P, x[p:]) + phi.phi
    return x, u, y


# --- Picard solver for the mean forward-backward systems ----------------------

def picard_solve(sm: SampledModel, a, xi, uhist, lag_coef, forcing=None, *,
                 damping: float = PICARD_DAMPING, tol: float = PICARD_TOL,
                 max_iter: int = PICARD_MAX_ITER, y0=None):
    """Damped Picard iteration on the costate.

    Each sweep computes controls from the current costate, runs the state
    forward, then runs the costate backward (anticipated values come from
    nodes already visited in the same pass).  When the update grows by
    ``GROWTH`` over the best one seen, the damping is halved and the
    iteration restarts from ``y0``, down to ``MIN_DAMPING``; ``max_iter``
    bounds the total number of sweeps.  Returns ``(x, u, y, report)``.
    """
    g = sm.grid
    start = np.zeros((g.K + g.pad + 1, sm.dims.n)) if y0 is None else np.array(y0, dtype=float)
    trace = []
    lam = damping
    while True:
        y = start.copy()
        best = np.inf
        restart = False
        while len(trace) < max_iter:
            u = controls_from_costate(sm, y)
            x = forward_sweep(sm, u, a, xi, uhist, lag_coef, forcing)
            y_new = backward_sweep(sm, x)
            upd = float(np.max(np.abs(y_new - y)))
            trace.append(upd)
            if upd <= tol:
                y = y_new
                u = controls_from_costate(sm, y)
                x = forward_sweep(sm, u, a, xi, uhist, lag_coef, forcing)
                return x, u, y, PicardReport(len(trace), upd, True, trace, lam)
            if not np.isfinite(upd) or upd > GROWTH * best:
                restart = True
                break
            best = min(best, upd)
            y = y + lam * (y_new - y)
        if not restart:
            raise ConvergenceError(f"Picard iteration did not converge in {max_iter} iterations "
                                   f"(last update {trace[-1]:.3e})",
                                   PicardReport(len(trace), trace[-1], False, trace, lam))
        if lam / 2 < MIN_DAMPING:
            raise ConvergenceError("Picard iteration diverged",
                                   PicardReport(len(trace), trace[-1], False, trace, lam))
        lam /= 2


def _mean_pair(sm: SampledModel, x, u, y, uhist) -> MeanPair:
    g = sm.grid
    return MeanPair(g, state_path(g, x[:g.p], x[g.p:]), costate_path(g, y),
                    np.vstack([uhist, u]))


def solve_afbodde(spec: ModelSpec | SampledModel, grid: TimeGrid | None = None,
                  extra_forcing: np.ndarray | None = None, mode: str = "idiosyncratic", *,
                  a=None, xi=None, eta=None, **picard_kw):
    """Mean-level anticipated forward-backward delay system.

    ``mode="idiosyncratic"``: idiosyncratic mean system, driven by the spec's initial
    data and control history, no population term.

    ``mode="common"``: the common-noise component under zero common noise;
    zero initial data and history, lag coefficient ``Btil + Bhat``, plus
    ``extra_forcing`` (the population term built from an idiosyncratic solve).

    ``a``, ``xi``, ``eta`` override the initial data of either mode.
    Returns ``(MeanPair, PicardReport)``.
    """
    sm = _as_sampled(spec, grid)
    g = sm.grid
    n, k = sm.dims.n, sm.dims.k
    if mode == "idiosyncratic":
        a0 = sm.a if a is None else a
        xi0 = sm.xi if xi is None else xi
        uh = sm.eta if eta is None else eta
        lag = sm.Btil[:g.K]
    elif mode == "common":
        a0 = np.zeros(n) if a is None else a
        xi0 = np.zeros((g.p, n)) if xi is None else xi
        uh = np.zeros((g.q, k)) if eta is None else eta
        lag = sm.Btil[:g.K] + sm.Bhat[:g.K]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if extra_forcing is not None:
        extra_forcing = np.asarray(extra_forcing, dtype=float).reshape(g.K, n)
    x, u, y, rep = picard_solve(sm, np.asarray(a0, float), np.asarray(xi0, float).reshape(g.p, n),
                                np.asarray(uh, float).reshape(g.q, k), lag, extra_forcing, **picard_kw)
    return _mean_pair(sm, x, u, y, np.asarray(uh, float).reshape(g.q, k)), rep


def solve_mean_case1(spec: ModelSpec | SampledModel, grid: TimeGrid | None = None, *,
                     damping: float = PICARD_DAMPING, tol: float = PICARD_TOL,
                     max_iter: int = PICARD_MAX_ITER):
    """Mean of the Case I representative-agent system with its own lagged population term.

    Damped Picard on the population forcing ``m``: for the current ``m`` the
    mean is obtained through the Riccati decoupling ``y = P x + phi``; the
    new forcing is ``Bhat_s`` times the mean control at ``s - q`` (history
    ``eta`` below ``q``).  Returns ``(MeanPair, PicardReport, m, P, phi)``.
    """
    sm = _as_sampled(spec, grid)
    g = sm.grid
    K, q = g.K, g.q
    n = sm.dims.n
    P = solve_riccati(sm)
    m = np.zeros((K, n))
    for s in range(min(q, K)):
        m[s] = sm.Bhat[s] @ sm.eta[s]
    trace = []
    for it in range(1, max_iter + 1):
        phi = phi_from_forcing(sm, P, m)
        x, u, y = case1_mean_given_forcing(sm, P, phi, m)
        m_new = m.copy()
        for s in range(q, K):
            m_new[s] = sm.Bhat[s] @ u[s - q]
        upd = float(np.max(np.abs(m_new - m))) if K else 0.0
        trace.append(upd)
        if not np.isfinite(upd) or upd > BLOWUP:
            raise ConvergenceError("Case I Picard diverged", PicardReport(it, upd, False, trace))
        if upd <= tol:
            m = m_new
            break
        m = m + damping * (m_new - m)
    else:
        raise ConvergenceError(f"Case I Picard did not converge in {max_iter} iterations",
                               PicardReport(max_iter, trace[-1], False, trace))
    phi = phi_from_forcing(sm, P, m)
    x, u, y = case1_mean_given_forcing(sm, P, phi, m)
    return _mean_pair(sm, x, u, y, sm.eta), PicardReport(it, trace[-1], True, trace), m, P, phi
