"""Decentralised strategies.

Every strategy here is affine in the agent's own current state,
``u_s = offset_s - gain_s @ x_s`` for nodes ``0..K-1``, with the control
history ``eta`` on nodes ``-q..-1``.  Open-loop paths have zero gain.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial import Polynomial

from .det_solvers import PhiPath, RiccatiSolution
from .model import ModelSpec, SampledModel, SpecStructureError
from .timegrid import DelayedPath, PathRangeError, TimeGrid, control_path

KINDS = ("feedback_case1", "openloop_path", "history")


@dataclass(frozen=True)
class Strategy:
    kind: str
    grid: TimeGrid
    gain: np.ndarray    # (K, k, n)
    offset: np.ndarray  # (K, k)
    eta: np.ndarray     # (q, k)
    meta: dict | None = None

    def control(self, s: int, x: np.ndarray) -> np.ndarray:
        """Control at node ``s`` for states ``x`` of shape ``(..., n)``."""
        if s < 0:
            return np.broadcast_to(self.eta[s + self.grid.q], x.shape[:-1] + self.eta.shape[1:])
        return self.offset[s] - x @ self.gain[s].T

    def is_open_loop(self) -> bool:
        return not np.any(self.gain)

    def path(self) -> DelayedPath:
        if not self.is_open_loop():
            raise ValueError("feedback strategy has no state-independent path")
        return control_path(self.grid, self.eta, self.offset)

    def perturbed(self, bump: np.ndarray | None = None, gain_scale: float = 1.0) -> "Strategy":
        """Deviation: extra open-loop term ``bump`` (K, k) and/or scaled feedback gain."""
        off = self.offset if bump is None else self.offset + np.asarray(bump).reshape(self.offset.shape)
        return replace(self, gain=self.gain * gain_scale, offset=off)

    def to_json(self) -> dict:
        return {"kind": self.kind, "grid": self.grid.to_dict(), "gain": self.gain.tolist(),
                "offset": self.offset.tolist(), "eta": self.eta.tolist(), "meta": self.meta or {}}

    def to_csv(self, fh) -> None:
        self.path().to_csv(fh)


def _sampled(spec, grid) -> SampledModel:
    return spec if isinstance(spec, SampledModel) else spec.sample(grid)


def history_strategy(spec: ModelSpec | SampledModel, grid: TimeGrid | None = None,
                     value=None) -> Strategy:
    """Constant open-loop control (default zero) with the spec's history attached."""
    sm = _sampled(spec, grid)
    g = sm.grid
    k, n = sm.dims.k, sm.dims.n
    off = np.zeros((g.K, k)) if value is None else np.broadcast_to(np.asarray(value, float), (g.K, k)).copy()
    return Strategy("history", g, np.zeros((g.K, k, n)), off, sm.eta.copy())


def openloop_strategy(spec, grid, controls) -> Strategy:
    sm = _sampled(spec, grid)
    g = sm.grid
    u = np.asarray(controls, dtype=float).reshape(g.K, sm.dims.k)
    return Strategy("openloop_path", g, np.zeros((g.K, sm.dims.k, sm.dims.n)), u, sm.eta.copy())


def strategy_from_ypath(spec: ModelSpec | SampledModel, grid: TimeGrid | None,
                        ypath) -> Strategy:
    """Open-loop control ``u_s = -(Nc_s+Nctil_{s+q})^{-1}(B_s^T y_s + Btil_{s+q}^T y_{s+q})``.

    ``ypath`` is a deterministic costate on nodes ``0..K+q`` or more (a
    costate :class:`DelayedPath` or an array); the conditional expectation of
    the anticipated value is the path value itself.
    """
    sm = _sampled(spec, grid)
    g = sm.grid
    K, q = g.K, g.q
    if isinstance(ypath, DelayedPath):
        y = ypath.segment(0, K + q)
    else:
        y = np.asarray(ypath, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if len(y) < K + q + 1:
            raise PathRangeError(f"costate needs nodes 0..{K + q} (anticipation pad), got {len(y)}")
    rhs = np.einsum("sjk,sj->sk", sm.B[:K], y[:K]) + np.einsum("sjk,sj->sk", sm.Btil[q:K + q], y[q:K + q])
    u = -np.einsum("skl,sl->sk", sm.Ginv, rhs)
    return openloop_strategy(sm, g, u)


def stationarity_residual(spec, grid, strategy: Strategy, ypath) -> float:
    sm = _sampled(spec, grid)
    g = sm.grid
    K, q = g.K, g.q
    y = ypath.segment(0, K + q) if isinstance(ypath, DelayedPath) else np.asarray(ypath).reshape(-1, sm.dims.n)
    u = strategy.offset
    r = (np.einsum("skl,sl->sk", sm.Nsum, u) + np.einsum("sjk,sj->sk", sm.B[:K], y[:K])
         + np.einsum("sjk,sj->sk", sm.Btil[q:K + q], y[q:K + q]))
    return float(np.max(np.abs(r))) if r.size else 0.0


def case1_feedback(spec: ModelSpec | SampledModel, P: RiccatiSolution, phi: PhiPath,
                   form: str = "continuous") -> Strategy:
    """Riccati state feedback for Case I.

    ``form="continuous"`` evaluates ``u = -(Nc_s + Nctil_{s+q})^{-1} B_s^T (P_s x + phi_s)``
    at the node.  ``form="discrete"`` is the feedback that is exactly optimal
    for the Euler-discretised problem,
    ``u = -Gamma^{-1} B^T (P_{s+1}(I+hA) x + h P_{s+1} m_s + phi_{s+1})``; the two
    differ by O(h).
    """
    sm = _sampled(spec, P.grid)
    g = sm.grid
    K, h = g.K, g.h
    n, k = sm.dims.n, sm.dims.k
    gain = np.zeros((K, k, n))
    off = np.zeros((K, k))
    for s in range(K):
        B = sm.B[s]
        if form == "continuous":
            GB = sm.Ginv[s] @ B.T
            gain[s] = GB @ P.P[s]
            off[s] = -GB @ phi.phi[s]
        elif form == "discrete":
            S = P.P[s + 1]
            Gam = sm.Nsum[s] + h * B.T @ S @ B
            GB = np.linalg.solve(Gam, B.T)
            gain[s] = GB @ S @ (np.eye(n) + h * sm.A[s])
            off[s] = -GB @ (h * S @ phi.forcing[s] + phi.phi[s + 1])
        else:
            raise ValueError(f"unknown feedback form {form!r}")
    return Strategy("feedback_case1", g, gain, off, sm.eta.copy(), {"form": form})


def feedback_json(strategy: Strategy, P: RiccatiSolution, phi: PhiPath) -> str:
    return json.dumps({"kind": strategy.kind, "form": (strategy.meta or {}).get("form"),
                       "grid": strategy.grid.to_dict(), "P": P.P.tolist(), "phi": phi.phi.tolist()})


# --- Case II: explicit anticipated adjoint ------------------------------------

@dataclass(frozen=True)
class Case2Costate:
    """Costate of the Case II adjoint, exact per grid cell.

    ``cells[j]`` is a polynomial in the local offset ``r = t - t_j`` valid on
    ``[t_j, t_{j+1}]``.  ``ybar`` holds node values ``0..K+p`` (zero past K).
    """
    grid: TimeGrid
    cells: tuple
    ybar: np.ndarray
    zbar_zero: bool = True

    def at_time(self, t: float) -> float:
        g = self.grid
        if t > g.T + 1e-14:
            return 0.0
        if t >= g.T - 1e-14:
            return float(self.ybar[g.K])
        j = int(np.floor(t / g.h + 1e-12))
        j = min(max(j, 0), g.K - 1)
        return float(self.cells[j](t - j * g.h))

    def to_csv(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(["t", "ybar", "ybar_shift_delta", "zbar"])
        g = self.grid
        for s in range(g.K + 1):
            t = s * g.h
            w.writerow([repr(t), repr(float(self.ybar[s])), repr(float(self.ybar[s + g.p])), "0.0"])


def _check_case2(sm: SampledModel) -> None:
    d = sm.dims
    if d.n != 1 or d.k != 1:
        raise SpecStructureError("Case II is implemented for scalar state and control")
    if sm.grid.p != sm.grid.q:
        raise SpecStructureError("Case II needs delta = theta")
    if np.any(sm.A) or np.any(sm.B):
        raise SpecStructureError("Case II needs A = B = 0")


def case2_solve(spec: ModelSpec | SampledModel, grid: TimeGrid | None = None) -> Case2Costate:
    """Solve ``dy = -Atil_{t+delta} y_{t+delta} dt``, ``y_T = -M``, zero past T.

    The solution is deterministic (``z = 0``).  Integration is exact for
    coefficients that are constant on grid cells: on cell ``j``,
    ``y(t_j + r) = y(t_{j+1}) + Atil_{j+p} * int_r^h y(t_{j+p} + s) ds``.
    """
    sm = _sampled(spec, grid)
    _check_case2(sm)
    g = sm.grid
    K, p, h = g.K, g.p, g.h
    Mterm = -float(sm.M[0, 0])
    zero = Polynomial([0.0])
    cells: list = [None] * (K + p)
    for j in range(K, K + p):
        cells[j] = zero
    y_right = Mterm
    for j in range(K - 1, -1, -1):
        # the anticipated coefficient is evaluated at t + delta, like the costate it multiplies
        a_t = float(sm.Atil[j + p][0, 0]) if j + p < K else 0.0
        ahead = cells[j + p] if j + p < K else zero
        Q = ahead.integ()
        cells[j] = Polynomial([y_right + a_t * Q(h)]) - a_t * Q
        y_right = float(cells[j](0.0))
    ybar = np.zeros(K + p + 1)
    ybar[K] = Mterm
    for j in range(K):
        ybar[j] = cells[j](0.0)
    return Case2Costate(g, tuple(cells[:K]), ybar)


def case2_closed_form(t: float, T: float, delta: float, Atil: float) -> float | None:
    """Closed-form constant-coefficient expressions for ybar at time ``t`` (M = 1), up to T - 3 delta."""
    if t > T + 1e-12:
        return 0.0
    if t >= T - delta - 1e-12:
        return -1.0
    if t >= T - 2 * delta - 1e-12:
        return -1.0 - Atil * (T - delta - t)
    if t >= T - 3 * delta - 1e-12:
        r = T - 2 * delta - t
        return -1.0 - Atil * delta - Atil * r * (1.0 + 0.5 * Atil * r)
    return None


def case2_strategy(spec: ModelSpec | SampledModel, grid: TimeGrid | None = None,
                   costate: Case2Costate | None = None) -> Strategy:
    sm = _sampled(spec, grid)
    costate = case2_solve(sm) if costate is None else costate
    return strategy_from_ypath(sm, sm.grid, costate.ybar)
