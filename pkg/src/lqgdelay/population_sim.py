"""Euler-Maruyama simulation of the N-agent and limit systems, costs and rates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .model import ModelSpec, SampledModel
from .nce import NceField
from .strategies import Strategy
from .timegrid import DelayedPath, TimeGrid, control_path, state_path


class NumericBlowUpError(ArithmeticError):
    def __init__(self, node: int):
        super().__init__(f"state became non-finite or exceeded 1e12 at node {node}")
        self.node = node


@dataclass(frozen=True)
class NoiseConfig:
    seed: int
    N_agents: int
    replications: int
    first_replication: int = 0

    def rep_ids(self) -> np.ndarray:
        return np.arange(self.first_replication, self.first_replication + self.replications)


@dataclass
class PopulationPaths:
    """Simulated paths; leading axes are (replication, agent).

    ``states`` covers nodes -p..K, ``controls`` nodes -q..K-1, and
    ``common`` holds the W0 increments on steps 0..K-1.
    """
    sm: SampledModel
    states: np.ndarray
    controls: np.ndarray
    common: np.ndarray
    mode: str
    agent_ids: np.ndarray

    @property
    def grid(self) -> TimeGrid:
        return self.sm.grid

    def state_path(self, r: int, i: int) -> DelayedPath:
        g = self.grid
        return state_path(g, self.states[r, i, :g.p], self.states[r, i, g.p:])

    def control_path(self, r: int, i: int) -> DelayedPath:
        g = self.grid
        return control_path(g, self.controls[r, i, :g.q], self.controls[r, i, g.q:])


@dataclass(frozen=True)
class CostValue:
    J: float
    breakdown: dict

    @classmethod
    def from_parts(cls, parts: dict) -> "CostValue":
        return cls(float(sum(parts.values())), {k: float(v) for k, v in parts.items()})


def _sampled(spec, grid) -> SampledModel:
    return spec if isinstance(spec, SampledModel) else spec.sample(grid)


def _stack_strategies(strategies, N: int, g: TimeGrid):
    if isinstance(strategies, Strategy):
        strategies = [strategies]
    strategies = list(strategies)
    if len(strategies) not in (1, N):
        raise ValueError(f"need 1 or {N} strategies, got {len(strategies)}")
    gain = np.stack([s.gain for s in strategies])      # (N|1, K, k, n)
    off = np.stack([s.offset for s in strategies])     # (N|1, K, k)
    eta = np.stack([s.eta for s in strategies])        # (N|1, q, k)
    return gain, off, eta


def simulate_population(spec: ModelSpec | SampledModel, grid: TimeGrid | None,
                        strategies: Strategy | Sequence[Strategy], noise: NoiseConfig,
                        mode: str = "centralized", m0: NceField | np.ndarray | None = None,
                        agent_ids: Sequence[int] | None = None) -> PopulationPaths:
    """Simulate ``noise.N_agents`` agents over ``noise.replications`` replications.

    ``mode="centralized"``: the population term is the realised
    ``1/(N-1) sum_{j != i} Bhat_s u^j_{s-q}`` (zero when N = 1).
    ``mode="decentralized"``: it is the deterministic field ``m0``.

    Agent ``i`` draws its idiosyncratic noise from stream ``agent_ids[i]``
    (default ``i``), so paths for a given agent id do not depend on N.
    """
    sm = _sampled(spec, grid)
    g = sm.grid
    K, p, q, h = g.K, g.p, g.q, g.h
    n, k, md, dd = sm.dims.n, sm.dims.k, sm.dims.m, sm.dims.d
    N, R = noise.N_agents, noise.replications
    ids = np.arange(N) if agent_ids is None else np.asarray(agent_ids)
    if len(ids) != N:
        raise ValueError("agent_ids must have N_agents entries")
    reps = noise.rep_ids()
    if mode == "decentralized":
        if m0 is None:
            raise ValueError("decentralized mode needs m0")
        m0v = m0.m0 if isinstance(m0, NceField) else np.asarray(m0, float).reshape(K, n)
    elif mode != "centralized":
        raise ValueError(f"unknown mode {mode!r}")
    gain, off, eta = _stack_strategies(strategies, N, g)
    sq = np.sqrt(h)

    x = np.empty((R, N, p + K + 1, n))
    x[:, :, :p] = sm.xi
    x[:, :, p] = sm.a
    u = np.empty((R, N, q + K, k))
    u[:, :, :q] = eta[None]
    common = np.zeros((R, K, dd))
    for s in range(K):
        xs = x[:, :, p + s]
        u[:, :, q + s] = off[None, :, s] - np.einsum("rin,ikn->rik", xs, gain[:, s])
        ulag = u[:, :, s]
        if mode == "centralized":
            if N > 1:
                tot = ulag.sum(axis=1, keepdims=True)
                coupling = ((tot - ulag) / (N - 1)) @ sm.Bhat[s].T
            else:
                coupling = 0.0
        else:
            coupling = m0v[s]
        drift = (xs @ sm.A[s].T + x[:, :, s] @ sm.Atil[s].T + u[:, :, q + s] @ sm.B[s].T
                 + ulag @ sm.Btil[s].T + coupling)
        dW = sq * rng.normals(noise.seed, reps, ids, [s], md)[:, :, 0]
        dW0 = sq * rng.normals(noise.seed, reps, [rng.COMMON], [s], dd)[:, :, 0]
        common[:, s] = dW0[:, 0]
        nxt = xs + h * drift + dW @ sm.sigma[s].T + dW0 @ sm.sigma0[s].T
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > 1e12:
            raise NumericBlowUpError(s + 1)
        x[:, :, p + s + 1] = nxt
    return PopulationPaths(sm, x, u, common, mode, ids)


def cost_parts(spec: ModelSpec | SampledModel, grid: TimeGrid | None,
               states: np.ndarray, controls: np.ndarray) -> dict:
    """Left-endpoint quadrature of the quadratic cost, vectorised over leading axes.

    ``states`` has nodes -p..K on axis -2, ``controls`` nodes -q..K-1.
    Returns a dict of arrays, one per cost component.
    """
    sm = _sampled(spec, grid)
    g = sm.grid
    K, p, q, h = g.K, g.p, g.q, g.h
    xs = states[..., p:p + K, :]
    xd = states[..., 0:K, :]
    us = controls[..., q:q + K, :]
    ud = controls[..., 0:K, :]
    quad = lambda v, W: np.einsum("...si,sij,...sj->...", v, W, v)
    return {
        "running_state": 0.5 * h * quad(xs, sm.R[:K]),
        "running_delayed_state": 0.5 * h * quad(xd, sm.Rtil[:K]),
        "running_control": 0.5 * h * quad(us, sm.Nc[:K]),
        "running_delayed_control": 0.5 * h * quad(ud, sm.Nctil[:K]),
        "terminal": 0.5 * np.einsum("...i,ij,...j->...", states[..., p + K, :], sm.M, states[..., p + K, :]),
    }


def path_costs(spec, grid, states, controls) -> np.ndarray:
    return sum(cost_parts(spec, grid, states, controls).values())


def evaluate_cost(spec: ModelSpec | SampledModel, grid: TimeGrid | None,
                  state: DelayedPath, control: DelayedPath) -> CostValue:
    sm = _sampled(spec, grid)
    g = sm.grid
    xs = state.segment(-g.p, g.K)
    us = control.segment(-g.q, g.K - 1)
    return CostValue.from_parts(cost_parts(sm, g, xs, us))


def deviation_run(spec: ModelSpec | SampledModel, grid: TimeGrid | None, noise: NoiseConfig,
                  i: int, u_dev: Strategy, others: Strategy, m0: NceField):
    """Agent ``i`` plays ``u_dev`` against ``others``; also the limit run of ``u_dev``.

    Both runs use agent ``i``'s noise stream.  Returns
    ``(centralized PopulationPaths, limit states (R, p+K+1, n), limit controls)``.
    """
    sm = _sampled(spec, grid)
    N = noise.N_agents
    strat = [others] * N
    strat[i] = u_dev
    cent = simulate_population(sm, sm.grid, strat, noise, "centralized")
    lim = simulate_population(sm, sm.grid, u_dev, NoiseConfig(noise.seed, 1, noise.replications,
                                                               noise.first_replication),
                              "decentralized", m0, agent_ids=[i])
    return cent, lim.states[:, 0], lim.controls[:, 0]


@dataclass(frozen=True)
class AverageError:
    value: float          # sup over nodes
    per_node: np.ndarray  # (K,)
    stderr: float         # standard error at the maximising node
    node: int


def control_average_error(paths: PopulationPaths, m0: NceField | np.ndarray) -> AverageError:
    """sup_s E|1/(N-1) sum_{j != i} Bhat_s u^j_{s-q} - m0_s|^2, pooled over agents i."""
    sm, g = paths.sm, paths.grid
    K = g.K
    N = paths.states.shape[1]
    m0v = m0.m0 if isinstance(m0, NceField) else np.asarray(m0)
    lag = paths.controls[:, :, :K]                       # u_{s-q}, s = 0..K-1
    if N > 1:
        others = (lag.sum(axis=1, keepdims=True) - lag) / (N - 1)
    else:
        others = lag
    avg = np.einsum("sab,rjsb->rjsa", sm.Bhat[:K], others)
    err = np.sum((avg - m0v[None, None]) ** 2, axis=-1)  # (R, N, K)
    per_rep = err.mean(axis=1)                            # agents are exchangeable
    per_node = per_rep.mean(axis=0)
    j = int(np.argmax(per_node))
    se = float(per_rep[:, j].std(ddof=1) / np.sqrt(len(per_rep))) if len(per_rep) > 1 else 0.0
    return AverageError(float(per_node[j]), per_node, se, j)


def sup_node_mean(values: np.ndarray) -> tuple[float, float]:
    """sup over the node axis (last) of the mean over replications (axis 0).

    Extra middle axes (agents) are averaged first.  Returns (value, stderr).
    """
    v = values.reshape(values.shape[0], -1, values.shape[-1]).mean(axis=1)
    means = v.mean(axis=0)
    j = int(np.argmax(means))
    se = float(v[:, j].std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(means[j]), se


def rate_fit(Ns, values):
    """Least squares of log(value) on log(N): returns (slope, intercept, r^2)."""
    Ns = np.asarray(Ns, dtype=float)
    vals = np.asarray(values, dtype=float)
    if len(Ns) < 3 or len(Ns) != len(vals):
        raise ValueError("rate fit needs at least 3 (N, value) pairs")
    if np.any(vals <= 0) or np.any(Ns <= 0):
        raise ValueError("rate fit needs positive values")
    lx, ly = np.log(Ns), np.log(vals)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


@dataclass(frozen=True)
class ExactMoments:
    """Exact first and second moments of the symmetric N-agent system.

    Every agent plays the same affine strategy.  ``J_cent``/``J_dec`` are the
    expected discretised costs of one agent in the coupled and the limit
    system, ``ctrl_mse`` and ``state_gap`` the per-node versions of the
    control-average error and of E|x_cent - x_dec|^2 (common noise streams).
    """
    N: int
    J_cent: float
    J_dec: float
    ctrl_mse: np.ndarray
    state_gap: np.ndarray

    @property
    def cost_gap(self) -> float:
        return abs(self.J_cent - self.J_dec)


def exact_moments(spec: ModelSpec | SampledModel, grid: TimeGrid | None, strategy: Strategy,
                  N: int, m0: NceField | np.ndarray) -> ExactMoments:
    """Propagate mean and covariance of (centralized, decentralized) states.

    Agents are exchangeable, so the joint law is described by the mean, the
    own covariance ``D`` and the cross-agent covariance ``C`` over all nodes
    ``-p..K`` of the pair (x_cent, x_dec) of one agent.
    """
    sm = _sampled(spec, grid)
    g = sm.grid
    K, p, q, h = g.K, g.p, g.q, g.h
    n = sm.dims.n
    if N < 1:
        raise ValueError("N must be positive")
    m0v = m0.m0 if isinstance(m0, NceField) else np.asarray(m0, float).reshape(K, n)
    G, off, eta = strategy.gain, strategy.offset, strategy.eta
    w = 2 * n
    tot = (p + K + 1) * w
    mu = np.zeros(tot)
    D = np.zeros((tot, tot))
    C = np.zeros((tot, tot))
    blk = lambda node: slice((node + p) * w, (node + p + 1) * w)
    for r in range(-p, 0):
        mu[blk(r)] = np.tile(sm.xi[r + p], 2)
    mu[blk(0)] = np.tile(sm.a, 2)
    if N > 1:
        hat = lambda D_, C_: (D_ + (N - 2) * C_) / (N - 1)
    for s in range(K):
        a = np.zeros((w, tot))
        b = np.zeros((w, tot))
        c = np.zeros(w)
        F = np.eye(n) + h * sm.A[s] - h * sm.B[s] @ G[s]
        base = h * sm.B[s] @ off[s]
        for part in (0, 1):
            rows = slice(part * n, (part + 1) * n)
            col = lambda node: slice((node + p) * w + part * n, (node + p) * w + (part + 1) * n)
            a[rows, col(s)] += F
            a[rows, col(s - p)] += h * sm.Atil[s]
            c[rows] += base
            if s >= q:
                a[rows, col(s - q)] -= h * sm.Btil[s] @ G[s - q]
                c[rows] += h * sm.Btil[s] @ off[s - q]
            else:
                c[rows] += h * sm.Btil[s] @ eta[s]
            if part == 1:
                c[rows] += h * m0v[s]
            elif N > 1:
                if s >= q:
                    b[rows, col(s - q)] -= h * sm.Bhat[s] @ G[s - q]
                    c[rows] += h * sm.Bhat[s] @ off[s - q]
                else:
                    c[rows] += h * sm.Bhat[s] @ eta[s]
        S1 = h * sm.sigma[s] @ sm.sigma[s].T
        S0 = h * sm.sigma0[s] @ sm.sigma0[s].T
        new = blk(s + 1)
        mu[new] = a @ mu + b @ mu + c
        if N > 1:
            V = hat(D, C)
            W = ((N - 2) * D + ((N - 1) ** 2 - (N - 2)) * C) / (N - 1) ** 2
            colD = a @ D + b @ C
            colC = a @ C + b @ V
            varD = a @ D @ a.T + a @ C @ b.T + b @ C @ a.T + b @ V @ b.T
            varC = a @ C @ a.T + a @ V @ b.T + b @ V @ a.T + b @ W @ b.T
        else:
            colD, colC = a @ D, a @ C
            varD, varC = a @ D @ a.T, a @ C @ a.T
        varD = varD + np.tile(S1 + S0, (2, 2))
        varC = varC + np.tile(S0, (2, 2))
        D[new, :], D[:, new] = colD, colD.T
        C[new, :], C[:, new] = colC, colC.T
        D[new, new], C[new, new] = varD, varC

    def second(W, node, part, other=None):
        """E[x' W x'] for the part at ``node`` (state) of one agent."""
        sl = slice((node + p) * w + part * n, (node + p) * w + (part + 1) * n)
        m = mu[sl]
        return m @ W @ m + np.trace(W @ D[sl, sl])

    def ctrl_second(W, node, part):
        if node < 0:
            e = eta[node + q]
            return e @ W @ e
        sl = slice((node + p) * w + part * n, (node + p) * w + (part + 1) * n)
        m = off[node] - G[node] @ mu[sl]
        cov = G[node] @ D[sl, sl] @ G[node].T
        return m @ W @ m + np.trace(W @ cov)

    J = [0.0, 0.0]
    for part in (0, 1):
        tot_ = 0.0
        for s in range(K):
            tot_ += 0.5 * h * (second(sm.R[s], s, part) + second(sm.Rtil[s], s - p, part)
                               + ctrl_second(sm.Nc[s], s, part)
                               + ctrl_second(sm.Nctil[s], s - q, part))
        J[part] = tot_ + 0.5 * second(sm.M, K, part)

    ctrl = np.zeros(K)
    gap = np.zeros(K + 1)
    for s in range(K):
        r = s - q
        if r < 0:
            err = sm.Bhat[s] @ eta[r + q] - m0v[s]
            ctrl[s] = err @ err
            continue
        sl = slice((r + p) * w, (r + p) * w + n)
        err = sm.Bhat[s] @ (off[r] - G[r] @ mu[sl]) - m0v[s]
        if N > 1:
            V = (D[sl, sl] + (N - 2) * C[sl, sl]) / (N - 1)
        else:
            V = D[sl, sl]
        L = sm.Bhat[s] @ G[r]
        ctrl[s] = err @ err + np.trace(L @ V @ L.T)
    for s in range(K + 1):
        c_ = slice((s + p) * w, (s + p) * w + n)
        d_ = slice((s + p) * w + n, (s + p + 1) * w)
        dm = mu[c_] - mu[d_]
        gap[s] = dm @ dm + np.trace(D[c_, c_] - D[c_, d_] - D[d_, c_] + D[d_, d_])
    return ExactMoments(N, float(J[0]), float(J[1]), ctrl, gap)
