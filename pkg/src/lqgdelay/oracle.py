"""Exact small-grid solver on a scenario tree.

Brownian increments are replaced by +-sqrt(h) per noise component, so
conditional expectations are finite averages over descendants and the
discrete optimality system of the representative agent is one sparse
linear system.  The brute-force route minimises the tree-discretised cost
directly over all node controls; both must give the same controls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import AssumptionViolation, ModelSpec, SampledModel
from .nce import NceField

MAX_DEPTH = 8
MAX_LEAVES = 1 << 16


class SolvabilityError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ScenarioTree:
    depth: int
    h: float
    m_bits: int   # idiosyncratic noise components carried by the tree
    d_bits: int   # common noise components carried by the tree

    def __post_init__(self):
        if self.depth < 1 or self.depth > MAX_DEPTH:
            raise ValueError(f"tree depth must be in 1..{MAX_DEPTH}")
        if self.branching ** self.depth > MAX_LEAVES:
            raise ValueError("tree too large")

    @property
    def branching(self) -> int:
        return 1 << (self.m_bits + self.d_bits)

    def size(self, s: int) -> int:
        return self.branching ** s

    def node_count(self) -> int:
        return sum(self.size(s) for s in range(self.depth + 1))

    def increments(self) -> tuple[np.ndarray, np.ndarray]:
        """Per child code: idiosyncratic (b, m_bits) and common (b, d_bits) increments."""
        b = self.branching
        codes = np.arange(b)
        ci, c0 = codes >> self.d_bits, codes & ((1 << self.d_bits) - 1)
        bits = lambda v, nb: (((v[:, None] >> np.arange(nb)) & 1) * 2.0 - 1.0) if nb else np.zeros((len(v), 0))
        sq = np.sqrt(self.h)
        return sq * bits(ci, self.m_bits), sq * bits(c0, self.d_bits)

    def ancestors(self, s: int, r: int) -> np.ndarray:
        """Index of the level-``r`` ancestor of every level-``s`` node (r <= s)."""
        return np.arange(self.size(s)) // self.branching ** (s - r)

    def project(self, s: int, keep: str) -> np.ndarray:
        """Map level-``s`` nodes to the idiosyncratic-only or common-only subtree."""
        b, db = self.branching, self.d_bits
        idx = np.arange(self.size(s))
        out = np.zeros_like(idx)
        digits = [(idx // b ** (s - 1 - lvl)) % b for lvl in range(s)]
        base = 1 << (self.m_bits if keep == "idio" else db)
        for dig in digits:
            part = dig >> db if keep == "idio" else dig & ((1 << db) - 1)
            out = out * base + part
        return out


@dataclass
class TreeSolution:
    tree: ScenarioTree
    x: list      # x[s]: (b^s, n), s = 0..K
    u: list      # u[s]: (b^s, k), s = 0..K-1
    y: list      # y[s]: (b^s, n), s = 0..K
    residuals: dict

    def z(self) -> list:
        """Martingale-difference coefficient ``z_s`` per node, (b^s, n, m_bits + d_bits)."""
        inc_i, inc_0 = self.tree.increments()
        inc = np.hstack([inc_i, inc_0])
        b = self.tree.branching
        out = []
        for s in range(self.tree.depth):
            ch = self.y[s + 1].reshape(len(self.y[s]), b, -1)
            dev = ch - ch.mean(axis=1, keepdims=True)
            out.append(np.einsum("ibn,bc->inc", dev, inc) / (b * self.tree.h))
        return out

    def mean(self, name: str) -> np.ndarray:
        return np.array([v.mean(axis=0) for v in getattr(self, name)])

    def max_residual(self) -> float:
        return float(max(self.residuals.values()))

    def to_json(self) -> str:
        return json.dumps({"depth": self.tree.depth, "h": self.tree.h,
                           "x": [v.tolist() for v in self.x], "u": [v.tolist() for v in self.u],
                           "y": [v.tolist() for v in self.y], "residuals": self.residuals})


def _prepare(spec, depth: int, m0, include_common: bool, idio: bool = True):
    if isinstance(spec, SampledModel):
        sm = spec
        if sm.grid.K != depth:
            raise ValueError("sampled model grid does not match depth")
    else:
        sm = spec.sample(spec.grid(spec.T / depth))
    g = sm.grid
    if g.p > depth or g.q > depth:
        raise ValueError("delays must not exceed the tree depth")
    tree = ScenarioTree(depth, g.h, sm.dims.m if idio else 0, sm.dims.d if include_common else 0)
    if m0 is None:
        mv = np.zeros((depth, sm.dims.n))
    elif isinstance(m0, NceField):
        mv = m0.m0
    else:
        mv = np.asarray(m0, float).reshape(depth, sm.dims.n)
    return sm, tree, mv


class _Layout:
    """Unknown ordering: x levels 1..K, then u levels 0..K-1, then y levels 0..K."""

    def __init__(self, tree: ScenarioTree, n: int, k: int):
        K = tree.depth
        self.n, self.k = n, k
        off = 0
        self.x = {}
        for s in range(1, K + 1):
            self.x[s] = off
            off += tree.size(s) * n
        self.u = {}
        for s in range(K):
            self.u[s] = off
            off += tree.size(s) * k
        self.y = {}
        for s in range(K + 1):
            self.y[s] = off
            off += tree.size(s) * n
        self.total = off

    def idx(self, var: str, s: int, nodes: np.ndarray) -> np.ndarray:
        width = self.n if var in "xy" else self.k
        base = getattr(self, var)[s]
        return base + nodes[:, None] * width + np.arange(width)[None, :]


class _Assembler:
    def __init__(self, total: int):
        self.rows, self.cols, self.vals = [], [], []
        self.total = total

    def add(self, eq_idx: np.ndarray, var_idx: np.ndarray, mat: np.ndarray, weight: float = 1.0):
        """Add ``weight * mat @ var`` to equations: eq_idx (nodes, r), var_idx (nodes, c)."""
        if not np.any(mat):
            return
        r = np.repeat(eq_idx[:, :, None], var_idx.shape[1], axis=2)
        c = np.repeat(var_idx[:, None, :], eq_idx.shape[1], axis=1)
        v = np.broadcast_to(weight * mat, r.shape)
        self.rows.append(r.ravel())
        self.cols.append(c.ravel())
        self.vals.append(v.ravel())

    def matrix(self) -> sp.csr_matrix:
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.total, self.total))


def _solve_tree(sm: SampledModel, tree: ScenarioTree, mv: np.ndarray, a, xi, eta,
                use_sigma: bool = True, use_sigma0: bool = True) -> TreeSolution:
    g = sm.grid
    K, p, q, h = g.K, g.p, g.q, g.h
    n, k = sm.dims.n, sm.dims.k
    b = tree.branching
    lay = _Layout(tree, n, k)
    asm = _Assembler(lay.total)
    rhs = np.zeros(lay.total)
    inc_i, inc_0 = tree.increments()
    I = np.eye(n)

    def eq_rows(var, s):
        return lay.idx(var, s, np.arange(tree.size(s)))

    # Equation rows reuse the unknown numbering: the forward equation for the
    # child at level s+1 sits on x-rows, backward/terminal on y-rows,
    # stationarity on u-rows.
    for s in range(K):
        child = np.arange(tree.size(s + 1))
        er = lay.idx("x", s + 1, child)
        F = I + h * sm.A[s]
        asm.add(er, lay.idx("x", s + 1, child), I)
        par = child // b
        const = np.zeros((len(child), n))
        const += h * mv[s]
        code = child % b
        if use_sigma and tree.m_bits:
            const += inc_i[code] @ sm.sigma[s][:, :tree.m_bits].T
        if use_sigma0 and tree.d_bits:
            const += inc_0[code] @ sm.sigma0[s][:, :tree.d_bits].T
        if s == 0:
            const += F @ a
        else:
            asm.add(er, lay.idx("x", s, par), F, -1.0)
        if np.any(sm.Atil[s]):
            r = s - p
            if r < 0:
                const += h * sm.Atil[s] @ xi[r + p]
            elif r == 0:
                const += h * sm.Atil[s] @ a
            else:
                asm.add(er, lay.idx("x", r, tree.ancestors(s + 1, r)), sm.Atil[s], -h)
        asm.add(er, lay.idx("u", s, par), sm.B[s], -h)
        if np.any(sm.Btil[s]):
            r = s - q
            if r < 0:
                const += h * sm.Btil[s] @ eta[r + q]
            else:
                asm.add(er, lay.idx("u", r, tree.ancestors(s + 1, r)), sm.Btil[s], -h)
        rhs[er] = const

    def add_cond_exp(er, s, lead, mat, weight):
        """weight * mat @ E_s[y_{s+lead}] for every level-s node."""
        tgt = s + lead
        if tgt > K or not np.any(mat):
            return
        fan = b ** lead
        nodes = np.arange(tree.size(s))
        for j in range(fan):
            asm.add(er, lay.idx("y", tgt, nodes * fan + j), mat, weight / fan)

    for s in range(K):
        nodes = np.arange(tree.size(s))
        er = lay.idx("y", s, nodes)
        asm.add(er, er, I)
        add_cond_exp(er, s, 1, (I + h * sm.A[s]).T, -1.0)
        add_cond_exp(er, s, p + 1, sm.Atil[s + p].T, -h)
        if s == 0:
            rhs[er] = (h * sm.Qx[0] @ a)[None, :]
        else:
            asm.add(er, lay.idx("x", s, nodes), sm.Qx[s], -h)
        eu = lay.idx("u", s, nodes)
        asm.add(eu, eu, sm.Nsum[s])
        add_cond_exp(eu, s, 1, sm.B[s].T, 1.0)
        add_cond_exp(eu, s, q + 1, sm.Btil[s + q].T, 1.0)
    leaves = np.arange(tree.size(K))
    er = lay.idx("y", K, leaves)
    asm.add(er, er, I)
    asm.add(er, lay.idx("x", K, leaves), sm.M, -1.0)

    Amat = asm.matrix()
    try:
        lu = spla.splu(Amat.tocsc())
        sol = lu.solve(rhs)
    except RuntimeError as exc:
        raise SolvabilityError(f"tree system is singular: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SolvabilityError("tree system produced non-finite values")
    res_vec = Amat @ sol - rhs

    def unpack(var, s, width):
        i0 = getattr(lay, var)[s]
        return sol[i0:i0 + tree.size(s) * width].reshape(tree.size(s), width)

    x = [np.broadcast_to(a, (1, n)).copy()] + [unpack("x", s, n) for s in range(1, K + 1)]
    u = [unpack("u", s, k) for s in range(K)]
    y = [unpack("y", s, n) for s in range(K + 1)]

    def block_res(var, levels, width):
        vals = [np.max(np.abs(res_vec[getattr(lay, var)[s]:getattr(lay, var)[s] + tree.size(s) * width]))
                for s in levels]
        return float(max(vals)) if vals else 0.0

    residuals = {"dynamics": block_res("x", range(1, K + 1), n),
                 "stationarity": block_res("u", range(K), k),
                 "adjoint": block_res("y", range(K + 1), n)}
    return TreeSolution(tree, x, u, y, residuals)


def tree_solve_hamiltonian(spec: ModelSpec | SampledModel, depth: int, m0=None,
                           include_common: bool = False) -> TreeSolution:
    """Solve the discrete Hamiltonian system of the limit problem on a binomial tree."""
    sm, tree, mv = _prepare(spec, depth, m0, include_common)
    return _solve_tree(sm, tree, mv, sm.a, sm.xi, sm.eta)


def stationarity_residuals(sol: TreeSolution, spec: ModelSpec | SampledModel) -> np.ndarray:
    """Per-level max of ``|(Nc+Nctil_{s+q}) u_s + B^T yhat_s + Btil_{s+q}^T E_s[yhat_{s+q}]|``.

    ``yhat_s = E_s[y_{s+1}]`` is the one-step-ahead costate.  Computed from
    the solution arrays, independently of the assembled matrix.
    """
    tree = sol.tree
    sm, _, _ = _prepare(spec, tree.depth, None, tree.d_bits > 0)
    K, q = tree.depth, sm.grid.q
    b = tree.branching
    out = []
    for s in range(K):
        nodes = np.arange(tree.size(s))
        ey1 = sol.y[s + 1].reshape(len(nodes), b, -1).mean(axis=1)
        r = sol.u[s] @ sm.Nsum[s].T + ey1 @ sm.B[s]
        if s + q + 1 <= K:
            fan = b ** (q + 1)
            eyq = sol.y[s + q + 1].reshape(len(nodes), fan, -1).mean(axis=1)
            r = r + eyq @ sm.Btil[s + q]
        out.append(np.max(np.abs(r)))
    return np.array(out)


# --- brute force over node controls -------------------------------------------

def _affine_states(sm: SampledModel, tree: ScenarioTree, mv, a, xi, eta):
    """States as affine maps of the stacked node controls: x[s] = X[s] @ u + c[s]."""
    g = sm.grid
    K, p, q, h = g.K, g.p, g.q, g.h
    n, k = sm.dims.n, sm.dims.k
    b = tree.branching
    uoff = np.cumsum([0] + [tree.size(s) * k for s in range(K)])
    nu = int(uoff[-1])
    inc_i, inc_0 = tree.increments()
    X = [np.zeros((n, nu))]
    c = [np.asarray(a, float).reshape(1, n)]
    Xs = [X[0][None]]
    # Xs[s]: (b^s, n, nu), c[s]: (b^s, n)
    for s in range(K):
        child = np.arange(tree.size(s + 1))
        par = child // b
        F = np.eye(n) + h * sm.A[s]
        Xn = np.einsum("ij,cju->ciu", F, Xs[s][par])
        cn = c[s][par] @ F.T + h * mv[s]
        code = child % b
        if tree.m_bits:
            cn = cn + inc_i[code] @ sm.sigma[s][:, :tree.m_bits].T
        if tree.d_bits:
            cn = cn + inc_0[code] @ sm.sigma0[s][:, :tree.d_bits].T
        r = s - p
        if r < 0:
            cn = cn + h * sm.Atil[s] @ xi[r + p]
        else:
            anc = tree.ancestors(s + 1, r)
            Xn = Xn + h * np.einsum("ij,cju->ciu", sm.Atil[s], Xs[r][anc])
            cn = cn + h * c[r][anc] @ sm.Atil[s].T
        # own control at the parent node
        for j in range(k):
            cols = uoff[s] + par * k + j
            Xn[np.arange(len(child)), :, cols] += h * sm.B[s][:, j]
        r = s - q
        if r < 0:
            cn = cn + h * sm.Btil[s] @ eta[r + q]
        else:
            anc = tree.ancestors(s + 1, r)
            for j in range(k):
                cols = uoff[r] + anc * k + j
                Xn[np.arange(len(child)), :, cols] += h * sm.Btil[s][:, j]
        Xs.append(Xn)
        c.append(cn)
    return Xs, c, uoff, nu


def _quadratic_cost(sm: SampledModel, tree: ScenarioTree, mv, a, xi, eta):
    """Return (H, g, c0) with J(u) = 0.5 u^T H u + g^T u + c0 over stacked node controls."""
    g_ = sm.grid
    K, p, q, h = g_.K, g_.p, g_.q, g_.h
    n, k = sm.dims.n, sm.dims.k
    Xs, c, uoff, nu = _affine_states(sm, tree, mv, a, xi, eta)
    H = np.zeros((nu, nu))
    gv = np.zeros(nu)
    c0 = 0.0

    def add_state(W, Xb, cb, weight):
        nonlocal c0, gv, H
        if not np.any(W):
            return
        H += weight * np.einsum("ciu,ij,cjv->uv", Xb, W, Xb)
        gv += weight * np.einsum("ciu,ij,cj->u", Xb, W, cb)
        c0 += 0.5 * weight * np.einsum("ci,ij,cj->", cb, W, cb)

    def add_control(W, s, nodes_of, weight):
        nonlocal H
        if not np.any(W):
            return
        for jj in range(k):
            for ll in range(k):
                rows = uoff[s] + nodes_of * k + jj
                cols = uoff[s] + nodes_of * k + ll
                np.add.at(H, (rows, cols), weight * W[jj, ll])

    for s in range(K):
        prob = 1.0 / tree.size(s)
        add_state(sm.R[s], Xs[s], c[s], h * prob)
        r = s - p
        if r >= 0:
            anc = tree.ancestors(s, r)
            add_state(sm.Rtil[s], Xs[r][anc], c[r][anc], h * prob)
        else:
            c0 += 0.5 * h * xi[r + p] @ sm.Rtil[s] @ xi[r + p]
        add_control(sm.Nc[s], s, np.arange(tree.size(s)), h * prob)
        r = s - q
        if r >= 0:
            add_control(sm.Nctil[s], r, tree.ancestors(s, r), h * prob)
        else:
            c0 += 0.5 * h * eta[r + q] @ sm.Nctil[s] @ eta[r + q]
    add_state(sm.M, Xs[K], c[K], 1.0 / tree.size(K))
    return H, gv, c0, uoff


def _unstack(vec, tree, uoff, k):
    return [vec[uoff[s]:uoff[s + 1]].reshape(tree.size(s), k) for s in range(tree.depth)]


def tree_cost(spec: ModelSpec | SampledModel, depth: int, u_levels, m0=None,
              include_common: bool = False) -> float:
    """Discretised cost of node controls ``u_levels`` by forward simulation on the tree."""
    sm, tree, mv = _prepare(spec, depth, m0, include_common)
    g = sm.grid
    K, p, q, h = g.K, g.p, g.q, g.h
    n = sm.dims.n
    b = tree.branching
    inc_i, inc_0 = tree.increments()
    x = [np.asarray(sm.a, float).reshape(1, n)]
    J = 0.0
    for s in range(K):
        prob = 1.0 / tree.size(s)
        us = np.asarray(u_levels[s])
        xd = sm.xi[s - p][None] if s < p else x[s - p][tree.ancestors(s, s - p)]
        ud = sm.eta[s - q][None] if s < q else np.asarray(u_levels[s - q])[tree.ancestors(s, s - q)]
        xd = np.broadcast_to(xd, x[s].shape)
        ud = np.broadcast_to(ud, us.shape)
        J += 0.5 * h * prob * (np.einsum("ci,ij,cj->", x[s], sm.R[s], x[s])
                               + np.einsum("ci,ij,cj->", xd, sm.Rtil[s], xd)
                               + np.einsum("ci,ij,cj->", us, sm.Nc[s], us)
                               + np.einsum("ci,ij,cj->", ud, sm.Nctil[s], ud))
        child = np.arange(tree.size(s + 1))
        par = child // b
        code = child % b
        drift = (x[s][par] @ sm.A[s].T + xd[par] @ sm.Atil[s].T + us[par] @ sm.B[s].T
                 + ud[par] @ sm.Btil[s].T + mv[s])
        nxt = x[s][par] + h * drift
        if tree.m_bits:
            nxt = nxt + inc_i[code] @ sm.sigma[s][:, :tree.m_bits].T
        if tree.d_bits:
            nxt = nxt + inc_0[code] @ sm.sigma0[s][:, :tree.d_bits].T
        x.append(nxt)
    J += 0.5 / tree.size(K) * np.einsum("ci,ij,cj->", x[K], sm.M, x[K])
    return float(J)


def brute_force_optimize(spec: ModelSpec | SampledModel, depth: int, m0=None,
                         include_common: bool = False) -> TreeSolution:
    """Minimise the tree cost over all node controls via the normal equations."""
    sm, tree, mv = _prepare(spec, depth, m0, include_common)
    H, gv, c0, uoff = _quadratic_cost(sm, tree, mv, sm.a, sm.xi, sm.eta)
    H = 0.5 * (H + H.T)
    lam = np.linalg.eigvalsh(H)
    if lam[0] <= 1e-14 * max(1.0, lam[-1]):
        raise AssumptionViolation(f"cost Hessian not positive definite (min eigenvalue {lam[0]:.3e})")
    u = np.linalg.solve(H, -gv)
    levels = _unstack(u, tree, uoff, sm.dims.k)
    Xs, c, _, _ = _affine_states(sm, tree, mv, sm.a, sm.xi, sm.eta)
    x = [c[s] + np.einsum("ciu,u->ci", Xs[s], u) for s in range(tree.depth + 1)]
    J = float(0.5 * u @ H @ u + gv @ u + c0)
    return TreeSolution(tree, x, levels, [], {"normal_equations": float(np.max(np.abs(H @ u + gv))),
                                             "cost": J})


# --- decomposition into idiosyncratic and common parts -------------------------

def decomposition_check(spec: ModelSpec | SampledModel, depth: int, m0, split,
                        include_common: bool = False) -> float:
    """Max over nodes of |x - (x1 + x2)| + |y - (y1 + y2)|.

    ``split = (a1, a2, xi1, xi2)`` or with ``(eta1, eta2)`` appended;
    without it the control history goes to the idiosyncratic part.  Part 1
    carries only idiosyncratic noise and no population term; part 2 carries
    the common noise (if any) and ``m0``.
    """
    sm, tree, mv = _prepare(spec, depth, m0, include_common)
    n, k = sm.dims.n, sm.dims.k
    g = sm.grid
    if len(split) == 4:
        a1, a2, xi1, xi2 = split
        eta1, eta2 = sm.eta, np.zeros_like(sm.eta)
    elif len(split) == 6:
        a1, a2, xi1, xi2, eta1, eta2 = split
    else:
        raise ValueError("split must have 4 or 6 entries")
    try:
        a1, a2 = (np.asarray(v, float).reshape(n) for v in (a1, a2))
        xi1, xi2 = (np.asarray(v, float).reshape(g.p, n) for v in (xi1, xi2))
        eta1, eta2 = (np.asarray(v, float).reshape(g.q, k) for v in (eta1, eta2))
    except ValueError as exc:
        raise ValueError(f"incompatible split dimensions: {exc}") from exc
    full = _solve_tree(sm, tree, mv, a1 + a2, xi1 + xi2, eta1 + eta2)
    t1 = ScenarioTree(depth, g.h, tree.m_bits, 0)
    t2 = ScenarioTree(depth, g.h, 0, tree.d_bits)
    part1 = _solve_tree(sm, t1, np.zeros_like(mv), a1, xi1, eta1, use_sigma=True, use_sigma0=False)
    part2 = _solve_tree(sm, t2, mv, a2, xi2, eta2, use_sigma=False, use_sigma0=True)
    worst = 0.0
    for s in range(depth + 1):
        i1 = tree.project(s, "idio")
        i2 = tree.project(s, "common")
        dx = np.abs(full.x[s] - part1.x[s][i1] - part2.x[s][i2]).max(axis=1)
        dy = np.abs(full.y[s] - part1.y[s][i1] - part2.y[s][i2]).max(axis=1)
        worst = max(worst, float(np.max(dx + dy)))
    return worst
