"""Game coefficients, history data and the standing-assumption checks.

Every time-indexed coefficient is either a constant array, a
:class:`StepFunction` (piecewise constant, left-closed cells) or any callable
``t -> array``.  :meth:`ModelSpec.sample` turns the spec into arrays on a
:class:`~lqgdelay.timegrid.TimeGrid`, applying the extension conventions
``Rtil = 0`` on ``[T, T+delta]`` and ``Nctil = 0`` on ``[T, T+theta]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Union

import numpy as np

from .timegrid import TimeGrid, build_grid

SYM_TOL = 1e-12
DEFAULT_EPD = 1e-8


class SpecStructureError(ValueError):
    """Coefficient shapes disagree with the declared dimensions."""


class AssumptionViolation(ValueError):
    """A validated quantity failed positivity at solve time."""


@dataclass(frozen=True)
class Dimensions:
    n: int = 1
    k: int = 1
    m: int = 1
    d: int = 1

    def __post_init__(self):
        for name in ("n", "k", "m", "d"):
            if int(getattr(self, name)) < 1:
                raise SpecStructureError(f"dimension {name} must be >= 1")


class StepFunction:
    """Piecewise-constant function: ``values[j]`` on ``[t0 + j*h, t0 + (j+1)*h)``.

    Times before ``t0`` read ``values[0]``, times past the last cell read
    ``values[-1]``.
    """

    def __init__(self, t0: float, h: float, values):
        self.t0 = float(t0)
        self.h = float(h)
        self.values = np.asarray(values, dtype=float)

    def __call__(self, t: float) -> np.ndarray:
        j = int(np.floor((t - self.t0) / self.h + 1e-9))
        j = min(max(j, 0), len(self.values) - 1)
        return self.values[j]

    def to_json(self) -> dict:
        return {"t0": self.t0, "h": self.h, "values": self.values.tolist()}


Coef = Union[float, np.ndarray, StepFunction, Callable[[float], Any]]

_MATRIX_SHAPES = {
    "A": ("n", "n"), "Atil": ("n", "n"),
    "B": ("n", "k"), "Btil": ("n", "k"), "Bhat": ("n", "k"),
    "sigma": ("n", "m"), "sigma0": ("n", "d"),
    "R": ("n", "n"), "Rtil": ("n", "n"),
    "Nc": ("k", "k"), "Nctil": ("k", "k"),
}
COEF_NAMES = tuple(_MATRIX_SHAPES)


def _shape(dims: Dimensions, spec: tuple[str, ...]) -> tuple[int, ...]:
    return tuple(getattr(dims, s) for s in spec)


def _eval(coef: Coef, t: float, shape: tuple[int, ...], name: str) -> np.ndarray:
    val = coef(t) if callable(coef) else coef
    arr = np.asarray(val, dtype=float)
    if arr.size == 1 and int(np.prod(shape)) == 1:
        arr = arr.reshape(shape)
    elif arr.ndim == 0 and len(shape) == 2:
        # a bare scalar means c * I for square coefficients; zero fits any shape
        if shape[0] == shape[1]:
            arr = float(arr) * np.eye(shape[0])
        elif arr == 0.0:
            arr = np.zeros(shape)
    elif arr.ndim == 0 and len(shape) == 1 and arr == 0.0:
        arr = np.zeros(shape)
    if arr.shape != shape:
        raise SpecStructureError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """All coefficients and data of the delayed LQG game."""

    dims: Dimensions
    T: float
    delta: float
    theta: float
    A: Coef = 0.0
    Atil: Coef = 0.0
    B: Coef = 0.0
    Btil: Coef = 0.0
    Bhat: Coef = 0.0
    sigma: Coef = 0.0
    sigma0: Coef = 0.0
    R: Coef = 0.0
    Rtil: Coef = 0.0
    Nc: Coef = 1.0
    Nctil: Coef = 0.0
    M: Any = 0.0
    a: Any = 0.0
    xi_hist: Coef = 0.0
    eta_hist: Coef = 0.0
    name: str = "model"
    meta: dict = field(default_factory=dict)

    @classmethod
    def scalar(cls, T: float, delta: float, theta: float, **kw) -> "ModelSpec":
        """Spec with n = k = m = d = 1; coefficients may be given as floats."""
        return cls(Dimensions(1, 1, 1, 1), T, delta, theta, **kw)

    def replace(self, **changes) -> "ModelSpec":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return ModelSpec(**kw)

    def check_structure(self) -> None:
        """Raise :class:`SpecStructureError` on any shape mismatch."""
        d = self.dims
        for name, shp in _MATRIX_SHAPES.items():
            coef = getattr(self, name)
            for t in (0.0, 0.5 * self.T, self.T):
                _eval(coef, t, _shape(d, shp), name)
        _eval(self.M, 0.0, (d.n, d.n), "M")
        _eval(self.a, 0.0, (d.n,), "a")
        _eval(self.xi_hist, -self.delta, (d.n,), "xi_hist")
        _eval(self.eta_hist, -self.theta, (d.k,), "eta_hist")

    def grid(self, h: float) -> TimeGrid:
        return build_grid(self.T, h, self.delta, self.theta)

    def sample(self, grid: TimeGrid) -> "SampledModel":
        if abs(grid.T - self.T) > 1e-12 or abs(grid.delta - self.delta) > 1e-12 \
                or abs(grid.theta - self.theta) > 1e-12:
            raise SpecStructureError("grid does not match the spec's horizon and delays")
        self.check_structure()
        return SampledModel(self, grid)

    def to_json(self) -> dict:
        def enc(c, shape_names=None):
            if isinstance(c, StepFunction):
                return c.to_json()
            if callable(c):
                raise TypeError("callable coefficients cannot be serialised; use StepFunction")
            return np.asarray(c, dtype=float).tolist()
        out = {
            "name": self.name,
            "dims": {"n": self.dims.n, "k": self.dims.k, "m": self.dims.m, "d": self.dims.d},
            "T": self.T, "delta": self.delta, "theta": self.theta,
            "coefficients": {name: enc(getattr(self, name)) for name in COEF_NAMES},
            "M": enc(self.M), "a": enc(self.a),
            "xi_hist": enc(self.xi_hist), "eta_hist": enc(self.eta_hist),
        }
        if self.meta:
            out["meta"] = self.meta
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class SampledModel:
    """Coefficient arrays of a spec on a grid.

    Node-indexed arrays cover nodes ``0 .. K + pad`` (``pad = max(p, q)``);
    entries past ``K`` are zero, which realises the zero extension of
    ``Rtil``/``Nctil`` and makes anticipated products vanish beyond ``T``.
    ``Rtil`` and ``Nctil`` are also zero at node ``K`` itself.
    """

    def __init__(self, spec: ModelSpec, grid: TimeGrid):
        self.spec = spec
        self.grid = grid
        d = spec.dims
        K, L = grid.K, grid.K + grid.pad + 1
        t = grid.times(0, K)
        for name, shp in _MATRIX_SHAPES.items():
            shape = _shape(d, shp)
            arr = np.zeros((L,) + shape)
            for s in range(K + 1):
                arr[s] = _eval(getattr(spec, name), t[s], shape, name)
            if name in ("Rtil", "Nctil"):
                arr[K] = 0.0
            arr.flags.writeable = False
            setattr(self, name, arr)
        self.M = _eval(spec.M, 0.0, (d.n, d.n), "M")
        self.a = _eval(spec.a, 0.0, (d.n,), "a")
        self.xi = np.array([_eval(spec.xi_hist, s * grid.h, (d.n,), "xi_hist")
                            for s in range(-grid.p, 0)]).reshape(grid.p, d.n)
        self.eta = np.array([_eval(spec.eta_hist, s * grid.h, (d.k,), "eta_hist")
                             for s in range(-grid.q, 0)]).reshape(grid.q, d.k)

    @property
    def dims(self) -> Dimensions:
        return self.spec.dims

    @cached_property
    def Qx(self) -> np.ndarray:
        """``R_s + Rtil_{s+p}`` for s = 0..K."""
        K, p = self.grid.K, self.grid.p
        return np.array([self.R[s] + self.Rtil[s + p] for s in range(K + 1)])

    @cached_property
    def Nsum(self) -> np.ndarray:
        """``Nc_s + Nctil_{s+q}`` for s = 0..K-1."""
        K, q = self.grid.K, self.grid.q
        return np.array([self.Nc[s] + self.Nctil[s + q] for s in range(K)])

    @cached_property
    def Ginv(self) -> np.ndarray:
        """``(Nc_s + Nctil_{s+q})^{-1}`` for s = 0..K-1."""
        return np.linalg.inv(self.Nsum)

    def history_state(self, s: int) -> np.ndarray:
        return self.xi[s + self.grid.p]

    def history_control(self, s: int) -> np.ndarray:
        return self.eta[s + self.grid.q]

    def is_case1(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.Atil) <= tol) and np.all(np.abs(self.Btil) <= tol))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple = ()

    def lines(self) -> list[str]:
        if self.ok:
            return ["all assumptions hold"]
        return [f"{aid} at node {node}: {diag:.6g}" for aid, node, diag in self.violations]


def _asym(X: np.ndarray) -> float:
    return float(np.max(np.abs(X - X.T))) if X.size else 0.0


def validate_spec(spec: ModelSpec, grid: TimeGrid | float | None = None,
                  epd: float = DEFAULT_EPD) -> ValidationReport:
    """Check the standing assumptions on grid nodes.

    ``grid`` may be a :class:`TimeGrid`, a step size, or ``None`` for the
    step ``min(delta, theta) / 2``.  Shape problems raise
    :class:`SpecStructureError`; assumption failures go into the report.
    """
    if grid is None:
        grid = min(spec.delta, spec.theta) / 2.0
    if not isinstance(grid, TimeGrid):
        grid = spec.grid(float(grid))
    sm = spec.sample(grid)
    K, p, q = grid.K, grid.p, grid.q
    bad = []
    for s in range(K + 1):
        for name in ("R", "Rtil", "Nc", "Nctil"):
            asym = _asym(getattr(sm, name)[s])
            if asym > SYM_TOL:
                bad.append((f"{name} not symmetric", s, asym))
    if _asym(sm.M) > SYM_TOL:
        bad.append(("M not symmetric", K, _asym(sm.M)))
    for s in range(K):
        lam = np.linalg.eigvalsh(0.5 * (sm.R[s] + sm.R[s].T + sm.Rtil[s + p] + sm.Rtil[s + p].T))
        if lam[0] < -SYM_TOL:
            bad.append(("R+Rtil shifted not PSD", s, float(lam[0])))
        mu = np.linalg.eigvalsh(0.5 * (sm.Nc[s] + sm.Nc[s].T + sm.Nctil[s + q] + sm.Nctil[s + q].T))
        if mu[0] < epd:
            bad.append(("Nc+Nctil shifted not PD", s, float(mu[0])))
    lamM = np.linalg.eigvalsh(0.5 * (sm.M + sm.M.T))
    if lamM[0] < -SYM_TOL:
        bad.append(("M not PSD", K, float(lamM[0])))
    return ValidationReport(not bad, tuple(bad))


# --- JSON model files -------------------------------------------------------

def _decode(obj):
    if isinstance(obj, dict):
        return StepFunction(obj["t0"], obj["h"], obj["values"])
    return np.asarray(obj, dtype=float)


def spec_from_json(data: dict) -> ModelSpec:
    try:
        dims = Dimensions(**{k: int(v) for k, v in data["dims"].items()})
        coefs = {name: _decode(val) for name, val in data.get("coefficients", {}).items()}
        unknown = set(coefs) - set(COEF_NAMES)
        if unknown:
            raise SpecStructureError(f"unknown coefficients {sorted(unknown)}")
        spec = ModelSpec(
            dims=dims, T=float(data["T"]), delta=float(data["delta"]), theta=float(data["theta"]),
            M=_decode(data.get("M", 0.0)), a=_decode(data.get("a", 0.0)),
            xi_hist=_decode(data.get("xi_hist", 0.0)), eta_hist=_decode(data.get("eta_hist", 0.0)),
            name=data.get("name", "model"), meta=data.get("meta", {}), **coefs)
    except (KeyError, TypeError) as exc:
        raise SpecStructureError(f"malformed model file: {exc}") from exc
    spec.check_structure()
    return spec


def load_spec(path: str | Path) -> ModelSpec:
    with open(path) as fh:
        return spec_from_json(json.load(fh))


def save_spec(spec: ModelSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_json(), fh, indent=2)


def shipped_models() -> dict[str, Path]:
    """Example model files bundled with the package."""
    here = Path(__file__).parent / "models"
    return {p.stem: p for p in sorted(here.glob("*.json"))}
