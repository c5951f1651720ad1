"""Uniform time grid with integer delay offsets and delayed path containers.

Node ``s`` sits at time ``s * h``.  State paths carry a history segment on
nodes ``-p .. -1``, control paths on ``-q .. -1``; costate paths start at node
0 and carry a zero pad on ``K+1 .. K+max(p, q)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

ROLES = ("state", "control", "costate")

_REL_TOL = 1e-12


class DivisibilityError(ValueError):
    """A delay or the horizon is not an integer multiple of the step."""


class PathRangeError(IndexError):
    """A path was read outside the segment it defines."""


def _as_steps(length: float, h: float, what: str) -> int:
    ratio = length / h
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > _REL_TOL * max(1.0, abs(ratio)):
        raise DivisibilityError(f"{what}={length!r} is not an integer multiple of h={h!r}")
    return steps


@dataclass(frozen=True)
class TimeGrid:
    T: float
    h: float
    K: int
    p: int
    q: int

    @property
    def delta(self) -> float:
        return self.p * self.h

    @property
    def theta(self) -> float:
        return self.q * self.h

    @property
    def pad(self) -> int:
        """Length of the anticipation tail past node K."""
        return max(self.p, self.q)

    def times(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Times of nodes ``start .. stop`` inclusive (default ``0 .. K``)."""
        stop = self.K if stop is None else stop
        return np.arange(start, stop + 1) * self.h

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.h / factor, self.K * factor, self.p * factor, self.q * factor)

    def to_dict(self) -> dict:
        return {"T": self.T, "h": self.h, "K": self.K, "p": self.p, "q": self.q}


def build_grid(T: float, h: float, delta: float, theta: float) -> TimeGrid:
    for name, val in (("T", T), ("h", h), ("delta", delta), ("theta", theta)):
        if not val > 0:
            raise ValueError(f"{name} must be positive, got {val!r}")
    K = _as_steps(T, h, "T")
    p = _as_steps(delta, h, "delta")
    q = _as_steps(theta, h, "theta")
    return TimeGrid(float(T), float(h), K, p, q)


class DelayedPath:
    """Vector samples on a contiguous node range ``start .. stop``.

    ``values[j]`` is the sample at node ``start + j``.  The array is frozen
    on construction, so shifted views never alias writable storage.
    """

    def __init__(self, role: str, values, start: int, grid: TimeGrid | None = None):
        if role not in ROLES:
            raise ValueError(f"unknown path role {role!r}")
        arr = np.array(values, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        arr.flags.writeable = False
        self.role = role
        self.values = arr
        self.start = int(start)
        self.grid = grid

    @property
    def stop(self) -> int:
        return self.start + len(self.values) - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at(self, node: int) -> np.ndarray:
        if node < self.start or node > self.stop:
            raise PathRangeError(f"{self.role} path defined on nodes {self.start}..{self.stop}, read at {node}")
        return self.values[node - self.start]

    def segment(self, first: int, last: int) -> np.ndarray:
        """Samples at nodes ``first .. last`` inclusive."""
        if first < self.start or last > self.stop:
            raise PathRangeError(
                f"{self.role} path defined on nodes {self.start}..{self.stop}, asked {first}..{last}")
        return self.values[first - self.start:last - self.start + 1]

    def to_csv(self, fh, h: float | None = None) -> None:
        h = self.grid.h if h is None else h
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"{self.role}_{c}" for c in range(self.dim)])
        for j, row in enumerate(self.values):
            writer.writerow([repr((self.start + j) * h)] + [repr(float(v)) for v in row])

    def __repr__(self) -> str:
        return f"DelayedPath(role={self.role!r}, nodes={self.start}..{self.stop}, dim={self.dim})"


class ShiftedView:
    """Read-only view ``node -> path.at(node + steps)``."""

    def __init__(self, path: DelayedPath, steps: int):
        self.path = path
        self.steps = steps

    def at(self, node: int) -> np.ndarray:
        return self.path.at(node + self.steps)

    def segment(self, first: int, last: int) -> np.ndarray:
        return self.path.segment(first + self.steps, last + self.steps)

    @property
    def start(self) -> int:
        return self.path.start - self.steps

    @property
    def stop(self) -> int:
        return self.path.stop - self.steps


def shift(path: DelayedPath, grid: TimeGrid, steps: int) -> ShiftedView:
    if abs(steps) > grid.pad:
        raise PathRangeError(f"|shift| {abs(steps)} exceeds max(p, q) = {grid.pad}")
    # reads past the stored range (forward reads on state/control beyond K)
    # raise lazily in ``at``
    return ShiftedView(path, steps)


def state_path(grid: TimeGrid, history: np.ndarray, body: np.ndarray) -> DelayedPath:
    """State path from ``history`` on nodes -p..-1 and ``body`` on 0..K."""
    history = np.atleast_2d(np.asarray(history, dtype=float))
    body = np.atleast_2d(np.asarray(body, dtype=float))
    if len(history) != grid.p:
        raise ValueError(f"state history needs {grid.p} rows, got {len(history)}")
    return DelayedPath("state", np.vstack([history, body]), -grid.p, grid)


def control_path(grid: TimeGrid, history: np.ndarray, body: np.ndarray) -> DelayedPath:
    history = np.atleast_2d(np.asarray(history, dtype=float))
    body = np.atleast_2d(np.asarray(body, dtype=float))
    if len(history) != grid.q:
        raise ValueError(f"control history needs {grid.q} rows, got {len(history)}")
    return DelayedPath("control", np.vstack([history, body]), -grid.q, grid)


def costate_path(grid: TimeGrid, body: np.ndarray) -> DelayedPath:
    """Costate path on 0..K followed by the zero anticipation pad."""
    body = np.asarray(body, dtype=float)
    if body.ndim == 1:
        body = body[:, None]
    if len(body) == grid.K + 1:
        body = np.vstack([body, np.zeros((grid.pad, body.shape[1]))])
    elif len(body) != grid.K + 1 + grid.pad:
        raise ValueError(f"costate body needs {grid.K + 1} or {grid.K + 1 + grid.pad} rows")
    elif np.any(body[grid.K + 1:] != 0.0):
        raise ValueError("costate anticipation pad must be identically zero")
    return DelayedPath("costate", body, 0, grid)


def write_table(fh, header: Iterable[str], rows: Iterable[Iterable[float]]) -> None:
    writer = csv.writer(fh)
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])
