"""Consistency field m0: the limit of the population's lagged control average.

Under zero common noise the field is deterministic.  The general route
splits the mean dynamics into the idiosyncratic system (all initial data
and the control history) and the common system (zero data, driven by the
idiosyncratic population term and by its own ``Bhat`` feedback):

    m0 = sigma1 + sigma2,   sigma_i(s) = Bhat_s * (mean control of part i at s - q).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .det_solvers import PicardReport, solve_afbodde, solve_mean_case1
from .model import ModelSpec, SampledModel
from .timegrid import TimeGrid


@dataclass(frozen=True)
class NceField:
    grid: TimeGrid
    m0: np.ndarray      # (K, n) on nodes 0..K-1
    sigma1: np.ndarray
    sigma2: np.ndarray
    reports: tuple = ()

    def to_csv(self, fh) -> None:
        n = self.m0.shape[1]
        w = csv.writer(fh)
        w.writerow(["t"] + [f"m0_{i}" for i in range(n)] + [f"sigma1_{i}" for i in range(n)]
                   + [f"sigma2_{i}" for i in range(n)])
        for s in range(len(self.m0)):
            w.writerow([repr(s * self.grid.h)] + [repr(float(v)) for v in
                                                  np.concatenate([self.m0[s], self.sigma1[s], self.sigma2[s]])])

    @classmethod
    def zero(cls, grid: TimeGrid, n: int) -> "NceField":
        z = np.zeros((grid.K, n))
        return cls(grid, z, z.copy(), z.copy())


def _sampled(spec, grid) -> SampledModel:
    return spec if isinstance(spec, SampledModel) else spec.sample(grid)


def _population_term(sm: SampledModel, controls: np.ndarray) -> np.ndarray:
    """Bhat_s times the control on node s - q; ``controls`` covers nodes -q..K-1."""
    K = sm.grid.K
    return np.einsum("sij,sj->si", sm.Bhat[:K], controls[:K])


def compute_m0_general(spec: ModelSpec | SampledModel, grid: TimeGrid | None = None,
                       **picard_kw) -> NceField:
    sm = _sampled(spec, grid)
    g = sm.grid
    part1, rep1 = solve_afbodde(sm, mode="idiosyncratic", **picard_kw)
    sigma1 = _population_term(sm, part1.Eu)
    part2, rep2 = solve_afbodde(sm, mode="common", extra_forcing=sigma1, **picard_kw)
    sigma2 = _population_term(sm, part2.Eu)
    return NceField(g, sigma1 + sigma2, sigma1, sigma2, (rep1, rep2))


def compute_m0_case1(spec: ModelSpec | SampledModel, grid: TimeGrid | None = None,
                     **picard_kw) -> NceField:
    """Case I field from the Riccati-decoupled mean; requires ``Atil = Btil = 0``."""
    sm = _sampled(spec, grid)
    if not sm.is_case1():
        raise ValueError("Case I field needs Atil = Btil = 0")
    pair, rep, m, _, _ = solve_mean_case1(sm, **picard_kw)
    zero = np.zeros_like(m)
    return NceField(sm.grid, m, m.copy(), zero, (rep,))


def picard_reports(field: NceField) -> list[PicardReport]:
    return list(field.reports)
