"""Finite-difference checks of the analytical sensitivities.

Used by ``check-gradients`` and by the test suite.  The density check
differentiates a 40-digit ``mpmath`` evaluation so the FD error is truncation
only; the end-to-end check differentiates the full float64 pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle
from .elasticity import BoundaryConditions, Load, Support
from .pipeline import (Problem, SiteInit, evaluate_design, flatten_gradients,
                       initialize_sites, pack, unpack)
from .projection import ProjectionConfig
from .voronoi_field import FieldConfig, SiteSet, density_gradients_at, symmetric_grad_to_lower


@dataclass
class CheckResult:
    name: str
    reports: list
    threshold: float

    @property
    def max_relative_error(self) -> float:
        return max(r.max_relative_error for r in self.reports)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)


def random_site_config(rng, n_sites=5, extent=8.0):
    """Sites scattered in a square with anisotropic factors inside typical bounds."""
    pos = rng.random((n_sites, 2)) * extent
    diag = rng.uniform(0.3, 1.5, (n_sites, 2))
    off = rng.uniform(-0.3, 0.3, n_sites)
    lower = np.column_stack([diag[:, 0], off, diag[:, 1]])
    x = rng.random(2) * extent
    return SiteSet(pos, lower), x


def density_gradient_check(seed: int = 0, n_configs: int = 20, n_sites: int = 5,
                           sharpness: float = 10.0, step: float = 1e-6,
                           threshold: float = 1e-4, min_magnitude: float = 1e-8) -> CheckResult:
    """Point density derivatives against FD of a high-precision evaluation.

    Alternates the virtual weight between 0 and 1e-7 across configurations.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for c in range(n_configs):
        eps = 0.0 if c % 2 == 0 else 1e-7
        sites, x = random_site_config(rng, n_sites)
        cfg = FieldConfig(sharpness, eps, n_sites)
        ids = np.arange(n_sites)
        _, _, gx, gD = density_gradients_at(x, sites, cfg, ids)
        analytical = np.concatenate([gx.ravel(), symmetric_grad_to_lower(gD).ravel()])

        def f(v, sites=sites, x=x, eps=eps):
            pos = v[:2 * n_sites].reshape(n_sites, 2)
            lower = v[2 * n_sites:].reshape(n_sites, 3)
            return oracle.density_point_mp(x, pos, lower, sharpness, eps)

        v0 = np.concatenate([sites.positions.ravel(), sites.metric_lower.ravel()])
        reports.append(oracle.fd_gradient_check(f, v0, analytical, step, threshold,
                                                min_magnitude))
    return CheckResult("density gradients", reports, threshold)


def frozen_problem(fem_tol: float = 1e-12) -> Problem:
    """16x8 cantilever with four sites, sharpness 10, all sites as neighbors."""
    bcs = BoundaryConditions((Support((0.0, 0.0, 0.0, 8.0)),),
                             (Load((16.0, 4.0, 16.0, 4.0), (0.0, -1.0)),))
    return Problem(16, 8, bcs, 0.4,
                   SiteInit((2, 2), ((0.9, 0.2), (0.2, 0.6)), seed=3),
                   field_config=FieldConfig(10.0, 0.0, 4),
                   fem_tol=fem_tol, fem_max_iter=20000)


def end_to_end_check(problem: Problem | None = None, steepness: float = 1.0,
                     step: float = 1e-6) -> tuple[CheckResult, CheckResult]:
    """Compliance and volume gradients w.r.t. every design variable."""
    problem = problem or frozen_problem()
    proj = ProjectionConfig(steepness=steepness)
    sites = initialize_sites(problem)
    n = sites.n_sites
    v0 = pack(sites)
    ev = evaluate_design(problem, sites, proj)
    dc, dv = flatten_gradients(ev.gradients)

    def comp(v):
        return evaluate_design(problem, unpack(v, n), proj).compliance

    def vol(v):
        return evaluate_design(problem, unpack(v, n), proj).volume

    rc = oracle.fd_gradient_check(comp, v0, dc, step, 1e-3, 1e-6)
    rv = oracle.fd_gradient_check(vol, v0, dv, step, 1e-5, 1e-6)
    return (CheckResult("compliance chain rule", [rc], 1e-3),
            CheckResult("volume chain rule", [rv], 1e-5))


def run_all(seed: int = 0) -> list[CheckResult]:
    return [density_gradient_check(seed), *end_to_end_check()]
