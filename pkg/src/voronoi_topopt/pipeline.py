"""Compliance minimization over Voronoi sites: the optimization loop.

Every iteration rasterizes the site set into a density, projects it, solves
the elastic problem, pulls the compliance and volume sensitivities back onto
the site positions and metric factors, and takes one MMA step.

All geometry is in element units (see ``voronoi_field``); the config layer
converts from the unit-height coordinates used in config files.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import mma
from .elasticity import (BoundaryConditions, DomainMask, GridElasticity, MaterialModel,
                         compliance_and_sensitivity)
from .neighbor_index import build as build_index
from .projection import (ProjectionConfig, advance_steepness, heaviside,
                         heaviside_derivative, volume_fraction, volume_gradient)
from .voronoi_field import (DensityGradients, FieldConfig, SiteSet, rasterize_density,
                            symmetric_grad_to_lower, tril_size)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SiteInit:
    """How the initial sites are placed.

    One site is drawn uniformly inside each cell of a ``coarse_grid``
    laid over ``region`` (the whole grid when ``None``).  ``positions``, when
    given, replaces the random draw.  ``metric`` is the initial ``D`` of every
    site, in element units.
    """

    coarse_grid: tuple[int, int] = (6, 3)
    metric: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    seed: int = 0
    region: tuple[float, float, float, float] | None = None
    positions: tuple[tuple[float, float], ...] | None = None

    @property
    def n_sites(self) -> int:
        if self.positions is not None:
            return len(self.positions)
        return self.coarse_grid[0] * self.coarse_grid[1]


@dataclass(frozen=True)
class Problem:
    nx: int
    ny: int
    bcs: BoundaryConditions
    target_volume: float
    sites: SiteInit = SiteInit()
    mask: DomainMask | None = None
    material: MaterialModel = MaterialModel()
    field_config: FieldConfig = FieldConfig()
    projection: ProjectionConfig = ProjectionConfig()
    max_iterations: int = 250
    delta_tol: float = 1e-4
    compliance_tol: float = 1e-3
    optimize_positions: bool = True
    optimize_metrics: bool = True
    position_margin: float = 0.2
    diagonal_bounds: tuple[float, float] = (0.0, 2000.0)
    off_diagonal_bounds: tuple[float, float] = (-100.0, 100.0)
    count_passive_solid: bool = False
    fem_tol: float = 1e-8
    fem_max_iter: int | None = 5000
    preconditioner: str = "jacobi"
    # much tighter than the generic MMA defaults: position spans are ~1.4x the grid
    move_limit: float = 0.02
    asymptote_init: float = 0.1
    objective_scaling: str = "log"

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid resolution must be positive")
        if not 0 < self.target_volume < 1:
            raise ValueError(f"target_volume must lie in (0, 1), got {self.target_volume}")
        if not (self.optimize_positions or self.optimize_metrics):
            raise ValueError("at least one of optimize_positions and optimize_metrics "
                             "must be enabled")
        if self.objective_scaling not in ("first", "log"):
            raise ValueError(f"objective_scaling must be 'first' or 'log', "
                             f"got {self.objective_scaling!r}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.mask is not None and self.mask.shape != (self.ny, self.nx):
            raise ValueError("mask resolution does not match the grid")
        cx, cy = self.sites.coarse_grid
        if self.sites.positions is None and not (1 <= cx <= self.nx and 1 <= cy <= self.ny):
            raise ValueError(f"coarse grid {self.sites.coarse_grid} does not fit a "
                             f"{self.nx}x{self.ny} grid")
        if self.field_config.neighbor_count > self.sites.n_sites:
            raise ValueError(f"neighbor_count {self.field_config.neighbor_count} exceeds the "
                             f"number of sites {self.sites.n_sites}")
        lo, hi = self.diagonal_bounds
        if not lo < hi:
            raise ValueError("diagonal_bounds must be increasing")
        lo, hi = self.off_diagonal_bounds
        if not lo < hi:
            raise ValueError("off_diagonal_bounds must be increasing")

    @property
    def shape(self) -> tuple[int, int]:
        return self.nx, self.ny


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    compliance: float
    volume_fraction: float
    delta: float
    gamma: float
    fem_residual: float
    t_fem_s: float
    t_grad_s: float
    t_mma_s: float


FIELDS = ("iteration", "compliance", "volume_fraction", "delta", "gamma",
          "fem_residual", "t_fem_s", "t_grad_s", "t_mma_s")


@dataclass
class OptHistory:
    records: list[IterationRecord] = field(default_factory=list)

    def append(self, record: IterationRecord):
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("history iterations must be strictly increasing")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


@dataclass(frozen=True)
class ConvergenceDecision:
    stop: bool
    reason: str | None = None


@dataclass
class DesignGradients:
    """Sensitivities per site: ``(N, dim)`` for positions, ``(N, ntri)`` for ``D``."""

    dc_dx: np.ndarray
    dc_dD: np.ndarray
    dv_dx: np.ndarray
    dv_dD: np.ndarray


@dataclass
class Evaluation:
    compliance: float
    volume: float
    gradients: DesignGradients
    rho: np.ndarray
    rho_tilde: np.ndarray
    displacements: np.ndarray
    fem_residual: float
    fem_converged: bool
    t_fem_s: float
    t_grad_s: float


# -- sites and design vectors -------------------------------------------------------

def initialize_sites(problem: Problem) -> SiteSet:
    init = problem.sites
    metric = np.asarray(init.metric, dtype=float)
    if metric.shape != (2, 2) or not np.array_equal(metric, metric.T):
        raise ValueError("initial metric must be a symmetric 2x2 matrix")
    if init.positions is not None:
        pos = np.array(init.positions, dtype=float, ndmin=2)
        if pos.shape[1] != 2 or len(pos) < 1:
            raise ValueError("explicit site positions must be a nonempty list of 2D points")
    else:
        cx, cy = init.coarse_grid
        if cx < 1 or cy < 1:
            raise ValueError("coarse grid dimensions must be positive")
        x0, y0, x1, y1 = init.region or (0.0, 0.0, float(problem.nx), float(problem.ny))
        w, h = (x1 - x0) / cx, (y1 - y0) / cy
        if w <= 0 or h <= 0:
            raise ValueError("site region must have positive extent")
        rng = np.random.default_rng(init.seed)
        jj, ii = np.mgrid[0:cy, 0:cx]
        corners = np.column_stack([x0 + ii.ravel() * w, y0 + jj.ravel() * h])
        pos = corners + rng.random(corners.shape) * [w, h]
    return SiteSet.from_matrices(pos, np.broadcast_to(metric, (len(pos), 2, 2)))


def pack(sites: SiteSet) -> np.ndarray:
    """Flatten into ``[all positions; all D lower triangles]``."""
    return np.concatenate([sites.positions.ravel(), sites.metric_lower.ravel()])


def unpack(values, n_sites: int, dim: int = 2) -> SiteSet:
    values = np.asarray(values, dtype=float)
    npos = n_sites * dim
    if values.size != npos + n_sites * tril_size(dim):
        raise ValueError("design vector length does not match the site count")
    return SiteSet(values[:npos].reshape(n_sites, dim),
                   values[npos:].reshape(n_sites, tril_size(dim)))


def design_bounds(problem: Problem, n_sites: int) -> tuple[np.ndarray, np.ndarray]:
    dim = 2
    m = problem.position_margin
    lo_pos = np.tile([-m * problem.nx, -m * problem.ny], n_sites)
    hi_pos = np.tile([(1 + m) * problem.nx, (1 + m) * problem.ny], n_sites)
    rows, cols = np.tril_indices(dim)
    diag = rows == cols
    lo_tri = np.where(diag, problem.diagonal_bounds[0], problem.off_diagonal_bounds[0])
    hi_tri = np.where(diag, problem.diagonal_bounds[1], problem.off_diagonal_bounds[1])
    return (np.concatenate([lo_pos, np.tile(lo_tri, n_sites)]),
            np.concatenate([hi_pos, np.tile(hi_tri, n_sites)]))


def active_variables(problem: Problem, n_sites: int, dim: int = 2) -> np.ndarray:
    npos, ntri = n_sites * dim, n_sites * tril_size(dim)
    return np.concatenate([np.full(npos, problem.optimize_positions),
                           np.full(ntri, problem.optimize_metrics)])


# -- sensitivities ---------------------------------------------------------------------

def _scatter(ids, weights, n_sites):
    return np.bincount(ids.ravel(), weights=weights.ravel(), minlength=n_sites)


def assemble_design_gradients(dc_drho_tilde, rho, proj_cfg: ProjectionConfig,
                              grads: DensityGradients, mask: DomainMask | None = None,
                              count_passive_solid: bool = False) -> DesignGradients:
    """Chain rule from element sensitivities to site variables.

    ``dc_drho_tilde`` and ``rho`` are ``(ny, nx)``; only the elements listed
    in ``grads`` contribute, each to the sites in its own neighbor list.
    """
    dc_drho_tilde = np.asarray(dc_drho_tilde, dtype=float)
    rho = np.asarray(rho, dtype=float)
    ny, nx = rho.shape
    n = grads.n_sites
    dim = grads.d_rho_d_x.shape[-1]
    dv = volume_gradient(mask, (nx, ny), count_passive_solid)

    e = grads.elements
    slope = heaviside_derivative(rho.ravel()[e], proj_cfg)
    wc = dc_drho_tilde.ravel()[e] * slope
    wv = dv.ravel()[e] * slope

    ids = grads.neighbor_ids
    d_lower = symmetric_grad_to_lower(grads.d_rho_d_D)
    out = []
    for w in (wc, wv):
        gx = np.column_stack([_scatter(ids, w[:, None] * grads.d_rho_d_x[..., c], n)
                              for c in range(dim)])
        gD = np.column_stack([_scatter(ids, w[:, None] * d_lower[..., t], n)
                              for t in range(d_lower.shape[-1])])
        out += [gx, gD]
    return DesignGradients(out[0], out[1], out[2], out[3])


def flatten_gradients(g: DesignGradients) -> tuple[np.ndarray, np.ndarray]:
    """Compliance and volume gradients in design-vector order."""
    return (np.concatenate([g.dc_dx.ravel(), g.dc_dD.ravel()]),
            np.concatenate([g.dv_dx.ravel(), g.dv_dD.ravel()]))


def make_solver(problem: Problem) -> GridElasticity:
    return GridElasticity(problem.nx, problem.ny, problem.bcs, problem.material,
                          tol=problem.fem_tol, max_iter=problem.fem_max_iter,
                          preconditioner=problem.preconditioner)


def project(rho, proj_cfg: ProjectionConfig, mask: DomainMask | None = None):
    rho_tilde = heaviside(rho, proj_cfg)
    if mask is not None:
        rho_tilde = np.where(mask.states == DomainMask.SOLID, 1.0,
                             np.where(mask.states == DomainMask.VOID, 0.0, rho_tilde))
    return rho_tilde


def evaluate_design(problem: Problem, sites: SiteSet, proj_cfg: ProjectionConfig,
                    solver: GridElasticity | None = None, x0=None,
                    generation: int = 0) -> Evaluation:
    """Compliance, volume fraction and their design gradients for one site set."""
    solver = solver or make_solver(problem)
    t0 = time.perf_counter()
    index = build_index(sites, generation)
    grid, grads = rasterize_density(sites, problem.shape, problem.field_config, index,
                                    problem.mask, with_gradients=True)
    rho_tilde = project(grid.values, proj_cfg, problem.mask)
    t1 = time.perf_counter()
    state = solver.solve(rho_tilde, problem.mask, x0=x0)
    c, dc = compliance_and_sensitivity(state, rho_tilde, problem.material, problem.mask)
    t2 = time.perf_counter()
    vol = volume_fraction(rho_tilde, problem.mask, problem.count_passive_solid)
    g = assemble_design_gradients(dc, grid.values, proj_cfg, grads, problem.mask,
                                  problem.count_passive_solid)
    t3 = time.perf_counter()
    return Evaluation(c, vol, g, grid.values, rho_tilde, state.displacements,
                      state.residual, state.converged, t2 - t1, (t1 - t0) + (t3 - t2))


# -- stopping rules -------------------------------------------------------------------------

def plateau_steepness(proj_cfg: ProjectionConfig, max_iterations: int) -> float:
    """Steepness of the last iteration the run can reach."""
    return advance_steepness(proj_cfg, max(max_iterations - 1, 0)).steepness


def convergence_check(history: OptHistory, delta: float, tol_delta: float = 1e-4,
                      tol_c: float = 1e-3,
                      plateau_gamma: float | None = None) -> ConvergenceDecision:
    """Stop when ``delta <= tol_delta`` or the four-point compliance test passes.

    The compliance test ``|c_i + c_{i-1} - c_{i-2} - c_{i-3}| / (c_{i-2} + c_{i-3})``
    needs four records; with ``plateau_gamma`` set it is only applied once all
    four were taken at that steepness.
    """
    if not len(history):
        raise ValueError("convergence_check needs a nonempty history")
    if not delta > tol_delta:
        return ConvergenceDecision(True, "delta")
    if len(history) < 4:
        return ConvergenceDecision(False)
    last = history.records[-4:]
    if plateau_gamma is not None and any(r.gamma != plateau_gamma for r in last):
        return ConvergenceDecision(False)
    c3, c2, c1, c0 = (r.compliance for r in last)
    denom = c2 + c3
    if denom != 0 and abs(c0 + c1 - c2 - c3) / abs(denom) < tol_c:
        return ConvergenceDecision(True, "compliance")
    return ConvergenceDecision(False)


# -- the loop -------------------------------------------------------------------------------

@dataclass
class OptResult:
    sites: SiteSet
    rho_tilde: np.ndarray
    history: OptHistory
    stop_reason: str
    initial_sites: SiteSet


def optimize(problem: Problem, callback=None, sites: SiteSet | None = None) -> OptResult:
    """Run the optimization loop.

    ``callback(iteration, record, rho_tilde, sites)`` is called after every
    MMA step with the sites and projected density that were analysed in
    that iteration.
    """
    sites = initialize_sites(problem) if sites is None else sites
    initial = sites
    n, dim = sites.n_sites, sites.dim
    lower, upper = design_bounds(problem, n)
    values = np.clip(pack(sites), lower, upper)
    design = mma.DesignVector(values, lower, upper)
    state = mma.MMAState.initial(design, move=problem.move_limit,
                                   asy_init=problem.asymptote_init)
    active = active_variables(problem, n, dim)
    solver = make_solver(problem)
    history = OptHistory()
    plateau = plateau_steepness(problem.projection, problem.max_iterations)

    c_scale = None
    u_prev = None
    proj = advance_steepness(problem.projection, 0)
    reason = "max_iterations"
    for it in range(problem.max_iterations):
        proj = advance_steepness(problem.projection, it)
        ev = evaluate_design(problem, sites, proj, solver, u_prev, generation=it)
        if not ev.fem_converged:
            logger.warning("iteration %d: FEM residual %.2e, continuing with the best "
                           "iterate", it, ev.fem_residual)
        u_prev = ev.displacements
        t0 = time.perf_counter()
        dc, dv = flatten_gradients(ev.gradients)
        if problem.objective_scaling == "log":
            # ln c: same minimizer, gradients stay O(1) across orders of magnitude
            c_pos = max(ev.compliance, np.finfo(float).tiny)
            f, df = np.log(c_pos), dc / c_pos
        else:
            if c_scale is None:
                c_scale = abs(ev.compliance) if ev.compliance != 0 else 1.0
            f, df = ev.compliance / c_scale, dc / c_scale
        design_new, state = mma.mma_update(
            design, f, df, ev.volume - problem.target_volume, dv, state, active=active)
        t_mma = time.perf_counter() - t0

        delta = float(np.max(np.abs(design_new.values - design.values)[active]))
        design = design_new
        analysed, sites = sites, unpack(design.values, n, dim)
        record = IterationRecord(it, ev.compliance, ev.volume, delta, proj.steepness,
                                 ev.fem_residual, ev.t_fem_s, ev.t_grad_s, t_mma)
        history.append(record)
        logger.info("it %4d  c %.6g  vol %.4f  delta %.3e  gamma %g", it,
                    ev.compliance, ev.volume, delta, proj.steepness)
        if callback is not None:
            callback(it, record, ev.rho_tilde, analysed)
        decision = convergence_check(history, delta, problem.delta_tol,
                                     problem.compliance_tol, plateau)
        if decision.stop:
            reason = decision.reason
            break

    grid = rasterize_density(sites, problem.shape, problem.field_config,
                             build_index(sites), problem.mask)
    return OptResult(sites, project(grid.values, proj, problem.mask), history,
                     reason, initial)


def first_feasible(history: OptHistory, target: float, slack: float = 1e-3) -> int | None:
    """Index of the first record whose volume is within ``slack`` of feasibility."""
    for k, r in enumerate(history.records):
        if r.volume_fraction <= target + slack:
            return k
    return None


def with_overrides(problem: Problem, **changes) -> Problem:
    return replace(problem, **changes)
