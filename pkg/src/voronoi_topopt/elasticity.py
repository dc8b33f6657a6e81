"""2D linear elasticity on a regular grid of unit bilinear quads.

Plane stress, unit thickness.  Elements are stored on ``(ny, nx)`` arrays
(row 0 at the bottom, flat index ``e = j*nx + i``); node ``(i, j)`` has id
``j*(nx+1) + i`` and DOFs ``2*id`` (x) and ``2*id + 1`` (y).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class DomainMask:
    """Per-element state: design, passive void or passive solid."""

    DESIGN = 0
    VOID = 1
    SOLID = 2

    def __init__(self, states):
        states = np.asarray(states, dtype=np.int8)
        if states.ndim != 2:
            raise ValueError("mask must be a 2D (ny, nx) array")
        if not np.isin(states, (self.DESIGN, self.VOID, self.SOLID)).all():
            raise ValueError("mask contains unknown element states")
        if not (states == self.DESIGN).any():
            raise ValueError("mask has no design elements")
        self.states = states

    @classmethod
    def all_design(cls, nx: int, ny: int) -> "DomainMask":
        return cls(np.zeros((ny, nx), dtype=np.int8))

    @property
    def shape(self):
        return self.states.shape

    def counts(self) -> dict[str, int]:
        return {name: int((self.states == val).sum())
                for name, val in (("design", self.DESIGN), ("passive_void", self.VOID),
                                  ("passive_solid", self.SOLID))}


@dataclass(frozen=True)
class MaterialModel:
    E0: float = 1.0
    E_min: float = 1e-9
    poisson: float = 0.3
    penal: float = 1.0

    def __post_init__(self):
        if not 0 < self.E_min < self.E0:
            raise ValueError("need 0 < E_min < E0")
        if not 0 < self.poisson < 0.5:
            raise ValueError("poisson ratio must lie in (0, 0.5)")
        if self.penal < 1:
            raise ValueError("penal must be >= 1")


@dataclass(frozen=True)
class Support:
    """Fix ``axes`` (subset of ``(0, 1)``) on every node inside ``region``."""

    region: tuple[float, float, float, float]
    axes: tuple[int, ...] = (0, 1)


@dataclass(frozen=True)
class Load:
    """Total ``force`` split equally over the nodes inside ``region``."""

    region: tuple[float, float, float, float]
    force: tuple[float, float]


def _nodes_in(region, nx, ny, tol=1e-9):
    x0, y0, x1, y1 = region
    jj, ii = np.mgrid[0:ny + 1, 0:nx + 1]
    inside = ((ii >= min(x0, x1) - tol) & (ii <= max(x0, x1) + tol)
              & (jj >= min(y0, y1) - tol) & (jj <= max(y0, y1) + tol))
    return np.flatnonzero(inside.ravel())


@dataclass(frozen=True)
class BoundaryConditions:
    """Supports and loads; regions are ``(x0, y0, x1, y1)`` in node coordinates."""

    supports: tuple[Support, ...]
    loads: tuple[Load, ...]

    def fixed_dofs(self, nx: int, ny: int) -> np.ndarray:
        dofs = []
        for s in self.supports:
            nodes = _nodes_in(s.region, nx, ny)
            if nodes.size == 0:
                raise ValueError(f"support region {s.region} contains no nodes")
            for a in s.axes:
                dofs.append(2 * nodes + a)
        if not dofs:
            raise ValueError("boundary conditions need at least one fixed DOF")
        return np.unique(np.concatenate(dofs))

    def force_vector(self, nx: int, ny: int) -> np.ndarray:
        if not self.loads:
            raise ValueError("boundary conditions need at least one load")
        f = np.zeros(2 * (nx + 1) * (ny + 1))
        for load in self.loads:
            nodes = _nodes_in(load.region, nx, ny)
            if nodes.size == 0:
                raise ValueError(f"load region {load.region} contains no nodes")
            for a in (0, 1):
                f[2 * nodes + a] += load.force[a] / nodes.size
        fixed = self.fixed_dofs(nx, ny)
        if np.any(f[fixed] != 0):
            raise ValueError("a load acts on a fixed DOF")
        return f


def element_stiffness_unit(nu: float) -> np.ndarray:
    """Q4 plane-stress stiffness for E = 1, unit square, nodes counter-clockwise
    from the lower-left corner, DOFs ``(u1, v1, u2, v2, ...)``."""
    k = np.array([1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
                  -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8])
    idx = np.array([[0, 1, 2, 3, 4, 5, 6, 7],
                    [1, 0, 7, 6, 5, 4, 3, 2],
                    [2, 7, 0, 5, 6, 3, 4, 1],
                    [3, 6, 5, 0, 7, 2, 1, 4],
                    [4, 5, 6, 7, 0, 1, 2, 3],
                    [5, 4, 3, 2, 1, 0, 7, 6],
                    [6, 3, 4, 1, 2, 7, 0, 5],
                    [7, 2, 1, 4, 3, 6, 5, 0]])
    return k[idx] / (1 - nu ** 2)


def interpolate_modulus(rho_tilde, mat: MaterialModel):
    return mat.E_min + np.asarray(rho_tilde) ** mat.penal * (mat.E0 - mat.E_min)


def element_dofs(nx: int, ny: int) -> np.ndarray:
    jj, ii = np.mgrid[0:ny, 0:nx]
    n0 = (jj * (nx + 1) + ii).ravel()
    nodes = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])
    return np.column_stack([2 * nodes[:, 0], 2 * nodes[:, 0] + 1,
                            2 * nodes[:, 1], 2 * nodes[:, 1] + 1,
                            2 * nodes[:, 2], 2 * nodes[:, 2] + 1,
                            2 * nodes[:, 3], 2 * nodes[:, 3] + 1])


@dataclass
class ElasticState:
    displacements: np.ndarray
    force: np.ndarray
    compliance: float
    residual: float
    iterations: int
    converged: bool
    moduli: np.ndarray
    element_energy: np.ndarray = field(repr=False)  # u_e^T k0 u_e on (ny, nx)


def element_moduli(rho_tilde, mask: DomainMask | None, mat: MaterialModel) -> np.ndarray:
    E = interpolate_modulus(rho_tilde, mat)
    if mask is not None:
        E = np.where(mask.states == DomainMask.VOID, mat.E_min, E)
        E = np.where(mask.states == DomainMask.SOLID, mat.E0, E)
    return E


class GridElasticity:
    """Cached geometry and solver for one grid and set of boundary conditions."""

    def __init__(self, nx: int, ny: int, bcs: BoundaryConditions,
                 mat: MaterialModel = MaterialModel(), tol: float = 1e-8,
                 max_iter: int | None = None, preconditioner: str = "jacobi"):
        if preconditioner not in ("jacobi", "amg"):
            raise ValueError(f"unknown preconditioner {preconditioner!r}")
        self.nx, self.ny = nx, ny
        self.mat = mat
        self.tol = tol
        self.preconditioner = preconditioner
        self.ke = element_stiffness_unit(mat.poisson)
        self.edof = element_dofs(nx, ny)
        self.ndof = 2 * (nx + 1) * (ny + 1)
        self.fixed = bcs.fixed_dofs(nx, ny)
        self.free = np.setdiff1d(np.arange(self.ndof), self.fixed)
        self.force = bcs.force_vector(nx, ny)
        self.max_iter = max_iter if max_iter is not None else 4 * len(self.free)
        self._rows = np.repeat(self.edof, 8, axis=1).ravel()
        self._cols = np.tile(self.edof, (1, 8)).ravel()

    def stiffness_matrix(self, E) -> sp.csr_matrix:
        data = (np.ravel(E)[:, None, None] * self.ke).ravel()
        return sp.coo_matrix((data, (self._rows, self._cols)),
                             shape=(self.ndof, self.ndof)).tocsr()

    def apply_stiffness(self, u, E) -> np.ndarray:
        """Matrix-free ``K u`` by element loops (no fixed-DOF elimination)."""
        ue = u[self.edof]
        fe = np.ravel(E)[:, None] * (ue @ self.ke)
        out = np.zeros(self.ndof)
        np.add.at(out, self.edof, fe)
        return out

    def _rigid_modes(self):
        jj, ii = np.mgrid[0:self.ny + 1, 0:self.nx + 1]
        x, y = ii.ravel().astype(float), jj.ravel().astype(float)
        B = np.zeros((self.ndof, 3))
        B[0::2, 0] = 1.0
        B[1::2, 1] = 1.0
        B[0::2, 2] = -y
        B[1::2, 2] = x
        return B[self.free]

    def solve(self, rho_tilde, mask: DomainMask | None = None, x0=None,
              tol: float | None = None, max_iter: int | None = None) -> ElasticState:
        tol = self.tol if tol is None else tol
        max_iter = self.max_iter if max_iter is None else max_iter
        E = element_moduli(rho_tilde, mask, self.mat)
        K = self.stiffness_matrix(E)
        Kff = K[self.free][:, self.free]
        f = self.force[self.free]
        guess = None if x0 is None else np.asarray(x0)[self.free]
        if self.preconditioner == "amg":
            import pyamg
            ml = pyamg.smoothed_aggregation_solver(Kff, B=self._rigid_modes())
            precond = ml.aspreconditioner(cycle="V")
        else:
            inv_diag = 1.0 / Kff.diagonal()
            precond = lambda r: inv_diag * r  # noqa: E731
        uf, iters, converged = pcg(Kff, f, precond, tol, max_iter, guess)
        u = np.zeros(self.ndof)
        u[self.free] = uf
        fnorm = np.linalg.norm(f)
        resid = np.linalg.norm(Kff @ uf - f) / fnorm if fnorm > 0 else 0.0
        if not converged:
            logger.warning("FEM solve did not converge: relative residual %.3e "
                           "after %d iterations", resid, iters)
        ue = u[self.edof]
        energy = np.einsum("ei,ij,ej->e", ue, self.ke, ue).reshape(self.ny, self.nx)
        return ElasticState(u, self.force.copy(), float(self.force @ u), float(resid),
                            iters, converged, E, energy)


def pcg(A, b, precond, tol, max_iter, x0=None):
    """Preconditioned conjugate gradients on ``A x = b``.

    Stops when the true residual satisfies ``|b - A x| <= tol |b|``.  The
    recursively updated residual drifts on badly conditioned systems, so when
    it reaches the target the true residual is recomputed and, if it has not,
    the iteration restarts from it.  Returns ``(x, iterations, converged)``;
    without convergence ``x`` is the iterate with the smallest true residual
    seen at a check point.
    """
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), 0, True
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    target = tol * bnorm
    rnorm = np.linalg.norm(r)
    best_x, best_r = x.copy(), rnorm
    if rnorm <= target:
        return x, 0, True
    z = precond(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            r = b - A @ x
            rnorm = np.linalg.norm(r)
            if rnorm < best_r:
                best_x, best_r = x.copy(), rnorm
            if rnorm <= target:
                return x, it, True
            z = precond(r)            # residual replacement, fresh direction
            p = z.copy()
            rz = r @ z
            continue
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    rnorm = np.linalg.norm(b - A @ x)
    if rnorm < best_r:
        best_x = x.copy()
    return best_x, max_iter, False


def assemble_and_solve(rho_tilde, mask: DomainMask | None, bcs: BoundaryConditions,
                       mat: MaterialModel = MaterialModel(), tol: float = 1e-8,
                       max_iter: int | None = None, x0=None,
                       preconditioner: str = "jacobi") -> ElasticState:
    ny, nx = np.shape(rho_tilde)
    solver = GridElasticity(nx, ny, bcs, mat, tol, max_iter, preconditioner)
    return solver.solve(rho_tilde, mask, x0=x0)


def compliance_and_sensitivity(state: ElasticState, rho_tilde, mat: MaterialModel,
                               mask: DomainMask | None = None):
    """Compliance ``F^T U`` and ``dc/d rho~_e`` (zero on passive elements)."""
    rho_tilde = np.asarray(rho_tilde, dtype=float)
    dc = -mat.penal * rho_tilde ** (mat.penal - 1) * (mat.E0 - mat.E_min) * state.element_energy
    if mask is not None:
        dc = np.where(mask.states == DomainMask.DESIGN, dc, 0.0)
    return float(state.force @ state.displacements), dc
