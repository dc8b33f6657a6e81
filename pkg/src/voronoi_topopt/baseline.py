"""Plain density-based SIMP on the same grid, for reference compliances.

Element densities are the design variables; a linear hat density filter
(radius ``rmin`` in elements) regularizes them and optimality-criteria
updates with a bisection on the volume multiplier drive the design.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .elasticity import BoundaryConditions, GridElasticity, MaterialModel


@dataclass
class SIMPResult:
    density: np.ndarray          # physical (filtered) densities, (ny, nx)
    compliance: float
    history: list


def density_filter(nx: int, ny: int, rmin: float) -> sp.csr_matrix:
    """Row-normalized hat-weight filter matrix over flat element indices."""
    r = int(np.ceil(rmin)) - 1
    rows, cols, vals = [], [], []
    jj, ii = np.mgrid[0:ny, 0:nx]
    ii, jj = ii.ravel(), jj.ravel()
    for dj in range(-r, r + 1):
        for di in range(-r, r + 1):
            w = rmin - np.hypot(di, dj)
            if w <= 0:
                continue
            i2, j2 = ii + di, jj + dj
            ok = (i2 >= 0) & (i2 < nx) & (j2 >= 0) & (j2 < ny)
            rows.append((jj * nx + ii)[ok])
            cols.append((j2 * nx + i2)[ok])
            vals.append(np.full(ok.sum(), w))
    H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nx * ny, nx * ny))
    return sp.diags(1.0 / np.asarray(H.sum(axis=1)).ravel()) @ H


def simp(nx: int, ny: int, bcs: BoundaryConditions, volfrac: float, penal: float = 3.0,
         rmin: float = 1.5, iterations: int = 200, move: float = 0.2,
         preconditioner: str = "amg") -> SIMPResult:
    mat = MaterialModel(penal=penal)
    solver = GridElasticity(nx, ny, bcs, mat, tol=1e-8, max_iter=5000,
                            preconditioner=preconditioner)
    H = density_filter(nx, ny, rmin)
    x = np.full(nx * ny, volfrac)
    u = None
    history = []
    c = np.inf
    for _ in range(iterations):
        phys = H @ x
        state = solver.solve(phys.reshape(ny, nx), x0=u)
        u = state.displacements
        c = state.compliance
        history.append(c)
        dc = (-penal * phys ** (penal - 1) * (mat.E0 - mat.E_min)
              * state.element_energy.ravel())
        dc = H.T @ dc
        dv = H.T @ np.ones(nx * ny)
        lo, hi = 0.0, 1e9
        while (hi - lo) / (hi + lo) > 1e-4:
            mid = 0.5 * (lo + hi)
            xnew = np.clip(x * np.sqrt(np.maximum(-dc, 0.0) / (dv * mid)),
                           np.maximum(0.0, x - move), np.minimum(1.0, x + move))
            if (H @ xnew).mean() > volfrac:
                lo = mid
            else:
                hi = mid
        change = np.abs(xnew - x).max()
        x = xnew
        if change < 1e-3:
            break
    phys = (H @ x).reshape(ny, nx)
    return SIMPResult(phys, c, history)
