"""Slow, independent reference implementations used to check the fast paths.

Nothing here calls into the modules it verifies; only the domain types
(``SiteSet``, ``FieldConfig``, ``DomainMask``, ``BoundaryConditions``,
``MaterialModel``) are shared.
"""
from __future__ import annotations

from dataclasses import dataclass

import mpmath
import numpy as np

from .elasticity import BoundaryConditions, DomainMask, MaterialModel


@dataclass
class FDReport:
    analytical: np.ndarray
    finite_difference: np.ndarray
    relative_error: np.ndarray
    checked: np.ndarray       # components large enough to be compared
    max_relative_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.threshold


def relative_errors(analytical, fd):
    analytical = np.asarray(analytical, dtype=float)
    fd = np.asarray(fd, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytical), np.abs(fd)), 1e-12)
    return np.abs(analytical - fd) / denom


def fd_gradient_check(f, x, analytical, step: float = 1e-6, threshold: float = 1e-4,
                      min_magnitude: float = 0.0, components=None) -> FDReport:
    """Central differences of ``f`` around ``x`` against ``analytical``.

    ``f`` may return floats or ``mpmath`` numbers; differences are formed
    in whatever precision ``f`` returns and divided by the step actually
    realized in floating point.  Components whose analytical and FD values
    are both at most ``min_magnitude`` in size are reported but not judged.
    """
    x = np.asarray(x, dtype=float)
    analytical = np.asarray(analytical, dtype=float).ravel()
    idx = range(x.size) if components is None else components
    fd = np.full(x.size, np.nan)
    for i in idx:
        xp, xm = x.copy().ravel(), x.copy().ravel()
        xp[i] += step
        xm[i] -= step
        fp, fm = f(xp.reshape(x.shape)), f(xm.reshape(x.shape))
        if not (mpmath.isfinite(fp) and mpmath.isfinite(fm)):
            raise ValueError(f"objective is not finite around component {i}")
        fd[i] = float((fp - fm) / (xp[i] - xm[i]))
    done = ~np.isnan(fd)
    err = np.zeros(x.size)
    err[done] = relative_errors(analytical[done], fd[done])
    checked = done & (np.maximum(np.abs(analytical), np.abs(np.nan_to_num(fd))) > min_magnitude)
    worst = float(err[checked].max()) if checked.any() else 0.0
    return FDReport(analytical, fd, err, checked, worst, threshold)


# -- Voronoi density ------------------------------------------------------------

def density_point_mp(x, positions, metric_lower, sharpness, boundary_weight=0.0,
                     distance_floor=1e-12, dps=40):
    """All-sites density at one 2D point in ``mpmath`` arithmetic."""
    with mpmath.workdps(dps):
        px, py = mpmath.mpf(float(x[0])), mpmath.mpf(float(x[1]))
        beta = mpmath.mpf(sharpness)
        eps = mpmath.mpf(boundary_weight)
        exps = []
        for (sx, sy), (a, b, c) in zip(positions, metric_lower):
            rx, ry = px - mpmath.mpf(float(sx)), py - mpmath.mpf(float(sy))
            qx = mpmath.mpf(float(a)) * rx + mpmath.mpf(float(b)) * ry
            qy = mpmath.mpf(float(b)) * rx + mpmath.mpf(float(c)) * ry
            dist = max(mpmath.sqrt(qx * qx + qy * qy), mpmath.mpf(distance_floor))
            exps.append(mpmath.exp(-dist))
        z = mpmath.fsum(exps) + eps
        total = (eps / z) ** beta if boundary_weight > 0 else mpmath.mpf(0)
        total += mpmath.fsum((e / z) ** beta for e in exps)
        return +(1 - total)


def soft_weights_all(x, sites, cfg):
    """``(S_0, [S_1..S_N])`` over every site, plain float arithmetic."""
    d = _mahalanobis_rows(np.asarray(x, float)[None], sites, cfg.distance_floor)[0]
    dmin = d.min()
    if cfg.boundary_weight > 0:
        dmin = min(dmin, -np.log(cfg.boundary_weight))
    e = np.exp(dmin - d)
    e0 = cfg.boundary_weight * np.exp(dmin) if cfg.boundary_weight > 0 else 0.0
    z = e.sum() + e0
    return e0 / z, e / z


def _mahalanobis_rows(points, sites, floor):
    """``(P, N)`` distances from 2D points to every site, explicit 2x2 algebra."""
    pos = sites.positions
    a, b, c = (sites.metric_lower[:, 0], sites.metric_lower[:, 1],
               sites.metric_lower[:, 2])
    rx = points[:, 0:1] - pos[:, 0]
    ry = points[:, 1:2] - pos[:, 1]
    qx = a * rx + b * ry
    qy = b * rx + c * ry
    return np.maximum(np.sqrt(qx * qx + qy * qy), floor)


def brute_force_density(sites, shape, cfg, mask: DomainMask | None = None):
    """Every site contributes to every element; returns ``(ny, nx)`` values.

    Accumulates in ascending site order with the virtual term first, like
    the fast path, so that with all sites as neighbors results agree bitwise.
    """
    if sites.dim != 2:
        raise ValueError("the brute-force oracle is two-dimensional")
    nx, ny = shape
    jj, ii = np.mgrid[0:ny, 0:nx]
    pts = np.column_stack([ii.ravel() + 0.5, jj.ravel() + 0.5])
    d = _mahalanobis_rows(pts, sites, cfg.distance_floor)
    eps = cfg.boundary_weight
    dmin = d.min(axis=1)
    if eps > 0:
        dmin = np.minimum(dmin, -np.log(eps))
    e = np.exp(-(d - dmin[:, None]))
    z = np.zeros(len(pts))
    for m in range(sites.n_sites):
        z += e[:, m]
    e0 = np.exp(np.log(eps) + dmin) if eps > 0 else np.zeros(len(pts))
    z += e0
    s = e / z[:, None]
    acc = (e0 / z) ** cfg.sharpness if eps > 0 else np.zeros(len(pts))
    sp = s ** cfg.sharpness
    for m in range(sites.n_sites):
        acc = acc + sp[:, m]
    rho = np.clip(1.0 - acc, 0.0, 1.0).reshape(ny, nx)
    if mask is not None:
        rho = np.where(mask.states == DomainMask.DESIGN, rho,
                       np.where(mask.states == DomainMask.SOLID, 1.0, 0.0))
    return rho


def discrete_voronoi_labels(sites, points) -> np.ndarray:
    """Nearest site under each site's own metric; ties go to the lower index."""
    points = np.array(points, dtype=float, ndmin=2)
    best = np.full(len(points), np.inf)
    label = np.zeros(len(points), dtype=np.intp)
    for m in range(sites.n_sites):
        D = sites.metric_factors[m]
        q = (points - sites.positions[m]) @ D.T
        dist = np.sqrt(np.sum(q * q, axis=1))
        closer = dist < best
        best[closer] = dist[closer]
        label[closer] = m
    return label


def exhaustive_knn(positions, points, k) -> np.ndarray:
    """k nearest sites by Euclidean distance, ties to lower index, rows sorted."""
    positions = np.asarray(positions, float)
    points = np.array(points, dtype=float, ndmin=2)
    k = min(k, len(positions))
    out = np.empty((len(points), k), dtype=np.intp)
    for start in range(0, len(points), 256):
        blk = points[start:start + 256]
        d2 = ((blk[:, None, :] - positions[None]) ** 2).sum(-1)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[start:start + 256] = np.sort(order, axis=1)
    return out


# -- finite elements --------------------------------------------------------------

def q4_stiffness_quadrature(nu: float) -> np.ndarray:
    """Unit-square plane-stress Q4 stiffness (E = 1) by 2x2 Gauss quadrature."""
    C = np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]]) / (1 - nu ** 2)
    g = 1 / np.sqrt(3)
    K = np.zeros((8, 8))
    for xi in (-g, g):
        for eta in (-g, g):
            s, t = (xi + 1) / 2, (eta + 1) / 2
            dN = np.array([[-(1 - t), -(1 - s)], [1 - t, -s], [t, s], [-t, 1 - s]])
            B = np.zeros((3, 8))
            B[0, 0::2] = dN[:, 0]
            B[1, 1::2] = dN[:, 1]
            B[2, 0::2] = dN[:, 1]
            B[2, 1::2] = dN[:, 0]
            K += B.T @ C @ B * 0.25   # weight 1 * Jacobian 1/4
    return K


def dense_stiffness(rho_tilde, mask: DomainMask | None, mat: MaterialModel) -> np.ndarray:
    rho_tilde = np.asarray(rho_tilde, dtype=float)
    ny, nx = rho_tilde.shape
    if nx * ny > 32 * 32:
        raise ValueError("dense oracle is limited to grids of at most 32x32 elements")
    ke = q4_stiffness_quadrature(mat.poisson)
    ndof = 2 * (nx + 1) * (ny + 1)
    K = np.zeros((ndof, ndof))
    for j in range(ny):
        for i in range(nx):
            state = DomainMask.DESIGN if mask is None else mask.states[j, i]
            if state == DomainMask.VOID:
                E = mat.E_min
            elif state == DomainMask.SOLID:
                E = mat.E0
            else:
                E = mat.E_min + rho_tilde[j, i] ** mat.penal * (mat.E0 - mat.E_min)
            corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
            dofs = []
            for ci, cj in corners:
                node = cj * (nx + 1) + ci
                dofs += [2 * node, 2 * node + 1]
            K[np.ix_(dofs, dofs)] += E * ke
    return K


def dense_fem_solve(rho_tilde, mask: DomainMask | None, bcs: BoundaryConditions,
                    mat: MaterialModel = MaterialModel()) -> np.ndarray:
    """Direct dense solve of the assembled system; returns full-length ``U``."""
    ny, nx = np.shape(rho_tilde)
    K = dense_stiffness(rho_tilde, mask, mat)
    f = bcs.force_vector(nx, ny)
    fixed = bcs.fixed_dofs(nx, ny)
    free = np.setdiff1d(np.arange(len(f)), fixed)
    u = np.zeros(len(f))
    if not np.any(f):
        return u
    Kff = K[np.ix_(free, free)]
    if np.linalg.cond(Kff) > 1e13:
        raise np.linalg.LinAlgError("reduced stiffness matrix is singular; "
                                    "supports do not remove the rigid-body modes")
    u[free] = np.linalg.solve(Kff, f[free])
    return u


def tanh_projection(rho, steepness, threshold=0.5):
    t = np.tanh
    return ((t(steepness * threshold) + t(steepness * (rho - threshold)))
            / (t(steepness * threshold) + t(steepness * (1 - threshold))))
