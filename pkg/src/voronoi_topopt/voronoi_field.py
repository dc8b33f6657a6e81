"""Differentiable anisotropic Voronoi density field.

A site set (positions plus symmetric metric factors ``D``) is turned into a
soft partition of space with softmax weights over negative Mahalanobis
distances.  The density ``rho = 1 - sum_m S_m**beta`` is close to one on the
cell walls and close to zero inside the cells.  An optional virtual weight
``boundary_weight`` competes with every site, so that points far from all
sites fall into an empty "outside" cell (free boundaries).

Coordinates are element units: one finite element of the simulation grid
is a unit square, element ``(i, j)`` has its centroid at ``(i + .5, j + .5)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elasticity import DomainMask
from .neighbor_index import NeighborIndex, query_knn_batch

_CHUNK = 1 << 15


def tril_size(dim: int) -> int:
    return dim * (dim + 1) // 2


def lower_to_symmetric(lower: np.ndarray, dim: int) -> np.ndarray:
    """Expand ``(..., dim*(dim+1)/2)`` lower-triangle entries into matrices."""
    lower = np.asarray(lower, dtype=float)
    rows, cols = np.tril_indices(dim)
    out = np.zeros(lower.shape[:-1] + (dim, dim))
    out[..., rows, cols] = lower
    out[..., cols, rows] = lower
    return out


def symmetric_to_lower(mat: np.ndarray) -> np.ndarray:
    dim = mat.shape[-1]
    rows, cols = np.tril_indices(dim)
    return mat[..., rows, cols]


def symmetric_grad_to_lower(grad: np.ndarray) -> np.ndarray:
    """Chain a symmetric-matrix gradient through the lower-triangle parameters.

    Off-diagonal parameters appear twice in ``D`` so they collect both mirror
    components.
    """
    dim = grad.shape[-1]
    rows, cols = np.tril_indices(dim)
    factor = np.where(rows == cols, 1.0, 2.0)
    return grad[..., rows, cols] * factor


@dataclass(frozen=True)
class SiteSet:
    """Site positions and the lower triangles of their metric factors."""

    positions: np.ndarray
    metric_lower: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float, ndmin=2)
        lower = np.array(self.metric_lower, dtype=float, ndmin=2)
        if pos.shape[0] < 1:
            raise ValueError("a site set needs at least one site")
        if lower.shape != (pos.shape[0], tril_size(pos.shape[1])):
            raise ValueError(
                f"metric_lower has shape {lower.shape}, expected "
                f"{(pos.shape[0], tril_size(pos.shape[1]))}")
        pos.setflags(write=False)
        lower.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "metric_lower", lower)

    @classmethod
    def from_matrices(cls, positions, metric_factors) -> "SiteSet":
        mats = np.asarray(metric_factors, dtype=float)
        if not np.array_equal(mats, np.swapaxes(mats, -1, -2)):
            raise ValueError("metric factors must be symmetric")
        return cls(positions, symmetric_to_lower(mats))

    @property
    def n_sites(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def metric_factors(self) -> np.ndarray:
        return lower_to_symmetric(self.metric_lower, self.dim)

    @property
    def metric_tensors(self) -> np.ndarray:
        d = self.metric_factors
        return d @ np.swapaxes(d, -1, -2)


@dataclass(frozen=True)
class FieldConfig:
    sharpness: float = 50.0
    boundary_weight: float = 0.0
    neighbor_count: int = 16
    distance_floor: float = 1e-12

    def __post_init__(self):
        if not self.sharpness >= 1:
            raise ValueError(f"sharpness must be >= 1, got {self.sharpness}")
        if not self.boundary_weight >= 0:
            raise ValueError(
                f"boundary_weight must be >= 0, got {self.boundary_weight}")
        if int(self.neighbor_count) != self.neighbor_count or self.neighbor_count < 1:
            raise ValueError(
                f"neighbor_count must be a positive integer, got {self.neighbor_count}")
        if not self.distance_floor > 0:
            raise ValueError("distance_floor must be positive")


@dataclass(frozen=True)
class SoftWeights:
    virtual_weight: float
    site_weights: np.ndarray
    neighbor_ids: np.ndarray


@dataclass
class DensityGrid:
    """Per-element values on an ``(ny, nx)`` array; row 0 is the bottom row."""

    values: np.ndarray
    element_size: float = 1.0

    @property
    def resolution(self) -> tuple[int, int]:
        ny, nx = self.values.shape
        return nx, ny


@dataclass
class DensityGradients:
    """Neighbor-sparse density derivatives for the active elements.

    ``elements`` holds flat element indices, ``neighbor_ids[a]`` the sites
    that influence element ``elements[a]``; derivatives for any other site
    are zero.  ``d_rho_d_D`` is already projected onto symmetric matrices.
    """

    elements: np.ndarray
    neighbor_ids: np.ndarray
    d_rho_d_x: np.ndarray
    d_rho_d_D: np.ndarray
    n_sites: int = field(default=0)


def _matvec(M, v):
    # column-by-column so the rounding order is fixed and dimension-generic
    out = M[..., :, 0] * v[..., None, 0]
    for j in range(1, v.shape[-1]):
        out = out + M[..., :, j] * v[..., None, j]
    return out


def _field_kernel(points, site_pos, site_lower, cfg: FieldConfig, with_gradients):
    """Evaluate weights, density and (optionally) gradients for a batch.

    ``site_pos`` is ``(P, k, dim)`` and ``site_lower`` ``(P, k, ntri)``:
    row ``p`` lists the neighbor sites of ``points[p]`` in ascending index
    order, which fixes the summation order.
    """
    dim = points.shape[-1]
    n_nb = site_pos.shape[1]
    beta = float(cfg.sharpness)
    eps = float(cfg.boundary_weight)

    D = lower_to_symmetric(site_lower, dim)
    r = points[:, None, :] - site_pos
    q = _matvec(D, r)                             # D r (D symmetric)
    d2 = q[..., 0] * q[..., 0]
    for i in range(1, dim):
        d2 = d2 + q[..., i] * q[..., i]
    d = np.maximum(np.sqrt(d2), cfg.distance_floor)

    shift = d.min(axis=1)
    if eps > 0:
        shift = np.minimum(shift, -np.log(eps))
    w = np.exp(-(d - shift[:, None]))
    z = np.zeros(len(points))
    for j in range(n_nb):
        z += w[:, j]
    if eps > 0:
        w0 = np.exp(np.log(eps) + shift)
        z += w0
    else:
        w0 = np.zeros(len(points))
    s = w / z[:, None]
    s0 = w0 / z

    s_pow = s ** beta
    total = s0 ** beta if eps > 0 else np.zeros(len(points))
    for j in range(n_nb):
        total = total + s_pow[:, j]
    rho = np.clip(1.0 - total, 0.0, 1.0)
    if not with_gradients:
        return s0, s, rho, None, None

    # d rho / d d_l = beta (S_l**beta - S_l * sum_{m in I_v} S_m**beta)
    g = beta * (s_pow - s * total[:, None])
    inv_d = 1.0 / d
    aq = _matvec(D, q)                            # A r
    # d d_l / d x_l = A (x_l - x) / d_l
    d_x = (-(g * inv_d)[..., None]) * aq
    # d d_l / d D_l = r r^T D / d_l = r q^T / d_l, then symmetrized
    outer = r[..., :, None] * q[..., None, :]
    outer = 0.5 * (outer + np.swapaxes(outer, -1, -2))
    d_D = (g * inv_d)[..., None, None] * outer
    return s0, s, rho, d_x, d_D


def _check_ids(neighbor_ids, sites: SiteSet) -> np.ndarray:
    ids = np.asarray(neighbor_ids, dtype=np.intp).ravel()
    if ids.size == 0:
        raise ValueError("neighbor_ids must be nonempty")
    if ids.min() < 0 or ids.max() >= sites.n_sites:
        raise IndexError("neighbor id out of range")
    return np.sort(ids)


def _point_batch(x, sites: SiteSet, ids):
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return x, sites.positions[ids][None], sites.metric_lower[ids][None]


def anisotropic_distance(x, site_index: int, sites: SiteSet,
                         distance_floor: float = 1e-12) -> float:
    """Mahalanobis distance ``sqrt((x - x_m)^T D_m D_m^T (x - x_m))``, floored."""
    r = np.asarray(x, dtype=float) - sites.positions[site_index]
    q = sites.metric_factors[site_index] @ r
    return max(distance_floor, float(np.sqrt(q @ q)))


def soft_weights(x, sites: SiteSet, cfg: FieldConfig, neighbor_ids) -> SoftWeights:
    ids = _check_ids(neighbor_ids, sites)
    s0, s, _, _, _ = _field_kernel(*_point_batch(x, sites, ids), cfg, False)
    return SoftWeights(float(s0[0]), s[0], ids)


def soft_weights_batch(points, sites: SiteSet, cfg: FieldConfig, neighbor_ids):
    """Soft weights at many points sharing one neighbor list.

    Returns ``(virtual, weights, ids)``: ``virtual`` has one entry per point,
    ``weights`` one row per point and one column per sorted id.
    """
    ids = _check_ids(neighbor_ids, sites)
    pts = np.array(points, dtype=float, ndmin=2)
    n = len(pts)
    pos = np.broadcast_to(sites.positions[ids], (n, *sites.positions[ids].shape))
    low = np.broadcast_to(sites.metric_lower[ids], (n, *sites.metric_lower[ids].shape))
    s0, s, _, _, _ = _field_kernel(pts, pos, low, cfg, False)
    return s0, s, ids


def density_at(x, sites: SiteSet, cfg: FieldConfig, neighbor_ids) -> float:
    ids = _check_ids(neighbor_ids, sites)
    _, _, rho, _, _ = _field_kernel(*_point_batch(x, sites, ids), cfg, False)
    return float(rho[0])


def density_gradients_at(x, sites: SiteSet, cfg: FieldConfig, neighbor_ids):
    """Density and its derivatives at one point.

    Returns ``(rho, ids, d_rho_d_x, d_rho_d_D)`` with one row per id in
    ``ids`` (sorted ``neighbor_ids``); ``d_rho_d_D`` rows are symmetric.
    """
    ids = _check_ids(neighbor_ids, sites)
    _, _, rho, d_x, d_D = _field_kernel(*_point_batch(x, sites, ids), cfg, True)
    return float(rho[0]), ids, d_x[0], d_D[0]


def element_centroids(nx: int, ny: int) -> np.ndarray:
    """Flat ``(ny*nx, 2)`` centroids, element ``e = j*nx + i``."""
    jj, ii = np.mgrid[0:ny, 0:nx]
    return np.column_stack([ii.ravel() + 0.5, jj.ravel() + 0.5])


def rasterize_density(sites: SiteSet, shape: tuple[int, int], cfg: FieldConfig,
                      index: NeighborIndex | None = None,
                      mask: DomainMask | None = None,
                      with_gradients: bool = False):
    """Sample the density at every element centroid of an ``nx x ny`` grid.

    Each active element uses its ``cfg.neighbor_count`` nearest sites.
    Passive void elements get 0, passive solid elements 1, both with zero
    gradients.  Returns the ``DensityGrid`` and, when requested, the
    ``DensityGradients`` of the active elements.
    """
    nx, ny = shape
    k = int(cfg.neighbor_count)
    if k > sites.n_sites:
        raise ValueError(
            f"neighbor_count {k} exceeds the number of sites {sites.n_sites}")
    if index is None:
        from .neighbor_index import build
        index = build(sites)
    if index.n_sites != sites.n_sites:
        raise ValueError("neighbor index was built from a different site set")

    values = np.zeros(nx * ny)
    if mask is None:
        active = np.arange(nx * ny)
    else:
        if mask.states.shape != (ny, nx):
            raise ValueError("mask resolution does not match the grid")
        flat = mask.states.ravel()
        active = np.flatnonzero(flat == DomainMask.DESIGN)
        values[flat == DomainMask.SOLID] = 1.0
    centroids = element_centroids(nx, ny)[active]

    dim = sites.dim
    nbr = np.empty((len(active), k), dtype=np.intp)
    if with_gradients:
        d_x = np.empty((len(active), k, dim))
        d_D = np.empty((len(active), k, dim, dim))
    for start in range(0, len(active), _CHUNK):
        sl = slice(start, start + _CHUNK)
        pts = centroids[sl]
        ids = query_knn_batch(index, pts, k)
        nbr[sl] = ids
        _, _, rho, gx, gD = _field_kernel(
            pts, sites.positions[ids], sites.metric_lower[ids], cfg, with_gradients)
        values[active[sl]] = rho
        if with_gradients:
            d_x[sl] = gx
            d_D[sl] = gD

    grid = DensityGrid(values.reshape(ny, nx))
    if not with_gradients:
        return grid
    return grid, DensityGradients(active, nbr, d_x, d_D, sites.n_sites)
