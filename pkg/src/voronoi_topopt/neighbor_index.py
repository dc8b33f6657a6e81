"""k-nearest-site queries over site positions.

Backed by ``scipy.spatial.cKDTree``.  The tree answers the bulk of every
query; a short exact re-ranking pass then enforces the (distance, index)
ordering so that ties always resolve to the lower site index, and rows whose
candidate set cannot prove that ordering fall back to an exhaustive scan.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

_EXTRA_CANDIDATES = 8
_REL_MARGIN = 1e-9


@dataclass(frozen=True)
class NeighborIndex:
    tree: cKDTree
    positions: np.ndarray
    build_generation: int = 0

    @property
    def n_sites(self) -> int:
        return self.positions.shape[0]


def build(sites, generation: int = 0) -> NeighborIndex:
    """Index the positions of a ``SiteSet`` (or a raw ``(N, dim)`` array)."""
    pos = getattr(sites, "positions", sites)
    pos = np.array(pos, dtype=float, ndmin=2)
    if pos.shape[0] < 1:
        raise ValueError("cannot index an empty site set")
    return NeighborIndex(cKDTree(pos), pos, generation)


def _rank_rows(points, positions, cand):
    """Sort candidate rows by exact squared distance, then by index."""
    diff = points[:, None, :] - positions[cand]
    d2 = np.einsum("pki,pki->pk", diff, diff)
    # two stable sorts: by index, then by distance
    by_index = np.argsort(cand, axis=1, kind="stable")
    cand = np.take_along_axis(cand, by_index, axis=1)
    d2 = np.take_along_axis(d2, by_index, axis=1)
    order = np.argsort(d2, axis=1, kind="stable")
    return (np.take_along_axis(cand, order, axis=1),
            np.take_along_axis(d2, order, axis=1))


def query_knn_batch(index: NeighborIndex, points, k: int) -> np.ndarray:
    """The ``min(k, N)`` nearest sites of each point, each row sorted ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    points = np.array(points, dtype=float, ndmin=2)
    n = index.n_sites
    k = min(int(k), n)
    if k == n:
        return np.broadcast_to(np.arange(n), (len(points), n)).copy()

    n_cand = min(n, k + _EXTRA_CANDIDATES)
    tree_d, cand = index.tree.query(points, k=n_cand)
    cand = np.asarray(cand, dtype=np.intp).reshape(len(points), n_cand)
    ranked, d2 = _rank_rows(points, index.positions, cand)
    out = ranked[:, :k]

    if n_cand < n:
        bound = np.asarray(tree_d).reshape(len(points), n_cand)[:, -1] ** 2
        unsafe = ~(d2[:, k - 1] < bound * (1.0 - _REL_MARGIN))
        for p in np.flatnonzero(unsafe):
            out[p] = _exhaustive_row(points[p], index.positions, k)
    return np.sort(out, axis=1)


def _exhaustive_row(point, positions, k):
    diff = positions - point
    d2 = np.einsum("ni,ni->n", diff, diff)
    return np.lexsort((np.arange(len(d2)), d2))[:k]


def query_knn(index: NeighborIndex, point, k: int) -> list[int]:
    return query_knn_batch(index, np.asarray(point, dtype=float)[None], k)[0].tolist()
