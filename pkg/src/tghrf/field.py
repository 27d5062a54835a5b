"""
Spatial geometry primitives: sites, regular grids, gridded daily fields,
distances, nearest-neighbour queries and the minimum-spanning-tree range
heuristic.

Coordinates are planar.  Whatever unit a dataset declares (metres, km,
degrees) is used as-is by every kernel downstream.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import InputError


class Site(NamedTuple):
    x: float
    y: float
    id: int = -1


def as_coords(sites):
    """Return an ``(n, 2)`` float array from sites, pairs or an array."""
    if isinstance(sites, Site):
        sites = [sites]
    if len(sites) and isinstance(sites[0], Site):
        arr = np.array([[s.x, s.y] for s in sites], dtype=float)
    else:
        arr = np.asarray(sites, dtype=float)
    if arr.ndim == 1:
        if arr.size != 2:
            raise InputError(f"a single site needs 2 coordinates, got {arr.size}")
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError(f"sites must have shape (n, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
        raise InputError(f"non-finite coordinates at site {bad}")
    return arr


@dataclass(frozen=True)
class GridSpec:
    """Regular grid; cell ``i`` sits at ``origin + cell_size * (i % nx, i // nx)``."""

    origin: tuple = (0.0, 0.0)
    cell_size: float = 1.0
    nx: int = 1
    ny: int = 1

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InputError(f"grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        if not self.cell_size > 0:
            raise InputError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def size(self):
        return self.nx * self.ny

    def coords(self):
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        x = self.origin[0] + self.cell_size * ix.ravel()
        y = self.origin[1] + self.cell_size * iy.ravel()
        return np.column_stack([x, y]).astype(float)

    def index(self, ix, iy):
        """Flat index of cell column ``ix`` and row ``iy`` (0-based)."""
        return iy * self.nx + ix

    def center_index(self):
        return self.index((self.nx - 1) // 2, (self.ny - 1) // 2)


@dataclass
class FieldFrame:
    """One day of gridded observations; ``mask`` is True where observed."""

    grid: GridSpec
    t: int
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        n = self.grid.size
        if self.values.shape != (n,) or self.mask.shape != (n,):
            raise InputError(
                f"values/mask must have length nx*ny={n}, "
                f"got {self.values.shape} and {self.mask.shape}"
            )
        self.mask &= np.isfinite(self.values)

    def observed(self):
        """Coordinates, values and flat indices of the observed cells."""
        idx = np.flatnonzero(self.mask)
        return self.grid.coords()[idx], self.values[idx], idx

    @property
    def n_observed(self):
        return int(self.mask.sum())


def pairwise_distances(sites):
    """Symmetric matrix of Euclidean distances between all sites."""
    xy = as_coords(sites)
    if len(xy) == 0:
        raise InputError("need at least one site")
    return squareform(pdist(xy)) if len(xy) > 1 else np.zeros((1, 1))


def cross_distances(a, b):
    return cdist(as_coords(a), as_coords(b))


def mst_max_edge(sites):
    """
    Longest edge of the Euclidean minimum spanning tree.

    Dense O(n^2) Prim; every MST of a graph has the same multiset of edge
    weights, so the result does not depend on which tree is found.
    """
    xy = as_coords(sites)
    n = len(xy)
    if n < 2:
        raise InputError(f"mst_max_edge needs at least 2 sites, got {n}")
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best[0] = 0.0
    longest = 0.0
    for _ in range(n):
        cand = np.where(in_tree, np.inf, best)
        i = int(np.argmin(cand))
        longest = max(longest, cand[i])
        in_tree[i] = True
        d = np.hypot(xy[:, 0] - xy[i, 0], xy[:, 1] - xy[i, 1])
        np.minimum(best, d, out=best)
    return float(longest)


def knn(sites, s0, k):
    """
    Indices of the ``k`` sites closest to ``s0``, nearest first.

    Ties are broken by ascending site index.
    """
    xy = as_coords(sites)
    k = int(k)
    if k < 0 or k > len(xy):
        raise InputError(f"k={k} outside [0, {len(xy)}]")
    if k == 0:
        return np.array([], dtype=int)
    p = as_coords(s0)[0]
    d = np.hypot(xy[:, 0] - p[0], xy[:, 1] - p[1])
    order = np.lexsort((np.arange(len(xy)), d))
    return order[:k]
