"""
K-means over moment surfaces, the cluster separation metric and
information-criterion selection of the cluster count.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import InputError, MetricError, NumericError

N_RESTARTS = 20
MAX_ITER = 300


@dataclass
class ClusterResult:
    k: int
    labels: np.ndarray  # 1..k
    centers: np.ndarray  # row i is the center of label i + 1
    inertia: float
    aic: float
    bic: float
    iterations: int = 0


def standardize(features, names=None):
    """Center each column and scale it to unit (population) standard deviation."""
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise InputError(f"features must be a 2-d array, got shape {X.shape}")
    sd = X.std(axis=0)
    const = np.flatnonzero(~(sd > 0))
    if const.size:
        label = names[const[0]] if names is not None else f"column {const[0]}"
        raise InputError(f"{label} is constant and cannot be standardized")
    return (X - X.mean(axis=0)) / sd


def information_criteria(inertia, n, d, k):
    """
    AIC and BIC of a k-means partition read as a spherical Gaussian mixture
    with hard assignments and shared variance ``inertia / (n d)``.
    """
    s2 = max(inertia / (n * d), np.finfo(float).tiny)
    ll = -0.5 * n * d * (1.0 + np.log(2 * np.pi * s2))
    p = k * d + 1
    return 2 * p - 2 * ll, p * np.log(n) - 2 * ll


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        tot = d2.sum()
        idx = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centers[i] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[i]) ** 2, axis=1))
    return centers


def _lloyd(X, centers, max_iter):
    k = len(centers)
    labels = None
    prev = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        D = cdist(X, centers, "sqeuclidean")
        new = np.argmin(D, axis=1)
        inertia = float(D[np.arange(len(X)), new].sum())
        if inertia > prev * (1 + 1e-12) + 1e-12:
            raise NumericError(f"k-means inertia increased from {prev:.10g} to {inertia:.10g}")
        prev = inertia
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its center
                far = int(np.argmax(D[np.arange(len(X)), labels]))
                centers[c] = X[far]
                labels[far] = c
                prev = np.inf
    D = cdist(X, centers, "sqeuclidean")
    labels = np.argmin(D, axis=1)
    inertia = float(D[np.arange(len(X)), labels].sum())
    return labels, centers, inertia, it


def _renumber(labels, k, coords, reference):
    """Order clusters by distance of their member-site centroid to ``reference``."""
    if coords is None:
        _, first = np.unique(labels, return_index=True)
        order = np.argsort(first)
        present = np.unique(labels)[order]
    else:
        xy = np.asarray(coords, dtype=float)
        ref = xy.mean(axis=0) if reference is None else np.asarray(reference, dtype=float)
        present = np.unique(labels)
        dist = [np.linalg.norm(xy[labels == c].mean(axis=0) - ref) for c in present]
        present = present[np.lexsort((present, dist))]
    mapping = np.empty(k, dtype=int)
    mapping[present] = np.arange(1, present.size + 1)
    return mapping


def kmeans(features, k, seed=0, coords=None, reference=None, n_restarts=N_RESTARTS,
           max_iter=MAX_ITER):
    """
    Lloyd k-means with k-means++ starts, best of ``n_restarts`` kept.

    Labels run from 1 to ``k``, numbered by increasing distance between the
    mean location of each cluster's sites (``coords``) and ``reference``
    (default: mean of all coords); without ``coords``, by first appearance.
    Restart ``i`` uses the ``i``-th child of ``SeedSequence(seed)``, so the
    result depends only on ``seed``.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if not 1 <= k <= n:
        raise InputError(f"k must be in [1, {n}], got {k}")
    if coords is not None and len(coords) != n:
        raise InputError(f"{len(coords)} coordinates for {n} feature rows")
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_restarts):
        rng = np.random.Generator(np.random.Philox(child))
        out = _lloyd(X, _kmeanspp(X, k, rng), max_iter)
        if best is None or out[2] < best[2] - 1e-12 * max(1.0, best[2]):
            best = out
    labels, centers, inertia, it = best
    mapping = _renumber(labels, k, coords, reference)
    new_centers = np.empty_like(centers)
    new_centers[mapping - 1] = centers
    aic, bic = information_criteria(inertia, n, d, k)
    return ClusterResult(k, mapping[labels], new_centers, inertia, aic, bic, it)


def separation_D(labels, features):
    """
    Cluster separation

        D = 1/k^2 sum_{c != c'} mean_{i in c, i' in c'} |x_i - x_i'|
                                / mean_{i, i' in c} |x_i - x_i'|

    over ordered pairs of distinct clusters; the within-cluster mean runs
    over all ``|c|^2`` ordered pairs including ``i = i'``.  Larger is better
    separated.  A cluster whose within mean is zero (a singleton, or
    identical points) raises ``MetricError``.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    lab = np.asarray(labels)
    if lab.shape != (len(X),):
        raise InputError(f"{lab.shape} labels for {len(X)} rows")
    ids = np.unique(lab)
    k = ids.size
    if k < 2:
        raise MetricError("separation needs at least two clusters")
    groups = [X[lab == c] for c in ids]
    within = []
    for c, G in zip(ids, groups):
        m = G.shape[0]
        w = 2.0 * pdist(G).sum() / (m * m) if m > 1 else 0.0
        if not w > 0:
            raise MetricError(f"cluster {c} has zero within-cluster distance")
        within.append(w)
    total = 0.0
    for a in range(k):
        for b in range(k):
            if a != b:
                total += cdist(groups[a], groups[b]).mean() / within[a]
    return total / k**2


@dataclass
class SelectKTable:
    k: np.ndarray
    aic: np.ndarray
    bic: np.ndarray
    inertia: np.ndarray

    @property
    def best_aic(self):
        return int(self.k[np.argmin(self.aic)])

    @property
    def best_bic(self):
        return int(self.k[np.argmin(self.bic)])

    @property
    def elbow(self):
        """
        k at which the inertia curve bends most: the largest ratio of the
        drop into k to the drop out of k.
        """
        if self.k.size < 3:
            return int(self.k[0])
        drop = -np.diff(self.inertia)
        ratio = drop[:-1] / np.maximum(drop[1:], np.finfo(float).tiny)
        return int(self.k[1 + int(np.argmax(ratio))])


def select_k(features, k_range, seed=0, n_restarts=N_RESTARTS):
    """AIC, BIC and inertia of k-means fits over ``k_range``, sorted by k."""
    X = np.asarray(features, dtype=float)
    ks = np.array(sorted(set(int(k) for k in k_range)))
    if ks.size == 0 or ks.min() < 2 or ks.max() > len(X) - 1:
        raise InputError(f"k_range must lie within [2, {len(X) - 1}]")
    rows = [kmeans(X, k, seed=seed, n_restarts=n_restarts) for k in ks]
    return SelectKTable(ks, np.array([r.aic for r in rows]), np.array([r.bic for r in rows]),
                        np.array([r.inertia for r in rows]))
