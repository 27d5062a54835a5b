"""
Exponential covariance kernel with nugget, dense covariance assembly,
truncated eigen-bases (exact and Nystrom) and robust variogram fitting.
"""

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as spl
from scipy.optimize import minimize
from scipy.spatial.distance import pdist

from .errors import DecompositionError, FitError, InputError
from .field import as_coords, cross_distances, pairwise_distances

EIG_CLIP = 1e-10


@dataclass(frozen=True)
class ExpKernelParams:
    """``c(d) = tau2 * exp(-d / r)`` for ``d > 0`` and ``tau2 + sigma2`` at ``d = 0``."""

    tau2: float = 1.0
    sigma2: float = 0.0
    r: float = 1.0

    def __post_init__(self):
        if not self.tau2 > 0:
            raise InputError(f"tau2 must be positive, got {self.tau2}")
        if not self.sigma2 >= 0:
            raise InputError(f"sigma2 must be non-negative, got {self.sigma2}")
        if not self.r > 0:
            raise InputError(f"range r must be positive, got {self.r}")

    @property
    def sill(self):
        return self.tau2 + self.sigma2

    def correlation(self):
        """Same kernel rescaled to unit variance at lag zero."""
        s = self.sill
        return ExpKernelParams(self.tau2 / s, self.sigma2 / s, self.r)

    @classmethod
    def unit(cls, r, nugget=0.0):
        """Correlation kernel with nugget fraction ``nugget`` in [0, 1)."""
        return cls(1.0 - nugget, nugget, r)


def kernel_value(d, params):
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise InputError("distances must be non-negative")
    out = params.tau2 * np.exp(-d / params.r)
    out = np.where(d == 0, params.tau2 + params.sigma2, out)
    return out if out.ndim else float(out)


def cov_matrix(sites, params):
    return kernel_value(pairwise_distances(sites), params)


def cross_cov(a, b, params):
    """Covariance between two site sets; coincident sites get the nugget too."""
    return kernel_value(cross_distances(a, b), params)


@dataclass
class EigenBasis:
    """Leading eigen-pairs ``C ~ vectors @ diag(values) @ vectors.T``."""

    vectors: np.ndarray
    values: np.ndarray
    landmark_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.values.size:
            raise InputError(
                f"vectors {self.vectors.shape} do not match {self.values.size} values"
            )
        if np.any(np.diff(self.values) > 0):
            raise InputError("eigenvalues must be sorted in descending order")

    @property
    def L(self):
        return self.values.size

    @property
    def n(self):
        return self.vectors.shape[0]

    def truncate(self, L):
        if L > self.L:
            raise InputError(f"cannot truncate rank {self.L} basis to {L}")
        return replace(self, vectors=self.vectors[:, :L], values=self.values[:L])

    def reconstruct(self):
        return (self.vectors * self.values) @ self.vectors.T

    def orthogonality_error(self):
        E = self.vectors
        return float(np.abs(E.T @ E - np.eye(self.L)).max())


def _clip(values, vectors, what):
    keep = values > EIG_CLIP * values[0]
    if not keep.all():
        warnings.warn(
            f"{what}: dropped {int((~keep).sum())} eigenvalues below "
            f"{EIG_CLIP:g} * lambda_1; rank reduced to {int(keep.sum())}",
            RuntimeWarning,
            stacklevel=3,
        )
    return values[keep], vectors[:, keep]


def exact_eigs(C, L):
    """Top-``L`` eigen-pairs of a dense symmetric matrix, descending."""
    C = np.asarray(C, dtype=float)
    n = C.shape[0]
    if not 1 <= L <= n:
        raise InputError(f"rank L={L} outside [1, {n}]")
    w, V = spl.eigh(C, subset_by_index=[n - L, n - 1])
    w, V = w[::-1], V[:, ::-1]
    w, V = _clip(w, V, "exact_eigs")
    return EigenBasis(V, w, np.arange(n))


def choose_landmarks(n, m, seed=None):
    """Uniform random landmark indices without replacement, sorted."""
    if not 1 <= m <= n:
        raise InputError(f"landmark count {m} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=m, replace=False))


def nystrom_eigs(sites, params, landmarks, L):
    """
    Approximate the ``L`` leading eigen-pairs of the covariance matrix of
    ``sites`` from the rows belonging to ``landmarks``.

    The landmark block ``K_mm`` is eigendecomposed and its eigenvectors are
    extended to all sites through the cross-covariance ``K_nm`` scaled by
    the inverse eigenvalues.  The extended vectors are then
    re-orthonormalized by diagonalizing the implied approximation
    ``K_nm K_mm^-1 K_mn`` in its own column space, so the returned basis is
    orthonormal and, with every site as a landmark, exact.

    Parameters
    ----------
    sites : array_like, shape (n, 2)
    params : ExpKernelParams
    landmarks : array_like of int
        Row indices used as landmarks, ``L <= len(landmarks) <= n``.
    L : int
        Requested rank.  May come back smaller when eigenvalues are clipped.

    Returns
    -------
    EigenBasis
    """
    xy = as_coords(sites)
    lm = np.asarray(landmarks, dtype=int)
    n, m = len(xy), lm.size
    if not L <= m <= n:
        raise InputError(f"need L <= landmarks <= n, got L={L}, m={m}, n={n}")
    if np.unique(lm).size != m:
        raise InputError("landmark indices must be distinct")
    K_nm = cross_cov(xy, xy[lm], params)
    K_mm = K_nm[lm]
    s, U = np.linalg.eigh(K_mm)
    s, U = s[::-1], U[:, ::-1]
    if not s[0] > 0 or s[-1] <= s[0] * np.finfo(float).eps * m:
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
        raise DecompositionError(
            f"landmark covariance is numerically singular: condition number "
            f"{cond:.3g}, eigenvalue range [{s[-1]:.3g}, {s[0]:.3g}]"
        )
    s, U = _clip(s, U, "nystrom_eigs")
    # Nystrom extension of the landmark eigenvectors, columns renormalized
    E = K_nm @ (U / s)
    E /= np.linalg.norm(E, axis=0)
    # Rayleigh-Ritz on span(E) w.r.t. K_nm K_mm^-1 K_mn keeps the columns orthonormal
    Q, _ = np.linalg.qr(E)
    B = Q.T @ K_nm
    H = (B @ U / s) @ (U.T @ B.T)
    w, V = np.linalg.eigh((H + H.T) / 2)
    w, V = w[::-1][:L], V[:, ::-1][:, :L]
    w, V = _clip(w, V, "nystrom_eigs")
    vecs = Q @ V
    # fix sign so the largest-magnitude entry of each column is positive
    flip = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(vecs.shape[1])])
    return EigenBasis(vecs * flip, w, lm)


def save_basis(basis, prefix):
    """Write ``<prefix>.values.csv`` and ``<prefix>.vectors.npy``."""
    prefix = Path(prefix)
    with open(prefix.with_suffix(".values.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue", "landmark_id"])
        lm = basis.landmark_ids if basis.landmark_ids is not None else []
        for i in range(max(basis.L, len(lm))):
            val = repr(float(basis.values[i])) if i < basis.L else ""
            lid = int(lm[i]) if i < len(lm) else ""
            w.writerow([i, val, lid])
    np.save(prefix.with_suffix(".vectors.npy"), basis.vectors)


def load_basis(prefix):
    prefix = Path(prefix)
    values, lm = [], []
    with open(prefix.with_suffix(".values.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            if row["eigenvalue"]:
                values.append(float(row["eigenvalue"]))
            if row["landmark_id"]:
                lm.append(int(row["landmark_id"]))
    vectors = np.load(prefix.with_suffix(".vectors.npy"))
    return EigenBasis(vectors, np.array(values), np.array(lm, dtype=int))


@dataclass
class VariogramFit:
    params: ExpKernelParams
    bins: list
    objective: float
    initial_objective: float = np.nan


def exp_semivariogram(h, tau2, sigma2, r):
    return sigma2 + tau2 * (1.0 - np.exp(-np.asarray(h) / r))


def robust_semivariance(sites, residuals, n_bins=15, max_sites=3000, seed=0):
    """
    Cressie-Hawkins robust semivariance in equal-width lag bins up to half
    the maximum pairwise distance.  Returns ``(lag_mid, gamma, counts)`` for
    the non-empty bins.
    """
    xy = as_coords(sites)
    z = np.asarray(residuals, dtype=float)
    if z.shape != (len(xy),):
        raise InputError(f"{len(xy)} sites but {z.shape} residuals")
    if len(xy) > max_sites:
        keep = np.sort(np.random.default_rng(seed).choice(len(xy), max_sites, replace=False))
        xy, z = xy[keep], z[keep]
    d = pdist(xy)
    root = np.sqrt(np.abs(pdist(z[:, None])))
    edges = np.linspace(0.0, d.max() / 2, n_bins + 1)
    which = np.digitize(d, edges[1:-1])
    inside = d <= edges[-1]
    counts = np.bincount(which[inside], minlength=n_bins)
    sums = np.bincount(which[inside], weights=root[inside], minlength=n_bins)
    ok = counts > 0
    mean_root = sums[ok] / counts[ok]
    gamma = mean_root**4 / (2.0 * (0.457 + 0.494 / counts[ok]))
    mid = 0.5 * (edges[:-1] + edges[1:])[ok]
    return mid, gamma, counts[ok]


def robust_variogram_wls(sites, residuals, n_bins=15):
    """
    Fit ``{tau2, sigma2, r}`` of the exponential model to the robust
    empirical semivariogram by Cressie's weighted least squares, minimizing
    ``sum N_h (gamma_hat / gamma_model - 1)^2`` with a bounded simplex.
    """
    xy = as_coords(sites)
    z = np.asarray(residuals, dtype=float)
    if len(z) * (len(z) - 1) // 2 < 30:
        raise FitError(f"need at least 30 observation pairs, got {len(z)} sites")
    if np.ptp(z) == 0:
        raise FitError("zero variance")
    mid, gamma, counts = robust_semivariance(xy, z, n_bins)
    if gamma.max() <= 0:
        raise FitError("zero variance")
    if (gamma > 0).sum() < 3:
        raise FitError("fewer than 3 non-degenerate lag bins")
    vscale = float(gamma.max())
    dmax = float(pdist(xy).max()) if len(xy) <= 3000 else float(2 * mid[-1])
    g = gamma / vscale
    h = mid / dmax

    def objective(p):
        model = exp_semivariogram(h, p[0], p[1], p[2])
        return float(np.sum(counts * (g / model - 1.0) ** 2))

    nugget0 = g[0] - (g[1] - g[0]) * h[0] / (h[1] - h[0])
    nugget0 = float(np.clip(nugget0, 0.0, g[0]))
    sill0 = float(np.mean(g[-max(1, len(g) // 3):]))
    x0 = np.array([max(sill0 - nugget0, 0.05 * sill0), max(nugget0, 1e-6), 1.0 / 3.0])
    lo = 1e-8 / vscale
    bounds = [(lo, None), (lo, None), (1e-3 / dmax, 10.0)]
    x0 = np.clip(x0, [b[0] for b in bounds], [b[1] if b[1] else np.inf for b in bounds])
    f0 = objective(x0)
    res = minimize(
        objective, x0, method="Nelder-Mead", bounds=bounds,
        options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 4000, "maxfev": 8000},
    )
    x = res.x if res.fun <= f0 else x0
    params = ExpKernelParams(x[0] * vscale, x[1] * vscale, x[2] * dmax)
    bins = [(float(a), float(b), int(c)) for a, b, c in zip(mid, gamma, counts)]
    return VariogramFit(params, bins, min(float(res.fun), f0), f0)
