"""
Regression S-BLUE (universal-kriging style predictor with a linear mean):

    f(s*) = X(s*)' z + c(s*)' C^-1 (Y - X z),   z = (X' C^-1 X)^-1 X' C^-1 Y

in an exact dense mode and a rank-reduced mode where ``C^-1`` is replaced
by ``E_L Lambda_L^-1 E_L'`` from a truncated eigen-basis.  Also hosts the
Box-Cox linearization used on covariates.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as spl
from scipy import stats

from .errors import DecompositionError, FitError, InputError, StateError
from .field import as_coords
from .kernels import cov_matrix, cross_cov

VIF_LIMIT = 10.0


@dataclass
class SblueModel:
    X: np.ndarray
    z_hat: np.ndarray
    residuals: np.ndarray
    kernel: object
    sites: np.ndarray
    basis: object = None
    t_values: np.ndarray = None
    weights: np.ndarray = None  # C^-1 residuals, or Lambda^-1 E' residuals when rank-reduced
    coef_cov: np.ndarray = None

    @property
    def rank_reduced(self):
        return self.basis is not None

    @property
    def fitted(self):
        return self.weights is not None


def _check_design(X):
    """Raise on collinear columns; warn on variance inflation above 10."""
    n, K = X.shape
    _, R, piv = spl.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, K) * np.finfo(float).eps * diag[0]
    rank = int((diag > tol).sum())
    if rank < K:
        bad = sorted(int(c) for c in piv[rank:])
        raise FitError(f"design matrix is rank deficient; collinear columns: {bad}")
    vif = variance_inflation(X)
    high = [k for k, v in enumerate(vif) if v > VIF_LIMIT]
    if high:
        warnings.warn(f"variance inflation factor above {VIF_LIMIT:g} for columns {high}",
                      RuntimeWarning, stacklevel=3)


def variance_inflation(X):
    """VIF of each non-constant column regressed on the others (NaN for constants)."""
    X = np.asarray(X, dtype=float)
    out = np.full(X.shape[1], np.nan)
    const = np.ptp(X, axis=0) == 0
    for k in np.flatnonzero(~const):
        others = np.column_stack([np.ones(len(X)), X[:, (~const) & (np.arange(X.shape[1]) != k)]])
        coef, *_ = np.linalg.lstsq(others, X[:, k], rcond=None)
        resid = X[:, k] - others @ coef
        ss = np.sum((X[:, k] - X[:, k].mean()) ** 2)
        r2 = 1.0 - resid @ resid / ss
        out[k] = np.inf if r2 >= 1 else 1.0 / (1.0 - r2)
    return out


def _apply_cinv(M, chol=None, basis=None):
    if basis is not None:
        E, lam = basis.vectors, basis.values
        return E @ ((E.T @ M) / (lam if M.ndim == 1 else lam[:, None]))
    return spl.cho_solve(chol, M)


def gls_fit(X, Y, kernel, sites, basis=None):
    """
    Generalized least squares coefficients, residuals and t-values.

    Parameters
    ----------
    X : (n, K) design matrix, full column rank, n > K.
    Y : (n,) observations.
    kernel : ExpKernelParams of the residual process.
    sites : (n, 2) coordinates of the observations.
    basis : EigenBasis, optional
        When given, ``C^-1`` is applied as ``E diag(1/lambda) E'``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    xy = as_coords(sites)
    n, K = X.shape
    if Y.shape != (n,) or len(xy) != n:
        raise InputError(f"X has {n} rows but Y has {Y.shape} and sites {len(xy)}")
    if n <= K:
        raise InputError(f"need n > K, got n={n}, K={K}")
    _check_design(X)
    chol = None
    if basis is None:
        try:
            chol = spl.cho_factor(cov_matrix(xy, kernel), lower=True)
        except np.linalg.LinAlgError as exc:
            raise DecompositionError(f"covariance not positive definite: {exc}") from exc
    elif basis.n != n:
        raise InputError(f"basis built on {basis.n} sites, data has {n}")
    CiX = _apply_cinv(X, chol, basis)
    A = X.T @ CiX
    z = np.linalg.solve(A, CiX.T @ Y)
    resid = Y - X @ z
    coef_cov = np.linalg.inv(A)
    tvals = z / np.sqrt(np.diag(coef_cov))
    if basis is None:
        w = spl.cho_solve(chol, resid)
    else:
        w = (basis.vectors.T @ resid) / basis.values
    return SblueModel(X, z, resid, kernel, xy, basis, tvals, w, coef_cov)


def sblue_predict(s_star, X_star, model):
    """
    Predict at one or more new sites.

    ``s_star`` is ``(2,)`` or ``(m, 2)``; ``X_star`` is ``(K,)`` or ``(m, K)``.
    In rank-reduced mode the cost per site is O(nL) for ``c' E`` and O(L)
    afterwards, since ``Lambda^-1 E' (Y - X z)`` is cached at fit time.
    """
    if model is None or not model.fitted:
        raise StateError("model is not fitted")
    pts = as_coords(s_star)
    Xs = np.atleast_2d(np.asarray(X_star, dtype=float))
    K = model.z_hat.size
    if Xs.shape != (len(pts), K):
        raise InputError(f"X_star must have shape ({len(pts)}, {K}), got {Xs.shape}")
    c = cross_cov(pts, model.sites, model.kernel)
    if model.rank_reduced:
        krig = (c @ model.basis.vectors) @ model.weights
    else:
        krig = c @ model.weights
    out = Xs @ model.z_hat + krig
    return float(out[0]) if np.ndim(s_star) == 1 else out


def _boxcox(y, lam):
    return np.log(y) if lam == 0 else (y**lam - 1.0) / lam


def _linear_llf(lam, x, y):
    """Profile Gaussian log-likelihood of ``y ~ c0 + c1 * boxcox(x, lam)``."""
    A = np.column_stack([np.ones_like(x), _boxcox(x, lam)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    rss = float(np.sum((y - A @ coef) ** 2))
    return -0.5 * y.size * np.log(rss / y.size) if rss > 0 else np.inf


def boxcox_fit_transform(x, y=None, lo=-2.0, hi=2.0, levels=6, points=41):
    """
    Box-Cox exponent for a positive variable ``x``, returning
    ``(lambda, transformed x)``.

    With a response ``y`` the exponent maximizes the likelihood of the
    linear model ``y = c0 + c1 * boxcox(x) + e`` (linearizing a covariate);
    without one it maximizes the usual normality profile likelihood of the
    transformed ``x``.  The search is a grid over ``[lo, hi]`` refined
    ``levels`` times around the best point.
    """
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise InputError("Box-Cox needs strictly positive finite values")
    if np.ptp(x) == 0:
        raise FitError("zero variance")
    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.shape != x.shape:
            raise InputError(f"x has shape {x.shape} but y has {y.shape}")

        def llf(lam):
            return _linear_llf(lam, x, y)
    else:

        def llf(lam):
            return stats.boxcox_llf(lam, x)

    a, b = lo, hi
    best = 1.0
    for _ in range(levels):
        grid = np.linspace(a, b, points)
        vals = np.array([llf(lam) for lam in grid])
        i = int(np.nanargmax(vals))
        best = float(grid[i])
        step = grid[1] - grid[0]
        a, b = max(lo, best - step), min(hi, best + step)
    if abs(best) < 1e-12:
        best = 0.0
    return best, _boxcox(x, best)


def boxcox_transform(y, lam):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise InputError("Box-Cox needs strictly positive values")
    return _boxcox(y, lam)
