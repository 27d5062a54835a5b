"""
Full-likelihood Tukey g-and-h random field.

Observations are ``y_i = a + b * tau(Z_i)`` with ``Z`` a zero-mean,
unit-variance Gaussian field whose correlation matrix ``C`` comes from the
exponential kernel.  The log-likelihood is

    -1/2 Z' C^-1 Z - 1/2 log|C| - n/2 log(2 pi) - n log b - sum_i log tau'(Z_i)

with ``Z_i = tau^-1((y_i - a) / b)``.  Estimation alternates between the
marginal block ``(a, b, g, h)`` and the dependence block ``(r, nugget)``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as spl
from scipy.special import ndtri

from . import _fitting as F
from .errors import DecompositionError, DomainError, FitError, InputError, NumericError
from .field import as_coords, pairwise_distances
from .kernels import ExpKernelParams, cov_matrix, kernel_value, robust_variogram_wls
from .tgh import LOG_SQRT_2PI, TghParams, log_tau_gh_deriv, tau_gh_inv

NUGGET_MAX = 0.95


@dataclass
class TghRfModel:
    params: TghParams
    kernel: ExpKernelParams = None
    loglik: float = np.nan
    iterations: int = 0
    converged: bool = False
    m: float = None
    history: list = field(default_factory=list)
    ci_low: np.ndarray = None
    ci_high: np.ndarray = None


def _chol(C):
    try:
        return spl.cho_factor(C, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"correlation matrix not positive definite: {exc}") from exc


def _gauss_from_chol(chol):
    L = chol[0]
    half_logdet = np.sum(np.log(np.diag(L)))

    def gauss(z):
        w = spl.solve_triangular(L, z, lower=True, check_finite=False)
        return -0.5 * (w @ w) - half_logdet

    return gauss


def tgh_rf_loglik(params, kernel, sites, values):
    """
    Exact log-likelihood of a TGH random field.

    ``kernel`` gives the covariance of the latent field directly; pass a
    unit-sill kernel (``ExpKernelParams.unit``) for the usual model.
    """
    if params.h < 0:
        raise DomainError(f"likelihood requires h >= 0, got h={params.h}")
    y = np.asarray(values, dtype=float)
    xy = as_coords(sites)
    if y.shape != (len(xy),):
        raise InputError(f"{len(xy)} sites but values of shape {y.shape}")
    z = tau_gh_inv((y - params.a) / params.b, params.g, params.h, strict=False)
    if not np.all(np.isfinite(z)):
        bad = int(np.flatnonzero(~np.isfinite(z))[0])
        raise NumericError(
            f"value {y[bad]!r} at site {bad} is outside the range of the transform",
            index=bad,
        )
    gauss = _gauss_from_chol(_chol(cov_matrix(xy, kernel)))
    return float(
        gauss(z) - y.size * LOG_SQRT_2PI - y.size * np.log(params.b)
        - np.sum(log_tau_gh_deriv(z, params.g, params.h))
    )


class _Dependence:
    """Exponential correlation with optional nugget on a fixed distance matrix."""

    def __init__(self, D, fit_nugget):
        self.D = D
        self.fit_nugget = fit_nugget

    def kernel(self, x):
        r = float(np.exp(x[0]))
        nug = float(np.clip(x[1], 0.0, NUGGET_MAX)) if self.fit_nugget else 0.0
        return ExpKernelParams.unit(r, nug)

    def pack(self, kernel):
        x = [np.log(kernel.r)]
        if self.fit_nugget:
            x.append(float(np.clip(kernel.correlation().sigma2, 0.0, NUGGET_MAX)))
        return np.array(x)

    def gauss(self, x):
        return _gauss_from_chol(_chol(kernel_value(self.D, self.kernel(x))))


def _start_kernel(xy, ys, fit_nugget):
    """Variogram fit on normal scores of the data, rescaled to unit sill."""
    ranks = np.argsort(np.argsort(ys, kind="stable"), kind="stable") + 1
    scores = ndtri(ranks / (len(ys) + 1))
    try:
        vf = robust_variogram_wls(xy, scores).params.correlation()
    except FitError:
        vf = ExpKernelParams.unit(np.median(pairwise_distances(xy)) / 3)
    nug = min(vf.sigma2, NUGGET_MAX * 0.9) if fit_nugget else 0.0
    return ExpKernelParams.unit(vf.r, nug)


def _scaled_fixed(fixed, loc, scale):
    out = dict(fixed or {})
    if "a" in out:
        out["a"] = (out["a"] - loc) / scale
    if "b" in out:
        out["b"] = out["b"] / scale
    return out


def fit_full(sites, values, init=None, max_iter=50, tol=1e-6, fixed=None,
             fit_nugget=True, polish=True, intervals=True):
    """
    Alternating maximum likelihood for the full TGH random field.

    Parameters
    ----------
    sites, values : observations (n >= 20).
    init : TghRfModel, optional
        Starting point; by default ``(a, b, g, h)`` come from the median,
        the quartiles and l-moment matching, and the range/nugget from a
        robust variogram fit on normal scores.
    max_iter : int
        Maximum outer (two-block) iterations.
    tol : float
        Stop when the outer-iteration log-likelihood gain is below ``tol``.
    fixed : dict, optional
        Parameters held constant, e.g. ``{"g": 0.0, "h": 0.0}``.
    fit_nugget : bool
        Estimate a nugget fraction in ``[0, 0.95)`` alongside the range.
    polish : bool
        Finish with one joint simplex over all free parameters.
    intervals : bool
        Compute 95% Wald intervals for ``(a, b, g, h)``.

    Returns
    -------
    TghRfModel
        ``kernel`` is the unit-sill latent correlation kernel.
    """
    xy = as_coords(sites)
    y = np.asarray(values, dtype=float)
    n = y.size
    if n < 20:
        raise InputError(f"fit_full needs at least 20 observations, got {n}")
    if len(xy) != n:
        raise InputError(f"{len(xy)} sites but {n} values")
    loc, scale = F.robust_scale(y)
    ys = (y - loc) / scale
    fixed_s = _scaled_fixed(fixed, loc, scale)
    dep = _Dependence(pairwise_distances(xy), fit_nugget)

    if init is not None:
        p = init.params
        theta = {"a": (p.a - loc) / scale, "b": p.b / scale, "g": p.g, "h": p.h}
        theta.update(fixed_s)
        kern = init.kernel.correlation() if init.kernel is not None else _start_kernel(xy, ys, fit_nugget)
    else:
        theta = F.start_theta1(ys, fixed_s)
        kern = _start_kernel(xy, ys, fit_nugget)
    x2 = dep.pack(kern)
    gauss = dep.gauss(x2)
    ll = F.loglik_from(gauss, ys, theta)
    if not np.isfinite(ll):
        raise FitError("initial parameters put data outside the range of the transform")
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        theta, ll = F.optimize_theta1(gauss, ys, theta, fixed_s)
        z, jac = F.latent(ys, theta["a"], theta["b"], theta["g"], theta["h"])
        const = -n * LOG_SQRT_2PI - jac

        def negll2(x):
            try:
                return -(dep.gauss(x)(z) + const)
            except DecompositionError:
                return F.PENALTY

        f0 = negll2(x2)
        bounds = [(np.log(1e-3 * dep.D.max()), np.log(1e3 * dep.D.max()))]
        if fit_nugget:
            bounds.append((0.0, NUGGET_MAX))
        steps = [F.LOGR_STEP] + ([F.NUGGET_STEP] if fit_nugget else [])
        res = F.nelder_mead(negll2, x2, steps, bounds)
        if res.fun < f0:
            x2 = res.x
        gauss = dep.gauss(x2)
        ll = F.loglik_from(gauss, ys, theta)
        history.append(ll)
        F.check_monotone(history)
        if abs(history[-1] - history[-2]) < tol:
            converged = True
            break

    if polish:
        theta, x2, ll = _polish(dep, ys, theta, x2, fixed_s, ll)
        gauss = dep.gauss(x2)
    ci_lo = ci_hi = np.full(4, np.nan)
    if intervals:
        ci_lo, ci_hi = F.theta1_intervals(gauss, ys, theta, fixed_s)
        ci_lo = _unscale_ci(ci_lo, loc, scale)
        ci_hi = _unscale_ci(ci_hi, loc, scale)
    return TghRfModel(
        params=F.to_params(theta, loc, scale),
        kernel=dep.kernel(x2),
        loglik=float(ll - n * np.log(scale)),
        iterations=it,
        converged=converged,
        history=[h - n * np.log(scale) for h in history],
        ci_low=ci_lo,
        ci_high=ci_hi,
    )


def _unscale_ci(v, loc, scale):
    v = v.copy()
    v[0] = loc + scale * v[0]
    v[1] = scale * v[1]
    return v


def _polish(dep, ys, theta, x2, fixed, ll):
    free = [k for k in F.THETA1 if k not in fixed]
    k1 = len(free)

    warm = {}

    def negll(x):
        th = F.unpack(x[:k1], free, theta)
        try:
            val = F.loglik_from(dep.gauss(x[k1:]), ys, th, warm)
        except DecompositionError:
            return F.PENALTY
        return -val if np.isfinite(val) else F.PENALTY

    x0 = np.concatenate([F.pack(theta, free), x2])
    bounds = F.theta1_bounds(free) + [(np.log(1e-3 * dep.D.max()), np.log(1e3 * dep.D.max()))]
    if dep.fit_nugget:
        bounds.append((0.0, NUGGET_MAX))
    steps = F.theta1_steps(free) + [F.LOGR_STEP] + ([F.NUGGET_STEP] if dep.fit_nugget else [])
    opts = dict(F.NM_OPTS, xatol=1e-9, fatol=1e-11)
    res = F.nelder_mead(negll, x0, steps, bounds, opts)
    if res.fun < -ll:
        return F.unpack(res.x[:k1], free, theta), res.x[k1:], -float(res.fun)
    return theta, x2, ll
