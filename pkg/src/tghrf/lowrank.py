"""
Low-rank TGH random field.

The latent correlation matrix is replaced by ``E_L diag(kappa) E_L'`` with

    kappa_l = n p lambda_l^m,     p = 1 / sum_l lambda_l^m,

built from the ``L`` leading eigen-pairs of the exponential correlation
matrix at a fixed range ``r`` (the longest edge of the minimum spanning
tree of the sites).  ``m > 1`` emphasizes the leading eigenvectors and
``m < 1`` flattens the spectrum; the trace of the represented matrix is
``n`` for every ``m``.

The represented matrix has rank ``L``.  The likelihood is evaluated with
an isotropic residual of variance ``rho`` on the orthogonal complement of
``E_L``, ``rho`` being the correlation mass the basis leaves out, per
missing dimension, floored at ``1e-6``.  With ``w = E_L' z``:

    z' C^-1 z  = sum_l w_l^2 / kappa_l + (z'z - w'w) / rho
    log |C|    = sum_l log kappa_l + (n - L) log rho

so one evaluation costs O(nL).
"""

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import LinearOperator
from scipy.special import logsumexp

from . import _fitting as F
from .errors import DomainError, FitError, InputError
from .field import as_coords, mst_max_edge
from .full import TghRfModel
from .kernels import ExpKernelParams, choose_landmarks, cov_matrix, exact_eigs, nystrom_eigs
from .tgh import LOG_SQRT_2PI, tau_gh_inv

M_BOUNDS = (0.1, 50.0)
RHO_FLOOR = 1e-6


@dataclass(frozen=True)
class LowRankSpec:
    """
    Eigen-basis of the unit correlation matrix at fixed range ``r`` and the
    power ``m`` applied to its eigenvalues.

    ``p`` is ``1 / sum(lambda^m)``; it can under- or overflow for extreme
    ``m``, so the scaled eigenvalues are formed from ``log_p``.
    """

    basis: object
    m: float = 1.0
    r: float = None

    def __post_init__(self):
        if not self.m > 0:
            raise InputError(f"scale exponent m must be positive, got {self.m}")
        if np.any(self.basis.values <= 0):
            raise InputError("low-rank basis needs strictly positive eigenvalues")

    @property
    def n(self):
        return self.basis.n

    @property
    def L(self):
        return self.basis.L

    @property
    def log_p(self):
        return float(-logsumexp(self.m * np.log(self.basis.values)))

    @property
    def p(self):
        return float(np.exp(self.log_p))

    @property
    def log_kappa(self):
        return np.log(self.n) + self.m * np.log(self.basis.values) + self.log_p

    @property
    def kappa(self):
        return np.exp(self.log_kappa)

    @property
    def residual(self):
        """Per-dimension variance on the complement of the basis (0 when L = n)."""
        if self.L >= self.n:
            return 0.0
        lost = (self.n - float(np.sum(self.basis.values))) / (self.n - self.L)
        return max(lost, RHO_FLOOR)

    def with_m(self, m):
        return replace(self, m=float(m))


def make_lowrank_spec(sites, L, m=1.0, r=None, method="exact", landmarks=None, seed=0):
    """
    Build a ``LowRankSpec`` for a site set.

    Parameters
    ----------
    sites : (n, 2) coordinates.
    L : int
        Number of eigen-pairs kept.
    m : float
        Initial scale exponent.
    r : float, optional
        Correlation range; defaults to ``mst_max_edge(sites)``.
    method : {"exact", "nystrom"}
        Dense ``eigh`` on the full correlation matrix, or the Nystrom
        approximation from ``landmarks`` sites.
    landmarks : int or array of int, optional
        Landmark count (chosen at random with ``seed``) or explicit indices;
        the default for Nystrom is ``min(n, max(2 L, 500))``.
    """
    xy = as_coords(sites)
    n = len(xy)
    if r is None:
        r = mst_max_edge(xy)
    kern = ExpKernelParams.unit(r)
    if method == "exact":
        basis = exact_eigs(cov_matrix(xy, kern), L)
    elif method == "nystrom":
        if landmarks is None:
            landmarks = min(n, max(2 * L, 500))
        if np.ndim(landmarks) == 0:
            landmarks = choose_landmarks(n, int(landmarks), seed)
        basis = nystrom_eigs(xy, kern, landmarks, L)
    else:
        raise InputError(f"unknown basis method {method!r}")
    return LowRankSpec(basis, float(m), float(r))


def lowrank_corr(spec):
    """Represented matrix ``E diag(kappa) E'`` as a symmetric LinearOperator."""
    E, kap = spec.basis.vectors, spec.kappa

    def mv(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return E @ (kap * (E.T @ x))
        return E @ (kap[:, None] * (E.T @ x))

    return LinearOperator((spec.n, spec.n), matvec=mv, rmatvec=mv, matmat=mv, dtype=float)


def lowrank_dense(spec, residual=False):
    """Dense represented matrix, optionally with the complement residual added."""
    E = spec.basis.vectors
    C = (E * spec.kappa) @ E.T
    if residual and spec.L < spec.n:
        C += spec.residual * (np.eye(spec.n) - E @ E.T)
    return C


def _gauss(spec):
    E = spec.basis.vectors
    log_kap = spec.log_kappa
    kap = np.exp(log_kap)
    extra = spec.n - spec.L
    rho = spec.residual
    half_logdet = 0.5 * (np.sum(log_kap) + (extra * np.log(rho) if extra else 0.0))

    def gauss(z):
        w = E.T @ z
        q = np.sum(w * w / kap)
        if extra:
            q += max(z @ z - w @ w, 0.0) / rho
        return -0.5 * q - half_logdet

    return gauss


def lowrank_loglik(params, m, spec, values):
    """
    Log-likelihood of ``values`` (ordered like the basis rows) under the
    low-rank TGH random field with exponent ``m``.
    """
    if params.h < 0:
        raise DomainError(f"likelihood requires h >= 0, got h={params.h}")
    y = np.asarray(values, dtype=float)
    if y.shape != (spec.n,):
        raise InputError(f"basis has {spec.n} rows but values have shape {y.shape}")
    theta = {"a": params.a, "b": params.b, "g": params.g, "h": params.h}
    z, jac = F.latent(y, **theta)
    if z is None:
        tau_gh_inv((y - params.a) / params.b, params.g, params.h)  # raises with the site index
    return float(_gauss(spec.with_m(m))(z) - y.size * LOG_SQRT_2PI - jac)


def lowrank_sample(spec, size=None, rng=None, residual=True):
    """Draw latent fields ``E diag(sqrt(kappa)) xi`` (plus complement noise)."""
    rng = np.random.default_rng(rng)
    k = 1 if size is None else int(size)
    E = spec.basis.vectors
    Z = E @ (np.sqrt(spec.kappa)[:, None] * rng.standard_normal((spec.L, k)))
    if residual and spec.L < spec.n:
        eps = rng.standard_normal((spec.n, k))
        Z += np.sqrt(spec.residual) * (eps - E @ (E.T @ eps))
    return Z[:, 0] if size is None else Z.T


def _best_m(gauss_for, z, const, m0, bounds):
    """Maximize over m: coarse log-grid, then bounded Brent around the best node."""
    lo, hi = np.log(bounds[0]), np.log(bounds[1])

    def negll(t):
        return -(gauss_for(np.exp(t))(z) + const)

    grid = np.linspace(lo, hi, 41)
    vals = np.array([negll(t) for t in grid])
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(negll, bounds=(a, b), method="bounded", options={"xatol": 1e-10})
    cands = [(float(res.fun), float(res.x)), (float(vals[i]), float(grid[i])),
             (negll(np.log(m0)), float(np.log(m0)))]
    f, t = min(cands)
    return float(np.exp(t)), -f


def fit_lowrank(values, spec, init=None, max_iter=50, tol=1e-6, fixed=None,
                m_bounds=M_BOUNDS, intervals=True):
    """
    Alternating maximum likelihood for the low-rank TGH random field.

    The marginal block ``(a, b, g, h)`` is maximized with ``m`` fixed, then
    ``m`` with the marginal block fixed, until the log-likelihood gain of an
    outer iteration is below ``tol``.  ``r`` stays at ``spec.r``.

    Parameters
    ----------
    values : (n,) observations ordered like the basis rows.
    spec : LowRankSpec with ``L >= 10``; ``spec.m`` is the starting m.
    init : TghRfModel, optional
        Starting ``(a, b, g, h)`` (and ``m`` if set).
    fixed : dict, optional
        Marginal parameters held constant.

    Returns
    -------
    TghRfModel
        With ``m`` set and ``kernel`` the unit correlation at range ``spec.r``.
    """
    y = np.asarray(values, dtype=float)
    n = y.size
    if spec.L < 10:
        raise InputError(f"low-rank fit needs L >= 10, got L={spec.L}")
    if y.shape != (spec.n,):
        raise InputError(f"basis has {spec.n} rows but values have shape {y.shape}")
    loc, scale = F.robust_scale(y)
    ys = (y - loc) / scale
    fixed_s = dict(fixed or {})
    if "a" in fixed_s:
        fixed_s["a"] = (fixed_s["a"] - loc) / scale
    if "b" in fixed_s:
        fixed_s["b"] = fixed_s["b"] / scale

    m = float(spec.m)
    if init is not None:
        p = init.params
        theta = {"a": (p.a - loc) / scale, "b": p.b / scale, "g": p.g, "h": p.h}
        theta.update(fixed_s)
        if init.m is not None:
            m = float(init.m)
    else:
        theta = F.start_theta1(ys, fixed_s)
    m = float(np.clip(m, *m_bounds))

    def gauss_for(mm):
        return _gauss(spec.with_m(mm))

    gauss = gauss_for(m)
    ll = F.loglik_from(gauss, ys, theta)
    if not np.isfinite(ll):
        raise FitError("initial parameters put data outside the range of the transform")
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        theta, ll = F.optimize_theta1(gauss, ys, theta, fixed_s)
        z, jac = F.latent(ys, theta["a"], theta["b"], theta["g"], theta["h"])
        m, ll = _best_m(gauss_for, z, -n * LOG_SQRT_2PI - jac, m, m_bounds)
        gauss = gauss_for(m)
        history.append(ll)
        F.check_monotone(history)
        if abs(history[-1] - history[-2]) < tol:
            converged = True
            break

    ci_lo = ci_hi = np.full(4, np.nan)
    if intervals:
        ci_lo, ci_hi = F.theta1_intervals(gauss, ys, theta, fixed_s)
        for v in (ci_lo, ci_hi):
            v[0] = loc + scale * v[0]
            v[1] = scale * v[1]
    shift = n * np.log(scale)
    return TghRfModel(
        params=F.to_params(theta, loc, scale),
        kernel=ExpKernelParams.unit(spec.r) if spec.r else None,
        loglik=float(ll - shift),
        iterations=it,
        converged=converged,
        m=m,
        history=[h - shift for h in history],
        ci_low=ci_lo,
        ci_high=ci_hi,
    )


def timed_fit_lowrank(sites, values, L, method="exact", **kw):
    """Build the basis and fit; returns ``(model, seconds)`` including the basis."""
    t0 = time.perf_counter()
    spec = make_lowrank_spec(sites, L, method=method)
    model = fit_lowrank(values, spec, **kw)
    return model, time.perf_counter() - t0
