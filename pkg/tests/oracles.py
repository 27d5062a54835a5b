"""
Independent reference implementations used only by the tests.

Each oracle computes the same quantity as a package routine by a
different route (brute force, dense linear algebra, arbitrary precision
or a generic optimizer), so agreement is evidence of correctness rather
than of shared code.
"""

import itertools
from math import comb

import mpmath as mp
import numpy as np
from scipy import optimize, stats
from scipy.spatial.distance import cdist


def brute_sample_lmoments(y):
    """
    Unbiased sample l-moments as averages over all size-r subsamples of
    ``(1/r) sum_k (-1)^k C(r-1, k) X_(r-k):r``.
    """
    y = np.sort(np.asarray(y, dtype=float))
    out = []
    for r in (1, 2, 3, 4):
        if len(y) < r:
            out.append(0.0)
            continue
        tot, cnt = 0.0, 0
        for sub in itertools.combinations(y, r):
            s = sorted(sub)
            tot += sum((-1) ** k * comb(r - 1, k) * s[r - 1 - k] for k in range(r)) / r
            cnt += 1
        out.append(tot / cnt)
    return out


def population_lmoments_mp(g, h, dps=30):
    """``(l1, l2, tau3, tau4)`` of the standard TGH by arbitrary-precision quadrature."""
    polys = (lambda u: 1, lambda u: 2 * u - 1, lambda u: 6 * u**2 - 6 * u + 1,
             lambda u: 20 * u**3 - 30 * u**2 + 12 * u - 1)
    with mp.workdps(dps):
        lm = [mp.quad(lambda z, p=p: tau_mp(z, g, h, dps) * p(mp.ncdf(z)) * mp.npdf(z),
                      [-mp.inf, -5, 0, 5, mp.inf]) for p in polys]
        return tuple(float(v) for v in (lm[0], lm[1], lm[2] / lm[1], lm[3] / lm[1]))


def tau_mp(z, g, h, dps=40):
    """Arbitrary-precision TGH transform."""
    with mp.workdps(dps):
        z = mp.mpf(z)
        core = z if g == 0 else mp.expm1(mp.mpf(g) * z) / mp.mpf(g)
        return core * mp.e ** (mp.mpf(h) * z * z / 2)


def tau_deriv_mp(z, g, h, dps=40):
    """Derivative of the TGH transform by high-precision numerical differentiation."""
    def f(t):
        core = t if g == 0 else mp.expm1(mp.mpf(g) * t) / mp.mpf(g)
        return core * mp.e ** (mp.mpf(h) * t * t / 2)

    with mp.workdps(dps):
        return mp.diff(f, mp.mpf(z))


def exp_cov(xy, tau2, sigma2, r):
    d = cdist(xy, xy)
    return tau2 * np.exp(-d / r) + sigma2 * (d == 0)


def _bisect_mp(f, lo=-12, hi=12, iters=160):
    with mp.workdps(50):
        lo, hi = mp.mpf(lo), mp.mpf(hi)
        assert f(lo) < 0 < f(hi), "root not bracketed"
        for _ in range(iters):
            mid = (lo + hi) / 2
            if f(mid) < 0:
                lo = mid
            else:
                hi = mid
        return (lo + hi) / 2


def tgh_rf_loglik_cov(a, b, g, h, C, y):
    """
    Joint log-density by the multivariate change of variables, with each
    latent value found by a scalar root solve in arbitrary precision.
    """
    z = np.empty(len(y))
    logjac = 0.0
    for i, yi in enumerate(y):
        target = (yi - a) / b
        zi = float(_bisect_mp(lambda t: tau_mp(t, g, h) - target))
        z[i] = zi
        # d tau / dz by arbitrary-precision differentiation
        d = mp.diff(lambda t: tau_mp(t, g, h), zi)
        logjac += float(mp.log(b * d))
    return stats.multivariate_normal(np.zeros(len(y)), C).logpdf(z) - logjac


def gaussian_profile_mle(xy, y, r_bounds=(1e-2, 1e2)):
    """
    Gaussian MLE of ``y ~ N(a 1, b^2 R(r))`` with exponential correlation
    and no nugget: ``a`` and ``b`` are profiled out in closed form and the
    range is found by bounded scalar minimization in ``log r``.
    Returns ``(a, b, r, loglik)``.
    """
    n = len(y)
    d = cdist(xy, xy)
    one = np.ones(n)

    def profile(logr):
        R = np.exp(-d / np.exp(logr))
        Ri = np.linalg.inv(R)
        a = (one @ Ri @ y) / (one @ Ri @ one)
        e = y - a
        b2 = e @ Ri @ e / n
        _, logdet = np.linalg.slogdet(R)
        return -0.5 * n * np.log(2 * np.pi * b2) - 0.5 * logdet - 0.5 * n, a, np.sqrt(b2)

    res = optimize.minimize_scalar(lambda s: -profile(s)[0], bounds=np.log(r_bounds),
                                   method="bounded", options={"xatol": 1e-12})
    ll, a, b = profile(res.x)
    return a, b, float(np.exp(res.x)), ll


def dense_conditional(s0, design_xy, eps, kernel_fn, mu0=0.0):
    """
    Dense Gaussian conditioning at ``s0`` on the design: returns
    ``(C^-1 eps, mu, beta, psi)`` with
    ``mu = mu0 + c0' C^-1 (eps - mu0)``, ``beta = c(s0, s0) - c0' C^-1 c0``
    and ``psi = (eps - mu0)' C^-1 (eps - mu0)``.
    """
    C = kernel_fn(cdist(design_xy, design_xy))
    c0 = kernel_fn(cdist(design_xy, np.atleast_2d(s0)))[:, 0]
    c00 = float(kernel_fn(np.zeros((1, 1)))[0, 0])
    e = np.asarray(eps, float) - mu0
    w = np.linalg.solve(C, e)
    v = np.linalg.solve(C, c0)
    return w, mu0 + c0 @ w, c00 - c0 @ v, e @ w


def kmeans_exhaustive_inertia(X, labels):
    """Within-cluster sum of squares of a given partition."""
    return sum(((X[labels == c] - X[labels == c].mean(axis=0)) ** 2).sum()
               for c in np.unique(labels))


def moment_blobs(seed, k=7, per=40, d=4, spread=0.15, sep=3.0, layout="merged-mean"):
    """
    ``k`` tight Gaussian blobs in ``d`` dimensions; returns ``(X, truth)``
    with labels 0..k-1.

    ``merged-mean``: the first coordinate of the centers takes only
    ``ceil(k / 2)`` distinct values, so clustering on it alone must merge
    blobs.  ``isotropic``: every center column is a permutation of
    ``sep * (0..k-1)`` (needs prime ``k > d``), so the blobs stay spherical
    after standardization.
    """
    rng = np.random.default_rng(seed)
    centers = np.zeros((k, d))
    for c in range(k):
        if layout == "isotropic":
            centers[c] = sep * ((c * np.arange(1, d + 1)) % k)
        else:
            centers[c, 0] = sep * (c // 2)
            centers[c, 1 + c % (d - 1)] = sep * (1 + c % 2)
    X = np.vstack([ctr + spread * rng.standard_normal((per, d)) for ctr in centers])
    return X, np.repeat(np.arange(k), per)

def same_partition(a, b):
    """True when two label vectors define the same partition."""
    a, b = np.asarray(a), np.asarray(b)
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))
