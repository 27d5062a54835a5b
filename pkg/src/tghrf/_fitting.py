"""Machinery shared by the full, low-rank and local likelihood fits."""

import numpy as np
from scipy.optimize import minimize

from .errors import FitError, NumericError
from .lmoments import lmoment_match
from .tgh import LOG_SQRT_2PI, TghParams, log_tau_gh_deriv, tau_gh, tau_gh_inv

H_BOUNDS = (0.0, 0.9)
G_BOUNDS = (-3.0, 3.0)
LOGB_BOUNDS = (-12.0, 12.0)
PENALTY = 1e100
NM_OPTS = {"xatol": 1e-7, "fatol": 1e-9, "maxiter": 4000, "maxfev": 8000, "adaptive": False}

THETA1 = ("a", "b", "g", "h")


def robust_scale(y):
    """Median and IQR/1.349 (Gaussian-consistent) of a sample."""
    y = np.asarray(y, dtype=float)
    q1, med, q3 = np.percentile(y, [25, 50, 75])
    scale = (q3 - q1) / 1.3489795003921634
    if not scale > 0:
        scale = float(np.std(y))
    if not scale > 0:
        raise FitError("zero variance")
    return float(med), float(scale)


def latent(ys, a, b, g, h, z0=None):
    """Latent Gaussian scores and the log-Jacobian sum; None when out of range."""
    z = tau_gh_inv((ys - a) / b, g, h, strict=False, z0=z0)
    if not np.all(np.isfinite(z)):
        return None, None
    jac = np.log(b) * ys.size + np.sum(log_tau_gh_deriv(z, g, h))
    if not np.isfinite(jac):
        return None, None
    return z, jac


def start_theta1(ys, fixed=None):
    """
    Starting ``(a, b, g, h)``: ``g, h`` by l-moment matching, ``a`` from
    the median (tau(0) = 0) and ``b`` from the interquartile range
    matched to the g-and-h quartiles.
    """
    fixed = fixed or {}
    p0 = lmoment_match(ys, warn=False)
    g = float(np.clip(fixed.get("g", p0.g), *G_BOUNDS))
    h = float(np.clip(fixed.get("h", p0.h), *H_BOUNDS))
    q1, med, q3 = np.percentile(ys, [25, 50, 75])
    spread = tau_gh(0.6744897501960817, g, h) - tau_gh(-0.6744897501960817, g, h)
    b = (q3 - q1) / spread if q3 > q1 else np.std(ys)
    a = fixed.get("a", med)
    b = fixed.get("b", b)
    # nudge tails until every observation is inside the range of tau
    for _ in range(40):
        if latent(ys, a, b, g, h)[0] is not None:
            break
        if "h" in fixed and "g" in fixed:
            b *= 1.5
        elif "h" not in fixed:
            h = min(max(2 * h, 0.02), H_BOUNDS[1])
        else:
            g *= 0.5
    else:
        raise FitError("could not find a starting point with all data in range")
    return {"a": float(a), "b": float(b), "g": float(g), "h": float(h)}


def pack(theta, free):
    return np.array([np.log(theta[k]) if k == "b" else theta[k] for k in free])


def unpack(x, free, base):
    out = dict(base)
    for k, v in zip(free, x):
        out[k] = float(np.exp(v)) if k == "b" else float(v)
    return out


STEPS = {"a": 0.25, "b": 0.2, "g": 0.1, "h": 0.05}  # b is stepped on the log scale
LOGR_STEP = 0.3
NUGGET_STEP = 0.05


def theta1_steps(free):
    return [STEPS[k] for k in free]


def nelder_mead(fun, x0, steps, bounds, options=None):
    """
    Bounded Nelder-Mead from an explicit initial simplex ``x0 + step_i e_i``.

    scipy's default simplex perturbs each coordinate by 5% of its value,
    which collapses a dimension whose start is (nearly) zero, e.g. log b
    after standardization.  A step that would leave the box is reversed.
    """
    x0 = np.asarray(x0, dtype=float)
    simplex = np.tile(x0, (x0.size + 1, 1))
    for i, (st, (lo, hi)) in enumerate(zip(steps, bounds)):
        up = x0[i] + st
        simplex[i + 1, i] = up if hi is None or up <= hi else x0[i] - st
        if lo is not None and simplex[i + 1, i] < lo:
            simplex[i + 1, i] = lo
    opts = dict(options or NM_OPTS)
    opts["initial_simplex"] = simplex
    return minimize(fun, x0, method="Nelder-Mead", bounds=bounds, options=opts)


def theta1_bounds(free):
    table = {"a": (None, None), "b": LOGB_BOUNDS, "g": G_BOUNDS, "h": H_BOUNDS}
    return [table[k] for k in free]


def loglik_from(gauss, ys, theta, warm=None):
    """
    Total log-likelihood given a Gaussian log-density ``gauss(z)`` (no 2pi).
    ``warm`` is an optional dict holding the last latent scores, used to
    start the inverse transform and updated in place.
    """
    z0 = warm.get("z") if warm is not None else None
    z, jac = latent(ys, theta["a"], theta["b"], theta["g"], theta["h"], z0)
    if z is None:
        return -np.inf
    if warm is not None:
        warm["z"] = z
    return gauss(z) - ys.size * LOG_SQRT_2PI - jac


def optimize_theta1(gauss, ys, theta, fixed):
    """Maximize over the free members of ``(a, b, g, h)`` with the Gaussian part fixed."""
    free = [k for k in THETA1 if k not in fixed]
    if not free:
        return dict(theta), loglik_from(gauss, ys, theta)

    warm = {}

    def negll(x):
        ll = loglik_from(gauss, ys, unpack(x, free, theta), warm)
        return -ll if np.isfinite(ll) else PENALTY

    x0 = pack(theta, free)
    f0 = negll(x0)
    res = nelder_mead(negll, x0, theta1_steps(free), theta1_bounds(free))
    if res.fun <= f0:
        return unpack(res.x, free, theta), -float(res.fun)
    return dict(theta), -f0


def check_monotone(history, tol=1e-8):
    if len(history) >= 2 and history[-1] < history[-2] - tol * (1 + abs(history[-2])):
        raise NumericError(
            f"log-likelihood decreased from {history[-2]:.10g} to {history[-1]:.10g}"
        )


def numeric_hessian(f, x, steps):
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    k = x.size
    H = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = steps[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / steps[i] ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = steps[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * steps[i] * steps[j])
    return H


def theta1_intervals(gauss, ys, theta, fixed, level_z=1.959963984540054):
    """
    Wald intervals for ``(a, b, g, h)`` from the numeric Hessian of the
    log-likelihood over the free parameters, Gaussian part held fixed.
    ``h`` sitting on its lower bound is evaluated one step inside.
    Unavailable entries are NaN.
    """
    free = [k for k in THETA1 if k not in fixed]
    lo = np.full(4, np.nan)
    hi = np.full(4, np.nan)
    if not free:
        return lo, hi
    steps = np.array([1e-4 * max(1.0, abs(theta[k])) for k in free])
    center = dict(theta)
    if "h" in free:
        center["h"] = max(center["h"], 1.5 * steps[free.index("h")])
    x0 = np.array([center[k] for k in free])

    def f(x):
        return loglik_from(gauss, ys, {**center, **dict(zip(free, x))})

    try:
        H = numeric_hessian(f, x0, steps)
        cov = np.linalg.inv(-H)
        se = np.sqrt(np.diag(cov))
    except (np.linalg.LinAlgError, FloatingPointError):
        return lo, hi
    for k, s in zip(free, se):
        i = THETA1.index(k)
        if np.isfinite(s):
            lo[i] = theta[k] - level_z * s
            hi[i] = theta[k] + level_z * s
    if "h" in free:
        lo[3] = max(lo[3], 0.0) if np.isfinite(lo[3]) else lo[3]
    return lo, hi


def to_params(theta, loc, scale):
    """Map standardized-scale parameters back to data units."""
    return TghParams(loc + scale * theta["a"], scale * theta["b"], theta["g"], theta["h"])
