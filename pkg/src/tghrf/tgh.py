"""
Tukey g-and-h distribution.

``Y = a + b * tau(Z)`` with ``Z ~ N(0, 1)`` and

    tau(z) = (exp(g z) - 1) / g * exp(h z^2 / 2)        (g != 0)
    tau(z) = z * exp(h z^2 / 2)                          (g == 0)

``g`` controls skewness and ``h >= 0`` tail weight.  For ``h >= 0`` the
transform is strictly increasing, so quantiles, inverse and density are
all available in closed form up to a one-dimensional root solve.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .errors import DomainError, InputError, NumericError

G_EPS = 1e-12
BRACKET = 40.0
MAX_ITER = 200
LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


@dataclass(frozen=True)
class TghParams:
    a: float = 0.0
    b: float = 1.0
    g: float = 0.0
    h: float = 0.0

    def __post_init__(self):
        if not self.b > 0:
            raise InputError(f"scale b must be positive, got {self.b}")

    @property
    def monotone(self):
        """False when ``h < 0``: tau is then not monotone on all of R."""
        return self.h >= 0

    def as_array(self):
        return np.array([self.a, self.b, self.g, self.h])


def _gfactor(z, g):
    """(exp(g z) - 1) / g with the g -> 0 limit z; ``g`` may be an array."""
    if np.ndim(g) == 0:
        if abs(g) < G_EPS:
            return z * 1.0
        return np.expm1(g * z) / g
    small = np.abs(g) < G_EPS
    gs = np.where(small, 1.0, g)
    return np.where(small, z * 1.0, np.expm1(gs * z) / gs)


def tau_gh(z, g, h):
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _gfactor(z, g) * np.exp(0.5 * h * z * z)
    return out if out.ndim else float(out)


def tau_gh_deriv(z, g, h):
    """d tau / d z = exp(h z^2/2) [exp(g z) + h z (exp(g z) - 1)/g]."""
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(0.5 * h * z * z) * (np.exp(g * z) + h * z * _gfactor(z, g))
    return out if out.ndim else float(out)


def log_tau_gh_deriv(z, g, h):
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = 0.5 * h * z * z + np.log(np.exp(g * z) + h * z * _gfactor(z, g))
    return out if out.ndim else float(out)


def _tau_inv_h0(y, g):
    """Closed-form inverse for h = 0; NaN outside the range of tau."""
    if np.ndim(g) == 0 and abs(g) < G_EPS:
        return y * 1.0
    small = np.abs(g) < G_EPS
    gs = np.where(small, 1.0, g)
    with np.errstate(invalid="ignore", divide="ignore"):
        arg = gs * y
        z = np.log1p(arg) / gs
    return np.where(small, y, np.where(arg > -1.0, z, np.nan))


def tau_gh_inv(y, g, h, *, strict=True, z0=None):
    """
    Solve ``tau_gh(z, g, h) = y`` for ``z``; ``g`` and ``h`` may be arrays
    broadcasting against ``y``.

    Safeguarded Newton iteration: a bracket that always contains the root
    is kept per element, and any Newton step that leaves it (or is not
    finite) is replaced by bisection.  ``z0`` is an optional starting
    point (e.g. the solution for nearby parameters).  With ``strict=False``
    values outside the range of tau come back as NaN instead of raising.
    """
    if np.any(np.asarray(h) < 0):
        raise DomainError(f"inverse requires h >= 0, got h={h}")
    y = np.asarray(y, dtype=float)
    if np.ndim(g) or np.ndim(h):
        y, g, h = np.broadcast_arrays(y, np.asarray(g, float), np.asarray(h, float))
        h0 = h == 0
        z = np.empty(y.shape)
        z[h0] = _tau_inv_h0(y[h0], g[h0])
        z[~h0] = _newton_inverse(y[~h0], g[~h0], h[~h0])
        return _check_inverse(z, y, g, h, strict)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    if h == 0:
        z = _tau_inv_h0(y, g)
    else:
        z = _newton_inverse(y, g, h, z0)
    z = _check_inverse(z, y, g, h, strict)
    return float(z[0]) if scalar else z


def _check_inverse(z, y, g, h, strict):
    if strict and not np.all(np.isfinite(z)):
        bad = int(np.flatnonzero(~np.isfinite(z.ravel()))[0])
        gb = np.ravel(g)[bad] if np.ndim(g) else g
        hb = np.ravel(h)[bad] if np.ndim(h) else h
        raise NumericError(
            f"y={y.ravel()[bad]!r} is outside the range of tau_(g={gb}, h={hb})", index=bad
        )
    return z


def _newton_inverse(y, g, h, z0=None):
    # Newton on asinh(tau(z)) = asinh(y): the exp(h z^2 / 2) growth becomes
    # roughly quadratic, so steps from either side of the root behave
    n = y.size
    ok = np.isfinite(y)
    y = np.where(ok, y, 0.0)
    ty = np.arcsinh(y)
    lo = np.full(n, -BRACKET)
    hi = np.full(n, BRACKET)
    # widen brackets for values tau cannot reach inside [-40, 40]
    for _ in range(60):
        grow_hi = tau_gh(hi, g, h) < y
        grow_lo = tau_gh(lo, g, h) > y
        if not (grow_hi.any() or grow_lo.any()):
            break
        hi[grow_hi] *= 2.0
        lo[grow_lo] *= 2.0
    unreachable = (tau_gh(hi, g, h) < y) | (tau_gh(lo, g, h) > y)
    if z0 is not None and np.shape(z0) == (n,) and np.all(np.isfinite(z0)):
        z = np.array(z0, dtype=float)
    else:
        z = np.sign(ty) * np.minimum(np.abs(ty), np.sqrt(2 * np.abs(ty) / np.maximum(h, 1e-8)))
    z = np.clip(z, lo, hi)
    active = ~unreachable
    for _ in range(MAX_ITER):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ez = np.exp(0.5 * h * z * z)
            gf = _gfactor(z, g)
            t = gf * ez
            f = np.arcsinh(t) - ty
            df = ez * (np.exp(g * z) + h * z * gf) / np.hypot(1.0, t)
            znew = z - f / df
        lo = np.where(f < 0, z, lo)
        hi = np.where(f > 0, z, hi)
        bad = ~np.isfinite(znew) | (znew <= lo) | (znew >= hi)
        znew = np.where(bad, 0.5 * (lo + hi), znew)
        znew = np.where(f == 0, z, znew)
        tol = 1e-15 * (1 + np.abs(z))
        done = (f == 0) | (np.abs(znew - z) <= tol) | (hi - lo <= tol)
        z = np.where(active, znew, z)
        active &= ~done
        if not active.any():
            break
    else:
        bad = int(np.flatnonzero(active)[0])
        raise NumericError(f"tau inverse did not converge for y={y[bad]!r}", index=bad)
    z[unreachable | ~ok] = np.nan
    return z


def tgh_quantile(u, params):
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise InputError("probabilities must lie strictly inside (0, 1)")
    return params.a + params.b * tau_gh(special.ndtri(u), params.g, params.h)


def tgh_cdf(y, params):
    z = tau_gh_inv((np.asarray(y, dtype=float) - params.a) / params.b, params.g, params.h)
    return special.ndtr(z)


def tgh_log_pdf(y, params):
    """Log-density by change of variables: log phi(z) - log b - log tau'(z)."""
    if params.h < 0:
        raise DomainError(f"density requires h >= 0, got h={params.h}")
    z = tau_gh_inv((np.asarray(y, dtype=float) - params.a) / params.b, params.g, params.h)
    return -0.5 * z * z - LOG_SQRT_2PI - np.log(params.b) - log_tau_gh_deriv(z, params.g, params.h)


def tgh_rvs(params, size, rng=None):
    rng = np.random.default_rng(rng)
    return params.a + params.b * tau_gh(rng.standard_normal(size), params.g, params.h)


# shifted Legendre polynomials P*_{m-1}(u) weighting the quantile function
_LPOLY = (
    lambda u: np.ones_like(u),
    lambda u: 2 * u - 1,
    lambda u: 6 * u**2 - 6 * u + 1,
    lambda u: 20 * u**3 - 30 * u**2 + 12 * u - 1,
)


def tgh_population_lmoments(g, h):
    """
    ``(l1, l2, tau3, tau4)`` of the standard (a=0, b=1) member.

    Each l-moment is ``int_0^1 Q(u) P*_{m-1}(u) du``; the substitution
    ``u = Phi(z)`` turns it into an integral over the real line against the
    normal density, evaluated by Gauss-Legendre quadrature.
    """
    if not 0 <= h < 1:
        raise DomainError(f"l-moments need 0 <= h < 1, got h={h}")
    return _pop_lmoments(float(g), float(h))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(256)


@lru_cache(maxsize=65536)
def _pop_lmoments(g, h):
    # integrand decays like exp(-(1 - h) z^2 / 2 + |g| |z|); cut where that is e^-60.
    # The integrand is entire, so a fixed Gauss-Legendre rule on each half-line
    # piece converges geometrically (agrees with adaptive quadrature to ~1e-14).
    zc = (abs(g) + np.sqrt(g * g + 120.0 * (1.0 - h))) / (1.0 - h)
    tot = np.zeros(4)
    for a, b in ((-zc, 0.0), (0.0, zc)):
        half = 0.5 * (b - a)
        z = half * _GL_NODES + 0.5 * (a + b)
        u = special.ndtr(z)
        w = _gfactor(z, g) * np.exp(0.5 * (h - 1.0) * z * z - LOG_SQRT_2PI) * _GL_WEIGHTS * half
        tot += [np.dot(p(u), w) for p in _LPOLY]
    if not np.all(np.isfinite(tot)) or not tot[1] > 0:
        raise NumericError(f"l-moment quadrature failed for g={g}, h={h}")
    l1, l2, l3, l4 = tot
    return float(l1), float(l2), float(l3 / l2), float(l4 / l2)
