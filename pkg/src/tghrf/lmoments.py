"""Sample l-moments and l-moment matching for the Tukey g-and-h family."""

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import least_squares

from .errors import InputError, NumericError
from .tgh import TghParams, tgh_population_lmoments

G_GRID = np.round(np.arange(-1.5, 1.5001, 0.1), 10)
H_GRID = np.round(np.arange(0.0, 0.6001, 0.1), 10)
H_MAX = 0.95


@dataclass(frozen=True)
class LMoments:
    l1: float
    l2: float
    l3: float
    l4: float

    @property
    def tau3(self):
        return self.l3 / self.l2 if self.l2 > 0 else np.nan

    @property
    def tau4(self):
        return self.l4 / self.l2 if self.l2 > 0 else np.nan


def pwm(y, m):
    """Unbiased probability-weighted moment ``b_m`` of a sorted sample."""
    y = np.asarray(y, dtype=float)
    n = y.size
    j = np.arange(1, n + 1, dtype=float)
    w = np.ones(n)
    for k in range(1, m + 1):
        w *= (j - k) / (n - k)
    return float(np.mean(w * y))


def sample_lmoments(y):
    """
    First four sample l-moments from the order-statistic weights

        b_m = 1/n sum_j [(j-1)...(j-m)] / [(n-1)...(n-m)] y_(j)

    combined as ``l1 = b0``, ``l2 = 2 b1 - b0``, ``l3 = 6 b2 - 6 b1 + b0``,
    ``l4 = 20 b3 - 30 b2 + 12 b1 - b0``.
    """
    y = np.sort(np.asarray(y, dtype=float).ravel())
    if y.size < 4:
        raise InputError(f"need at least 4 observations, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise InputError("sample contains non-finite values")
    b0, b1, b2, b3 = (pwm(y, m) for m in range(4))
    l2 = 2 * b1 - b0
    l3 = 6 * b2 - 6 * b1 + b0
    l4 = 20 * b3 - 30 * b2 + 12 * b1 - b0
    if np.ptp(y) == 0:
        l2 = l3 = l4 = 0.0
    return LMoments(b0, l2, l3, l4)


@lru_cache(maxsize=1)
def _ratio_table():
    tab = np.empty((G_GRID.size, H_GRID.size, 2))
    for i, g in enumerate(G_GRID):
        for k, h in enumerate(H_GRID):
            tab[i, k] = tgh_population_lmoments(g, h)[2:]
    return tab


def _match_ratios(t3, t4):
    tab = _ratio_table()
    err = (tab[..., 0] - t3) ** 2 + (tab[..., 1] - t4) ** 2
    i, k = np.unravel_index(np.argmin(err), err.shape)

    def residuals(p):
        _, _, s3, s4 = tgh_population_lmoments(p[0], p[1])
        return np.array([s3 - t3, s4 - t4])

    res = least_squares(
        residuals, [G_GRID[i], H_GRID[k]], bounds=([-5.0, 0.0], [5.0, H_MAX]),
        x_scale=[0.1, 0.1], diff_step=1e-7, xtol=1e-14, ftol=1e-14, gtol=1e-14,
    )
    if not np.all(np.isfinite(res.x)):
        raise NumericError(f"l-moment matching failed: {res.message}")
    res.fun = float(np.sum(res.fun**2))
    return float(res.x[0]), float(res.x[1]), float(res.fun)


def lmoment_match(y, *, full_output=False, warn=True):
    """
    Estimate ``TghParams`` by matching l-skewness and l-kurtosis.

    ``(g, h)`` minimize the squared distance between population and sample
    ``(tau3, tau4)`` with ``h >= 0``; then ``b = l2_hat / l2(g, h)`` and
    ``a = l1_hat - b * l1(g, h)``.

    Sample ratios outside what the family can attain produce the closest
    boundary fit and, unless ``warn=False``, a ``RuntimeWarning``.  With
    ``full_output=True`` an info dict (``objective``, ``flag``, ``lmoments``)
    is also returned.
    """
    lm = sample_lmoments(y) if not isinstance(y, LMoments) else y
    if not lm.l2 > 0:
        raise InputError("zero variance")
    g, h, obj = _match_ratios(lm.tau3, lm.tau4)
    l1, l2, _, _ = tgh_population_lmoments(g, h)
    b = lm.l2 / l2
    params = TghParams(lm.l1 - b * l1, b, g, h)
    flag = obj > 1e-8
    if flag and warn:
        warnings.warn(
            f"sample l-ratios (tau3={lm.tau3:.4g}, tau4={lm.tau4:.4g}) not attainable; "
            f"boundary fit g={g:.4g}, h={h:.4g}",
            RuntimeWarning, stacklevel=2,
        )
    if full_output:
        return params, {"objective": obj, "flag": flag, "lmoments": lm}
    return params
