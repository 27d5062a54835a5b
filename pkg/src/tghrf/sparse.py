"""
Sparse local-approximate TGH process.

Around a target site ``s0`` a small design ``s_j`` is chosen greedily by
predictive-variance reduction, a TGH random field is fitted to the design
alone, and the conditional moments of the latent field at ``s0`` are
updated one design point at a time without refactorizing.

Recursions
----------
With ``gamma = C_j^-1 c(s_j, u)`` and ``beta_u = c(u, u) - c(s_j, u)' gamma``
(the conditional variance of the new point ``u``), write

    gvec  = -gamma / beta_u,        hscal = eps_j' gvec.

Adding ``u`` with latent residual ``eps_u`` gives

    C_{j+1}^-1 eps_{j+1} = [C_j^-1 eps_j + gvec (hscal beta_u + eps_u);
                            hscal + eps_u / beta_u]
    mu_{j+1}   = mu_j + (c(s0, s_j)' gvec)(hscal beta_u + eps_u)
                      + c(s0, u)(hscal + eps_u / beta_u)
    beta_{j+1} = beta_j - [beta_u (c0' gvec)^2 + 2 c(s0, u) c0' gvec
                           + c(s0, u)^2 / beta_u]
    psi_{j+1}  = psi_j + hscal^2 beta_u + 2 eps_u hscal + eps_u^2 / beta_u

where ``c0 = c(s0, s_j)``.  ``gvec``/``hscal`` are the usual ``g_j``/``h_j``
of the local-GP literature, renamed so they are not confused with the
g-and-h parameters.  The first term of the ``mu`` update is what makes
the recursion agree with the dense formula ``mu0 + c0' C^-1 eps``.  The
bracket in the ``beta`` update equals the variance reduction ``R`` used by
the design search.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as spl
from threadpoolctl import threadpool_limits

from . import _fitting as F
from .errors import ConditioningError, DecompositionError, FitError, InputError, NumericError
from .full import _start_kernel
from .field import as_coords, cross_distances, knn, mst_max_edge, pairwise_distances
from .kernels import ExpKernelParams, cross_cov, kernel_value
from .tgh import LOG_SQRT_2PI, TghParams

SEED_SIZE = 6
DEFAULT_BUDGET = 200
DEFAULT_K = 40
DEFAULT_CLOSE = 1000
REL_THRESHOLD = 1e-6
BETA_TOL = 1e-12
LOCAL_NM = {"xatol": 1e-6, "fatol": 1e-8, "maxiter": 3000, "maxfev": 6000}
R_BOUNDS_FACTOR = 1e3


@dataclass(frozen=True)
class LocalData:
    """Sites, latent residuals ``eps`` and kernel shared by every local state."""

    sites: np.ndarray
    eps: np.ndarray
    kernel: ExpKernelParams
    mu0: float = 0.0


@dataclass
class LocalState:
    s0: np.ndarray
    design_ids: np.ndarray
    cinv_eps: np.ndarray
    chol: np.ndarray
    c0: np.ndarray
    beta: float
    psi: float
    mu: float

    @property
    def j(self):
        return self.design_ids.size


def local_state_init(s0, data):
    """Empty design: ``mu = mu0``, ``beta = c(s0, s0)``, ``psi = 0``."""
    s0 = np.asarray(s0, dtype=float)
    return LocalState(
        s0=s0,
        design_ids=np.empty(0, dtype=int),
        cinv_eps=np.empty(0),
        chol=np.empty((0, 0)),
        c0=np.empty(0),
        beta=float(kernel_value(0.0, data.kernel)),
        psi=0.0,
        mu=float(data.mu0),
    )


def _new_point_terms(state, u, data):
    xy = data.sites
    cu = cross_cov(xy[state.design_ids], xy[u][None, :], data.kernel)[:, 0]
    cuu = float(kernel_value(0.0, data.kernel))
    if state.j:
        l_u = spl.solve_triangular(state.chol, cu, lower=True, check_finite=False)
        gamma = spl.solve_triangular(state.chol.T, l_u, lower=False, check_finite=False)
    else:
        l_u = gamma = np.empty(0)
    beta_u = cuu - cu @ gamma
    return cu, l_u, gamma, beta_u, cuu


def local_state_extend(state, new_site, data):
    """
    Add one site to the design and update ``C^-1 eps``, ``mu``, ``beta`` and
    ``psi`` by the recursions in the module docstring.  Returns a new state.
    """
    u = int(new_site)
    if np.any(state.design_ids == u):
        raise InputError(f"site {u} is already in the design")
    cu, l_u, gamma, beta_u, cuu = _new_point_terms(state, u, data)
    if not beta_u > BETA_TOL * cuu:
        raise ConditioningError(
            f"conditional variance {beta_u:.3g} of site {u} is not positive; "
            "duplicate or near-duplicate design site"
        )
    gvec = -gamma / beta_u
    eps_j = data.eps[state.design_ids]
    eps_u = float(data.eps[u])
    hscal = float(eps_j @ gvec)
    c0u = float(kernel_value(np.linalg.norm(data.sites[u] - state.s0), data.kernel))
    c0g = float(state.c0 @ gvec)
    lead = hscal * beta_u + eps_u
    last = hscal + eps_u / beta_u
    cinv_eps = np.append(state.cinv_eps + gvec * lead, last)
    mu = state.mu + c0g * lead + c0u * last
    beta = state.beta - (beta_u * c0g**2 + 2 * c0u * c0g + c0u**2 / beta_u)
    psi = state.psi + hscal**2 * beta_u + 2 * eps_u * hscal + eps_u**2 / beta_u
    j = state.j
    chol = np.zeros((j + 1, j + 1))
    chol[:j, :j] = state.chol
    chol[j, :j] = l_u
    chol[j, j] = np.sqrt(beta_u)
    return LocalState(
        s0=state.s0,
        design_ids=np.append(state.design_ids, u),
        cinv_eps=cinv_eps,
        chol=chol,
        c0=np.append(state.c0, c0u),
        beta=float(beta),
        psi=float(psi),
        mu=float(mu),
    )


def mspe_reduction(state, candidate, data):
    """
    Reduction of the conditional variance at ``s0`` from adding ``candidate``:

        R = [c(s0, u) - c(u, s_j)' C_j^-1 c(s0, s_j)]^2
            / [c(u, u) - c(u, s_j)' C_j^-1 c(u, s_j)]
    """
    u = int(candidate)
    if np.any(state.design_ids == u):
        raise InputError(f"site {u} is already in the design")
    cu, _, gamma, beta_u, cuu = _new_point_terms(state, u, data)
    if not beta_u > BETA_TOL * cuu:
        return 0.0
    c0u = float(kernel_value(np.linalg.norm(data.sites[u] - state.s0), data.kernel))
    return float((c0u - state.c0 @ gamma) ** 2 / beta_u)


def conditional_moments(state):
    """
    Latent conditional mean and variance at ``s0`` given the design:
    ``mu`` and ``psi / (j - 2) * beta`` (the latter needs ``j > 2``).
    """
    if state.j <= 2:
        return state.mu, np.nan
    return state.mu, state.psi / (state.j - 2) * state.beta


def gp_local_predict(s0, design, z, sites, kernel, mu0=0.0):
    """
    Dense local-GP prediction at ``s0`` from Gaussian data ``z`` on the
    design: ``(mu0 + c0' C^-1 z, psi / (j - 2) * (c00 - c0' C^-1 c0))``.
    """
    xy = as_coords(sites)
    d = np.asarray(design, dtype=int)
    C = kernel_value(pairwise_distances(xy[d]), kernel)
    c0 = cross_cov(xy[d], np.atleast_2d(s0), kernel)[:, 0]
    cf = spl.cho_factor(C, lower=True)
    w = spl.cho_solve(cf, np.asarray(z, dtype=float)[d])
    v = spl.cho_solve(cf, c0)
    beta = float(kernel_value(0.0, kernel)) - c0 @ v
    psi = float(np.asarray(z, dtype=float)[d] @ w)
    var = psi / (d.size - 2) * beta if d.size > 2 else np.nan
    return float(mu0 + c0 @ w), float(var)


def _coincident(xy, s0):
    d = np.linalg.norm(xy - s0, axis=1)
    scale = max(float(np.ptp(xy)), 1.0)
    return np.flatnonzero(d <= 1e-12 * scale)


def _inv_corr(v, kernel):
    """Distance at which the correlation of ``kernel`` falls to ``v``."""
    if v <= 0:
        return np.inf
    rho = kernel.tau2 / kernel.sill
    if v >= rho:
        return 0.0
    return -kernel.r * np.log(v / rho)


def greedy_local_design(s0, sites, budget=DEFAULT_BUDGET, k=DEFAULT_K, threshold=None,
                        kernel=None, seed_size=SEED_SIZE, close=DEFAULT_CLOSE):
    """
    Greedy local design for prediction at ``s0``.

    The ``seed_size`` nearest neighbours start the design.  Then, until
    the budget is met or the best reduction falls below ``threshold``:

    1. ``delta`` is the largest reduction ``R`` among the ``k`` nearest
       sites not yet in the design;
    2. the screening radius ``z`` is the distance at which the kernel
       correlation equals

           sqrt(delta / ((1 + sqrt(j) ||C_j^-1 c(s_j, s0)||)^2 + j delta / lambda_min))

       with ``lambda_min`` the smallest eigenvalue of ``C_j``; candidates
       within ``z`` of ``s0`` or of a design point form the screened set;
    3. the screened candidate with the largest ``R`` joins the design.

    Candidates are the ``close`` nearest sites.  If ``s0`` is itself an
    observation site it comes first (it has the largest ``R`` of all), and
    later reductions are computed from the other design points, since
    conditioning on ``s0`` itself leaves nothing to reduce.

    Parameters
    ----------
    s0 : (2,) target coordinates.
    sites : (n, 2) observation coordinates.
    budget : int
        Maximum design size.
    k : int
        Nearest-candidate pool for ``delta``; at least ``seed_size``.
    threshold : float, optional
        Stop when the best ``R`` is below this; default ``1e-6 c(s0, s0)``.
    kernel : ExpKernelParams, optional
        Design kernel; default unit correlation at range
        ``mst_max_edge(sites)``.

    Returns
    -------
    ndarray of int
        Design site indices in selection order.
    """
    xy = as_coords(sites)
    s0 = np.asarray(s0, dtype=float).reshape(2)
    n = len(xy)
    if budget < 1:
        raise InputError(f"budget must be at least 1, got {budget}")
    if k < seed_size:
        raise InputError(f"candidate pool k={k} smaller than the seed size {seed_size}")
    if kernel is None:
        kernel = ExpKernelParams.unit(mst_max_edge(xy))
    c00 = float(kernel_value(0.0, kernel))
    if threshold is None:
        threshold = REL_THRESHOLD * c00
    budget = min(budget, n)

    univ = knn(xy, s0, min(max(close, budget + k), n))
    self_ids = set(int(i) for i in _coincident(xy[univ], s0))
    design = [int(univ[i]) for i in sorted(self_ids)][:budget]
    others = np.array([i for i in range(univ.size) if i not in self_ids], dtype=int)
    U = xy[univ[others]]
    nu = U.shape[0]
    if nu == 0 or len(design) >= budget:
        return np.array(design, dtype=int)

    # per-candidate caches: rows of L^-1 c(s_j, u), projections onto L^-1 c0
    jmax = budget - len(design)
    Lc = np.zeros((jmax, nu))
    Lfac = np.zeros((jmax, jmax))
    l0 = np.zeros(jmax)
    c0u = kernel_value(np.linalg.norm(U - s0, axis=1), kernel)
    proj0 = np.zeros(nu)
    selfsq = np.zeros(nu)
    in_design = np.zeros(nu, dtype=bool)
    mind = np.linalg.norm(U - s0, axis=1)
    dist0 = mind.copy()
    order0 = np.lexsort((np.arange(nu), dist0))

    def reductions():
        den = c00 - selfsq
        with np.errstate(divide="ignore", invalid="ignore"):
            R = (c0u - proj0) ** 2 / den
        R[~(den > BETA_TOL * c00)] = 0.0
        R[in_design] = -np.inf
        return R

    def add(i, j):
        cvec = kernel_value(np.linalg.norm(U - U[i], axis=1), kernel)
        li = Lc[:j, i]
        d2 = c00 - li @ li
        if not d2 > BETA_TOL * c00:
            raise ConditioningError(f"design candidate {int(univ[others[i]])} is degenerate")
        dj = np.sqrt(d2)
        row = (cvec - li @ Lc[:j]) / dj
        Lc[j] = row
        Lfac[j, :j] = li
        Lfac[j, j] = dj
        l0[j] = (c0u[i] - li @ l0[:j]) / dj
        proj0[:] += row * l0[j]
        selfsq[:] += row * row
        in_design[i] = True
        np.minimum(mind, np.linalg.norm(U - U[i], axis=1), out=mind)
        design.append(int(univ[others[i]]))

    j = 0
    for i in order0[: min(seed_size, jmax)]:
        add(int(i), j)
        j += 1

    while j < jmax:
        R = reductions()
        pool = [int(i) for i in order0 if not in_design[i]][:k]
        if not pool:
            warnings.warn("no candidates left; local design stopped early", RuntimeWarning,
                          stacklevel=2)
            break
        ip = pool[int(np.argmax(R[pool]))]
        delta = R[ip]
        if not delta >= threshold:
            break
        Lj = Lfac[:j, :j]
        w = spl.solve_triangular(Lj.T, l0[:j], lower=False, check_finite=False)
        lam_min = spl.eigvalsh(Lj @ Lj.T, subset_by_index=[0, 0], check_finite=False)[0]
        den = (1 + np.sqrt(j) * np.linalg.norm(w)) ** 2 + j * delta / max(lam_min, 1e-300)
        z = _inv_corr(np.sqrt(delta / den), kernel)
        screened = (mind <= z) & ~in_design
        screened[ip] = True
        cand = np.flatnonzero(screened)
        # ties broken by distance to s0, then index
        best = cand[np.lexsort((cand, dist0[cand], -R[cand]))[0]]
        if not R[best] >= threshold:
            break
        add(int(best), j)
        j += 1
    return np.array(design, dtype=int)


@dataclass
class LocalFit:
    site: np.ndarray
    params: TghParams
    lengthscale: float
    design_size: int
    flag: bool = False
    message: str = ""
    loglik: float = np.nan
    cond_mean: float = np.nan
    cond_var: float = np.nan
    design: np.ndarray = field(default=None, repr=False)


def _local_negll(D, ys, free, fixed, nugget):
    n = ys.size
    k1 = len(free)
    warm = {}

    def negll(x):
        th = F.unpack(x[:k1], free, fixed)
        r = float(np.exp(x[k1]))
        C = np.exp(-D / r) * (1.0 - nugget)
        C[np.diag_indices(n)] = 1.0
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            return F.PENALTY
        z, jac = F.latent(ys, th["a"], th["b"], th["g"], th["h"], warm.get("z"))
        if z is None:
            return F.PENALTY
        warm["z"] = z
        w = spl.solve_triangular(L, z, lower=True, check_finite=False)
        ll = -0.5 * (w @ w) - np.sum(np.log(np.diag(L))) - n * LOG_SQRT_2PI - jac
        return -ll if np.isfinite(ll) else F.PENALTY

    return negll


def fit_local_tgh(s0, design, sites, values, r0=None, fixed=None, nugget=0.0):
    """
    Local TGH random-field fit on the design sites.

    Maximizes the exact likelihood of the design observations over
    ``(a, b, g, h)`` and the local range ``r(s0)`` jointly (unit-sill
    exponential correlation, optional fixed nugget fraction), then runs the
    sequential recursions on the fitted latent residuals to get the
    conditional mean and variance of the latent field at ``s0``.

    Optimizer or factorization failures come back as a flagged
    ``LocalFit`` rather than an exception; constant data raise
    ``FitError("zero variance")``.
    """
    xy = as_coords(sites)
    y = np.asarray(values, dtype=float)
    d = np.asarray(design, dtype=int)
    s0 = np.asarray(s0, dtype=float).reshape(2)
    if d.size < 30:
        raise InputError(f"local fit needs a design of at least 30 sites, got {d.size}")
    if np.unique(d).size != d.size:
        raise InputError("design sites must be distinct")
    loc, scale = F.robust_scale(y[d])
    ys = (y[d] - loc) / scale
    D = pairwise_distances(xy[d])
    fixed_s = dict(fixed or {})
    if "a" in fixed_s:
        fixed_s["a"] = (fixed_s["a"] - loc) / scale
    if "b" in fixed_s:
        fixed_s["b"] = fixed_s["b"] / scale
    dpos = D[D > 0]
    if r0 is None:
        r0 = float(np.median(dpos)) / 3
    rlo, rhi = float(dpos.min()) / R_BOUNDS_FACTOR, float(dpos.max()) * R_BOUNDS_FACTOR
    r0 = float(np.clip(r0, rlo, rhi))
    try:
        theta = F.start_theta1(ys, fixed_s)
        free = [k for k in F.THETA1 if k not in fixed_s]
        negll = _local_negll(D, ys, free, theta, nugget)
        x0 = np.concatenate([F.pack(theta, free), [np.log(r0)]])
        f0 = negll(x0)
        bounds = F.theta1_bounds(free) + [(np.log(rlo), np.log(rhi))]
        res = F.nelder_mead(negll, x0, F.theta1_steps(free) + [F.LOGR_STEP], bounds, LOCAL_NM)
        x = res.x if res.fun <= f0 else x0
        fval = min(res.fun, f0)
        theta = F.unpack(x[: len(free)], free, theta)
        r = float(np.exp(x[len(free)]))
        flag = not (res.success and fval < F.PENALTY)
        message = "" if not flag else f"optimizer: {res.message}"
    except (NumericError, DecompositionError, ConditioningError) as exc:
        return LocalFit(s0, None, np.nan, int(d.size), True, f"{type(exc).__name__}: {exc}",
                        design=d)
    params = F.to_params(theta, loc, scale)
    kern = ExpKernelParams.unit(r, nugget)
    z, _ = F.latent(ys, theta["a"], theta["b"], theta["g"], theta["h"])
    cm = cv = np.nan
    if z is not None:
        eps = np.zeros(len(xy))
        eps[d] = z
        data = LocalData(xy, eps, kern)
        state = local_state_init(s0, data)
        skip = set(int(i) for i in d[_coincident(xy[d], s0)])
        try:
            for u in d:
                if int(u) not in skip:
                    state = local_state_extend(state, u, data)
            cm, cv = conditional_moments(state)
        except ConditioningError as exc:
            flag, message = True, str(exc)
    return LocalFit(s0, params, r, int(d.size), flag, message,
                    float(-fval - d.size * np.log(scale)), cm, cv, d)


@dataclass
class SparseFieldResult:
    """Per-target local fits plus raw and smoothed parameter surfaces."""

    targets: np.ndarray
    coords: np.ndarray
    fits: list
    a: np.ndarray
    b: np.ndarray
    g: np.ndarray
    h: np.ndarray
    r: np.ndarray
    design_size: np.ndarray
    flag: np.ndarray
    g_smooth: np.ndarray = None
    h_smooth: np.ndarray = None
    r_smooth: np.ndarray = None
    r_start: float = np.nan


def smooth_surface(coords, values, bandwidth, mask=None):
    """
    Gaussian-kernel weighted average of ``values`` at every coordinate;
    entries with ``mask`` False (or NaN values) get zero weight.
    """
    xy = as_coords(coords)
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v) if mask is None else (np.asarray(mask, bool) & np.isfinite(v))
    if not ok.any():
        return np.full_like(v, np.nan)
    W = np.exp(-0.5 * (cross_distances(xy, xy[ok]) / bandwidth) ** 2)
    return (W @ v[ok]) / W.sum(axis=1)


def _start_range(xy, y):
    ys = (y - np.median(y)) / max(np.std(y), 1e-300)
    return _start_kernel(xy, ys, fit_nugget=False).r


def fit_sparse_field(sites, values, budget=DEFAULT_BUDGET, smooth=True, targets=None,
                     k=DEFAULT_K, bandwidth=None, refine=True, map_fn=None, r0=None,
                     close=DEFAULT_CLOSE, threshold=0.0):
    """
    Local TGH fits at many target sites.

    1. A global starting range comes from a variogram fit on normal scores
       (or ``r0``).
    2. Each target gets a greedy local design under that range and
    3. a local fit of ``(a, b, g, h, r)`` on its design.
    4. With ``smooth``, the fitted ranges and the ``g``/``h`` surfaces are
       averaged with Gaussian weights (``bandwidth``, default two grid
       cells, estimated as twice the median nearest-neighbour distance).
    5. With ``refine``, designs and fits are redone once with the
       (smoothed) per-target ranges.

    Per-target work goes through ``map_fn`` (an ordered ``map``), so the
    result does not depend on how it is parallelized.  Aborts with
    ``FitError`` when more than half of the targets fail.

    Parameters
    ----------
    sites, values : observations; ``len(values) >= budget`` unless the
        budget covers everything.
    targets : array of int, optional
        Site indices to fit at; default every site.
    threshold : float
        Design stopping threshold on the variance reduction.  The default 0
        fills every design to ``budget``: with a screening kernel such as
        the exponential, reductions drop below ``1e-6 c(s0, s0)`` after a
        few dozen points, too few for a four-parameter marginal fit.
    """
    xy = as_coords(sites)
    y = np.asarray(values, dtype=float)
    if y.shape != (len(xy),):
        raise InputError(f"{len(xy)} sites but values of shape {y.shape}")
    tg = np.arange(len(xy)) if targets is None else np.asarray(targets, dtype=int)
    if np.ptp(y) == 0:
        raise FitError("zero variance")
    if map_fn is None:
        map_fn = map
    if r0 is None:
        r0 = _start_range(xy, y)
    if bandwidth is None:
        nn = np.sort(pairwise_distances(xy[tg]) if tg.size > 1 else np.ones((1, 2)), axis=1)
        bandwidth = 2.0 * float(np.median(nn[:, 1])) if tg.size > 1 else 1.0
    kw = dict(budget=budget, k=k, close=close, threshold=threshold)

    def one(args):
        i, r_i = args
        return _fit_target(xy, y, int(i), float(r_i), kw)

    ranges = np.full(tg.size, float(r0))
    fits = list(map_fn(one, zip(tg, ranges)))
    res = _collect(tg, xy, fits, r0)
    if smooth:
        _smooth(res, bandwidth)
    if refine:
        ranges = res.r_smooth if smooth else res.r
        ranges = np.where(np.isfinite(ranges), ranges, r0)
        fits = list(map_fn(one, zip(tg, ranges)))
        res = _collect(tg, xy, fits, r0)
        if smooth:
            _smooth(res, bandwidth)
    return res


def _fit_target(xy, y, i, r_start, kw):
    s0 = xy[i]
    try:
        design = greedy_local_design(s0, xy, kernel=ExpKernelParams.unit(r_start), **kw)
        return fit_local_tgh(s0, design, xy, y, r0=r_start)
    except (FitError, InputError, ConditioningError, NumericError, DecompositionError) as exc:
        return LocalFit(s0, None, np.nan, 0, True, f"{type(exc).__name__}: {exc}")


def _collect(tg, xy, fits, r0):
    def col(fn):
        return np.array([fn(f) if f.params is not None else np.nan for f in fits])

    flag = np.array([f.flag for f in fits])
    failed = np.array([f.params is None for f in fits])
    if failed.sum() > 0.5 * len(fits):
        first = next(f.message for f in fits if f.params is None)
        raise FitError(f"{int(failed.sum())} of {len(fits)} local fits failed; first: {first}")
    return SparseFieldResult(
        targets=tg, coords=xy[tg], fits=fits,
        a=col(lambda f: f.params.a), b=col(lambda f: f.params.b),
        g=col(lambda f: f.params.g), h=col(lambda f: f.params.h),
        r=col(lambda f: f.lengthscale),
        design_size=np.array([f.design_size for f in fits]), flag=flag, r_start=float(r0),
    )


def _smooth(res, bandwidth):
    ok = ~np.array([f.params is None for f in res.fits])
    res.g_smooth = smooth_surface(res.coords, res.g, bandwidth, ok)
    res.h_smooth = smooth_surface(res.coords, res.h, bandwidth, ok)
    res.r_smooth = np.exp(smooth_surface(res.coords, np.log(res.r), bandwidth, ok))


def thread_map(threads):
    """Ordered parallel map over a thread pool, BLAS pinned to one thread per task."""
    def mapper(fn, items):
        items = list(items)
        if threads <= 1:
            with threadpool_limits(1):
                return [fn(x) for x in items]
        with threadpool_limits(1), ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))

    return mapper
