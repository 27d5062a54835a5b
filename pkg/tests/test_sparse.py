import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from oracles import dense_conditional
from tghrf.errors import ConditioningError, FitError, InputError
from tghrf.field import GridSpec
from tghrf.full import fit_full
from tghrf.kernels import ExpKernelParams, kernel_value
from tghrf.simgen import gaussian_field, replicate_experiment
from tghrf.sparse import (LocalData, conditional_moments, fit_local_tgh, fit_sparse_field,
                          gp_local_predict, greedy_local_design, local_state_extend,
                          local_state_init, mspe_reduction, smooth_surface, thread_map)
from tghrf.tgh import tau_gh, tau_gh_inv

KERN = ExpKernelParams(tau2=1.3, sigma2=0.2, r=2.5)


def _data(n=60, seed=0, kernel=KERN, mu0=0.0):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 10, (n, 2))
    return LocalData(xy, rng.standard_normal(n), kernel, mu0)


def _kfun(kernel):
    return lambda d: kernel_value(d, kernel)


def _run(data, s0, order):
    st_ = local_state_init(s0, data)
    for u in order:
        st_ = local_state_extend(st_, u, data)
    return st_


def test_single_extension_closed_form():
    data = _data(mu0=0.7)
    s0 = np.array([4.0, 5.0])
    st1 = _run(data, s0, [3])
    c11 = kernel_value(0.0, KERN)
    c01 = kernel_value(np.linalg.norm(data.sites[3] - s0), KERN)
    assert st1.mu == pytest.approx(0.7 + c01 * data.eps[3] / c11, abs=1e-12)
    assert st1.beta == pytest.approx(c11 - c01**2 / c11, abs=1e-12)
    assert st1.psi == pytest.approx(data.eps[3] ** 2 / c11, abs=1e-12)


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.integers(1, 50), st.floats(-2, 2))
def test_recursions_match_dense_oracle(seed, j, mu0):
    data = _data(80, seed, mu0=mu0)
    rng = np.random.default_rng(seed + 1)
    order = rng.choice(80, j, replace=False)
    s0 = rng.uniform(0, 10, 2)
    st_ = _run(data, s0, order)
    w, mu, beta, psi = dense_conditional(s0, data.sites[order], data.eps[order],
                                         _kfun(KERN))
    assert np.abs(st_.cinv_eps - w).max() < 1e-8
    assert abs(st_.mu - (mu0 + mu)) < 1e-8
    assert abs(st_.beta - beta) < 1e-8
    assert abs(st_.psi - psi) < 1e-8 * max(1.0, psi)
    assert st_.beta > 0 and st_.psi >= 0


def test_order_free():
    data = _data(60, 3)
    s0 = np.array([5.0, 5.0])
    order = np.arange(0, 40, 3)
    a = _run(data, s0, order)
    b = _run(data, s0, order[::-1])
    c = _run(data, s0, np.random.default_rng(1).permutation(order))
    for other in (b, c):
        assert abs(a.mu - other.mu) < 1e-8
        assert abs(a.beta - other.beta) < 1e-8
        assert abs(a.psi - other.psi) < 1e-8


def test_extend_errors():
    data = _data(20, 4)
    st_ = _run(data, np.zeros(2), [1, 2])
    with pytest.raises(InputError):
        local_state_extend(st_, 2, data)
    # a second site at the same coordinates has zero conditional variance
    xy = np.vstack([data.sites, data.sites[1]])
    dup = LocalData(xy, np.append(data.eps, 0.3), ExpKernelParams.unit(2.0))
    st_ = _run(dup, np.zeros(2), [1])
    with pytest.raises(ConditioningError):
        local_state_extend(st_, 20, dup)


def test_reduction_closed_form_and_redundancy():
    data = _data(30, 5)
    s0 = np.array([3.0, 3.0])
    st0 = local_state_init(s0, data)
    for u in (0, 7, 12):
        c0u = kernel_value(np.linalg.norm(data.sites[u] - s0), KERN)
        assert mspe_reduction(st0, u, data) == pytest.approx(c0u**2 / kernel_value(0.0, KERN))
    xy = np.vstack([data.sites, data.sites[4]])
    dup = LocalData(xy, np.append(data.eps, 1.0), ExpKernelParams.unit(2.0))
    st_ = _run(dup, s0, [4, 9])
    assert abs(mspe_reduction(st_, 30, dup)) < 1e-10


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.integers(0, 25))
def test_reduction_equals_variance_drop(seed, j):
    data = _data(40, seed)
    rng = np.random.default_rng(seed)
    order = rng.choice(40, j + 1, replace=False)
    s0 = rng.uniform(0, 10, 2)
    st_ = _run(data, s0, order[:-1])
    R = mspe_reduction(st_, order[-1], data)
    nxt = local_state_extend(st_, order[-1], data)
    assert R >= 0
    assert abs((st_.beta - nxt.beta) - R) < 1e-8


def test_conditional_variance_same_under_gaussian_path():
    data = _data(80, 6)
    s0 = np.array([5.0, 4.0])
    order = np.arange(0, 80, 2)
    st_ = _run(data, s0, order)
    mu, var = conditional_moments(st_)
    mu_g, var_g = gp_local_predict(s0, order, data.eps, data.sites, KERN)
    assert abs(mu - mu_g) < 1e-10
    assert abs(var - var_g) < 1e-10 * var_g
    assert np.isnan(conditional_moments(_run(data, s0, [1, 2]))[1])


GRID20 = GridSpec((0.0, 0.0), 1.0, 20, 20).coords()


def test_budget_one_is_nearest_site():
    rng = np.random.default_rng(7)
    xy = rng.uniform(0, 10, (200, 2))
    for s0 in rng.uniform(0, 10, (10, 2)):
        d = greedy_local_design(s0, xy, budget=1, kernel=ExpKernelParams.unit(2.0))
        R0 = kernel_value(np.linalg.norm(xy - s0, axis=1), ExpKernelParams.unit(2.0)) ** 2
        assert d.tolist() == [int(np.argmax(R0))] == [int(np.argmin(cdist(xy, [s0])))]


def test_infinite_threshold_keeps_seed():
    s0 = np.array([9.3, 9.6])
    d = greedy_local_design(s0, GRID20, budget=50, threshold=np.inf,
                            kernel=ExpKernelParams.unit(3.0))
    nn = np.argsort(np.linalg.norm(GRID20 - s0, axis=1), kind="stable")[:6]
    assert sorted(d.tolist()) == sorted(nn.tolist())


@pytest.mark.parametrize("s0", [(9.3, 9.6), (2.2, 15.1), (0.0, 0.0), (10.0, 10.0)])
def test_greedy_beats_nearest_neighbours(s0):
    kern = ExpKernelParams(tau2=1.0, sigma2=0.05, r=3.0)
    s0 = np.asarray(s0)
    d = greedy_local_design(s0, GRID20, budget=50, threshold=0.0, kernel=kern)
    assert d.size == 50 and np.unique(d).size == 50
    nn = np.argsort(np.linalg.norm(GRID20 - s0, axis=1), kind="stable")[:50]
    eps = np.zeros(50)
    beta_g = dense_conditional(s0, GRID20[d], eps, _kfun(kern))[2]
    beta_nn = dense_conditional(s0, GRID20[nn], eps, _kfun(kern))[2]
    assert beta_g <= beta_nn + 1e-12


def test_observed_target_comes_first():
    s0 = GRID20[45]
    d = greedy_local_design(s0, GRID20, budget=20, threshold=0.0)
    assert d[0] == 45 and d.size == 20


def test_design_input_checks():
    with pytest.raises(InputError):
        greedy_local_design((0, 0), GRID20, budget=0)
    with pytest.raises(InputError):
        greedy_local_design((0, 0), GRID20, k=3)


def _field(nx, ny, g, h, r=1.0, seed=0):
    xy = GridSpec((0.0, 0.0), 1.0, nx, ny).coords()
    z = gaussian_field(xy, ExpKernelParams.unit(r), np.random.default_rng(seed))
    return xy, tau_gh(z, g, h)


def test_local_fit_input_errors():
    xy, y = _field(10, 10, 0.3, 0.1)
    with pytest.raises(InputError):
        fit_local_tgh(xy[0], np.arange(20), xy, y)
    with pytest.raises(FitError, match="zero variance"):
        fit_local_tgh(xy[0], np.arange(40), xy, np.full(100, 2.5))
    with pytest.raises(FitError, match="zero variance"):
        fit_sparse_field(xy, np.full(100, 2.5), budget=40)


def test_local_fit_conditional_moments_match_dense():
    xy, y = _field(15, 15, 0.4, 0.1, r=2.0, seed=3)
    s0 = np.array([7.3, 6.8])
    d = greedy_local_design(s0, xy, budget=60, threshold=0.0,
                            kernel=ExpKernelParams.unit(2.0))
    fit = fit_local_tgh(s0, d, xy, y, r0=2.0)
    assert not fit.flag and fit.design_size == 60
    p = fit.params
    z = tau_gh_inv((y - p.a) / p.b, p.g, p.h)
    mu, var = gp_local_predict(s0, d, z, xy, ExpKernelParams.unit(fit.lengthscale))
    assert abs(fit.cond_mean - mu) < 1e-6
    assert abs(fit.cond_var - var) < 1e-6 * var


@pytest.mark.slow
@pytest.mark.parametrize("g,h", [(0.5, 0.0), (0.0, 0.0)])
def test_local_estimator_small_replication(g, h):
    res = replicate_experiment("sparse-C", {"reps": 20, "g_values": str(g),
                                            "h_values": str(h), "seed": 11})
    gh = np.array([r["g_hat"] for r in res.raw])
    hh = np.array([r["h_hat"] for r in res.raw])
    assert np.all(np.isfinite(gh))
    if g > 0:
        assert np.mean(gh > 0) >= 0.9
    else:
        assert np.median(np.abs(gh)) < 0.15
        assert np.median(np.abs(hh)) < 0.1


def test_full_budget_matches_global_fit():
    xy, y = _field(7, 7, 0.3, 0.1, r=1.5, seed=4)
    res = fit_sparse_field(xy, y, budget=100, targets=[0, 24, 48], smooth=False,
                           refine=False)
    assert np.all(res.design_size == 49)
    for name in "abgh":
        v = getattr(res, name)
        assert np.ptp(v) < 1e-12
    glob = fit_full(xy, y, fit_nugget=False, intervals=False)
    assert abs(res.g[0] - glob.params.g) < 0.02
    assert abs(res.h[0] - glob.params.h) < 0.02
    assert abs(res.r[0] - glob.kernel.r) < 0.05 * glob.kernel.r
    assert res.fits[0].loglik >= glob.loglik - 1e-3


def test_smooth_surface_basics():
    xy = GridSpec((0, 0), 1.0, 6, 6).coords()
    assert np.allclose(smooth_surface(xy, np.full(36, 3.0), 2.0), 3.0)
    v = np.random.default_rng(0).standard_normal(36)
    s = smooth_surface(xy, v, 2.0)
    assert np.std(s) < np.std(v)
    mask = np.arange(36) < 18
    v2 = v.copy()
    v2[~mask] = 1e6
    assert np.allclose(smooth_surface(xy, v2, 2.0, mask),
                       smooth_surface(xy, np.where(mask, v, np.nan), 2.0))


@pytest.fixture(scope="module")
def homogeneous():
    xy, y = _field(20, 20, 0.3, 0.1, r=1.5, seed=9)
    tg = np.array([GridSpec((0, 0), 1.0, 20, 20).index(i, j)
                   for i in range(2, 18, 3) for j in range(2, 18, 3)])
    return xy, y, tg


def test_smoothing_reduces_spatial_spread(homogeneous):
    xy, y, tg = homogeneous
    res = fit_sparse_field(xy, y, budget=80, targets=tg, smooth=True, refine=False)
    assert np.nanstd(res.g_smooth) < np.nanstd(res.g)
    assert np.nanstd(res.h_smooth) < np.nanstd(res.h)
    assert np.all(res.design_size == 80)


def test_threads_and_target_order_do_not_matter(homogeneous):
    xy, y, tg = homogeneous
    tg = tg[:8]
    kw = dict(budget=40, smooth=True, refine=True)
    a = fit_sparse_field(xy, y, targets=tg, **kw)
    b = fit_sparse_field(xy, y, targets=tg, map_fn=thread_map(3), **kw)
    for name in ("a", "b", "g", "h", "r", "g_smooth", "r_smooth"):
        assert np.array_equal(getattr(a, name), getattr(b, name), equal_nan=True)
    perm = np.array([3, 0, 7, 1, 6, 2, 5, 4])
    c = fit_sparse_field(xy, y, targets=tg[perm], smooth=False, refine=False, budget=40,
                         r0=a.r_start)
    d = fit_sparse_field(xy, y, targets=tg, smooth=False, refine=False, budget=40,
                         r0=a.r_start)
    for name in ("a", "b", "g", "h", "r"):
        assert np.array_equal(getattr(c, name), getattr(d, name)[perm], equal_nan=True)


@pytest.mark.slow
def test_two_region_field():
    grid = GridSpec((0.0, 0.0), 1.0, 40, 40)
    xy = grid.coords()
    z = gaussian_field(xy, ExpKernelParams.unit(1.0), np.random.default_rng(21))
    right = xy[:, 0] >= 20
    y = np.where(right, tau_gh(z, 0.6, 0.0), tau_gh(z, 0.0, 0.0))
    left_t = [grid.index(i, j) for i in (4, 9) for j in (5, 15, 25, 34)]
    right_t = [grid.index(i, j) for i in (30, 35) for j in (5, 15, 25, 34)]
    res = fit_sparse_field(xy, y, budget=200, targets=left_t + right_t, smooth=False,
                           refine=False)
    gl, gr = res.g[:8], res.g[8:]
    assert np.nanmean(gr) - np.nanmean(gl) > 0.3
