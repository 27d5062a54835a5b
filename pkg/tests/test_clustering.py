import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.stats import special_ortho_group

from oracles import kmeans_exhaustive_inertia, moment_blobs, same_partition
from tghrf.clustering import (_kmeanspp, _lloyd, information_criteria, kmeans, select_k,
                              separation_D, standardize)
from tghrf.errors import InputError, MetricError


def test_standardize_examples():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 4))
    Z = standardize(X)
    assert np.allclose(Z.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(Z.std(axis=0), 1, atol=1e-12)
    assert np.allclose(standardize(Z), Z, atol=1e-12)
    X10 = X.copy()
    X10[:, 2] *= 10
    assert np.allclose(standardize(X10), Z, atol=1e-12)
    assert standardize(np.array([[0.0], [2.0]])).ravel().tolist() == [-1.0, 1.0]


def test_standardize_constant_column_named():
    X = np.column_stack([np.arange(5.0), np.ones(5)])
    with pytest.raises(InputError, match="h is constant"):
        standardize(X, ["g", "h"])
    with pytest.raises(InputError, match="column 1"):
        standardize(X)


def _exhaustive_best(X, k):
    n = len(X)
    best = np.inf
    for lab in itertools.product(range(k), repeat=n - 1):
        lab = np.array((0,) + lab)
        if np.unique(lab).size == k:
            best = min(best, kmeans_exhaustive_inertia(X, lab))
    return best


@settings(max_examples=15)
@given(st.integers(0, 2**31), st.integers(2, 3))
def test_kmeans_is_lloyd_fixed_point_above_global_optimum(seed, k):
    X = np.random.default_rng(seed).standard_normal((8, 2))
    res = kmeans(X, k, seed=seed)
    assert res.inertia >= _exhaustive_best(X, k) * (1 - 1e-12)
    d2 = ((X[:, None, :] - res.centers[None]) ** 2).sum(-1)
    assert np.all(d2[np.arange(8), res.labels - 1] <= d2.min(axis=1) + 1e-12)
    assert res.inertia == pytest.approx(d2.min(axis=1).sum(), rel=1e-12)


def test_kmeans_reaches_global_optimum_on_small_sets():
    # 20 restarts are not a guarantee; seed 0, k=3 needs more
    X = np.random.default_rng(0).standard_normal((8, 2))
    best = _exhaustive_best(X, 3)
    assert kmeans(X, 3, seed=0).inertia > best * (1 + 1e-6)
    assert kmeans(X, 3, seed=0, n_restarts=200).inertia == pytest.approx(best, rel=1e-10)
    hits = 0
    for s in range(100):
        Y = np.random.default_rng(s).standard_normal((8, 2))
        k = 2 + s % 2
        hits += kmeans(Y, k, seed=s).inertia <= _exhaustive_best(Y, k) * (1 + 1e-10)
    assert hits >= 95


def test_two_clouds_separate():
    rng = np.random.default_rng(1)
    A = rng.normal(0, 0.2, (30, 3))
    B = rng.normal(5, 0.2, (25, 3))
    X = np.vstack([A, B])
    res = kmeans(X, 2)
    truth = np.repeat([0, 1], [30, 25])
    assert same_partition(res.labels, truth)
    within = ((A - A.mean(0)) ** 2).sum() + ((B - B.mean(0)) ** 2).sum()
    assert res.inertia == pytest.approx(within, rel=1e-12)


def test_degenerate_k():
    X = np.random.default_rng(2).standard_normal((12, 4))
    one = kmeans(X, 1)
    assert np.allclose(one.centers[0], X.mean(axis=0))
    assert one.inertia == pytest.approx(((X - X.mean(0)) ** 2).sum())
    assert kmeans(X, 12).inertia == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(InputError):
        kmeans(X, 13)
    with pytest.raises(InputError):
        kmeans(X, 0)


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.integers(2, 8))
def test_result_invariants(seed, k):
    X = np.random.default_rng(seed).standard_normal((40, 4))
    res = kmeans(X, k, seed=seed, n_restarts=3)
    assert set(res.labels.tolist()) == set(range(1, k + 1))
    for c in range(1, k + 1):
        assert np.allclose(res.centers[c - 1], X[res.labels == c].mean(axis=0))
    assert res.inertia == pytest.approx(kmeans_exhaustive_inertia(X, res.labels))
    again = kmeans(X, k, seed=seed, n_restarts=3)
    assert np.array_equal(res.labels, again.labels)


def test_lloyd_reseeds_empty_cluster_and_never_increases():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((30, 2))
    centers = np.array([[0.0, 0.0], [0.1, 0.0], [100.0, 100.0]])
    labels, C, inertia, _ = _lloyd(X, centers, 300)
    assert np.unique(labels).size == 3
    start = _kmeanspp(X, 4, np.random.default_rng(0))
    d0 = ((X[:, None] - start[None]) ** 2).sum(-1).min(axis=1).sum()
    assert _lloyd(X, start.copy(), 300)[2] <= d0


def test_labels_numbered_by_distance_to_reference():
    rng = np.random.default_rng(4)
    coords = np.vstack([rng.uniform(0, 1, (10, 2)), rng.uniform(5, 6, (10, 2)),
                        rng.uniform(10, 11, (10, 2))])
    feats = np.repeat([[0.0], [3.0], [6.0]], 10, axis=0) + 0.01 * rng.standard_normal((30, 1))
    near_far = kmeans(feats, 3, coords=coords, reference=(0, 0)).labels
    assert near_far.tolist() == [1] * 10 + [2] * 10 + [3] * 10
    far_near = kmeans(feats, 3, coords=coords, reference=(11, 11)).labels
    assert far_near.tolist() == [3] * 10 + [2] * 10 + [1] * 10


def _separation_loop(labels, X):
    ids = sorted(set(labels.tolist()))
    k = len(ids)

    def mean_dist(A, B):
        return np.mean([np.linalg.norm(a - b) for a in A for b in B])

    tot = 0.0
    for c in ids:
        for c2 in ids:
            if c != c2:
                A, B = X[labels == c], X[labels == c2]
                tot += mean_dist(A, B) / mean_dist(A, A)
    return tot / k**2


@settings(max_examples=25)
@given(st.integers(0, 2**31), st.integers(2, 5))
def test_separation_matches_loop_oracle(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((25, 3))
    lab = np.concatenate([np.repeat(np.arange(k), 2), rng.integers(0, k, 25 - 2 * k)])
    D = separation_D(lab, X)
    assert D == pytest.approx(_separation_loop(lab, X), rel=1e-12)
    R = special_ortho_group.rvs(3, random_state=seed % 2**32)
    assert separation_D(lab, X @ R.T) == pytest.approx(D, rel=1e-10)
    perm = rng.permutation(k) + 10
    assert separation_D(perm[lab], X) == pytest.approx(D, rel=1e-12)


def test_separation_degenerate_and_distant():
    X = np.ones((6, 2))
    with pytest.raises(MetricError):
        separation_D([0, 0, 0, 1, 1, 1], X)
    Y = np.random.default_rng(5).standard_normal((6, 2))
    with pytest.raises(MetricError, match="cluster 1"):
        separation_D([0, 0, 0, 0, 0, 1], Y)
    with pytest.raises(MetricError):
        separation_D(np.zeros(6), Y)
    rng = np.random.default_rng(6)
    X = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(10, 0.1, (20, 2))])
    lab = np.repeat([1, 2], 20)
    D = separation_D(lab, X)
    assert D > 30


def test_information_criteria_match_gaussian_loglik():
    X, t = moment_blobs(0, per=10)
    res = kmeans(X, 7)
    n, d = X.shape
    resid = X - res.centers[res.labels - 1]
    s = np.sqrt(res.inertia / (n * d))
    ll = stats.norm.logpdf(resid, scale=s).sum()
    p = 7 * d + 1
    aic, bic = information_criteria(res.inertia, n, d, 7)
    assert aic == pytest.approx(2 * p - 2 * ll)
    assert bic == pytest.approx(p * np.log(n) - 2 * ll)
    assert (res.aic, res.bic) == pytest.approx((aic, bic))


def test_select_k_table():
    X, _ = moment_blobs(1, per=15)
    Z = standardize(X)
    tab = select_k(Z, [5, 3, 2, 4, 4], n_restarts=5)
    assert tab.k.tolist() == [2, 3, 4, 5]
    assert np.all(np.diff(tab.inertia) <= 1e-12)
    one = select_k(Z, [2])
    assert one.k.tolist() == [2] and one.elbow == 2
    with pytest.raises(InputError):
        select_k(Z, [1, 2])
    with pytest.raises(InputError):
        select_k(Z, [len(Z)])


@pytest.mark.parametrize("layout", ["merged-mean", "isotropic"])
def test_elbow_finds_seven_blobs(layout):
    hits = 0
    for s in range(20):
        X, _ = moment_blobs(s, per=20, layout=layout, spread=0.3 if layout == "isotropic"
                            else 0.15, sep=1.0 if layout == "isotropic" else 3.0)
        hits += select_k(standardize(X), range(2, 12), seed=s, n_restarts=10).elbow == 7
    assert hits >= 16


@pytest.mark.xfail(strict=True, reason="the hard-assignment spherical likelihood keeps "
                   "gaining from splitting blobs faster than d log n grows, so BIC "
                   "prefers the top of the range")
def test_bic_picks_seven_blobs():
    hits = 0
    for s in range(20):
        X, _ = moment_blobs(s, per=20, layout="isotropic", spread=0.3, sep=1.0)
        hits += select_k(standardize(X), range(2, 12), seed=s, n_restarts=10).best_bic == 7
    assert hits >= 16


def test_seven_blob_recovery_and_feature_separation():
    X, truth = moment_blobs(2)
    Z = standardize(X)
    full = kmeans(Z, 7, seed=0)
    assert same_partition(full.labels, truth)
    mean_only = kmeans(Z[:, :1], 7, seed=0)
    assert separation_D(full.labels, Z) > separation_D(mean_only.labels, Z)
