import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.utils.estimator_checks import check_get_params_invariance

from sreseg.clustering import (PCA, DiagonalGaussianMixture, KMeans, KNeighborsClassifier, gmm_fit, kmeans_fit,
                               kmeans_predict, knn_classify, load_clusterer, make_clusterer, pca_fit,
                               pca_project, save_clusterer)

seeds = st.integers(0, 2**32 - 1)


def _brute_force_inertia(X, K):
    best = np.inf
    for labels in itertools.product(range(K), repeat=len(X)):
        labels = np.array(labels)
        cost = sum(((X[labels == k] - X[labels == k].mean(axis=0)) ** 2).sum()
                   for k in range(K) if np.any(labels == k))
        best = min(best, cost)
    return best


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_four_points():
    X = np.array([[0.0], [1.0], [10.0], [11.0]])
    km = kmeans_fit(X, 2, seed=0)
    assert sorted(km.cluster_centers_.ravel()) == [0.5, 10.5]
    assert km.inertia_ == _brute_force_inertia(X, 2) == 1.0


@given(seeds)
def test_kmeans_reaches_global_optimum_on_small_sets(seed):
    X = np.random.default_rng(seed).standard_normal((6, 2)) + np.repeat([[0, 0], [8, 8]], 3, axis=0)
    assert np.isclose(kmeans_fit(X, 2, seed=seed).inertia_, _brute_force_inertia(X, 2))


def test_kmeans_single_cluster_is_mean(rng):
    X = rng.standard_normal((30, 3))
    assert np.allclose(kmeans_fit(X, 1).cluster_centers_[0], X.mean(axis=0))


def test_kmeans_repeated_points_zero_inertia():
    X = np.repeat(np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]]), 4, axis=0)
    assert kmeans_fit(X, 3).inertia_ == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_lloyd_inertia_monotone(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((200, 4)) + rng.integers(0, 3, 200)[:, None] * 2.0
    path = kmeans_fit(X, 4, seed=seed).inertia_path_
    assert np.all(np.diff(path) <= 1e-9 * max(path[0], 1.0))


def test_kmeans_deterministic(rng):
    X = rng.standard_normal((100, 3))
    a, b = kmeans_fit(X, 3, seed=5), kmeans_fit(X, 3, seed=5)
    assert np.array_equal(a.cluster_centers_, b.cluster_centers_)


def test_kmeans_predict_on_fit_set(rng):
    X = rng.standard_normal((80, 2))
    km = kmeans_fit(X, 3)
    assert np.array_equal(kmeans_predict(km, X), km.labels_)


def test_predict_tie_goes_to_lowest_center():
    km = KMeans(n_clusters=2).fit(np.array([[0.0], [0.0], [2.0], [2.0]]))
    lo = int(np.argmin(km.cluster_centers_.ravel()))
    km.cluster_centers_ = km.cluster_centers_[[lo, 1 - lo]]
    assert km.predict(np.array([[1.0]])).tolist() == [0]
    km.cluster_centers_ = np.array([[0.5], [10.5]])
    assert km.predict(np.array([[4.0]])).tolist() == [0]


def test_kmeans_rejects_too_few_points():
    with pytest.raises(ValueError):
        KMeans(n_clusters=3).fit(np.zeros((2, 1)))


def test_kmeans_sklearn_params():
    check_get_params_invariance("KMeans", KMeans())
    assert KMeans(n_clusters=5).get_params()["n_clusters"] == 5


# ---------------------------------------------------------------------------
# Gaussian mixture


def _perm_accuracy(pred, truth, K):
    return max(np.mean(np.array(p)[pred] == truth) for p in itertools.permutations(range(K)))


def test_gmm_separated_blobs(rng):
    X = np.concatenate([rng.standard_normal((100, 2)), rng.standard_normal((100, 2)) + [10.0, 0.0]])
    truth = np.repeat([0, 1], 100)
    g = gmm_fit(X, 2, seed=3)
    assert _perm_accuracy(g.predict(X), truth, 2) == 1.0


def test_gmm_single_component_moments(rng):
    X = rng.standard_normal((500, 3)) * [1.0, 2.0, 0.5] + 4
    g = gmm_fit(X, 1)
    assert np.allclose(g.means_[0], X.mean(axis=0))
    assert np.allclose(g.variances_[0], X.var(axis=0), rtol=1e-9)


@given(seeds)
def test_gmm_responsibilities_and_monotone_likelihood(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((120, 3)) + rng.integers(0, 3, 120)[:, None] * 1.5
    g = DiagonalGaussianMixture(n_components=3, random_state=seed).fit(X)
    assert np.allclose(g.predict_proba(X).sum(axis=1), 1.0, atol=1e-9)
    path = np.asarray(g.log_likelihood_path_)
    assert np.all(np.diff(path) >= -1e-9)
    assert np.all(g.variances_ >= g.var_floor)


def test_gmm_degenerate_column(rng):
    X = np.column_stack([rng.standard_normal(50), np.zeros(50)])
    g = gmm_fit(X, 2)
    assert np.isfinite(g.score(X)) and np.all(g.variances_[:, 1] == g.var_floor)


# ---------------------------------------------------------------------------
# PCA


def test_pca_collinear():
    t = np.linspace(-1, 1, 20)
    p = pca_fit(np.column_stack([t, 2 * t]))
    assert p.n_components_ == 1 and np.isclose(p.explained_variance_ratio_[0], 1.0)


def test_pca_mean_projects_to_zero(rng):
    X = rng.standard_normal((40, 5))
    p = pca_fit(X)
    assert np.allclose(pca_project(p, X.mean(axis=0, keepdims=True)), 0.0, atol=1e-12)


def test_pca_isotropic_keeps_all(rng):
    p = pca_fit(rng.standard_normal((5000, 3)), 0.99)
    assert p.n_components_ == 3
    assert np.allclose(p.explained_variance_ratio_, 1 / 3, atol=0.03)


def test_pca_threshold_is_inclusive():
    # eigenvalues 3, 1 -> ratios 0.75, 0.25; a threshold of exactly 0.75 stops at one component
    X = np.array([[np.sqrt(3.0), 0.0], [-np.sqrt(3.0), 0.0], [0.0, 1.0], [0.0, -1.0]]) * np.sqrt(2.0)
    p = pca_fit(X, 0.75)
    assert np.isclose(p.explained_variance_ratio_[0], 0.75)
    assert p.n_components_ == 1


@given(seeds)
def test_pca_full_rank_round_trip(seed):
    X = np.random.default_rng(seed).standard_normal((30, 4))
    p = PCA(n_components=4).fit(X)
    assert np.allclose(p.inverse_transform(p.transform(X)), X, atol=1e-10)
    assert np.allclose(p.components_ @ p.components_.T, np.eye(4), atol=1e-10)


# ---------------------------------------------------------------------------
# k nearest neighbours


def test_knn_examples():
    X = np.array([[0.0], [2.0], [4.0], [10.0], [12.0], [14.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    assert knn_classify(X, y, np.array([[5.0]]), k=3).tolist() == [0]
    assert knn_classify(X, y, X, k=1).tolist() == y.tolist()
    assert knn_classify(np.array([[0.0], [1.0], [5.0]]), np.array([2, 2, 7]), np.array([[0.4]])).tolist() == [2]


def test_knn_tie_breaks():
    # vote tie 1 vs 1 (k=2) -> smaller label
    X = np.array([[-1.0], [1.0]])
    assert knn_classify(X, np.array([5, 3]), np.array([[0.0]]), k=2).tolist() == [3]
    # distance tie -> earlier training row joins the neighbourhood
    X = np.array([[-1.0], [1.0], [3.0]])
    knn = KNeighborsClassifier(n_neighbors=1).fit(X, np.array([4, 2, 9]))
    assert knn.predict(np.array([[0.0]])).tolist() == [4]


# ---------------------------------------------------------------------------
# factory and persistence


@pytest.mark.parametrize("method", ["kmeans", "gmm"])
def test_save_load_round_trip(tmp_path, rng, method):
    X = rng.standard_normal((60, 3)).astype(np.float32)
    model = make_clusterer(method, 3, seed=2).fit(X)
    save_clusterer(model, tmp_path / "c")
    back = load_clusterer(tmp_path / "c")
    assert np.array_equal(back.predict(X), model.predict(X))


def test_make_clusterer_rejects_unknown():
    with pytest.raises(ValueError):
        make_clusterer("spectral", 3)
