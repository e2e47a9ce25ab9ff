"""Clustering and shallow classifiers over feature embeddings.

All estimators follow the scikit-learn API.  Tie-breaking is fixed so that
labels are reproducible bit for bit:

* nearest center: lowest center index wins,
* nearest neighbours: earlier training row wins,
* neighbour vote: smallest label wins.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .imaging import read_bundle, write_bundle

VAR_FLOOR = 1e-6
# elements per chunk when materializing (rows, refs, d) difference tensors
_CHUNK_ELEMS = 1 << 23


def _check_matrix(X, name="X", min_rows=1):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_samples, n_features), got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def sq_distances(X, C):
    """Squared Euclidean distances (n, k) computed from explicit differences.

    Explicit differences keep exact ties exact, which the expanded
    ``|x|^2 - 2 x.c + |c|^2`` form does not.
    """
    n, d = X.shape
    k = C.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(1, k * d))
    for start in range(0, n, step):
        diff = X[start : start + step, None, :] - C[None, :, :]
        out[start : start + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _check_dim(X, d):
    if X.shape[1] != d:
        raise ValueError(f"expected {d} features, got {X.shape[1]}")


# ---------------------------------------------------------------------------
# K-means


def kmeans_plusplus(X, n_clusters, rng):
    """k-means++ seeding: first center uniform, then proportional to D^2."""
    n = X.shape[0]
    centers = np.empty((n_clusters, X.shape[1]))
    first = rng.integers(n)
    centers[0] = X[first]
    closest = sq_distances(X, centers[:1])[:, 0]
    for c in range(1, n_clusters):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        closest = np.minimum(closest, sq_distances(X, centers[c : c + 1])[:, 0])
    return centers


class KMeans(ClusterMixin, BaseEstimator):
    """Lloyd's algorithm with k-means++ seeding.

    Iterates until the largest center shift is below ``tol`` and a fresh
    assignment leaves every label unchanged, or until ``max_iter``.  An empty
    cluster is moved onto the point farthest from its current center.

    Parameters
    ----------
    n_clusters : int, default=3
    tol : float, default=1e-4
        Maximum Euclidean center shift regarded as converged.
    max_iter : int, default=300
    random_state : int, default=0

    Attributes
    ----------
    cluster_centers_ : ndarray of shape (n_clusters, n_features)
    labels_ : ndarray of shape (n_samples,)
    inertia_ : float
        Sum of squared distances to the assigned centers.
    n_iter_ : int
    inertia_path_ : list of float
        Inertia after seeding and after every Lloyd iteration.
    """

    def __init__(self, n_clusters=3, tol=1e-4, max_iter=300, random_state=0):
        self.n_clusters = n_clusters
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        K = int(self.n_clusters)
        if K < 1:
            raise ValueError(f"n_clusters must be >= 1, got {self.n_clusters}")
        X = _check_matrix(X)
        if X.shape[0] < K:
            raise ValueError(f"n_samples={X.shape[0]} is smaller than n_clusters={K}")
        rng = np.random.default_rng(np.random.SeedSequence(self.random_state))
        centers = kmeans_plusplus(X, K, rng)
        d2 = sq_distances(X, centers)
        labels = d2.argmin(axis=1)
        path = [float(d2[np.arange(len(X)), labels].sum())]
        n_iter = 0
        for n_iter in range(1, int(self.max_iter) + 1):
            new_centers = self._update(X, labels, centers, d2)
            shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
            centers = new_centers
            d2 = sq_distances(X, centers)
            new_labels = d2.argmin(axis=1)
            path.append(float(d2[np.arange(len(X)), new_labels].sum()))
            changed = bool(np.any(new_labels != labels))
            labels = new_labels
            if shift < self.tol and not changed:
                break
        self.cluster_centers_ = centers
        self.labels_ = labels
        self.inertia_ = path[-1]
        self.inertia_path_ = path
        self.n_iter_ = n_iter
        self.n_features_in_ = X.shape[1]
        return self

    @staticmethod
    def _update(X, labels, centers, d2):
        K, d = centers.shape
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros((K, d))
        np.add.at(sums, labels, X)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            own = d2[np.arange(len(X)), labels]
            taken = set()
            for c in empty:
                # farthest point from its own center, skipping points already used
                for idx in np.argsort(-own, kind="stable"):
                    if idx not in taken:
                        break
                taken.add(int(idx))
                new[c] = X[idx]
        return new

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = _check_matrix(X)
        _check_dim(X, self.cluster_centers_.shape[1])
        return sq_distances(X, self.cluster_centers_).argmin(axis=1)

    def transform(self, X):
        """Euclidean distance to every center."""
        check_is_fitted(self, "cluster_centers_")
        X = _check_matrix(X)
        _check_dim(X, self.cluster_centers_.shape[1])
        return np.sqrt(sq_distances(X, self.cluster_centers_))


# ---------------------------------------------------------------------------
# diagonal Gaussian mixture


class DiagonalGaussianMixture(ClusterMixin, BaseEstimator):
    """EM for a Gaussian mixture with diagonal covariances.

    Initialized from :class:`KMeans` with the same seed; variances are
    floored at ``var_floor``.  Stops after ``max_iter`` EM steps or when the
    mean per-point log-likelihood improves by less than ``tol``.

    Attributes
    ----------
    weights_ : ndarray of shape (n_components,)
    means_ : ndarray of shape (n_components, n_features)
    variances_ : ndarray of shape (n_components, n_features)
    log_likelihood_path_ : list of float
        Mean per-point log-likelihood of the initial and every updated model.
    n_iter_ : int
    """

    def __init__(self, n_components=3, max_iter=100, tol=1e-6, var_floor=VAR_FLOOR, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor
        self.random_state = random_state

    def _log_joint(self, X):
        """log(weight_k) + log N(x | mean_k, diag var_k), shape (n, K)."""
        var = self.variances_
        log_det = np.log(var).sum(axis=1)
        d = X.shape[1]
        # (x - mu)^2 / var summed over features, via explicit differences
        maha = np.empty((X.shape[0], len(var)))
        for k in range(len(var)):
            diff = X - self.means_[k]
            maha[:, k] = (diff * diff / var[k]).sum(axis=1)
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights_)
        return log_w - 0.5 * (d * np.log(2 * np.pi) + log_det + maha)

    def _e_step(self, X):
        lj = self._log_joint(X)
        norm = logsumexp(lj, axis=1)
        return np.exp(lj - norm[:, None]), float(norm.mean())

    def _m_step(self, X, resp):
        nk = resp.sum(axis=0)
        alive = nk > 10 * np.finfo(float).eps
        self.weights_ = nk / nk.sum()
        for k in np.flatnonzero(alive):
            mean = resp[:, k] @ X / nk[k]
            diff = X - mean
            var = resp[:, k] @ (diff * diff) / nk[k]
            self.means_[k] = mean
            self.variances_[k] = np.maximum(var, self.var_floor)

    def fit(self, X, y=None):
        K = int(self.n_components)
        X = _check_matrix(X)
        if X.shape[0] < K:
            raise ValueError(f"n_samples={X.shape[0]} is smaller than n_components={K}")
        km = KMeans(n_clusters=K, random_state=self.random_state).fit(X)
        self.means_ = km.cluster_centers_.copy()
        self.variances_ = np.full_like(self.means_, self.var_floor)
        counts = np.bincount(km.labels_, minlength=K)
        for k in range(K):
            pts = X[km.labels_ == k]
            if len(pts):
                self.variances_[k] = np.maximum(pts.var(axis=0), self.var_floor)
        self.weights_ = counts / counts.sum()
        resp, ll = self._e_step(X)
        path = [ll]
        n_iter = 0
        for n_iter in range(1, int(self.max_iter) + 1):
            self._m_step(X, resp)
            resp, ll = self._e_step(X)
            path.append(ll)
            if ll - path[-2] < self.tol:
                break
        self.log_likelihood_path_ = path
        self.n_iter_ = n_iter
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "means_")
        X = _check_matrix(X)
        _check_dim(X, self.means_.shape[1])
        return self._e_step(X)[0]

    def predict(self, X):
        check_is_fitted(self, "means_")
        X = _check_matrix(X)
        _check_dim(X, self.means_.shape[1])
        return self._log_joint(X).argmax(axis=1)

    def score(self, X, y=None):
        """Mean per-point log-likelihood."""
        check_is_fitted(self, "means_")
        return self._e_step(_check_matrix(X))[1]


# ---------------------------------------------------------------------------
# PCA


class PCA(TransformerMixin, BaseEstimator):
    """Principal components from the eigendecomposition of the covariance.

    Keeps the smallest number of components whose explained-variance ratios
    sum to at least ``variance_threshold``, unless ``n_components`` is given.
    If all rows are equal, one component is kept and every ratio is 0.

    Attributes
    ----------
    mean_ : ndarray of shape (n_features,)
    components_ : ndarray of shape (n_components_, n_features)
        Orthonormal rows, sorted by decreasing variance.
    explained_variance_ratio_ : ndarray of shape (n_features,)
        Ratios for all components, non-increasing.
    n_components_ : int
    """

    def __init__(self, variance_threshold=0.99, n_components=None):
        self.variance_threshold = variance_threshold
        self.n_components = n_components

    def fit(self, X, y=None):
        X = _check_matrix(X, min_rows=2)
        n, d = X.shape
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        cov = Xc.T @ Xc / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(-evals, kind="stable")
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order].T
        # deterministic sign: largest-magnitude entry of each component is positive
        flip = np.sign(evecs[np.arange(d), np.abs(evecs).argmax(axis=1)])
        evecs *= np.where(flip == 0, 1.0, flip)[:, None]
        total = evals.sum()
        if total > 0:
            ratios = evals / total
        else:
            ratios = np.zeros(d)
        if self.n_components is not None:
            m = int(self.n_components)
            if not 1 <= m <= d:
                raise ValueError(f"n_components must be in [1, {d}], got {m}")
        elif total > 0:
            hit = np.flatnonzero(np.cumsum(ratios) >= self.variance_threshold)
            m = int(hit[0]) + 1 if hit.size else d
        else:
            m = 1
        self.explained_variance_ = evals
        self.explained_variance_ratio_ = ratios
        self.all_components_ = evecs
        self.components_ = evecs[:m]
        self.n_components_ = m
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = _check_matrix(X)
        _check_dim(X, self.n_features_in_)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        Z = np.asarray(Z, dtype=np.float64)
        return Z @ self.components_ + self.mean_


# ---------------------------------------------------------------------------
# k-nearest neighbours


class KNeighborsClassifier(ClassifierMixin, BaseEstimator):
    """Majority vote over the ``n_neighbors`` Euclidean-nearest training rows."""

    def __init__(self, n_neighbors=3):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X = _check_matrix(X, "X")
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y lengths differ")
        if int(self.n_neighbors) < 1 or int(self.n_neighbors) > len(X):
            raise ValueError(f"n_neighbors must be in [1, {len(X)}], got {self.n_neighbors}")
        self.classes_, self._y_idx = np.unique(y, return_inverse=True)
        self._fit_X = X
        self.n_features_in_ = X.shape[1]
        return self

    def kneighbors(self, X):
        """Indices of the nearest training rows, (n_queries, n_neighbors)."""
        check_is_fitted(self, "_fit_X")
        X = _check_matrix(X)
        _check_dim(X, self.n_features_in_)
        k = int(self.n_neighbors)
        out = np.empty((len(X), k), dtype=np.int64)
        step = max(1, _CHUNK_ELEMS // max(1, self._fit_X.size))
        for start in range(0, len(X), step):
            d2 = sq_distances(X[start : start + step], self._fit_X)
            out[start : start + step] = np.argsort(d2, axis=1, kind="stable")[:, :k]
        return out

    def predict(self, X):
        idx = self.kneighbors(X)
        votes = self._y_idx[idx]
        n_cls = len(self.classes_)
        counts = np.zeros((len(votes), n_cls), dtype=np.int64)
        for j in range(votes.shape[1]):
            counts[np.arange(len(votes)), votes[:, j]] += 1
        return self.classes_[counts.argmax(axis=1)]


# ---------------------------------------------------------------------------
# functional aliases


def kmeans_fit(X, K, seed=0, **kwargs) -> KMeans:
    return KMeans(n_clusters=K, random_state=seed, **kwargs).fit(X)


def kmeans_predict(model: KMeans, X):
    return model.predict(X)


def gmm_fit(X, K, seed=0, **kwargs) -> DiagonalGaussianMixture:
    return DiagonalGaussianMixture(n_components=K, random_state=seed, **kwargs).fit(X)


def gmm_predict(model: DiagonalGaussianMixture, X):
    return model.predict(X)


def pca_fit(X, cumulative_variance=0.99) -> PCA:
    return PCA(variance_threshold=cumulative_variance).fit(X)


def pca_project(basis: PCA, X):
    return basis.transform(X)


def knn_classify(train_X, train_y, query, k=3):
    if len(train_X) == 0:
        raise ValueError("training set is empty")
    return KNeighborsClassifier(n_neighbors=k).fit(train_X, train_y).predict(query)


def make_clusterer(method, K, seed=0):
    """Clusterer from a tag: ``"kmeans"`` or ``"gmm"``."""
    if method == "kmeans":
        return KMeans(n_clusters=K, random_state=seed)
    if method == "gmm":
        return DiagonalGaussianMixture(n_components=K, random_state=seed)
    raise ValueError(f"unknown clustering method {method!r}")


# ---------------------------------------------------------------------------
# persistence


def save_clusterer(model, directory):
    """Write fitted state as TensorFiles plus a manifest (kind, K, d, seed, iterations)."""
    if isinstance(model, KMeans):
        arrays = {"centers": model.cluster_centers_}
        meta = {"kind": "kmeans", "K": model.n_clusters}
    elif isinstance(model, DiagonalGaussianMixture):
        arrays = {"weights": model.weights_, "means": model.means_, "variances": model.variances_}
        meta = {"kind": "gmm", "K": model.n_components}
    elif isinstance(model, PCA):
        arrays = {"mean": model.mean_, "components": model.components_,
                  "ratios": model.explained_variance_ratio_}
        meta = {"kind": "pca", "K": model.n_components_}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    meta["d"] = model.n_features_in_
    meta["seed"] = getattr(model, "random_state", "-")
    meta["iterations"] = getattr(model, "n_iter_", 0)
    write_bundle(directory, arrays, meta)


def load_clusterer(directory):
    """Inverse of :func:`save_clusterer`; parameters come back as float32 values in float64 arrays."""
    arrays, meta = read_bundle(directory)
    kind, K, d = meta["kind"], int(meta["K"]), int(meta["d"])
    seed = int(meta["seed"]) if meta.get("seed", "-") != "-" else 0
    f64 = {k: v.astype(np.float64) for k, v in arrays.items()}
    if kind == "kmeans":
        model = KMeans(n_clusters=K, random_state=seed)
        model.cluster_centers_ = f64["centers"]
    elif kind == "gmm":
        model = DiagonalGaussianMixture(n_components=K, random_state=seed)
        model.weights_, model.means_, model.variances_ = f64["weights"], f64["means"], f64["variances"]
    elif kind == "pca":
        model = PCA(n_components=K)
        model.mean_, model.components_ = f64["mean"], f64["components"]
        model.explained_variance_ratio_ = f64["ratios"]
        model.n_components_ = K
    else:
        raise ValueError(f"unknown clusterer kind {kind!r}")
    model.n_features_in_ = d
    model.n_iter_ = int(meta.get("iterations", 0))
    return model
