"""Evaluation metrics: Frechet distance and FDR, NMI, k-means, kNN P&R."""

import csv
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import as_labels, as_matrix
from .errors import DimensionError, EmptyInputError, NumericalError, ValidationError
from .manifold_index import _SCREEN_MARGIN, exact_sq_distances, scan_nearest

_RIDGES = (0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"covariance {cov.shape} does not match mean ({mean.size},)")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-10):
            raise ValidationError("covariance is not symmetric")
        if int(self.count) < 2:
            raise ValidationError("a Gaussian summary needs count >= 2")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self):
        return self.mean.size


def gaussian_summary(features):
    """Mean and unbiased covariance in binary64."""
    X = as_matrix(features, "features", dtype=np.float64)
    if X.shape[0] < 2:
        raise ValidationError("need at least 2 samples for a covariance")
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    return GaussianSummary(X.mean(axis=0), (cov + cov.T) / 2.0, X.shape[0])


def _psd_sqrt(S):
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _trace_sqrt_product(Sa, Sb):
    """``Tr((Sa Sb)^{1/2})`` via the eigenvalues of ``Sa^{1/2} Sb Sa^{1/2}``."""
    eye = np.eye(Sa.shape[0])
    for ridge in _RIDGES:
        try:
            A = Sa + ridge * eye
            B = Sb + ridge * eye
            ra = _psd_sqrt(A)
            M = ra @ B @ ra
            w = np.linalg.eigvalsh((M + M.T) / 2.0)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(w)):
            return float(np.sqrt(np.clip(w, 0.0, None)).sum()), ridge
    raise NumericalError("matrix square root failed after ridge escalation")


def frechet_distance(a, b):
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``, clamped at 0."""
    if a.dim != b.dim:
        raise DimensionError(f"summaries have dims {a.dim} and {b.dim}")
    tr_sqrt, ridge = _trace_sqrt_product(a.covariance, b.covariance)
    diff = a.mean - b.mean
    tr = np.trace(a.covariance) + np.trace(b.covariance) + 2.0 * ridge * a.dim
    return max(float(diff @ diff + tr - 2.0 * tr_sqrt), 0.0)


def _canonical_rows(X):
    # lexicographic row order so results do not depend on input order
    return X[np.lexsort(X.T[::-1])]


def fdr_components(features, labels, seed=0):
    """``(inter-class FD, intra-class FD)`` as averaged by ``fdr``."""
    X = as_matrix(features, "features", dtype=np.float64)
    y = as_labels(labels, X.shape[0])
    classes = np.unique(y)
    if classes.size < 2:
        raise ValidationError("FDR needs at least 2 classes")
    groups = [_canonical_rows(X[y == c]) for c in classes]
    intra = []
    for ci, (c, G) in enumerate(zip(classes, groups)):
        half = G.shape[0] // 2
        if half < 2:
            raise ValidationError(f"class {c!r} has {G.shape[0]} samples; FDR needs >= 4")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ci,)))
        perm = rng.permutation(G.shape[0])
        intra.append(
            frechet_distance(
                gaussian_summary(G[perm[:half]]), gaussian_summary(G[perm[half : 2 * half]])
            )
        )
    summaries = [gaussian_summary(G) for G in groups]
    inter = [frechet_distance(summaries[i], summaries[j])
             for i, j in combinations(range(len(groups)), 2)]
    return float(np.mean(inter)), float(np.mean(intra))


def fdr(features, labels, seed=0):
    """Ratio of mean inter-class FD to mean intra-class (split-half) FD."""
    inter, intra = fdr_components(features, labels, seed)
    return inter / max(intra, 1e-8)


@dataclass(frozen=True)
class Clustering:
    assignments: np.ndarray
    k: int
    centers: np.ndarray = field(default=None, repr=False)
    objective_history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64).ravel()
        if int(self.k) < 1:
            raise ValidationError("k must be positive")
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise ValidationError("assignments must lie in [0, k)")
        object.__setattr__(self, "assignments", a)

    def __len__(self):
        return self.assignments.size

    @classmethod
    def from_labels(cls, labels):
        """Encode arbitrary hashable labels as cluster ids (sorted order)."""
        uniq, inv = np.unique(np.asarray(labels), return_inverse=True)
        return cls(inv.ravel(), max(len(uniq), 1))


def _as_clustering(c):
    return c if isinstance(c, Clustering) else Clustering.from_labels(c)


def _mutual_information(a, b):
    n = a.size
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    ia, ib = ia.ravel(), ib.ravel()
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    ra = table.sum(axis=1)
    cb = table.sum(axis=0)
    i, j = np.nonzero(table)
    nij = table[i, j].astype(np.float64)
    terms = nij / n * np.log(n * nij / (ra[i].astype(np.float64) * cb[j]))
    # sorted summation keeps the value invariant to label permutation
    return float(np.sort(terms).sum())


def nmi(a, b):
    """Mutual information normalized by the larger marginal entropy.

    Returns 0 when either partition has zero entropy.
    """
    a = _as_clustering(a).assignments
    b = _as_clustering(b).assignments
    if a.size != b.size:
        raise DimensionError(f"clusterings have lengths {a.size} and {b.size}")
    if a.size == 0:
        raise EmptyInputError("empty clusterings")
    ha = _mutual_information(a, a)
    hb = _mutual_information(b, b)
    if ha <= 0.0 or hb <= 0.0:
        return 0.0
    mi = _mutual_information(a, b)
    return float(min(max(mi / max(ha, hb), 0.0), 1.0))


def _assign(X, centers):
    cn = np.einsum("ij,ij->i", centers, centers)
    return scan_nearest(X, centers, cn)


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = exact_sq_distances(X, np.broadcast_to(X[chosen[0]], X.shape))
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, exact_sq_distances(X, np.broadcast_to(X[nxt], X.shape)))
    return X[chosen].copy()


def _lloyd(X, k, rng, max_iter):
    centers = _kmeans_pp(X, k, rng)
    labels, d2 = _assign(X, centers)
    history = [float(d2.sum())]
    for _ in range(max_iter):
        new_centers = np.empty_like(centers)
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new_centers[j] = X[labels == j].mean(axis=0)
            else:
                new_centers[j] = centers[j]
        labels_new, d2 = _assign(X, new_centers)
        counts = np.bincount(labels_new, minlength=k)
        for j in np.nonzero(counts == 0)[0]:
            far = int(np.argmax(d2))
            new_centers[j] = X[far]
            labels_new[far] = j
            d2[far] = 0.0
        centers = new_centers
        history.append(float(d2.sum()))
        if np.array_equal(labels_new, labels):
            labels = labels_new
            break
        labels = labels_new
    return labels, centers, history


def kmeans(features, k, seed=0, max_iter=300, n_init=4):
    """Lloyd iterations from k-means++ seeds; best of ``n_init`` restarts.

    The returned ``Clustering`` carries the final centres and the objective
    (sum of squared distances) after every assignment step of the chosen run.
    """
    X = as_matrix(features, "features", dtype=np.float64)
    k = int(k)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > X.shape[0]:
        raise ValidationError(f"k={k} exceeds the number of samples {X.shape[0]}")
    best = None
    for child in np.random.SeedSequence(seed).spawn(max(int(n_init), 1)):
        labels, centers, history = _lloyd(X, k, np.random.default_rng(child), max_iter)
        if best is None or history[-1] < best[2][-1]:
            best = (labels, centers, history)
    labels, centers, history = best
    return Clustering(labels, k, centers, tuple(history))


class KMeans(ClusterMixin, BaseEstimator):
    """Estimator wrapper around ``kmeans``."""

    def __init__(self, n_clusters=8, max_iter=300, n_init=4, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        c = kmeans(X, self.n_clusters, self.random_state, self.max_iter, self.n_init)
        self.labels_ = c.assignments
        self.cluster_centers_ = c.centers
        self.inertia_ = c.objective_history[-1]
        self.objective_history_ = c.objective_history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _assign(X, self.cluster_centers_)[0]


def cluster_alignment(features, hyperparam_labels, seed=0):
    """NMI between k-means clusters of ``features`` and the given labels.

    ``k`` is the number of distinct labels.
    """
    truth = _as_clustering(hyperparam_labels)
    X = as_matrix(features, "features", dtype=np.float64)
    if len(truth) != X.shape[0]:
        raise DimensionError(f"{len(truth)} labels for {X.shape[0]} rows")
    k = int(np.unique(truth.assignments).size)
    return nmi(kmeans(X, k, seed), truth)


def _knn_radii_sq(X, k, block=256):
    """Squared distance from each row to its k-th nearest other row."""
    n = X.shape[0]
    xn = np.einsum("ij,ij->i", X, X)
    out = np.empty(n)
    for s in range(0, n, block):
        Q = X[s : s + block]
        qn = xn[s : s + block]
        D = qn[:, None] - 2.0 * (Q @ X.T) + xn[None, :]
        kth = np.partition(D, k, axis=1)[:, k]
        tol = _SCREEN_MARGIN * (qn + xn.max()) + 1e-300
        for r in range(Q.shape[0]):
            cand = np.nonzero(D[r] <= kth[r] + tol[r])[0]
            exact = np.sort(exact_sq_distances(np.broadcast_to(Q[r], (cand.size, X.shape[1])), X[cand]))
            out[s + r] = exact[k]
    return out


def _inside_fraction(points, centers, radii_sq, block=256):
    """Fraction of ``points`` within the radius of at least one centre."""
    cn = np.einsum("ij,ij->i", centers, centers)
    pn = np.einsum("ij,ij->i", points, points)
    inside = np.zeros(points.shape[0], dtype=bool)
    for s in range(0, points.shape[0], block):
        P = points[s : s + block]
        D = pn[s : s + block, None] - 2.0 * (P @ centers.T) + cn[None, :]
        tol = _SCREEN_MARGIN * (pn[s : s + block, None] + cn[None, :] + radii_sq[None, :]) + 1e-300
        sure = (D <= radii_sq[None, :] - tol).any(axis=1)
        rows, cols = np.nonzero(np.abs(D - radii_sq[None, :]) <= tol)
        if rows.size:
            exact = exact_sq_distances(P[rows], centers[cols])
            hit = rows[exact <= radii_sq[cols]]
            sure[np.unique(hit)] = True
        inside[s : s + block] = sure
    return float(inside.mean())


def knn_precision_recall(real, gen, k=3):
    """Improved precision/recall with k-NN hypersphere support estimates."""
    R = as_matrix(real, "real", dtype=np.float64)
    G = as_matrix(gen, "gen", dim=R.shape[1], dtype=np.float64)
    k = int(k)
    if not 1 <= k < min(R.shape[0], G.shape[0]):
        raise ValidationError(f"k={k} must satisfy 1 <= k < min(|real|, |gen|)")
    precision = _inside_fraction(G, R, _knn_radii_sq(R, k))
    recall = _inside_fraction(R, G, _knn_radii_sq(G, k))
    return precision, recall


HYPERPARAM_COLUMNS = ("source_label", "category_name", "category_value")


def read_hyperparams(path):
    """Parse a hyperparameter CSV into ``{source_label: {category: value}}``."""
    table = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(HYPERPARAM_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            table.setdefault(row["source_label"], {})[row["category_name"]] = row["category_value"]
    return table


def write_hyperparams(path, table):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HYPERPARAM_COLUMNS)
        for label in table:
            for name in sorted(table[label]):
                w.writerow([label, name, table[label][name]])
