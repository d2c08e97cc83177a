"""Exact nearest-neighbour projection onto a finite manifold estimate.

Squared distances are screened with the expansion
``|q|^2 - 2 q.x + |x|^2`` (binary64, precomputed reference norms) and every
row within a rounding margin of the block minimum is re-scored directly as
``sum((q - x)^2)``. The winner is chosen on the direct score, lowest id on
ties, so answers equal a naive scan regardless of blocking or threads.
"""

import enum
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fpte
from ._validation import as_matrix, as_vector, resolve_threads
from .embedding import EmbeddingSet, SpaceTag, load_external_embeddings, write_external_embeddings
from .errors import ChecksumError, EmptyInputError, FormatError

QUERY_BLOCK = 256
# relative slack on the expansion; the true rounding error is ~d * 1e-16
_SCREEN_MARGIN = 1e-9


class Metric(str, enum.Enum):
    SQUARED_EUCLIDEAN = "SquaredEuclidean"


@dataclass(frozen=True)
class Projection:
    query_id: int
    neighbor_id: int
    distance_sq: np.float32
    point: np.ndarray


def exact_sq_distances(Q, X):
    """Row-wise ``sum((Q[i] - X[i])**2)`` in binary64."""
    diff = np.asarray(Q, dtype=np.float64) - np.asarray(X, dtype=np.float64)
    return (diff * diff).sum(axis=1)


def scan_nearest(Q, X, x_norms, block_size=4096):
    """Exact nearest row of ``X`` for each row of ``Q`` (both binary64).

    Returns ``(row_index, distance_sq)``; ties go to the lowest row.
    """
    n = Q.shape[0]
    qn = np.einsum("ij,ij->i", Q, Q)
    best_d = np.full(n, np.inf)
    best_i = np.zeros(n, dtype=np.int64)
    for start in range(0, X.shape[0], block_size):
        Xb = X[start : start + block_size]
        xn = x_norms[start : start + block_size]
        D = qn[:, None] - 2.0 * (Q @ Xb.T) + xn[None, :]
        m = D.min(axis=1)
        tol = _SCREEN_MARGIN * (qn + xn.max()) + 1e-300
        rows, cols = np.nonzero(D <= (m + tol)[:, None])
        exact = exact_sq_distances(Q[rows], Xb[cols])
        # first entry per row after sorting by (row, exact, col)
        order = np.lexsort((cols, exact, rows))
        rows, cols, exact = rows[order], cols[order], exact[order]
        first = np.ones(rows.shape[0], dtype=bool)
        first[1:] = rows[1:] != rows[:-1]
        r, c, e = rows[first], cols[first], exact[first]
        # strict: earlier blocks (lower rows) keep ties
        better = e < best_d[r]
        best_d[r[better]] = e[better]
        best_i[r[better]] = start + c[better]
    return best_i, best_d


class ManifoldIndex:
    """Immutable exact NN structure over a reference ``EmbeddingSet``."""

    def __init__(self, reference, block_size=4096, metric=Metric.SQUARED_EUCLIDEAN):
        if len(reference) < 1:
            raise EmptyInputError("reference set is empty")
        if int(block_size) < 1:
            raise ValueError("block_size must be positive")
        self.reference = reference
        self.block_size = int(block_size)
        self.metric = Metric(metric)
        self._X = reference.points.astype(np.float64)
        self._X.setflags(write=False)
        self._norms = np.einsum("ij,ij->i", self._X, self._X)
        self._norms.setflags(write=False)

    @property
    def dim(self):
        return self.reference.dim

    @property
    def sq_norms(self):
        return self._norms

    @property
    def manifold_ref(self):
        return "sha256:" + fpte.payload_sha256(self.reference.points)[:16]

    def norms_sha256(self):
        return hashlib.sha256(np.ascontiguousarray(self._norms, dtype="<f8").tobytes()).hexdigest()

    def query(self, Q, n_threads=None):
        """Nearest reference rows for each query row.

        Returns ``(row_index, distance_sq)`` arrays; ``distance_sq`` is the
        directly evaluated binary64 squared distance.
        """
        Q = as_matrix(Q, "queries", dim=self.dim, dtype=np.float64, allow_empty=True)
        n = Q.shape[0]
        idx = np.zeros(n, dtype=np.int64)
        dist = np.zeros(n, dtype=np.float64)
        starts = list(range(0, n, QUERY_BLOCK))

        def run(s):
            i, d = scan_nearest(Q[s : s + QUERY_BLOCK], self._X, self._norms, self.block_size)
            idx[s : s + QUERY_BLOCK] = i
            dist[s : s + QUERY_BLOCK] = d

        threads = min(resolve_threads(n_threads), max(len(starts), 1))
        if threads == 1:
            for s in starts:
                run(s)
        else:
            with ThreadPoolExecutor(threads) as pool:
                list(pool.map(run, starts))
        return idx, dist

    def nearest(self, query, query_id=0):
        q = as_vector(query, "query", dim=self.dim)
        i, d = self.query(q[None, :], n_threads=1)
        return self._projection(int(query_id), int(i[0]), d[0])

    def nearest_batch(self, queries, n_threads=None):
        if len(queries) == 0:
            return []
        idx, dist = self.query(queries.points, n_threads=n_threads)
        return [self._projection(int(q), int(i), d) for q, i, d in zip(queries.ids, idx, dist)]

    def _projection(self, query_id, row, dist):
        return Projection(
            query_id=query_id,
            neighbor_id=int(self.reference.ids[row]),
            distance_sq=np.float32(dist),
            point=self.reference.points[row],
        )

    def save(self, path):
        """Persist as reference FPTE (plus sidecar) and ``<path>.index.json``."""
        write_external_embeddings(path, self.reference)
        header = {
            "metric": self.metric.value,
            "block_size": self.block_size,
            "norms_sha256": self.norms_sha256(),
        }
        fpte.write_json(Path(str(path) + ".index.json"), header)
        return header

    @classmethod
    def load(cls, path):
        header_path = Path(str(path) + ".index.json")
        header = fpte.read_json(header_path)
        for key in ("metric", "block_size", "norms_sha256"):
            if key not in header:
                raise FormatError(f"{header_path}: missing {key!r}")
        index = cls(load_external_embeddings(path), header["block_size"], header["metric"])
        if index.norms_sha256() != header["norms_sha256"]:
            raise ChecksumError(f"{header_path}: recomputed norms do not match checksum")
        return index


def build_index(reference, block_size=4096):
    return ManifoldIndex(reference, block_size=block_size)


def nearest(index, query, query_id=0):
    return index.nearest(query, query_id)


def nearest_batch(index, queries, n_threads=None):
    return index.nearest_batch(queries, n_threads=n_threads)


def as_embedding_set(X, label="query", space_tag=SpaceTag.OTHER):
    if isinstance(X, EmbeddingSet):
        return X
    return EmbeddingSet(as_matrix(X, allow_empty=True), label, space_tag)
