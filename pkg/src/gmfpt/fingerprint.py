"""Artifacts (deviation from the nearest manifold point) and fingerprints."""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import fpte
from ._validation import as_vector
from .embedding import EmbeddingSet, SpaceTag
from .errors import DimensionError, EmptyInputError, FormatError
from .manifold_index import ManifoldIndex


@dataclass(frozen=True)
class Artifact:
    query_id: int
    source_label: str
    vector: np.ndarray
    norm: np.float32
    neighbor_id: int


def _norms(vectors):
    v = vectors.astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", v, v)).astype(np.float32)


@dataclass(frozen=True)
class Fingerprint:
    """All artifacts of one generator w.r.t. one manifold estimate.

    Stored column-wise: ``vectors[i]`` is the artifact of sample
    ``query_ids[i]`` whose projection is reference id ``neighbor_ids[i]``.
    """

    source_label: str
    space_tag: SpaceTag
    vectors: np.ndarray
    query_ids: np.ndarray
    neighbor_ids: np.ndarray
    manifold_ref: str = ""
    norms: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise DimensionError("artifact vectors must form a 2-D matrix")
        n = v.shape[0]
        q = np.asarray(self.query_ids, dtype=np.int64).ravel()
        nb = np.asarray(self.neighbor_ids, dtype=np.int64).ravel()
        if q.shape[0] != n or nb.shape[0] != n:
            raise DimensionError("ids must align with artifact rows")
        norms = _norms(v) if self.norms is None else np.asarray(self.norms, dtype=np.float32)
        for arr in (v, q, nb, norms):
            arr.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "query_ids", q)
        object.__setattr__(self, "neighbor_ids", nb)
        object.__setattr__(self, "norms", norms)
        object.__setattr__(self, "space_tag", SpaceTag(self.space_tag))

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __getitem__(self, i):
        return Artifact(
            int(self.query_ids[i]),
            self.source_label,
            self.vectors[i],
            self.norms[i],
            int(self.neighbor_ids[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def artifacts(self):
        return list(self)

    def summary(self):
        if len(self) == 0:
            return {"min": 0.0, "mean": 0.0, "max": 0.0}
        n = self.norms.astype(np.float64)
        return {"min": float(n.min()), "mean": float(n.mean()), "max": float(n.max())}


def compute_artifact(index, x_G, id=0, label="generated"):
    """``x_G - x*`` where ``x*`` is the nearest reference point."""
    x = as_vector(x_G, "x_G", dim=index.dim)
    proj = index.nearest(x, query_id=id)
    vec = x - proj.point
    return Artifact(int(id), label, vec, _norms(vec[None])[0], proj.neighbor_id)


def compute_fingerprint(index, samples, n_threads=None):
    """One artifact per sample of ``samples`` (an ``EmbeddingSet``), in order."""
    if len(samples) == 0:
        raise EmptyInputError("cannot fingerprint an empty sample set")
    if samples.dim != index.dim:
        raise DimensionError(f"samples have dim {samples.dim}, manifold has {index.dim}")
    rows, _ = index.query(samples.points, n_threads=n_threads)
    vectors = samples.points - index.reference.points[rows]
    return Fingerprint(
        source_label=samples.source_label,
        space_tag=samples.space_tag,
        vectors=vectors,
        query_ids=samples.ids,
        neighbor_ids=index.reference.ids[rows],
        manifold_ref=index.manifold_ref,
    )


def d_fpt(fp):
    """Largest artifact norm over the provided samples."""
    if len(fp) == 0:
        raise EmptyInputError("d_fpt of an empty fingerprint")
    return float(fp.norms.max())


def support_coverage(fp, eps=0.0):
    """Fraction of artifacts with norm <= ``eps``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if len(fp) == 0:
        return 0.0
    return float(np.mean(fp.norms <= np.float32(eps)))


def artifact_matrix(fp):
    """``(vectors, labels)`` with a constant label column."""
    if len(fp) == 0:
        raise EmptyInputError("empty fingerprint")
    return fp.vectors.copy(), np.full(len(fp), fp.source_label, dtype=object)


def fingerprint_from_matrix(matrix, source_label, space_tag=SpaceTag.OTHER, query_ids=None,
                            neighbor_ids=None, manifold_ref=""):
    matrix = np.asarray(matrix, dtype=np.float32)
    n = matrix.shape[0]
    q = np.arange(n) if query_ids is None else query_ids
    nb = np.full(n, -1) if neighbor_ids is None else neighbor_ids
    return Fingerprint(source_label, space_tag, matrix, q, nb, manifold_ref)


def save_fingerprint(fp, path):
    """Write artifact vectors as FPTE plus a JSON manifest at ``<path>.json``."""
    sha = fpte.write(path, fp.vectors)
    manifest = {
        "source_label": fp.source_label,
        "space_tag": fp.space_tag.value,
        "manifold_ref": fp.manifold_ref,
        "rows": len(fp),
        "dim": fp.dim,
        "sha256": sha,
        "norms": fp.summary(),
        "d_fpt": d_fpt(fp) if len(fp) else 0.0,
        "query_ids": fp.query_ids.tolist(),
        "neighbor_ids": fp.neighbor_ids.tolist(),
    }
    fpte.write_json(fpte.sidecar_path(path), manifest)
    return manifest


def load_fingerprint(path):
    meta = fpte.read_json(fpte.sidecar_path(path))
    vectors = fpte.read(path)
    if vectors.shape != (meta["rows"], meta["dim"]):
        raise FormatError(f"{path}: shape {vectors.shape} disagrees with manifest")
    return Fingerprint(
        meta["source_label"],
        meta["space_tag"],
        vectors,
        meta["query_ids"],
        meta["neighbor_ids"],
        meta.get("manifold_ref", ""),
    )


class ManifoldProjector(TransformerMixin, BaseEstimator):
    """Transformer replacing each sample by its artifact.

    Parameters
    ----------
    reference : array-like of shape (n_reference, n_features) or EmbeddingSet, default=None
        Manifold estimate. When ``None`` the data passed to ``fit`` is used,
        otherwise ``fit`` ignores its input so the projector can sit inside a
        ``Pipeline`` trained on generated samples.
    block_size : int, default=4096
        Reference rows scanned per block.
    n_threads : int, default=None
        Query-block parallelism; ``None`` reads ``FPT_THREADS``.
    """

    def __init__(self, reference=None, block_size=4096, n_threads=None):
        self.reference = reference
        self.block_size = block_size
        self.n_threads = n_threads

    def fit(self, X=None, y=None):
        ref = self.reference if self.reference is not None else X
        if ref is None:
            raise ValueError("ManifoldProjector needs a reference set")
        if not isinstance(ref, EmbeddingSet):
            ref = EmbeddingSet(check_array(ref, dtype=np.float32), "real")
        self.index_ = ManifoldIndex(ref, block_size=self.block_size)
        self.n_features_in_ = ref.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "index_")
        X = check_array(X, dtype=np.float32)
        rows, _ = self.index_.query(X, n_threads=self.n_threads)
        return X - self.index_.reference.points[rows]

    def fingerprint(self, samples):
        check_is_fitted(self, "index_")
        return compute_fingerprint(self.index_, samples, n_threads=self.n_threads)
