"""Manifold-based artifacts and fingerprints of generative models."""

__version__ = "0.1.0"

from .embedding import EmbeddingSet, Image, SpaceTag, embed_fft, embed_identity
from .fingerprint import (
    Artifact,
    Fingerprint,
    ManifoldProjector,
    compute_artifact,
    compute_fingerprint,
    d_fpt,
    support_coverage,
)
from .manifold_index import ManifoldIndex, build_index, nearest, nearest_batch
from .attribution import ArtifactClassifier, TrainingConfig, build_dataset, evaluate, train
from .metrics import cluster_alignment, fdr, frechet_distance, knn_precision_recall, nmi

__all__ = [
    "Artifact", "ArtifactClassifier", "EmbeddingSet", "Fingerprint", "Image", "ManifoldIndex",
    "ManifoldProjector", "SpaceTag", "TrainingConfig", "build_dataset", "build_index",
    "cluster_alignment", "compute_artifact", "compute_fingerprint", "d_fpt", "embed_fft",
    "embed_identity", "evaluate", "fdr", "frechet_distance", "knn_precision_recall",
    "nearest", "nearest_batch", "nmi", "support_coverage", "train",
]
