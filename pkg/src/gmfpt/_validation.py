"""Input validation helpers used across modules."""

import os

import numpy as np

from .errors import DimensionError, EmptyInputError, ValidationError


def as_matrix(X, name="X", dim=None, dtype=np.float32, allow_empty=False):
    """Return ``X`` as a C-contiguous 2-D array of ``dtype``.

    Raises ``DimensionError`` on shape problems and ``ValidationError``
    on non-finite entries.
    """
    X = np.asarray(X)
    if X.ndim == 1 and dim is not None and X.size == dim:
        X = X.reshape(1, dim)
    if X.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {X.shape}")
    if dim is not None and X.shape[1] != dim:
        raise DimensionError(f"{name} has dim {X.shape[1]}, expected {dim}")
    if X.shape[0] == 0 and not allow_empty:
        raise EmptyInputError(f"{name} is empty")
    X = np.ascontiguousarray(X, dtype=dtype)
    if not np.isfinite(X).all():
        raise ValidationError(f"{name} contains non-finite values")
    return X


def as_vector(x, name="x", dim=None, dtype=np.float32):
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise DimensionError(f"{name} has dim {x.shape[0]}, expected {dim}")
    if not np.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")
    return x


def as_labels(y, n=None, name="labels"):
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionError(f"{name} must be 1-D")
    if n is not None and y.shape[0] != n:
        raise DimensionError(f"{name} has length {y.shape[0]}, expected {n}")
    return y


def resolve_threads(n_threads=None):
    """Thread count: explicit value, else ``FPT_THREADS``, else all cores."""
    if n_threads is None:
        env = os.environ.get("FPT_THREADS")
        n_threads = int(env) if env else (os.cpu_count() or 1)
    n_threads = int(n_threads)
    if n_threads < 1:
        raise ValidationError(f"thread count must be >= 1, got {n_threads}")
    return n_threads
