"""Embedding spaces: raw pixels, channelwise FFT spectra, external features."""

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import fpte
from ._validation import as_matrix
from .errors import (
    ChecksumError,
    DimensionError,
    EmptyInputError,
    FormatError,
    ShapeMismatchError,
    ValidationError,
)


class SpaceTag(str, enum.Enum):
    RGB = "RGB"
    FREQ = "FREQ"
    SL = "SL"
    SSL = "SSL"
    OTHER = "OTHER"


@dataclass(frozen=True)
class Image:
    """Channel-major, row-major binary32 image with pixels in [0, 1]."""

    channels: int
    height: int
    width: int
    pixels: np.ndarray

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"image {name} must be positive")
        px = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float32).ravel())
        if px.size != self.channels * self.height * self.width:
            raise ValidationError(
                f"pixel count {px.size} != {self.channels}x{self.height}x{self.width}"
            )
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("pixels must be finite and in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return (self.channels, self.height, self.width)

    def to_array(self):
        return self.pixels.reshape(self.shape)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValidationError(f"expected (C, H, W) array, got shape {arr.shape}")
        c, h, w = arr.shape
        return cls(c, h, w, arr)


@dataclass(frozen=True)
class EmbeddingSet:
    """Labeled ``N x dim`` matrix of points in one embedding space."""

    points: np.ndarray
    source_label: str = "real"
    space_tag: SpaceTag = SpaceTag.OTHER
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = as_matrix(self.points, "points", allow_empty=True)
        if pts.shape[1] < 1:
            raise DimensionError("embedding dim must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        ids = self.ids
        if ids is None:
            ids = np.arange(pts.shape[0], dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.shape[0] != pts.shape[0]:
            raise ValidationError(f"{ids.shape[0]} ids for {pts.shape[0]} points")
        if ids.size and (ids.min() < 0 or np.any(np.diff(ids) <= 0)):
            raise ValidationError("ids must be non-negative, unique and ascending")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "space_tag", SpaceTag(self.space_tag))

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def with_label(self, label):
        return EmbeddingSet(self.points, label, self.space_tag, self.ids)


def embed_identity(img):
    """Flattened pixels, channel-major row-major."""
    return img.pixels.copy()


def embed_fft(img, mode="log_magnitude"):
    """Channelwise 2-D DFT, quadrant-swapped so DC sits at the centre.

    ``mode`` is ``"log_magnitude"`` (log(1 + |F|), the default) or
    ``"magnitude"``.
    """
    if img.height < 2 or img.width < 2:
        raise DimensionError(
            f"FFT embedding needs H, W >= 2, got {img.height}x{img.width}"
        )
    return _fft_block(img.to_array()[None], mode).ravel()


def _fft_block(arr, mode):
    # arr: (n, C, H, W)
    spec = np.fft.fftshift(np.fft.fft2(arr.astype(np.float64), axes=(-2, -1)), axes=(-2, -1))
    mag = np.abs(spec)
    if mode == "log_magnitude":
        out = np.log1p(mag)
    elif mode == "magnitude":
        out = mag
    else:
        raise ValidationError(f"unknown FFT mode {mode!r}")
    return out.astype(np.float32)


def embed_images(images, space="rgb", fft_mode="log_magnitude", label="real"):
    """Embed a sequence of same-shape images into an ``EmbeddingSet``."""
    images = list(images)
    if not images:
        raise EmptyInputError("no images to embed")
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise DimensionError("images differ in shape")
    stack = np.stack([im.to_array() for im in images])
    if space == "rgb":
        pts, tag = stack.reshape(len(images), -1), SpaceTag.RGB
    elif space == "freq":
        if shape[1] < 2 or shape[2] < 2:
            raise DimensionError(f"FFT embedding needs H, W >= 2, got {shape[1]}x{shape[2]}")
        pts, tag = _fft_block(stack, fft_mode).reshape(len(images), -1), SpaceTag.FREQ
    else:
        raise ValidationError(f"unknown embedding space {space!r}")
    return EmbeddingSet(pts, label, tag)


def load_png(path):
    """Read a PNG as an ``Image``; 8-bit data is scaled by 1/255."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: only lossless PNG is accepted")
        if im.mode in ("P", "LA", "PA", "CMYK", "YCbCr", "1"):
            im = im.convert("RGBA" if "A" in im.mode else "RGB")
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32) or im.mode.startswith("I"):
        arr = arr.astype(np.float32) / 65535.0
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return Image.from_array(np.ascontiguousarray(arr))


def save_png(img, path):
    from PIL import Image as PILImage

    arr = np.round(img.to_array() * 255.0).astype(np.uint8)
    if img.channels == 1:
        PILImage.fromarray(arr[0], mode="L").save(path, format="PNG")
    elif img.channels == 3:
        PILImage.fromarray(np.moveaxis(arr, 0, -1), mode="RGB").save(path, format="PNG")
    else:
        raise ValidationError("PNG output supports 1 or 3 channels")


def images_from_matrix(matrix, shape):
    """Rows of a matrix as images of ``shape = (C, H, W)``."""
    c, h, w = shape
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[1] != c * h * w:
        raise DimensionError(f"rows of length {matrix.shape[-1]} do not fit shape {shape}")
    return [Image(c, h, w, row) for row in matrix]


def write_external_embeddings(path, eset):
    """Write an FPTE file plus its sidecar manifest; returns the manifest."""
    sha = fpte.write(path, eset.points)
    manifest = {
        "space_tag": eset.space_tag.value,
        "source_label": eset.source_label,
        "rows": len(eset),
        "dim": eset.dim,
        "sha256": sha,
    }
    fpte.write_json(fpte.sidecar_path(path), manifest)
    return manifest


def load_external_embeddings(path, manifest=None):
    """Load an FPTE feature file against its manifest (default: sidecar)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"embedding file not found: {path}")
    manifest_path = Path(manifest) if manifest is not None else fpte.sidecar_path(path)
    meta = fpte.read_json(manifest_path)
    for key in ("space_tag", "source_label", "rows", "dim"):
        if key not in meta:
            raise FormatError(f"{manifest_path}: manifest lacks {key!r}")
    points = fpte.read(path)
    if points.shape != (int(meta["rows"]), int(meta["dim"])):
        raise ShapeMismatchError(
            f"{path}: payload is {points.shape[0]}x{points.shape[1]}, "
            f"manifest declares {meta['rows']}x{meta['dim']}"
        )
    if "sha256" in meta and fpte.payload_sha256(points) != meta["sha256"]:
        raise ChecksumError(f"{path}: payload sha256 does not match manifest")
    return EmbeddingSet(points, meta["source_label"], SpaceTag(meta["space_tag"]))


@dataclass(frozen=True)
class Stats:
    mean: np.ndarray
    std: np.ndarray


def compute_stats(reference):
    pts = reference.points.astype(np.float64)
    return Stats(pts.mean(axis=0), pts.std(axis=0))


def standardize(eset, stats):
    """``(x - mean) / max(std, 1e-8)`` per dimension."""
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if mean.shape != (eset.dim,) or std.shape != (eset.dim,):
        raise DimensionError(f"stats have dim {mean.shape}, set has dim {eset.dim}")
    if np.any(std < 0):
        raise ValidationError("stddev entries must be >= 0")
    out = (eset.points.astype(np.float64) - mean) / np.maximum(std, 1e-8)
    return EmbeddingSet(out.astype(np.float32), eset.source_label, eset.space_tag, eset.ids)


def default_standardize(space_tag):
    """Learned feature spaces are standardized by default, pixel/FFT ones not."""
    return SpaceTag(space_tag) in (SpaceTag.SL, SpaceTag.SSL)


class FFTEmbedder(TransformerMixin, BaseEstimator):
    """Transformer mapping flattened images to channelwise FFT features.

    Parameters
    ----------
    image_shape : tuple of int
        ``(C, H, W)`` layout of each input row.
    mode : {"log_magnitude", "magnitude"}
    """

    def __init__(self, image_shape=(1, 8, 8), mode="log_magnitude"):
        self.image_shape = image_shape
        self.mode = mode

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        c, h, w = self.image_shape
        if X.shape[1] != c * h * w:
            raise DimensionError(f"rows of length {X.shape[1]} do not fit {self.image_shape}")
        if h < 2 or w < 2:
            raise DimensionError("FFT embedding needs H, W >= 2")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        stack = X.reshape((X.shape[0],) + tuple(self.image_shape))
        return _fft_block(stack, self.mode).reshape(X.shape[0], -1)


class Standardizer(TransformerMixin, BaseEstimator):
    """Per-dimension standardization with the clamped denominator."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return ((X - self.mean_) / np.maximum(self.scale_, 1e-8)).astype(np.float32)
