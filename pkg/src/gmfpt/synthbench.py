"""Synthetic scenarios: known manifolds plus perturbed "generators".

Every random draw comes from a ``SeedSequence`` keyed by the scenario seed
and a CRC32 of the stream name, so any scenario regenerates bit-identically
from its config.
"""

import copy
import enum
import hashlib
import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fpte
from .embedding import (
    EmbeddingSet,
    SpaceTag,
    _fft_block,
    compute_stats,
    load_external_embeddings,
    standardize,
    write_external_embeddings,
)
from .errors import ChecksumError, ConfigError, FormatError
from .metrics import read_hyperparams, write_hyperparams


class ManifoldKind(str, enum.Enum):
    CIRCLE2D = "Circle2D"
    SWISSROLL3D = "SwissRoll3D"
    IMAGEGRID = "ImageGrid"


class PerturbationKind(str, enum.Enum):
    NORMAL_OFFSET = "NormalOffset"
    DIRECTIONAL_BIAS = "DirectionalBias"
    HIGH_FREQ_NOISE = "HighFreqNoise"
    SMOOTHING = "Smoothing"
    CHECKERBOARD = "Checkerboard"


def _stream(seed, *names):
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


@dataclass(frozen=True)
class ManifoldConfig:
    """Manifold family and sampling options.

    ``dim`` is the ambient dimension for Circle2D (even; 2 is the plain
    unit circle, larger values trace the circle through ``dim // 2``
    harmonic planes on the unit sphere) and SwissRoll3D (3 is the roll
    itself; other values apply a fixed orthonormal projection). ImageGrid
    ignores it and emits ``channels x image_size x image_size`` images.
    """

    kind: ManifoldKind = ManifoldKind.CIRCLE2D
    n: int = 1000
    noise: float = 0.0
    dim: int = None
    image_size: int = 8
    channels: int = 1
    n_components: int = 4

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", ManifoldKind(self.kind))
        except ValueError:
            raise ConfigError("manifold.kind", f"unknown manifold kind {self.kind!r}") from None
        if int(self.n) < 1:
            raise ConfigError("manifold.n", "must be >= 1")
        if not float(self.noise) >= 0:
            raise ConfigError("manifold.noise", "must be >= 0")
        dim = self.dim
        if self.kind is ManifoldKind.CIRCLE2D:
            dim = 2 if dim is None else int(dim)
            if dim < 2 or dim % 2:
                raise ConfigError("manifold.dim", "Circle2D needs an even dim >= 2")
        elif self.kind is ManifoldKind.SWISSROLL3D:
            dim = 3 if dim is None else int(dim)
            if dim < 1:
                raise ConfigError("manifold.dim", "must be >= 1")
        else:
            if not 2 <= int(self.image_size) <= 256:
                raise ConfigError("manifold.image_size", "must be in [2, 256]")
            if int(self.channels) < 1:
                raise ConfigError("manifold.channels", "must be >= 1")
            if not 1 <= int(self.n_components) <= len(_IMAGE_FREQS):
                raise ConfigError("manifold.n_components", f"must be in [1, {len(_IMAGE_FREQS)}]")
            dim = int(self.channels) * int(self.image_size) ** 2
        object.__setattr__(self, "dim", dim)

    @property
    def signal_shape(self):
        if self.kind is ManifoldKind.IMAGEGRID:
            return (int(self.channels), int(self.image_size), int(self.image_size))
        return (1, 1, self.dim)

    @property
    def space_tag(self):
        return SpaceTag.RGB if self.kind is ManifoldKind.IMAGEGRID else SpaceTag.OTHER


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
_IMAGE_FREQS = [(0, 1), (1, 0), (1, 1), (1, -1), (0, 2), (2, 0), (2, 1), (1, 2)]
_ROLL_SCALE = 4.5 * np.pi


def _orthonormalize(T):
    q, _ = np.linalg.qr(T)
    return q


def _circle(cfg, n, rng):
    H = cfg.dim // 2
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    h = np.arange(1, H + 1)
    phase = 2.0 * np.pi * ((h - 1) * _GOLDEN % 1.0)
    ang = theta[:, None] * h[None, :] + phase[None, :]
    pts = np.empty((n, 2 * H))
    pts[:, 0::2] = np.cos(ang)
    pts[:, 1::2] = np.sin(ang)
    tan = np.empty((n, 2 * H))
    tan[:, 0::2] = -h * np.sin(ang)
    tan[:, 1::2] = h * np.cos(ang)
    pts /= np.sqrt(H)
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    return pts, tan[:, :, None]


def _roll_map(dim):
    if dim == 3:
        return np.eye(3)
    if dim < 3:
        return np.eye(3)[:, :dim]
    g = np.random.default_rng(np.random.SeedSequence(0, spawn_key=(zlib.crc32(b"swissroll"), dim)))
    q, _ = np.linalg.qr(g.standard_normal((dim, 3)))
    return q.T  # 3 x dim, orthonormal rows


def _swiss_roll(cfg, n, rng):
    u = rng.uniform(1.5 * np.pi, 4.5 * np.pi, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    base = np.stack([u * np.cos(u), v * _ROLL_SCALE, u * np.sin(u)], axis=1) / _ROLL_SCALE
    du = np.stack([np.cos(u) - u * np.sin(u), np.zeros(n), np.sin(u) + u * np.cos(u)], axis=1) / _ROLL_SCALE
    dv = np.tile([0.0, 1.0, 0.0], (n, 1))
    M = _roll_map(cfg.dim)
    pts = base @ M
    T = np.stack([du @ M, dv @ M], axis=2)
    keep = min(2, cfg.dim)
    return pts, _orthonormalize(T)[:, :, :keep]


def _image_grid(cfg, n, rng):
    C, k, _ = cfg.signal_shape
    K = int(cfg.n_components)
    ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    waves = np.stack([2.0 * np.pi * (fi * ii + fj * jj) / k for fi, fj in _IMAGE_FREQS[:K]])
    amp = 0.35 / K
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n, C, K))
    arg = waves[None, None] + phases[..., None, None]  # n, C, K, k, k
    imgs = 0.5 + amp * np.cos(arg).sum(axis=2)
    dphi = -amp * np.sin(arg)  # derivative wrt each phase
    T = np.zeros((n, C, k, k, C, K))
    for c in range(C):
        T[:, c, :, :, c, :] = np.moveaxis(dphi[:, c], 1, -1)
    T = T.reshape(n, C * k * k, C * K)
    return imgs.reshape(n, -1), _orthonormalize(T)


_DRAW = {
    ManifoldKind.CIRCLE2D: _circle,
    ManifoldKind.SWISSROLL3D: _swiss_roll,
    ManifoldKind.IMAGEGRID: _image_grid,
}


def draw_clean(cfg, n, rng):
    """Noise-free manifold points and orthonormal tangent bases ``(n, d, t)``."""
    return _DRAW[cfg.kind](cfg, int(n), rng)


def _finish(cfg, pts):
    if cfg.kind is ManifoldKind.IMAGEGRID:
        pts = np.clip(pts, 0.0, 1.0)
    return pts.astype(np.float32)


def gen_manifold(kind, n, noise=0.0, seed=0, **options):
    """Sample ``n`` points of a manifold family with isotropic Gaussian noise."""
    cfg = ManifoldConfig(kind=kind, n=n, noise=noise, **options)
    pts, _ = draw_clean(cfg, cfg.n, _stream(seed, "clean"))
    if cfg.noise > 0:
        pts = pts + cfg.noise * _stream(seed, "noise").standard_normal(pts.shape)
    return EmbeddingSet(_finish(cfg, pts), "real", cfg.space_tag)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: PerturbationKind
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", PerturbationKind(self.kind))
        except ValueError:
            raise ConfigError("kind", f"unknown perturbation kind {self.kind!r}") from None
        if not float(self.magnitude) > 0:
            raise ConfigError("magnitude", "must be > 0")


def _pattern(shape, fn):
    C, H, W = shape
    i, j = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    p = np.broadcast_to(fn(i, j).astype(np.float64), (C, H, W)).ravel()
    return p / np.linalg.norm(p)


def anchor_directions(shape):
    """Unit patterns used by the fixed-direction kinds (DC, mid-band, Nyquist)."""
    return {
        "dc": _pattern(shape, lambda i, j: np.ones_like(i)),
        "mid": _pattern(shape, lambda i, j: np.cos(np.pi * (i + j) / 2.0)),
        "checker": _pattern(shape, lambda i, j: (-1.0) ** (i + j)),
    }


def _unit_rows(V):
    nrm = np.linalg.norm(V, axis=1, keepdims=True)
    return np.divide(V, nrm, out=np.zeros_like(V), where=nrm > 1e-12)


def _high_band(shape, n, rng):
    C, H, W = shape
    fi = np.abs(np.fft.fftfreq(H) * H) / (H / 2.0) if H > 1 else np.zeros(1)
    fj = np.abs(np.fft.fftfreq(W) * W) / (W / 2.0) if W > 1 else np.zeros(1)
    band = np.maximum(fi[:, None], fj[None, :]) > 0.5
    if not band.any():
        raise ConfigError("kind", "HighFreqNoise needs a signal with at least 2 samples")
    eps = rng.standard_normal((n, C, H, W))
    spec = np.fft.fft2(eps, axes=(-2, -1)) * band
    return np.real(np.fft.ifft2(spec, axes=(-2, -1))).reshape(n, -1)


def _blur(X, shape):
    C, H, W = shape
    img = X.reshape((-1, C, H, W))
    for axis, size in ((2, H), (3, W)):
        if size > 1:
            img = 0.25 * np.roll(img, 1, axis) + 0.5 * img + 0.25 * np.roll(img, -1, axis)
    return img.reshape(X.shape)


def perturbation(spec, clean, tangents, shape, rng):
    """Offsets of Euclidean norm ``spec.magnitude`` to add to ``clean`` rows."""
    m = float(spec.magnitude)
    n, d = clean.shape
    anchors = anchor_directions(shape)
    kind = spec.kind
    if kind is PerturbationKind.NORMAL_OFFSET:
        a = anchors["mid"]
        # component of the anchor orthogonal to the local tangent space
        coef = np.einsum("ndt,d->nt", tangents, a)
        normal = a[None, :] - np.einsum("ndt,nt->nd", tangents, coef)
        normal = _unit_rows(normal)
        fallback = np.linalg.norm(normal, axis=1) == 0
        normal[fallback] = anchors["dc"]
        return m * normal
    if kind is PerturbationKind.DIRECTIONAL_BIAS:
        return np.tile(m * anchors["dc"], (n, 1))
    if kind is PerturbationKind.CHECKERBOARD:
        return np.tile(m * anchors["checker"], (n, 1))
    if kind is PerturbationKind.HIGH_FREQ_NOISE:
        return m * _unit_rows(_high_band(shape, n, rng))
    if kind is PerturbationKind.SMOOTHING:
        return m * _unit_rows(_blur(clean, shape) - clean)
    raise ConfigError("kind", f"unknown perturbation kind {kind!r}")


def _manifold_cfg(manifold_cfg):
    if isinstance(manifold_cfg, ManifoldConfig):
        return manifold_cfg
    return ManifoldConfig(**manifold_cfg)


def gen_biased_samples(manifold_cfg, spec, n, seed=0):
    """Clean manifold draws plus manifold noise plus a ``spec`` perturbation."""
    cfg = _manifold_cfg(manifold_cfg)
    if not isinstance(spec, PerturbationSpec):
        spec = PerturbationSpec(**spec)
    clean, tangents = draw_clean(cfg, n, _stream(seed, "clean"))
    pts = clean.copy()
    if cfg.noise > 0:
        pts += cfg.noise * _stream(seed, "noise").standard_normal(pts.shape)
    pts += perturbation(spec, clean, tangents, cfg.signal_shape, _stream(spec.seed, "perturbation", seed))
    return EmbeddingSet(_finish(cfg, pts), spec.kind.value, cfg.space_tag)


_LABEL_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
_RESERVED = {"real", "real_holdout"}


@dataclass(frozen=True)
class GeneratorConfig:
    label: str
    kind: PerturbationKind
    magnitude: float
    n: int
    hyperparams: dict = field(default_factory=dict)


def normalize_config(config):
    """Validate a scenario config dict and fill defaults; returns a new dict."""
    if not isinstance(config, dict):
        raise ConfigError("config", "must be a JSON object")
    cfg = copy.deepcopy(config)
    name = cfg.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError("name", "must be a non-empty string")
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    man = cfg.get("manifold")
    if not isinstance(man, dict):
        raise ConfigError("manifold", "must be an object")
    known = {"kind", "n", "noise", "dim", "image_size", "channels", "n_components", "n_holdout"}
    extra = set(man) - known
    if extra:
        raise ConfigError("manifold", f"unknown keys {sorted(extra)}")
    for key in ("kind", "n"):
        if key not in man:
            raise ConfigError(f"manifold.{key}", "is required")
    mcfg = ManifoldConfig(**{k: v for k, v in man.items() if k != "n_holdout"})
    gens = cfg.get("generators")
    if not isinstance(gens, list) or not gens:
        raise ConfigError("generators", "must be a non-empty list")
    labels = set()
    out_gens = []
    for i, g in enumerate(gens):
        where = f"generators[{i}]"
        if not isinstance(g, dict):
            raise ConfigError(where, "must be an object")
        label = g.get("label")
        if not isinstance(label, str) or not _LABEL_RE.match(label) or label in _RESERVED:
            raise ConfigError(f"{where}.label", f"invalid label {label!r}")
        if label in labels:
            raise ConfigError(f"{where}.label", f"duplicate label {label!r}")
        labels.add(label)
        try:
            spec = PerturbationSpec(g.get("kind"), g.get("magnitude", 0))
        except ConfigError as e:
            raise ConfigError(f"{where}.{e.field}", str(e).split(": ", 1)[1]) from None
        n = g.get("n", mcfg.n)
        if not isinstance(n, int) or n < 1:
            raise ConfigError(f"{where}.n", "must be a positive integer")
        hp = g.get("hyperparams", {})
        if not isinstance(hp, dict):
            raise ConfigError(f"{where}.hyperparams", "must be an object")
        out_gens.append({"label": label, "kind": spec.kind.value, "magnitude": float(spec.magnitude),
                         "n": n, "hyperparams": {str(k): str(v) for k, v in hp.items()}})
    n_holdout = man.get("n_holdout", max(g["n"] for g in out_gens))
    if not isinstance(n_holdout, int) or n_holdout < 0:
        raise ConfigError("manifold.n_holdout", "must be a non-negative integer")
    space = cfg.get("space", {})
    if not isinstance(space, dict):
        raise ConfigError("space", "must be an object")
    embedding = space.get("embedding", "identity")
    if embedding not in ("identity", "freq"):
        raise ConfigError("space.embedding", f"unknown embedding {embedding!r}")
    if embedding == "freq" and mcfg.kind is not ManifoldKind.IMAGEGRID:
        raise ConfigError("space.embedding", "freq embedding needs an ImageGrid manifold")
    stdz = space.get("standardize", False)
    if not isinstance(stdz, bool):
        raise ConfigError("space.standardize", "must be a boolean")
    fft_mode = space.get("fft_mode", "log_magnitude")
    if fft_mode not in ("log_magnitude", "magnitude"):
        raise ConfigError("space.fft_mode", f"unknown mode {fft_mode!r}")
    manifold = {"kind": mcfg.kind.value, "n": int(mcfg.n), "noise": float(mcfg.noise),
                "dim": int(mcfg.dim), "n_holdout": n_holdout}
    if mcfg.kind is ManifoldKind.IMAGEGRID:
        manifold.update(image_size=int(mcfg.image_size), channels=int(mcfg.channels),
                        n_components=int(mcfg.n_components))
        del manifold["dim"]
    return {
        "name": name,
        "seed": seed,
        "manifold": manifold,
        "generators": out_gens,
        "space": {"embedding": embedding, "standardize": stdz, "fft_mode": fft_mode},
    }


def config_sha256(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class Scenario:
    name: str
    space_tag: SpaceTag
    real: EmbeddingSet
    real_holdout: EmbeddingSet
    generators: tuple  # of (label, EmbeddingSet)
    hyperparam_labels: dict
    seed: int
    config: dict

    @property
    def dim(self):
        return self.real.dim

    @property
    def labels(self):
        return [label for label, _ in self.generators]

    def generator(self, label):
        return dict(self.generators)[label]


def _embed_space(points, mcfg, space):
    if space["embedding"] == "freq":
        stack = points.reshape((points.shape[0],) + mcfg.signal_shape)
        return _fft_block(stack, space["fft_mode"]).reshape(points.shape[0], -1), SpaceTag.FREQ
    return points, mcfg.space_tag


def build_scenario(config):
    """Generate a ``Scenario`` from a config dict or a JSON file path."""
    if isinstance(config, (str, Path)):
        try:
            config = json.loads(Path(config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON: {e}") from None
    cfg = normalize_config(config)
    man = {k: v for k, v in cfg["manifold"].items() if k != "n_holdout"}
    mcfg = ManifoldConfig(**man)
    seed = cfg["seed"]

    def sample(stream, n, spec=None):
        clean, tangents = draw_clean(mcfg, n, _stream(seed, stream, "clean"))
        pts = clean.copy()
        if mcfg.noise > 0:
            pts += mcfg.noise * _stream(seed, stream, "noise").standard_normal(pts.shape)
        if spec is not None:
            pts += perturbation(spec, clean, tangents, mcfg.signal_shape,
                                _stream(seed, stream, "perturbation"))
        out, tag = _embed_space(_finish(mcfg, pts), mcfg, cfg["space"])
        return out, tag

    real_pts, tag = sample("reference", mcfg.n)
    hold_pts, _ = sample("real_holdout", cfg["manifold"]["n_holdout"]) if cfg["manifold"]["n_holdout"] else (np.zeros((0, real_pts.shape[1]), np.float32), tag)
    gen_pts = []
    for g in cfg["generators"]:
        pts, _ = sample(f"generator:{g['label']}", g["n"], PerturbationSpec(g["kind"], g["magnitude"]))
        gen_pts.append((g["label"], pts))
    real = EmbeddingSet(real_pts, "real", tag)
    if cfg["space"]["standardize"]:
        stats = compute_stats(real)
        std = lambda pts, label: standardize(EmbeddingSet(pts, label, tag), stats)
    else:
        std = lambda pts, label: EmbeddingSet(pts, label, tag)
    return Scenario(
        name=cfg["name"],
        space_tag=tag,
        real=std(real_pts, "real"),
        real_holdout=std(hold_pts, "real"),
        generators=tuple((label, std(pts, label)) for label, pts in gen_pts),
        hyperparam_labels={g["label"]: dict(g["hyperparams"]) for g in cfg["generators"]},
        seed=seed,
        config=cfg,
    )


def save_scenario(scenario, out_dir):
    """Persist ``real.fpte``, ``real_holdout.fpte``, ``<label>.fpte``,
    ``manifest.json`` and ``hyperparams.csv`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    sets = [("real", scenario.real), ("real_holdout", scenario.real_holdout)] + list(scenario.generators)
    for name, eset in sets:
        files[name] = write_external_embeddings(out / f"{name}.fpte", eset)["sha256"]
    write_hyperparams(out / "hyperparams.csv", scenario.hyperparam_labels)
    manifest = {
        "name": scenario.name,
        "seed": scenario.seed,
        "space_tag": scenario.space_tag.value,
        "dim": scenario.dim,
        "labels": scenario.labels,
        "files": files,
        "config": scenario.config,
        "config_sha256": config_sha256(scenario.config),
    }
    fpte.write_json(out / "manifest.json", manifest)
    return manifest


def load_scenario(path, verify=True):
    d = Path(path)
    manifest = fpte.read_json(d / "manifest.json")
    for key in ("name", "labels", "files", "config"):
        if key not in manifest:
            raise FormatError(f"{d / 'manifest.json'}: missing {key!r}")
    sets = {}
    for name in ["real", "real_holdout"] + list(manifest["labels"]):
        eset = load_external_embeddings(d / f"{name}.fpte")
        if verify and fpte.payload_sha256(eset.points) != manifest["files"][name]:
            raise ChecksumError(f"{name}.fpte does not match manifest checksum")
        sets[name] = eset
    hp_path = d / "hyperparams.csv"
    hyper = read_hyperparams(hp_path) if hp_path.exists() else {}
    return Scenario(
        name=manifest["name"],
        space_tag=SpaceTag(manifest.get("space_tag", sets["real"].space_tag)),
        real=sets["real"],
        real_holdout=sets["real_holdout"],
        generators=tuple((label, sets[label]) for label in manifest["labels"]),
        hyperparam_labels={label: hyper.get(label, {}) for label in manifest["labels"]},
        seed=manifest.get("seed", 0),
        config=manifest["config"],
    )


CANONICAL_KINDS = ("NormalOffset", "DirectionalBias", "HighFreqNoise", "Checkerboard")


def canonical_config(manifold="Circle2D", seed=0, n_reference=10_000, n_per_class=1000,
                     magnitude=0.2, dim=32, noise=0.005, kinds=CANONICAL_KINDS):
    """The acceptance scenario: one generator per perturbation kind."""
    families = {"NormalOffset": "offset", "DirectionalBias": "offset",
                "HighFreqNoise": "spectral", "Checkerboard": "spectral", "Smoothing": "spectral"}
    return {
        "name": f"canonical-{manifold.lower()}-s{seed}",
        "seed": seed,
        "manifold": {"kind": manifold, "n": n_reference, "noise": noise, "dim": dim,
                     "n_holdout": n_per_class},
        "generators": [
            {"label": k.lower(), "kind": k, "magnitude": magnitude, "n": n_per_class,
             "hyperparams": {"kind": k, "family": families[k]}}
            for k in kinds
        ],
        "space": {"embedding": "identity", "standardize": False},
    }
