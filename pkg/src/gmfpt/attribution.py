"""Source-model attribution: stratified 7:2:1 datasets and an MLP classifier.

The classifier is a small feed-forward network trained with softmax
cross-entropy and momentum SGD. Gradients over a mini-batch are summed per
fixed-size chunk and combined by a fixed pairwise tree, so the parameter
trajectory only depends on (data, config, seed).
"""

import enum
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import fpte
from ._validation import as_matrix
from .embedding import EmbeddingSet
from .errors import ConfigError, DimensionError, EmptyInputError, NumericalError, ValidationError
from .fingerprint import Fingerprint

SPLIT_RATIOS = (7, 2, 1)


class Split(str, enum.Enum):
    TRAIN = "Train"
    VAL = "Val"
    TEST = "Test"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for s in cls:
            if str(value).lower() == s.value.lower():
                return s
        raise ValidationError(f"unknown split {value!r}")


_SPLIT_CODES = {Split.TRAIN: 0, Split.VAL: 1, Split.TEST: 2}


def split_sizes(n, ratios=SPLIT_RATIOS):
    """Largest-remainder apportionment of ``n`` items to ``ratios``.

    Remainder ties go to the earlier split.
    """
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return tuple(sizes)


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    label_names: tuple
    split_assignment: np.ndarray  # codes: 0 Train, 1 Val, 2 Test

    def __post_init__(self):
        X = as_matrix(self.features, "features")
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        s = np.asarray(self.split_assignment, dtype=np.int8).ravel()
        names = tuple(self.label_names)
        if y.size != X.shape[0] or s.size != X.shape[0]:
            raise DimensionError("labels/splits must align with feature rows")
        if y.min() < 0 or y.max() >= len(names):
            raise ValidationError("labels out of range of label_names")
        if len(set(names)) != len(names):
            raise ValidationError("label names must be unique")
        for arr in (X, y, s):
            arr.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "split_assignment", s)
        object.__setattr__(self, "label_names", names)

    @property
    def num_classes(self):
        return len(self.label_names)

    @property
    def dim(self):
        return self.features.shape[1]

    def mask(self, split):
        return self.split_assignment == _SPLIT_CODES[Split.parse(split)]

    def subset(self, split):
        m = self.mask(split)
        return self.features[m], self.labels[m]

    def split_counts(self):
        """``counts[c, s]`` = samples of class c in split s."""
        out = np.zeros((self.num_classes, 3), dtype=np.int64)
        np.add.at(out, (self.labels, self.split_assignment), 1)
        return out


def _group_features(group):
    if isinstance(group, Fingerprint):
        return group.vectors, group.source_label, group.space_tag
    if isinstance(group, EmbeddingSet):
        return group.points, group.source_label, group.space_tag
    raise ValidationError(f"cannot take features from {type(group).__name__}")


def build_dataset(fingerprints, real_artifacts=None, seed=0):
    """Stack per-source features into a stratified 7:2:1 labeled dataset.

    Label 0 is ``real_artifacts`` (when given); the i-th entry of
    ``fingerprints`` gets label i+1 (or i without a real class). Entries may
    be ``Fingerprint`` (artifact features) or ``EmbeddingSet`` (raw features).
    """
    groups = ([real_artifacts] if real_artifacts is not None else []) + list(fingerprints)
    if len(groups) < 2:
        raise ValidationError("attribution needs at least 2 classes")
    feats, names, tags = zip(*(_group_features(g) for g in groups))
    dims = {f.shape[1] for f in feats}
    if len(dims) != 1:
        raise DimensionError(f"feature groups have differing dims {sorted(dims)}")
    if len(set(tags)) != 1:
        raise ValidationError(f"feature groups mix embedding spaces {sorted(t.value for t in set(tags))}")
    labels, splits = [], []
    for c, f in enumerate(feats):
        n = f.shape[0]
        if n < 10:
            raise ValidationError(f"class {names[c]!r} has {n} samples; the 7:2:1 split needs >= 10")
        n_tr, n_va, _ = split_sizes(n)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(c,)))
        perm = rng.permutation(n)
        s = np.full(n, 2, dtype=np.int8)
        s[perm[:n_tr]] = 0
        s[perm[n_tr : n_tr + n_va]] = 1
        labels.append(np.full(n, c))
        splits.append(s)
    return LabeledDataset(np.concatenate(feats), np.concatenate(labels), names, np.concatenate(splits))


@dataclass(frozen=True)
class TrainingConfig:
    hidden: tuple = (256,)
    activation: str = "tanh"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64  # None: full batch
    epochs: int = 100
    seed: int = 0
    standardize: bool = True
    class_weight: object = None  # None, "balanced" or per-class sequence
    chunk_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden", "layer widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError("activation", f"unknown activation {self.activation!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must be in [0, 1)")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ConfigError("batch_size", "must be positive or None")
        if int(self.epochs) < 1:
            raise ConfigError("epochs", "must be >= 1")
        if int(self.chunk_size) < 1:
            raise ConfigError("chunk_size", "must be positive")


def _tanh_grad(pre, act):
    return 1.0 - act * act


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "softplus": (_softplus, lambda pre, act: _sigmoid(pre)),
}


def layer_shapes(input_dim, hidden, num_classes):
    widths = [int(input_dim), *hidden, int(num_classes)]
    return list(zip(widths[:-1], widths[1:]))


def param_count(input_dim, hidden, num_classes):
    return sum(i * o + o for i, o in layer_shapes(input_dim, hidden, num_classes))


def _unpack(params, shapes):
    out, k = [], 0
    for i, o in shapes:
        W = params[k : k + i * o].reshape(i, o)
        k += i * o
        b = params[k : k + o]
        k += o
        out.append((W, b))
    return out


def _forward(params, X, shapes, activation):
    act = _ACTIVATIONS[activation][0]
    layers = _unpack(params, shapes)
    h = X
    cache = []
    for W, b in layers[:-1]:
        pre = h @ W + b
        a = act(pre)
        cache.append((h, pre, a))
        h = a
    W, b = layers[-1]
    return h @ W + b, cache, layers


def _log_softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def softmax(Z):
    return np.exp(_log_softmax(Z))


def loss_and_grad_sum(params, X, y, w, shapes, activation):
    """Weighted cross-entropy *sum* and its gradient w.r.t. flat params."""
    Z, cache, layers = _forward(params, X, shapes, activation)
    logp = _log_softmax(Z)
    loss = -float(np.sum(w * logp[np.arange(y.size), y]))
    dZ = np.exp(logp)
    dZ[np.arange(y.size), y] -= 1.0
    dZ *= w[:, None]
    dact = _ACTIVATIONS[activation][1]
    grads = [None] * len(layers)
    h_last = cache[-1][2] if cache else X
    grads[-1] = (h_last.T @ dZ, dZ.sum(axis=0))
    delta = dZ
    for li in range(len(layers) - 2, -1, -1):
        h_in, pre, a = cache[li]
        delta = (delta @ layers[li + 1][0].T) * dact(pre, a)
        grads[li] = (h_in.T @ delta, delta.sum(axis=0))
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return loss, flat


def loss_and_grad(params, X, y, shapes, activation, w=None):
    """Mean weighted cross-entropy and gradient (no chunking)."""
    w = np.ones(y.size) if w is None else w
    loss, g = loss_and_grad_sum(params, X, y, w, shapes, activation)
    return loss / w.sum(), g / w.sum()


def _tree_sum(items):
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def _chunked(params, X, y, w, shapes, activation, chunk):
    losses, grads = [], []
    for s in range(0, y.size, chunk):
        l, g = loss_and_grad_sum(params, X[s : s + chunk], y[s : s + chunk], w[s : s + chunk],
                                 shapes, activation)
        losses.append(np.float64(l))
        grads.append(g)
    total = float(w.sum())
    return float(_tree_sum(losses)) / total, _tree_sum(grads) / total


def _chunked_loss(params, X, y, w, shapes, activation, chunk):
    losses = []
    for s in range(0, y.size, chunk):
        Z, _, _ = _forward(params, X[s : s + chunk], shapes, activation)
        logp = _log_softmax(Z)
        yy = y[s : s + chunk]
        losses.append(np.float64(-np.sum(w[s : s + chunk] * logp[np.arange(yy.size), yy])))
    return float(_tree_sum(losses)) / float(w.sum())


def init_params(input_dim, hidden, num_classes, rng):
    """Glorot-uniform hidden layers, zero output layer and biases."""
    shapes = layer_shapes(input_dim, hidden, num_classes)
    parts = []
    for li, (i, o) in enumerate(shapes):
        if li == len(shapes) - 1:
            W = np.zeros((i, o))
        else:
            lim = np.sqrt(6.0 / (i + o))
            W = rng.uniform(-lim, lim, size=(i, o))
        parts += [W.ravel(), np.zeros(o)]
    return np.concatenate(parts)


@dataclass
class AttributionModel:
    """Trained classifier over artifact (or raw) feature vectors."""

    input_dim: int
    num_classes: int
    hidden: tuple
    activation: str
    params: np.ndarray
    input_mean: np.ndarray = None
    input_scale: np.ndarray = None
    label_names: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.params = np.asarray(self.params, dtype=np.float32).ravel()
        expected = param_count(self.input_dim, self.hidden, self.num_classes)
        if self.params.size != expected:
            raise ValidationError(f"{self.params.size} parameters, architecture needs {expected}")
        if self.input_mean is not None:
            self.input_mean = np.asarray(self.input_mean, dtype=np.float32)
            self.input_scale = np.asarray(self.input_scale, dtype=np.float32)
        self.label_names = tuple(self.label_names) or tuple(str(i) for i in range(self.num_classes))

    @property
    def shapes(self):
        return layer_shapes(self.input_dim, self.hidden, self.num_classes)

    @property
    def architecture(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "num_classes": self.num_classes,
        }

    def _prep(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionError(f"features have shape {X.shape}, model expects dim {self.input_dim}")
        if self.input_mean is not None:
            X = (X - self.input_mean.astype(np.float64)) / self.input_scale.astype(np.float64)
        return X

    def logits(self, X):
        return _forward(self.params.astype(np.float64), self._prep(X), self.shapes, self.activation)[0]

    def predict_proba(self, X):
        return softmax(self.logits(X))

    def predict(self, X):
        # argmax keeps the first (smallest) label on ties
        return np.argmax(self.predict_proba(X), axis=1)


def _sample_weights(y, num_classes, class_weight):
    if class_weight is None:
        return np.ones(y.size)
    if isinstance(class_weight, str):
        if class_weight != "balanced":
            raise ConfigError("class_weight", f"unknown mode {class_weight!r}")
        counts = np.bincount(y, minlength=num_classes).astype(np.float64)
        cw = y.size / (num_classes * np.maximum(counts, 1))
    else:
        cw = np.asarray(class_weight, dtype=np.float64)
        if cw.shape != (num_classes,) or np.any(cw <= 0):
            raise ConfigError("class_weight", f"need {num_classes} positive weights")
    return cw[y]


def fit_mlp(X_train, y_train, num_classes, cfg, X_val=None, y_val=None):
    """Train and return ``(params_f32, mean, scale, history)``."""
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    if y_train.size == 0:
        raise EmptyInputError("empty training split")
    if cfg.standardize:
        mean = X_train.mean(axis=0).astype(np.float32)
        scale = np.maximum(X_train.std(axis=0), 1e-8).astype(np.float32)
        norm = lambda A: (np.asarray(A, dtype=np.float64) - mean.astype(np.float64)) / scale.astype(np.float64)
    else:
        mean = scale = None
        norm = lambda A: np.asarray(A, dtype=np.float64)
    Xt = norm(X_train)
    has_val = X_val is not None and len(y_val) > 0
    Xv = norm(X_val) if has_val else None
    yv = np.asarray(y_val, dtype=np.int64) if has_val else None
    shapes = layer_shapes(Xt.shape[1], cfg.hidden, num_classes)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(Xt.shape[1], cfg.hidden, num_classes, np.random.default_rng(seeds[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    w = _sample_weights(y_train, num_classes, cfg.class_weight)
    vel = np.zeros_like(params)
    n = y_train.size
    bs = n if cfg.batch_size is None else min(int(cfg.batch_size), n)
    history = {"train_loss": [], "val_loss": [], "val_accuracy": []}
    best = (-1.0, params.copy(), 0)
    for epoch in range(int(cfg.epochs)):
        order = shuffle_rng.permutation(n) if bs < n else np.arange(n)
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            loss, g = _chunked(params, Xt[idx], y_train[idx], w[idx], shapes, cfg.activation,
                               cfg.chunk_size)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}")
            vel = cfg.momentum * vel - cfg.learning_rate * g
            params = params + vel
            if not np.all(np.isfinite(params)):
                raise NumericalError(f"non-finite parameters at epoch {epoch + 1}")
        tl = _chunked_loss(params, Xt, y_train, w, shapes, cfg.activation, cfg.chunk_size)
        if not np.isfinite(tl):
            raise NumericalError(f"non-finite loss at epoch {epoch + 1}")
        history["train_loss"].append(tl)
        if has_val:
            Zv = _forward(params, Xv, shapes, cfg.activation)[0]
            lv = _log_softmax(Zv)
            history["val_loss"].append(float(-lv[np.arange(yv.size), yv].mean()))
            acc = float(np.mean(np.argmax(Zv, axis=1) == yv))
            history["val_accuracy"].append(acc)
            if acc > best[0]:
                best = (acc, params.copy(), epoch + 1)
        else:
            best = (float("nan"), params.copy(), epoch + 1)
    history["best_epoch"] = best[2]
    if np.abs(best[1]).max(initial=0.0) > np.finfo(np.float32).max:
        raise NumericalError("parameters overflow binary32")
    return best[1].astype(np.float32), mean, scale, history


def train(dataset, cfg=None):
    """Fit an ``AttributionModel`` on the Train split, selecting by Val accuracy."""
    cfg = cfg or TrainingConfig()
    X, y = dataset.subset(Split.TRAIN)
    present = np.bincount(y, minlength=dataset.num_classes)
    if np.any(present == 0):
        missing = [dataset.label_names[i] for i in np.nonzero(present == 0)[0]]
        raise ValidationError(f"classes absent from Train split: {missing}")
    Xv, yv = dataset.subset(Split.VAL)
    params, mean, scale, hist = fit_mlp(X, y, dataset.num_classes, cfg, Xv, yv)
    meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "config": _config_dict(cfg),
        "best_epoch": hist["best_epoch"],
        "train_curve": hist["train_loss"],
        "val_curve": hist["val_loss"],
        "val_accuracy_curve": hist["val_accuracy"],
    }
    return AttributionModel(dataset.dim, dataset.num_classes, cfg.hidden, cfg.activation, params,
                            mean, scale, dataset.label_names, meta)


def _config_dict(cfg):
    d = dict(cfg.__dict__)
    d["hidden"] = list(cfg.hidden)
    if d["class_weight"] is not None and not isinstance(d["class_weight"], str):
        d["class_weight"] = [float(v) for v in d["class_weight"]]
    return d


def predict(model, features):
    """``(labels, probabilities)`` for each feature row."""
    probs = model.predict_proba(features)
    return np.argmax(probs, axis=1), probs


def _metrics(y_true, y_pred, num_classes, label_names):
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    counts = confusion.sum(axis=1)
    per_class = {
        label_names[c]: (float(confusion[c, c] / counts[c]) if counts[c] else None)
        for c in range(num_classes)
    }
    return {
        "accuracy": float(np.trace(confusion) / max(y_true.size, 1)),
        "per_class_accuracy": per_class,
        "confusion": confusion.tolist(),
        "n": int(y_true.size),
        "label_names": list(label_names),
    }


def evaluate(model, dataset, split=Split.TEST):
    X, y = dataset.subset(split)
    if y.size == 0:
        raise EmptyInputError(f"split {Split.parse(split).value} is empty")
    if dataset.num_classes != model.num_classes:
        raise ValidationError("dataset and model disagree on the number of classes")
    pred, _ = predict(model, X)
    return _metrics(y, pred, model.num_classes, model.label_names)


def cross_evaluate(model, other, label_map, split=Split.TEST):
    """Accuracy on another dataset whose class names map onto the model's.

    ``label_map`` maps ``other`` class names to model class names; samples
    of unmapped classes are excluded and counted.
    """
    if not label_map:
        raise ValidationError("label_map is empty: no classes to compare")
    model_index = {name: i for i, name in enumerate(model.label_names)}
    lut = np.full(other.num_classes, -1)
    for src, dst in label_map.items():
        if src not in other.label_names:
            raise ValidationError(f"label_map source {src!r} not in dataset classes")
        if dst not in model_index:
            raise ValidationError(f"label_map target {dst!r} not in model classes")
        lut[other.label_names.index(src)] = model_index[dst]
    X, y = other.subset(split)
    mapped = lut[y]
    keep = mapped >= 0
    if not keep.any():
        raise EmptyInputError("no samples of mapped classes in the evaluation split")
    pred, _ = predict(model, X[keep])
    out = _metrics(mapped[keep], pred, model.num_classes, model.label_names)
    out["mapped"] = int(keep.sum())
    out["excluded"] = int((~keep).sum())
    return out


def save_model(model, path):
    """FPTE parameter blob at ``path`` and JSON header at ``<path>.json``."""
    sha = fpte.write(path, model.params[None, :])
    header = {
        "architecture": model.architecture,
        "label_names": list(model.label_names),
        "params_sha256": sha,
        "input_mean": None if model.input_mean is None else model.input_mean.tolist(),
        "input_scale": None if model.input_scale is None else model.input_scale.tolist(),
        "seed": model.metadata.get("seed"),
        "epochs": model.metadata.get("epochs"),
        "val_curve": model.metadata.get("val_curve", []),
        "metadata": model.metadata,
    }
    fpte.write_json(fpte.sidecar_path(path), header)
    return header


def load_model(path):
    header = fpte.read_json(fpte.sidecar_path(path))
    params = fpte.read(path).ravel()
    if fpte.payload_sha256(params) != header["params_sha256"]:
        from .errors import ChecksumError

        raise ChecksumError(f"{path}: parameter checksum mismatch")
    arch = header["architecture"]
    return AttributionModel(
        arch["input_dim"], arch["num_classes"], tuple(arch["hidden"]), arch["activation"], params,
        header["input_mean"], header["input_scale"], tuple(header["label_names"]),
        header.get("metadata", {}),
    )


class ArtifactClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn classifier wrapping the attribution MLP.

    Parameters mirror ``TrainingConfig``; ``hidden_layer_sizes=()`` gives
    multinomial logistic regression. ``fit`` accepts an optional validation
    set used for best-epoch selection.
    """

    def __init__(self, hidden_layer_sizes=(256,), activation="tanh", learning_rate=1e-3,
                 momentum=0.9, batch_size=64, max_epochs=100, standardize=True,
                 class_weight=None, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.standardize = standardize
        self.class_weight = class_weight
        self.random_state = random_state

    def _config(self):
        return TrainingConfig(self.hidden_layer_sizes, self.activation, self.learning_rate,
                              self.momentum, self.batch_size, self.max_epochs,
                              self.random_state, self.standardize, self.class_weight)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ValidationError("need at least 2 classes")
        yi = np.searchsorted(self.classes_, y)
        if X_val is not None:
            X_val = check_array(X_val, dtype=np.float64)
            y_val = np.searchsorted(self.classes_, np.asarray(y_val))
        cfg = self._config()
        params, mean, scale, hist = fit_mlp(X, yi, self.classes_.size, cfg, X_val, y_val)
        self.model_ = AttributionModel(X.shape[1], self.classes_.size, cfg.hidden, cfg.activation,
                                       params, mean, scale, tuple(map(str, self.classes_)),
                                       {"seed": cfg.seed, "epochs": cfg.epochs, **hist})
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_array(X, dtype=np.float64))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
