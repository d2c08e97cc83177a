"""Scenario-level orchestration shared by the CLI and experiments:
embed -> artifact -> attribute -> evaluate."""

import numpy as np

from .attribution import build_dataset
from .errors import ValidationError
from .fingerprint import compute_fingerprint
from .manifold_index import build_index

FEATURE_KINDS = ("artifact", "raw")


def scenario_fingerprints(scenario, n_threads=None):
    """``(real_holdout_fp or None, [generator fps])`` against ``scenario.real``."""
    index = build_index(scenario.real)
    real_fp = None
    if len(scenario.real_holdout):
        real_fp = compute_fingerprint(index, scenario.real_holdout, n_threads=n_threads)
    gens = [compute_fingerprint(index, eset, n_threads=n_threads) for _, eset in scenario.generators]
    return real_fp, gens


def scenario_dataset(scenario, features="artifact", include_real=True, seed=0, n_threads=None):
    """Labeled dataset of artifact or raw features for a scenario."""
    if features not in FEATURE_KINDS:
        raise ValidationError(f"unknown feature kind {features!r}")
    if features == "artifact":
        real, gens = scenario_fingerprints(scenario, n_threads)
    else:
        real = scenario.real_holdout if len(scenario.real_holdout) else None
        gens = [eset for _, eset in scenario.generators]
    if include_real and real is None:
        raise ValidationError("scenario has no held-out real samples for the Real class")
    return build_dataset(gens, real if include_real else None, seed=seed)


def scenario_feature_matrix(scenario, features="artifact", include_real=False, n_threads=None):
    """Stacked features and per-row source labels (generators first real optional)."""
    ds = scenario_dataset(scenario, features, include_real, 0, n_threads)
    names = np.asarray(ds.label_names, dtype=object)
    return ds.features, names[ds.labels]
