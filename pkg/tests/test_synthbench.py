import itertools

import numpy as np
import pytest

from gmfpt.embedding import SpaceTag, embed_fft, Image
from gmfpt.errors import ConfigError
from gmfpt.fingerprint import compute_fingerprint, d_fpt
from gmfpt.manifold_index import build_index
from gmfpt.pipeline import scenario_fingerprints
from gmfpt.synthbench import (
    ManifoldConfig,
    PerturbationKind,
    PerturbationSpec,
    build_scenario,
    canonical_config,
    config_sha256,
    gen_biased_samples,
    gen_manifold,
    load_scenario,
    normalize_config,
    save_scenario,
)
from helpers import naive_nearest_vec


def small_config(**over):
    cfg = canonical_config(n_reference=400, n_per_class=60, seed=3)
    cfg.update(over)
    return cfg


def test_circle_on_unit_circle():
    pts = gen_manifold("Circle2D", 4, 0.0, seed=0).points.astype(np.float64)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("dim", [2, 32])
def test_circle_radius_statistics(dim):
    pts = gen_manifold("Circle2D", 10_000, 0.01, seed=1, dim=dim).points.astype(np.float64)
    r = np.linalg.norm(pts, axis=1)
    if dim == 2:
        assert np.mean(np.abs(r - 1) <= 0.04) >= 0.99
    assert 0.99 <= r.mean() <= 1.01


def test_gen_manifold_deterministic():
    a = gen_manifold("SwissRoll3D", 50, 0.1, seed=9)
    b = gen_manifold("SwissRoll3D", 50, 0.1, seed=9)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.points.tobytes() != gen_manifold("SwissRoll3D", 50, 0.1, seed=10).points.tobytes()


def test_unknown_kinds():
    with pytest.raises(ConfigError, match="manifold.kind"):
        gen_manifold("Torus", 5)
    with pytest.raises(ConfigError, match="kind"):
        PerturbationSpec("Wobble", 0.1)
    with pytest.raises(ConfigError, match="magnitude"):
        PerturbationSpec("Checkerboard", 0)


def test_image_grid_shapes():
    es = gen_manifold("ImageGrid", 5, 0.0, seed=0, image_size=16, channels=3)
    assert es.points.shape == (5, 768) and es.space_tag is SpaceTag.RGB
    assert es.points.min() >= 0 and es.points.max() <= 1
    embed_fft(Image(3, 16, 16, es.points[0]))


def test_perturbation_norms_equal_magnitude():
    cfg = ManifoldConfig("ImageGrid", 20, image_size=8)
    for kind in PerturbationKind:
        clean = gen_manifold("ImageGrid", 20, 0.0, seed=4, image_size=8).points.astype(np.float64)
        out = gen_biased_samples(cfg, PerturbationSpec(kind, 0.1), 20, seed=4).points
        assert out.shape == clean.shape
        if kind is not PerturbationKind.SMOOTHING:
            np.testing.assert_allclose(np.linalg.norm(out - clean, axis=1), 0.1, rtol=1e-3)


def test_normal_offset_zero_limit():
    cfg = ManifoldConfig("Circle2D", 2000, dim=32)
    ref = gen_manifold("Circle2D", 2000, 0.0, seed=5, dim=32)
    gen = gen_biased_samples(cfg, PerturbationSpec("NormalOffset", 1e-9), 2000, seed=5)
    assert d_fpt(compute_fingerprint(build_index(ref), gen)) <= 1e-6


@pytest.mark.parametrize("dim", [2, 32])
def test_normal_offset_mean_norm(dim):
    cfg = ManifoldConfig("Circle2D", 10_000, dim=dim)
    ref = gen_manifold("Circle2D", 10_000, 0.0, seed=0, dim=dim)
    gen = gen_biased_samples(cfg, PerturbationSpec("NormalOffset", 0.2), 500, seed=1)
    fp = compute_fingerprint(build_index(ref), gen)
    _, od = naive_nearest_vec(gen.points, ref.points)
    np.testing.assert_allclose(fp.norms, np.sqrt(od), rtol=1e-5)
    assert 0.15 <= fp.norms.mean() <= 0.25


def test_mean_norm_monotone_in_magnitude():
    ref = gen_manifold("Circle2D", 4000, 0.0, seed=0, dim=32)
    idx = build_index(ref)
    cfg = ManifoldConfig("Circle2D", 4000, dim=32)
    for kind in PerturbationKind:
        means = [compute_fingerprint(idx, gen_biased_samples(cfg, PerturbationSpec(kind, m), 300,
                                                             seed=2)).norms.mean()
                 for m in (0.05, 0.1, 0.2, 0.4)]
        assert np.all(np.diff(means) >= 0), (kind, means)


def test_kinds_have_distinct_mean_directions():
    sc = build_scenario(canonical_config(n_reference=4000, n_per_class=400))
    _, fps = scenario_fingerprints(sc)
    means = [fp.vectors.astype(np.float64).mean(axis=0) for fp in fps]
    for a, b in itertools.combinations(means, 2):
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos <= 0.5


def test_checkerboard_concentrates_in_nyquist_bin():
    config = {
        "name": "img", "seed": 2,
        "manifold": {"kind": "ImageGrid", "n": 2000, "noise": 0.0, "image_size": 8, "n_holdout": 0},
        "generators": [{"label": "cb", "kind": "Checkerboard", "magnitude": 0.2, "n": 300}],
        "space": {"embedding": "freq"},
    }
    sc = build_scenario(config)
    assert sc.space_tag is SpaceTag.FREQ
    _, [fp] = scenario_fingerprints(sc)
    energy = np.abs(fp.vectors.astype(np.float64)).mean(axis=0).reshape(8, 8)
    # after centring, the (Nyquist, Nyquist) bin sits at (0, 0)
    assert energy[0, 0] >= 3 * np.median(energy)
    assert energy[0, 0] == energy.max()


def test_scenario_structure_and_determinism():
    a = build_scenario(small_config())
    b = build_scenario(small_config())
    assert a.labels == ["normaloffset", "directionalbias", "highfreqnoise", "checkerboard"]
    assert len(a.generators) == 4 and len(a.real) == 400 and len(a.real_holdout) == 60
    assert {es.dim for _, es in a.generators} == {32}
    for (_, x), (_, y) in zip(a.generators, b.generators):
        assert x.points.tobytes() == y.points.tobytes()
    assert a.hyperparam_labels["checkerboard"] == {"kind": "Checkerboard", "family": "spectral"}


def test_generator_streams_independent():
    base = small_config()
    fewer = small_config(generators=base["generators"][:2])
    a, b = build_scenario(base), build_scenario(fewer)
    assert a.real.points.tobytes() == b.real.points.tobytes()
    assert a.generator("normaloffset").points.tobytes() == b.generator("normaloffset").points.tobytes()


def test_persist_and_rebuild(tmp_path):
    sc = build_scenario(small_config())
    manifest = save_scenario(sc, tmp_path / "s")
    assert {p.name for p in (tmp_path / "s").iterdir()} >= {
        "real.fpte", "manifest.json", "hyperparams.csv", "checkerboard.fpte"}
    back = load_scenario(tmp_path / "s")
    for (la, x), (lb, y) in zip(sc.generators, back.generators):
        assert la == lb and x.points.tobytes() == y.points.tobytes()
    assert back.hyperparam_labels == sc.hyperparam_labels
    rebuilt = build_scenario(manifest["config"])
    assert rebuilt.real.points.tobytes() == sc.real.points.tobytes()
    assert config_sha256(rebuilt.config) == manifest["config_sha256"]


def test_standardized_scenario_uses_real_stats():
    sc = build_scenario(small_config(space={"embedding": "identity", "standardize": True}))
    pts = sc.real.points.astype(np.float64)
    np.testing.assert_allclose(pts.mean(axis=0), 0, atol=1e-5)


@pytest.mark.parametrize("mutate, field", [
    (lambda c: c.pop("name"), "name"),
    (lambda c: c.update(seed=-1), "seed"),
    (lambda c: c["manifold"].update(kind="Cube"), "manifold.kind"),
    (lambda c: c["manifold"].update(bogus=1), "manifold"),
    (lambda c: c["manifold"].update(dim=3), "manifold.dim"),
    (lambda c: c.update(generators=[]), "generators"),
    (lambda c: c["generators"][1].update(label="normaloffset"), "generators[1].label"),
    (lambda c: c["generators"][0].update(label="real"), "generators[0].label"),
    (lambda c: c["generators"][0].update(kind="Blur"), "generators[0].kind"),
    (lambda c: c["generators"][2].update(magnitude=-1), "generators[2].magnitude"),
    (lambda c: c.update(space={"embedding": "freq"}), "space.embedding"),
])
def test_config_errors_are_named(mutate, field):
    cfg = small_config()
    mutate(cfg)
    with pytest.raises(ConfigError) as info:
        normalize_config(cfg)
    assert info.value.field == field
