"""Acceptance criteria, each with its tolerance and runtime budget.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import json

import numpy as np
import pytest

from gmfpt import fpte
from gmfpt.attribution import TrainingConfig, cross_evaluate, evaluate, layer_shapes, loss_and_grad, param_count, train
from gmfpt.cli import main
from gmfpt.embedding import EmbeddingSet, Image, embed_fft
from gmfpt.fingerprint import compute_fingerprint, d_fpt, support_coverage
from gmfpt.manifold_index import ManifoldIndex, build_index
from gmfpt.metrics import GaussianSummary, cluster_alignment, fdr, frechet_distance, knn_precision_recall, nmi
from gmfpt.pipeline import scenario_dataset, scenario_feature_matrix
from gmfpt.synthbench import build_scenario, canonical_config
from helpers import fft_embedding_oracle, naive_nearest_vec, numeric_grad, time_budget

SEEDS = range(5)


@pytest.mark.acceptance(1, "NN oracle equivalence and thread determinism", 60)
def test_nn_oracle_equivalence():
    with time_budget(60):
        rng = np.random.default_rng(2024)
        dims = (2, 16, 512)
        cases = 0
        for trial in range(1002):
            d = dims[trial % 3]
            n = int(rng.integers(1, 5001)) if trial % 6 else int(rng.integers(1, 40))
            if trial % 4 == 0:
                # integer lattice: exact ties are common
                ref = rng.integers(-1, 2, size=(n, d)).astype(np.float32)
                Q = rng.integers(-1, 2, size=(3, d)).astype(np.float32)
            else:
                ref = rng.standard_normal((n, d)).astype(np.float32)
                Q = rng.standard_normal((3, d)).astype(np.float32)
                Q[0] = ref[rng.integers(n)]
            index = ManifoldIndex(EmbeddingSet(ref), block_size=int(rng.choice([7, 512, 4096])))
            oi, od = naive_nearest_vec(Q, ref)
            batch = index.nearest_batch(EmbeddingSet(Q))
            for q, p, i, dist in zip(Q, batch, oi, od):
                single = index.nearest(q)
                assert single.neighbor_id == p.neighbor_id == i
                assert single.distance_sq == p.distance_sq == np.float32(dist)
                cases += 1
        assert cases >= 1000

        ref = rng.standard_normal((5000, 16)).astype(np.float32)
        Q = rng.standard_normal((3000, 16)).astype(np.float32)
        index = build_index(EmbeddingSet(ref))
        one = index.query(Q, n_threads=1)
        for k in (2, 4, 8):
            many = index.query(Q, n_threads=k)
            assert one[0].tobytes() == many[0].tobytes()
            assert one[1].tobytes() == many[1].tobytes()


@pytest.mark.acceptance(2, "Artifact zero law and precision bridge", 5)
def test_zero_law():
    with time_budget(5):
        rng = np.random.default_rng(7)
        for d in (2, 16, 64):
            ref = rng.standard_normal((2000, d)).astype(np.float32)
            gen = ref[rng.choice(2000, 500)]
            fp = compute_fingerprint(build_index(EmbeddingSet(ref)), EmbeddingSet(gen, "g"))
            assert not fp.vectors.any()
            assert d_fpt(fp) == 0.0
            assert support_coverage(fp, 0.0) == 1.0
            precision, _ = knn_precision_recall(ref, gen, 3)
            assert precision == 1.0
            # swapped roles: the reference inside the generated set gives full recall
            sup = np.vstack([gen, ref])
            swapped = compute_fingerprint(build_index(EmbeddingSet(sup)), EmbeddingSet(ref))
            assert d_fpt(swapped) == 0.0
            assert knn_precision_recall(ref, sup, 3)[1] == 1.0


@pytest.mark.acceptance(3, "Frechet distance closed forms, symmetry, non-negativity", 10)
def test_fd_closed_forms():
    with time_budget(10):
        one = lambda m, v: GaussianSummary([m], [[v]], 10)
        assert abs(frechet_distance(one(0, 1), one(1, 1)) - 1.0) <= 1e-6
        assert abs(frechet_distance(one(3, 4), one(1, 0.25)) - (4 + 1.5**2)) <= 1e-6
        a = GaussianSummary([0, 0], np.eye(2), 10)
        b = GaussianSummary([0, 0], 4 * np.eye(2), 10)
        assert abs(frechet_distance(a, b) - 2.0) <= 1e-6
        c = GaussianSummary([1, -1], np.diag([2.0, 9.0]), 10)
        e = GaussianSummary([0, 1], np.diag([0.5, 1.0]), 10)
        expected = 1 + 4 + (np.sqrt(2) - np.sqrt(0.5)) ** 2 + (3 - 1) ** 2
        assert abs(frechet_distance(c, e) - expected) <= 1e-6
        rng = np.random.default_rng(3)
        for _ in range(100):
            d = int(rng.integers(1, 10))
            sums = []
            for _ in range(2):
                A = rng.standard_normal((d, d + 2))
                sums.append(GaussianSummary(rng.standard_normal(d), A @ A.T / (d + 2), 50))
            ab, ba = frechet_distance(*sums), frechet_distance(*sums[::-1])
            assert ab >= 0 and ba >= 0
            assert abs(ab - ba) <= 1e-6 * max(1.0, abs(ab))


def _accuracy(scenario, features, seed):
    ds = scenario_dataset(scenario, features, seed=seed)
    model = train(ds, TrainingConfig(seed=seed))
    return evaluate(model, ds)["accuracy"], model


@pytest.mark.acceptance(4, "Attribution gain: artifact >= raw + 15 points and >= 90%", 300)
def test_attribution_gain():
    with time_budget(300):
        art, raw = [], []
        for seed in SEEDS:
            sc = build_scenario(canonical_config(seed=seed))
            art.append(_accuracy(sc, "artifact", seed)[0])
            raw.append(_accuracy(sc, "raw", seed)[0])
        print(f"artifact {np.round(art, 3)} raw {np.round(raw, 3)}")
        assert np.mean(art) >= 0.90
        assert np.mean(art) >= np.mean(raw) + 0.15


@pytest.mark.acceptance(5, "FDR gain: artifact FDR > raw FDR for every seed", 60)
def test_fdr_gain():
    with time_budget(60):
        for seed in SEEDS:
            sc = build_scenario(canonical_config(seed=seed))
            fa = fdr(*scenario_feature_matrix(sc, "artifact"), seed=seed)
            fr = fdr(*scenario_feature_matrix(sc, "raw"), seed=seed)
            print(f"seed {seed}: artifact {fa:.3f} raw {fr:.3f}")
            assert fa > fr


@pytest.mark.acceptance(6, "Cross-scenario generalization: artifact >= raw + 10 points", 300)
def test_cross_scenario():
    with time_budget(300):
        art, raw = [], []
        for seed in SEEDS:
            a = build_scenario(canonical_config("Circle2D", seed=seed))
            b = build_scenario(canonical_config("SwissRoll3D", seed=seed))
            for features, out in (("artifact", art), ("raw", raw)):
                _, model = _accuracy(a, features, seed)
                other = scenario_dataset(b, features, seed=seed)
                label_map = {name: name for name in other.label_names}
                out.append(cross_evaluate(model, other, label_map)["accuracy"])
        print(f"artifact {np.round(art, 3)} raw {np.round(raw, 3)}")
        assert np.mean(art) >= np.mean(raw) + 0.10


@pytest.mark.acceptance(7, "Cluster alignment: NMI >= 0.8, shuffled <= 0.1", 60)
def test_cluster_alignment():
    with time_budget(60):
        true, shuffled = [], []
        for seed in SEEDS:
            sc = build_scenario(canonical_config(seed=seed))
            X, labels = scenario_feature_matrix(sc, "artifact")
            kinds = np.array([sc.hyperparam_labels[lb]["kind"] for lb in labels])
            true.append(cluster_alignment(X, kinds, seed))
            perm = np.random.default_rng(seed).permutation(kinds)
            shuffled.append(cluster_alignment(X, perm, seed))
        print(f"aligned {np.round(true, 3)} shuffled {np.round(shuffled, 4)}")
        assert min(true) >= 0.8
        assert np.mean(shuffled) <= 0.1


@pytest.mark.acceptance(8, "Classifier gradient check vs central differences", 30)
def test_gradient_check():
    with time_budget(30):
        rng = np.random.default_rng(11)
        for i in range(50):
            d, K, n = int(rng.integers(1, 9)), int(rng.integers(2, 4)), int(rng.integers(1, 21))
            hidden = () if i % 3 == 0 else tuple(int(h) for h in rng.integers(1, 9, size=1 + i % 2))
            act = "tanh" if i % 2 else "softplus"
            shapes = layer_shapes(d, hidden, K)
            params = rng.standard_normal(param_count(d, hidden, K))
            X, y = rng.standard_normal((n, d)), rng.integers(0, K, n)
            _, g = loss_and_grad(params, X, y, shapes, act)
            num = numeric_grad(lambda p: loss_and_grad(p, X, y, shapes, act)[0], params)
            assert np.linalg.norm(g - num) <= 1e-4 * max(np.linalg.norm(num), 1e-12)


@pytest.mark.acceptance(9, "NMI axioms", 1)
def test_nmi_axioms():
    with time_budget(1):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = rng.integers(0, 5, 100)
            if np.unique(a).size < 2:
                continue
            relabel = rng.permutation(5)
            assert nmi(a, a) == 1.0
            assert nmi(a, relabel[a]) == 1.0
            b = rng.integers(0, 3, 100)
            assert nmi(relabel[a], b) == nmi(a, b)
        assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
        assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0


@pytest.mark.acceptance(10, "FFT embedding vs brute-force DFT", 30)
def test_fft_oracle():
    with time_budget(30):
        rng = np.random.default_rng(10)
        for _ in range(100):
            c = int(rng.integers(1, 4))
            h, w = (int(v) for v in rng.integers(2, 17, size=2))
            img = Image(c, h, w, rng.random(c * h * w, dtype=np.float32))
            got = embed_fft(img).astype(np.float64)
            ref = fft_embedding_oracle(img.pixels, img.shape)
            assert np.all(np.abs(got - ref) <= 1e-4 * np.maximum(np.abs(ref), 1e-3))


def _run_manifest_outputs(path):
    return fpte.read_json(path)["outputs"]


@pytest.mark.acceptance(11, "CLI reproducibility from run manifests", 120)
def test_cli_reproducibility(tmp_path, rng):
    with time_budget(120):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(canonical_config(n_reference=2000, n_per_class=150, seed=4)))
        s = tmp_path / "scen"
        lbl = tmp_path / "labels.txt"
        lbl.write_text("\n".join(rng.choice(["a", "b", "c"], 40)) + "\n")
        imgs = tmp_path / "imgs.fpte"
        fpte.write(imgs, rng.random((6, 3 * 4 * 4), dtype=np.float32))
        mp = tmp_path / "map.json"
        mp.write_text(json.dumps({"real": "real", "checkerboard": "checkerboard"}))
        commands = [
            ["synth", "--config", cfg, "--out", s],
            ["embed", imgs, "--shape", "3,4,4", "--space", "freq", "--out", tmp_path / "e.fpte"],
            ["fingerprint", "--real", s / "real.fpte", "--gen", s / "checkerboard.fpte", "--eps", "0.1",
             "--out", tmp_path / "fp.fpte"],
            ["attribute", "--scenario", s, "--epochs", "10", "--seed", "1", "--out", tmp_path / "model"],
            ["eval", "--model", tmp_path / "model" / "model.fpte", "--data", s, "--out", tmp_path / "ev.json"],
            ["eval", "--model", tmp_path / "model" / "model.fpte", "--data", s, "--cross", "--map", mp,
             "--out", tmp_path / "cx.json"],
            ["metrics", "fdr", "--scenario", s, "--out", tmp_path / "fdr.json"],
            ["metrics", "cluster-align", "--scenario", s, "--category", "kind", "--out", tmp_path / "ca.json"],
            ["metrics", "nmi", "--labels", lbl, "--labels-b", lbl, "--out", tmp_path / "nmi.json"],
            ["metrics", "pr", "--real", s / "real.fpte", "--gen", s / "normaloffset.fpte",
             "--out", tmp_path / "pr.json"],
            ["dump", "--fingerprint", tmp_path / "fp.fpte", "--out", tmp_path / "fp.csv"],
        ]
        manifests = []
        for argv in commands:
            assert main([str(a) for a in argv]) == 0, argv
            out = argv[argv.index("--out") + 1]
            manifests.append(out / "run_manifest.json" if out.is_dir() else tmp_path / f"{out.name}.run.json")
        first = {}
        for m in manifests:
            for path in _run_manifest_outputs(m):
                first[path] = open(path, "rb").read()
        assert any(p.endswith(".fpte") for p in first) and any(p.endswith(".json") for p in first)
        for m in manifests:
            assert main(["verify", str(m), "--rerun"]) == 0, m
        for path, data in first.items():
            again = open(path, "rb").read()
            if path.endswith(".json") and not path.endswith(".fpte.json"):
                assert json.loads(fpte.dumps(json.loads(again))) == json.loads(fpte.dumps(json.loads(data)))
            assert again == data, path
