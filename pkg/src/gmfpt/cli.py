"""``gmfpt`` command line: embed, fingerprint, attribute, eval, metrics,
synth, dump, verify.

Exit codes: 0 success, 2 usage, 3 I/O, 4 validation, 5 numerical failure.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, fpte
from .attribution import (
    Split,
    TrainingConfig,
    cross_evaluate,
    evaluate,
    load_model,
    save_model,
    train,
)
from .embedding import (
    EmbeddingSet,
    compute_stats,
    default_standardize,
    embed_images,
    images_from_matrix,
    load_external_embeddings,
    load_png,
    standardize,
    write_external_embeddings,
)
from .errors import FingerprintError, ValidationError
from .fingerprint import (
    compute_fingerprint,
    d_fpt,
    load_fingerprint,
    save_fingerprint,
    support_coverage,
)
from .manifold_index import build_index
from .metrics import cluster_alignment, fdr, knn_precision_recall, nmi, read_hyperparams
from .pipeline import scenario_dataset, scenario_feature_matrix
from .synthbench import build_scenario, load_scenario, save_scenario

log = logging.getLogger("gmfpt")

STDOUT = "-"


class UsageError(Exception):
    exit_code = 2


# -- helpers -----------------------------------------------------------------


def _emit(text, out):
    if out in (None, STDOUT):
        sys.stdout.write(text)
        return []
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(text)
    return [out]


def _read_labels(path, column=None):
    """One label per line, or a CSV column (default ``label``)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".csv":
        reader = csv.DictReader(io.StringIO(text))
        col = column or "label"
        if col not in (reader.fieldnames or ()):
            raise ValidationError(f"{path}: no column {col!r}")
        return np.asarray([row[col] for row in reader], dtype=object)
    return np.asarray([ln.strip() for ln in text.splitlines() if ln.strip()], dtype=object)


def _load_data_dir(path):
    """A scenario directory, or a bare directory of FPTE sets."""
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    if (d / "manifest.json").exists():
        return load_scenario(d)
    from .synthbench import Scenario

    real = load_external_embeddings(d / "real.fpte")
    hold_path = d / "real_holdout.fpte"
    hold = load_external_embeddings(hold_path) if hold_path.exists() else EmbeddingSet(
        np.zeros((0, real.dim), np.float32), "real", real.space_tag)
    gens = []
    for p in sorted(d.glob("*.fpte")):
        if p.stem in ("real", "real_holdout"):
            continue
        gens.append((p.stem, load_external_embeddings(p).with_label(p.stem)))
    if not gens:
        raise ValidationError(f"{d}: no generator sets found")
    return Scenario(d.name, real.space_tag, real, hold, tuple(gens),
                    {label: {} for label, _ in gens}, 0, {})


def _parse_arch(arch):
    if arch in ("linear", "", "0"):
        return ()
    try:
        hidden = tuple(int(w) for w in arch.split(","))
    except ValueError:
        raise UsageError(f"--arch must be 'linear' or comma-separated widths, got {arch!r}") from None
    if any(h < 1 for h in hidden):
        raise UsageError("--arch widths must be positive")
    return hidden


def _parse_shape(shape):
    try:
        c, h, w = (int(v) for v in shape.split(","))
    except ValueError:
        raise UsageError(f"--shape must be C,H,W, got {shape!r}") from None
    return c, h, w


# -- commands ----------------------------------------------------------------


def cmd_embed(args):
    inputs = [Path(p) for p in args.inputs]
    used = []
    if args.space == "external":
        if len(inputs) != 1:
            raise UsageError("--space external takes exactly one FPTE input")
        eset = load_external_embeddings(inputs[0], args.manifest)
        used = [inputs[0]]
        if args.label:
            eset = eset.with_label(args.label)
    else:
        images = []
        for p in inputs:
            if p.is_dir():
                files = sorted(p.glob("*.png"))
                if not files:
                    raise ValidationError(f"{p}: no PNG files")
                images += [load_png(f) for f in files]
                used += files
            elif p.suffix.lower() == ".fpte":
                if not args.shape:
                    raise UsageError("FPTE image tensors need --shape C,H,W")
                images += images_from_matrix(fpte.read(p), _parse_shape(args.shape))
                used.append(p)
            elif p.exists():
                images.append(load_png(p))
                used.append(p)
            else:
                raise FileNotFoundError(f"input not found: {p}")
        eset = embed_images(images, args.space, args.fft_mode, args.label or "real")
    do_std = default_standardize(eset.space_tag) if args.standardize is None else args.standardize
    if do_std:
        ref = eset
        if args.stats_from:
            ref = load_external_embeddings(args.stats_from)
            used.append(Path(args.stats_from))
        eset = standardize(eset, compute_stats(ref))
    write_external_embeddings(args.out, eset)
    log.info("embedded %d items into %s (dim %d)", len(eset), eset.space_tag.value, eset.dim)
    return used, [args.out, fpte.sidecar_path(args.out)]


def cmd_fingerprint(args):
    real = load_external_embeddings(args.real)
    gen = load_external_embeddings(args.gen)
    if args.swap:
        real, gen = gen, real
    fp = compute_fingerprint(build_index(real), gen)
    save_fingerprint(fp, args.out)
    eps = float(args.eps)
    report = {
        "source_label": fp.source_label,
        "manifold_ref": fp.manifold_ref,
        "swap": bool(args.swap),
        "n": len(fp),
        "d_fpt": d_fpt(fp),
        "eps": eps,
        f"support_coverage@{eps:g}": support_coverage(fp, eps),
        "norms": fp.summary(),
    }
    outs = [args.out, fpte.sidecar_path(args.out)]
    report_path = args.report or str(args.out) + ".report.json"
    outs += _emit(fpte.dumps(report), report_path)
    return [Path(args.real), Path(args.gen)], outs


def _training_config(args):
    return TrainingConfig(
        hidden=_parse_arch(args.arch),
        activation=args.activation,
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=None if args.batch_size == 0 else args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
    )


def _metrics_csv(metrics):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "accuracy", "count"])
    conf = np.asarray(metrics["confusion"])
    for i, name in enumerate(metrics["label_names"]):
        acc = metrics["per_class_accuracy"][name]
        w.writerow([name, "" if acc is None else f"{acc:.9g}", int(conf[i].sum())])
    w.writerow(["__overall__", f"{metrics['accuracy']:.9g}", metrics["n"]])
    return buf.getvalue()


def cmd_attribute(args):
    data = args.scenario or args.train_dir
    if not data:
        raise UsageError("one of --scenario or --train-dir is required")
    scenario = _load_data_dir(data)
    ds = scenario_dataset(scenario, args.features, args.include_real, seed=args.seed)
    model = train(ds, _training_config(args))
    model.metadata["dataset"] = {"features": args.features, "include_real": args.include_real,
                                 "split_seed": args.seed}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.fpte")
    metrics = evaluate(model, ds, Split.TEST)
    fpte.write_json(out / "metrics.json", metrics)
    (out / "metrics.csv").write_text(_metrics_csv(metrics))
    log.info("test accuracy %.4f", metrics["accuracy"])
    inputs = sorted(Path(data).glob("*.fpte"))
    return inputs, [out / "model.fpte", out / "model.fpte.json", out / "metrics.json",
                    out / "metrics.csv"]


def _dataset_for_model(model, data_dir):
    cfg = model.metadata.get("dataset", {})
    scenario = _load_data_dir(data_dir)
    return scenario_dataset(scenario, cfg.get("features", "artifact"),
                            cfg.get("include_real", True), seed=cfg.get("split_seed", 0))


def cmd_eval(args):
    model = load_model(args.model)
    ds = _dataset_for_model(model, args.data)
    if args.cross:
        if not args.map:
            raise UsageError("--cross requires --map")
        label_map = fpte.read_json(args.map)
        if not isinstance(label_map, dict) or not label_map:
            raise ValidationError(f"label map {args.map} is empty")
        metrics = cross_evaluate(model, ds, label_map, args.split)
    else:
        metrics = evaluate(model, ds, args.split)
    inputs = [Path(args.model)] + sorted(Path(args.data).glob("*.fpte"))
    if args.map:
        inputs.append(Path(args.map))
    return inputs, _emit(fpte.dumps(metrics), args.out)


def _features_and_labels(args):
    if args.scenario:
        scenario = _load_data_dir(args.scenario)
        X, labels = scenario_feature_matrix(scenario, args.features_kind, include_real=False)
        if args.category:
            hp = read_hyperparams(Path(args.scenario) / "hyperparams.csv")
            labels = np.asarray([hp.get(lb, {}).get(args.category, "") for lb in labels], dtype=object)
        return X, labels, sorted(Path(args.scenario).glob("*.fpte"))
    if not args.features or not args.labels:
        raise UsageError("need --scenario, or --features with --labels")
    X = load_external_embeddings(args.features).points
    labels = _read_labels(args.labels, args.column)
    return X, labels, [Path(args.features), Path(args.labels)]


def cmd_metrics(args):
    which = args.which
    if which == "fdr":
        X, labels, inputs = _features_and_labels(args)
        report = {"fdr": fdr(X, labels, args.seed)}
    elif which == "cluster-align":
        X, labels, inputs = _features_and_labels(args)
        report = {"nmi": cluster_alignment(X, labels, args.seed)}
    elif which == "nmi":
        if not args.labels or not args.labels_b:
            raise UsageError("nmi needs --labels and --labels-b")
        a = _read_labels(args.labels, args.column)
        b = _read_labels(args.labels_b, args.column)
        report = {"nmi": nmi(a, b)}
        inputs = [Path(args.labels), Path(args.labels_b)]
    else:
        if not args.real or not args.gen:
            raise UsageError("pr needs --real and --gen")
        real = load_external_embeddings(args.real).points
        gen = load_external_embeddings(args.gen).points
        p, r = knn_precision_recall(real, gen, args.k)
        report = {"precision": p, "recall": r, "k": args.k}
        inputs = [Path(args.real), Path(args.gen)]
    return inputs, _emit(fpte.dumps(report), args.out)


def cmd_synth(args):
    scenario = build_scenario(args.config)
    save_scenario(scenario, args.out)
    out = Path(args.out)
    outs = sorted(out.glob("*.fpte")) + sorted(out.glob("*.fpte.json"))
    return [Path(args.config)], outs + [out / "manifest.json", out / "hyperparams.csv"]


def cmd_dump(args):
    if args.format != "csv":
        raise UsageError(f"unsupported format {args.format!r}")
    fp = load_fingerprint(args.fingerprint)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "neighbor_id", "source_label", "norm"] + [f"a{j}" for j in range(fp.dim)])
    for i in range(len(fp)):
        w.writerow([int(fp.query_ids[i]), int(fp.neighbor_ids[i]), fp.source_label,
                    f"{float(fp.norms[i]):.9g}"] + [f"{float(v):.9g}" for v in fp.vectors[i]])
    return [Path(args.fingerprint)], _emit(buf.getvalue(), args.out)


def cmd_verify(args):
    manifest = fpte.read_json(args.run_manifest)
    problems = []

    def check(section):
        for path, sha in manifest.get(section, {}).items():
            if not Path(path).exists():
                problems.append(f"{section[:-1]} missing: {path}")
            elif fpte.file_sha256(path) != sha:
                problems.append(f"{section[:-1]} changed: {path}")

    check("inputs")
    if args.rerun and not problems:
        code = main(manifest["argv"])
        if code != 0:
            problems.append(f"re-run exited with {code}")
    check("outputs")
    report = {"run_manifest": str(args.run_manifest), "ok": not problems, "problems": problems}
    sys.stdout.write(fpte.dumps(report))
    if problems:
        raise ValidationError("; ".join(problems))
    return [], []


COMMANDS = {
    "embed": cmd_embed,
    "fingerprint": cmd_fingerprint,
    "attribute": cmd_attribute,
    "eval": cmd_eval,
    "metrics": cmd_metrics,
    "synth": cmd_synth,
    "dump": cmd_dump,
    "verify": cmd_verify,
}


# -- parser --------------------------------------------------------------------


def _bool_pair(p, name, default, help):
    dest = name.replace("-", "_")
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=dest, action="store_true", help=help)
    g.add_argument(f"--no-{name}", dest=dest, action="store_false")
    p.set_defaults(**{dest: default})


def build_parser():
    parser = argparse.ArgumentParser(prog="gmfpt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None, help="overrides FPT_THREADS")
    parser.add_argument("--options", help="JSON file of option values; flags win")
    parser.add_argument("--run-manifest", help="where to write the run manifest")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    p = sub.add_parser("embed", help="map images or features into an embedding space")
    p.add_argument("inputs", nargs="+", help="PNG files/directories or an FPTE tensor")
    p.add_argument("--space", choices=("rgb", "freq", "external"), required=True)
    p.add_argument("--shape", help="C,H,W for FPTE image tensors")
    p.add_argument("--manifest", help="external features manifest (default: sidecar)")
    p.add_argument("--fft-mode", choices=("log_magnitude", "magnitude"), default="log_magnitude")
    p.add_argument("--label", default=None)
    p.add_argument("--stats-from", help="reference FPTE whose stats standardize the output")
    _bool_pair(p, "standardize", None, "standardize per dimension")
    p.add_argument("--out", required=True)
    subparsers["embed"] = p

    p = sub.add_parser("fingerprint", help="artifacts of --gen against the --real manifold")
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--swap", action="store_true", help="use --gen as the reference (recall side)")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="report JSON path (default <out>.report.json, '-' = stdout)")
    subparsers["fingerprint"] = p

    p = sub.add_parser("attribute", help="train a source-model attributor")
    p.add_argument("--scenario")
    p.add_argument("--train-dir")
    p.add_argument("--arch", default="256", help="'linear' or hidden widths, e.g. 256 or 128,64")
    p.add_argument("--activation", choices=("tanh", "softplus"), default="tanh")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64, help="0 = full batch")
    p.add_argument("--features", choices=("artifact", "raw"), default="artifact")
    _bool_pair(p, "include-real", True, "include the Real class (label 0)")
    p.add_argument("--out", required=True)
    subparsers["attribute"] = p

    p = sub.add_parser("eval", help="evaluate a trained attributor")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", type=Split.parse, default=Split.TEST)
    p.add_argument("--cross", action="store_true")
    p.add_argument("--map", help="JSON object mapping data class names to model class names")
    p.add_argument("--out", default=STDOUT)
    subparsers["eval"] = p

    p = sub.add_parser("metrics", help="FDR, NMI, kNN precision/recall, cluster alignment")
    p.add_argument("which", choices=("fdr", "nmi", "pr", "cluster-align"))
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--labels-b")
    p.add_argument("--column")
    p.add_argument("--scenario")
    p.add_argument("--features-kind", choices=("artifact", "raw"), default="artifact")
    p.add_argument("--category", help="hyperparameter category to use as labels")
    p.add_argument("--real")
    p.add_argument("--gen")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=STDOUT)
    subparsers["metrics"] = p

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    subparsers["synth"] = p

    p = sub.add_parser("dump", help="export a fingerprint as CSV")
    p.add_argument("--fingerprint", required=True)
    p.add_argument("--format", default="csv")
    p.add_argument("--out", default=STDOUT)
    subparsers["dump"] = p

    p = sub.add_parser("verify", help="check a run manifest's hashes")
    p.add_argument("run_manifest")
    p.add_argument("--rerun", action="store_true")
    subparsers["verify"] = p
    return parser, subparsers


def _apply_options(parser, subparsers, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--options")
    known, rest = pre.parse_known_args(argv)
    if not known.options:
        return
    opts = json.loads(Path(known.options).read_text())
    if not isinstance(opts, dict):
        raise UsageError(f"{known.options}: options file must hold a JSON object")
    command = next((a for a in rest if a in subparsers), None)
    target = subparsers.get(command, parser)
    dests = {a.dest for a in target._actions}
    unknown = set(opts) - dests
    if unknown:
        raise UsageError(f"{known.options}: unknown options {sorted(unknown)}")
    target.set_defaults(**opts)
    for action in target._actions:
        if action.dest in opts:
            action.required = False


def _config_hash(args):
    volatile = {"verbose", "run_manifest", "threads"}
    items = {k: str(v) for k, v in sorted(vars(args).items()) if k not in volatile}
    return hashlib.sha256(json.dumps(items, sort_keys=True).encode()).hexdigest()


def _run_manifest_path(args, outputs):
    if args.run_manifest:
        return Path(args.run_manifest)
    out = getattr(args, "out", None)
    if out in (None, STDOUT):
        return None
    out = Path(out)
    if out.is_dir():
        return out / "run_manifest.json"
    return Path(str(out) + ".run.json")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        _apply_options(parser, subparsers, argv)
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"gmfpt: usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    except OSError as e:
        print(f"gmfpt: error: {e}", file=sys.stderr)
        return 3
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("gmfpt: usage error: --threads must be >= 1", file=sys.stderr)
            return 2
        os.environ["FPT_THREADS"] = str(args.threads)
    start = time.time()
    try:
        inputs, outputs = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"gmfpt: usage error: {e}", file=sys.stderr)
        return 2
    except FingerprintError as e:
        print(f"gmfpt: error: {e}", file=sys.stderr)
        return e.exit_code
    except BrokenPipeError:
        return 0
    except (OSError, json.JSONDecodeError) as e:
        code = 4 if isinstance(e, json.JSONDecodeError) else 3
        print(f"gmfpt: error: {e}", file=sys.stderr)
        return code
    except ValueError as e:
        print(f"gmfpt: error: {e}", file=sys.stderr)
        return 4
    except ArithmeticError as e:
        print(f"gmfpt: numerical error: {e}", file=sys.stderr)
        return 5
    path = _run_manifest_path(args, outputs)
    if path is not None and args.command != "verify":
        manifest = {
            "command": args.command,
            "argv": argv,
            "config_hash": _config_hash(args),
            "seed": getattr(args, "seed", None),
            "tool_version": __version__,
            "wall_clock_seconds": round(time.time() - start, 3),
            "inputs": {str(p): fpte.file_sha256(p) for p in inputs if Path(p).is_file()},
            "outputs": {str(p): fpte.file_sha256(p) for p in outputs if Path(p).is_file()},
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
