"""``qsenn`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes ``manifest.json`` into its ``--out`` directory with the
config hash, the seed and the sha256 of every input file it read.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .clipalign import AlignmentError, EmbeddingBundle, align
from .glmpath import ConvergenceError, fit_path, pick_least_regularized, select_features, standardize
from .metrics import attribute_alignment
from .quantizer import quantize_multilevel, quantize_ternary
from .synthgen import PlantedSpec, gen_embedding_bundle, gen_planted, gen_spurious
from .tensorstore import (
    DatasetError,
    RegPath,
    RunConfig,
    SparseHead,
    TensorFormatError,
    file_digest,
    load_dataset,
    read_config,
    read_labels,
    read_tensor,
    save_dataset,
    write_tensor,
)
from .trainer import DeskModel, TrainingError, evaluate_model, features, qsenn_fit, solver_settings

log = logging.getLogger("qsenn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

METRIC_COLUMNS = ("accuracy", "loc5_mean", "gamma", "alignment_r", "binary_fraction",
                  "binary_fraction_strict", "correlation_at_5")
POSITION_COLUMNS = ("pos_full", "pos_pred", "pos_pred_rel")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


class _Inputs:
    """Collects the digests of files a command reads."""

    def __init__(self):
        self.digests = {}

    def note(self, path):
        p = Path(path)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name == "manifest.json" and f.parent != p:
                continue
            self.digests[str(f)] = file_digest(f)
        return path


def _write_manifest(out: Path, command, config_text, seed, inputs: _Inputs, extra=None):
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "inputs": inputs.digests,
        "version": __version__,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args, inputs: _Inputs) -> RunConfig:
    values = read_config(inputs.note(args.config)) if args.config else {}
    try:
        cfg = RunConfig.from_mapping(values)
    except (TypeError, ValueError) as err:
        raise DataError(f"bad run config: {err}") from err
    overrides = {}
    for flag, key in (("seed", "seed"), ("n_q", "n_q"), ("iterations", "n_iterations"),
                      ("per_class_budget", "per_class_budget"), ("features", "n_f_selected")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_quantization", False):
        overrides["quantize"] = False
    if getattr(args, "no_iteration", False):
        overrides["n_iterations"] = 1
    try:
        return cfg.replace(**overrides)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _variant(args) -> str:
    if getattr(args, "no_quantization", False):
        return "no-quantization"
    if getattr(args, "no_iteration", False):
        return "no-iteration"
    return "full"


def _json_ready(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _load_split(data_dir, split, inputs: _Inputs):
    path = Path(data_dir) / split
    if not path.is_dir():
        raise DataError(f"{path}: no such dataset directory")
    inputs.note(path)
    return load_dataset(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    inputs = _Inputs()
    values = read_config(inputs.note(args.config)) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        spec = PlantedSpec.from_mapping(values)
    except (TypeError, ValueError) as err:
        raise DataError(f"bad data spec: {err}") from err
    train, test, truth = (gen_spurious if spec.spurious else gen_planted)(spec)
    out = _out_dir(args.out)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    (out / "spec.cfg").write_text(spec.to_text())
    gt_dir = _out_dir(out / "ground_truth")
    write_tensor(truth.w_star, gt_dir / "w_star.qstf")
    write_tensor(truth.concept_cell.astype(np.int64), gt_dir / "concept_cell.qstf")
    if truth.test_background is not None:
        write_tensor(truth.test_background.astype(np.int64), gt_dir / "test_background.qstf")
    bundle = gen_embedding_bundle(spec, train.attributes, sigma=args.embedding_noise)
    emb = _out_dir(out / "embeddings")
    write_tensor(bundle.image_embeddings, emb / "images.qstf")
    write_tensor(bundle.prompt_embeddings, emb / "prompts.qstf")
    with open(emb / "prompts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prompt", "type"])
        w.writerows(zip(bundle.prompts, bundle.prompt_types))
    _write_manifest(out, "synth", spec.to_text(), spec.seed, inputs, {"embedding_noise": args.embedding_noise})


def _features_and_labels(args, inputs: _Inputs):
    z = read_tensor(inputs.note(args.z))
    y = read_labels(inputs.note(args.labels))
    if z.ndim != 2 or len(z) != len(y):
        raise DataError(f"features {z.shape} do not match {len(y)} labels")
    n_classes = args.n_classes or int(y.max()) + 1
    return z, y, n_classes


def cmd_fit_path(args):
    inputs = _Inputs()
    cfg = _run_config(args, inputs)
    z, y, n_classes = _features_and_labels(args, inputs)
    Zs, mean, std, _ = standardize(z)
    path = fit_path(Zs, y, solver_settings(cfg), n_classes, mean, std)
    out = _out_dir(args.out)
    path.save(out)
    _write_manifest(out, "fit-path", cfg.to_text(), cfg.seed, inputs, {"entries": len(path)})


def cmd_select_features(args):
    inputs = _Inputs()
    cfg = _run_config(args, inputs)
    z, y, n_classes = _features_and_labels(args, inputs)
    Zs, _, _, _ = standardize(z)
    d_red = min(cfg.n_f_selected, z.shape[1])
    keep = select_features(Zs, y, d_red, solver_settings(cfg), n_classes, cfg.select_alpha,
                           cfg.select_lambda_divisor)
    out = _out_dir(args.out)
    write_tensor(np.asarray(keep, dtype=np.int64), out / "selected.qstf")
    (out / "selected.json").write_text(json.dumps({"selected": [int(j) for j in keep]}) + "\n")
    _write_manifest(out, "select-features", cfg.to_text(), cfg.seed, inputs)


def cmd_quantize(args):
    inputs = _Inputs()
    cfg = _run_config(args, inputs)
    if args.path:
        head = pick_least_regularized(RegPath.load(inputs.note(args.path)))
    else:
        head = SparseHead.load(inputs.note(args.head))
    n_w = args.n_w if args.n_w is not None else cfg.per_class_budget * head.n_classes
    if cfg.n_q == 2:
        q = quantize_ternary(head.W, n_w)
        result = head.replace(W=q.Wq, kind="ternary", alpha_q=q.alpha)
        extra = {"alpha": q.alpha, "epsilon": q.epsilon}
    else:
        q = quantize_multilevel(head.W, n_w, cfg.n_q)
        result = head.replace(W=q.Wq, kind="sparse")
        extra = {}
    out = _out_dir(args.out)
    result.save(out, "head")
    extra.update({"n_w": n_w, "nnz": int(np.count_nonzero(result.W)), "n_q": cfg.n_q})
    _write_manifest(out, "quantize", cfg.to_text(), cfg.seed, inputs, extra)


def cmd_train(args):
    inputs = _Inputs()
    cfg = _run_config(args, inputs)
    train = _load_split(args.data, "train", inputs)
    res = qsenn_fit(train, cfg)
    out = _out_dir(args.out)
    res.model.save(out / "model", "final", cfg.digest())
    (out / "config.cfg").write_text(cfg.to_text())
    with open(out / "training.jsonl", "w", encoding="utf-8") as fh:
        for rep in res.reports:
            fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
    summary = {"variant": _variant(args), "iteration_deltas": res.iteration_deltas,
               "final_delta": res.final_delta, "support_stability": res.support_stability,
               "selected_features": [int(j) for j in res.model.feature_ids]}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    _write_manifest(out, "train", cfg.to_text(), cfg.seed, inputs, {"variant": _variant(args)})


def _train_variant(model_dir: Path) -> str:
    summary = model_dir.parent / "summary.json"
    return json.loads(summary.read_text()).get("variant", "full") if summary.exists() else "full"


def cmd_eval(args):
    inputs = _Inputs()
    model_dir = Path(args.model)
    if not (model_dir / "manifest.json").exists():
        raise DataError(f"{model_dir}: not a model checkpoint")
    inputs.note(model_dir)
    model = DeskModel.load(model_dir)
    train = _load_split(args.data, "train", inputs)
    test = _load_split(args.data, "test", inputs)
    report = evaluate_model(model, train, test, args.k)
    out = _out_dir(args.out)
    row = {"dataset": Path(args.data).resolve().name, "variant": _train_variant(model_dir)}
    row.update(dataclasses.asdict(report))
    (out / "metrics.json").write_text(json.dumps(_denan(row), sort_keys=True) + "\n")
    sys.stdout.write(report.to_json() + "\n")
    _write_manifest(out, "eval", "", model.seed, inputs)


def _load_bundle(emb_dir: Path, inputs: _Inputs) -> EmbeddingBundle:
    needed = ("images.qstf", "prompts.qstf", "prompts.csv")
    if not all((emb_dir / f).exists() for f in needed):
        raise DataError(f"{emb_dir}: expected {', '.join(needed)}")
    inputs.note(emb_dir)
    with open(emb_dir / "prompts.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["prompt", "type"]:
        raise DataError(f"{emb_dir / 'prompts.csv'}: bad header")
    prompts = [r[0] for r in rows[1:]]
    types = [r[1] for r in rows[1:]]
    return EmbeddingBundle(read_tensor(emb_dir / "images.qstf"), read_tensor(emb_dir / "prompts.qstf"),
                           tuple(prompts), tuple(types))


def cmd_align(args):
    inputs = _Inputs()
    model_dir = Path(args.model)
    if not (model_dir / "manifest.json").exists():
        raise DataError(f"{model_dir}: not a model checkpoint")
    inputs.note(model_dir)
    model = DeskModel.load(model_dir)
    train = _load_split(args.data, "train", inputs)
    emb_dir = Path(args.embeddings) if args.embeddings else Path(args.data) / "embeddings"
    bundle = _load_bundle(emb_dir, inputs)
    z = features(model, train.inputs)
    if bundle.image_embeddings.shape[0] != len(z):
        raise DataError(f"{bundle.image_embeddings.shape[0]} image embeddings for {len(z)} samples")
    a_gt = attribute_alignment(z, train.attributes) if train.attributes is not None else None
    report = align(z, bundle, a_gt, seed=args.seed if args.seed is not None else model.seed)
    out = _out_dir(args.out)
    doc = json.loads(report.to_json())
    doc["dataset"] = Path(args.data).resolve().name
    doc["variant"] = _train_variant(model_dir)
    (out / "alignment.json").write_text(json.dumps(_denan(doc), sort_keys=True) + "\n")
    write_tensor(report.a_clip, out / "a_clip.qstf")
    _write_manifest(out, "align", "", model.seed, inputs)


def _denan(x):
    if isinstance(x, dict):
        return {k: _denan(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_denan(v) for v in x]
    return _json_ready(x)


def cmd_report(args):
    inputs = _Inputs()
    run = Path(args.run)
    if not run.is_dir():
        raise DataError(f"{run}: no such run directory")
    metric_files = sorted(run.rglob("metrics.json"))
    align_files = sorted(run.rglob("alignment.json"))
    if not metric_files and not align_files:
        raise DataError(f"{run}: no metrics.json or alignment.json found")
    metric_rows = []
    for f in metric_files:
        inputs.note(f)
        rec = json.loads(f.read_text())
        metric_rows.append({"dataset": rec.get("dataset", ""), "variant": rec.get("variant", ""),
                            **{c: rec.get(c) for c in METRIC_COLUMNS}})
    align_rows = []
    for f in align_files:
        inputs.note(f)
        rec = json.loads(f.read_text())
        for method in ("random", "static", "proposed"):
            align_rows.append({"dataset": rec.get("dataset", ""), "variant": rec.get("variant", ""),
                               "method": method, **{c: rec[method].get(c) for c in POSITION_COLUMNS}})
    out = _out_dir(args.out or run)
    with open(out / "report.jsonl", "w", encoding="utf-8") as fh:
        for row in metric_rows:
            fh.write(json.dumps({"table": "metrics", **row}, sort_keys=True) + "\n")
        for row in align_rows:
            fh.write(json.dumps({"table": "alignment", **row}, sort_keys=True) + "\n")
    _write_table(out / "metrics.csv", ("dataset", "variant") + METRIC_COLUMNS, metric_rows)
    _write_table(out / "alignment.csv", ("dataset", "variant", "method") + POSITION_COLUMNS, align_rows)
    _write_manifest(out, "report", "", None, inputs, {"metric_rows": len(metric_rows),
                                                      "alignment_rows": len(align_rows)})


def _write_table(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: "" if row.get(c) is None else row[c] for c in columns})


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qsenn", description="Sparse ternary interpretable heads on desk-scale data.")
    p.add_argument("--version", action="version", version=f"qsenn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the seed in --config")
        if config:
            sp.add_argument("--config", help="key = value config file")

    def hyper(sp):
        sp.add_argument("--n-q", type=int, dest="n_q", help="quantization levels (2 = ternary)")
        sp.add_argument("--per-class-budget", type=int, dest="per_class_budget")
        sp.add_argument("--features", type=int, help="number of features kept after selection")

    sp = sub.add_parser("synth", help="generate planted data, ground truth and embeddings")
    common(sp)
    sp.add_argument("--embedding-noise", type=float, default=0.0, dest="embedding_noise")
    sp.set_defaults(func=cmd_synth)

    for name, func, help_ in (("fit-path", cmd_fit_path, "elastic-net regularization path on features"),
                              ("select-features", cmd_select_features, "pick the most used features")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        hyper(sp)
        sp.add_argument("--z", required=True, help="features tensor (n x d)")
        sp.add_argument("--labels", required=True, help="labels.csv")
        sp.add_argument("--n-classes", type=int, dest="n_classes")
        sp.set_defaults(func=func)

    sp = sub.add_parser("quantize", help="quantize a head to n_w nonzero weights")
    common(sp)
    hyper(sp)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--path", help="regularization path directory (least regularized entry is used)")
    src.add_argument("--head", help="head directory")
    sp.add_argument("--n-w", type=int, dest="n_w", help="number of nonzero weights to keep")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("train", help="run the full pipeline")
    common(sp)
    hyper(sp)
    sp.add_argument("--data", required=True, help="directory with train/ (and test/)")
    sp.add_argument("--iterations", type=int)
    ablation = sp.add_mutually_exclusive_group()
    ablation.add_argument("--no-quantization", action="store_true", dest="no_quantization")
    ablation.add_argument("--no-iteration", action="store_true", dest="no_iteration")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics report for a trained model")
    common(sp, config=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True, help="model checkpoint directory")
    sp.add_argument("--k", type=int, default=5)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("align", help="align features with text prompts")
    common(sp, config=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--embeddings", help="defaults to <data>/embeddings")
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("report", help="collect metrics and alignment into tables")
    sp.add_argument("--run", required=True, help="directory searched for metrics.json / alignment.json")
    sp.add_argument("--out", help="defaults to --run")
    sp.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help / --version
        return EXIT_OK if not err.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as err:
        print(f"qsenn: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, TrainingError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"qsenn: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DatasetError, TensorFormatError, AlignmentError, FileNotFoundError,
            json.JSONDecodeError, KeyError, ValueError) as err:
        print(f"qsenn: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())
