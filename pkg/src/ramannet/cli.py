"""``ramannet`` command line: preprocess | train | eval | embed.

Failures exit with status 1 and a single stderr line
``ramannet: error[<ErrorClass>]: <message>``; usage errors exit with 2.
"""

from __future__ import annotations

import csv
import datetime as _dt
import functools
import hashlib
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .data import (
    KFOLD,
    PRETRAIN_FINETUNE,
    REPEATED_HOLDOUT,
    LabeledDataset,
    SplitPlan,
    dataset_from_records,
    filter_min_class_size,
    filter_records,
    load_spectra_csv,
    write_matrix_csv,
)
from .errors import EmptyDatasetError, LabelError, RamanNetError, ShapeError
from .metrics import confusion, write_confusion_csv
from .model import ModelConfig, load_checkpoint
from .preprocess import align_spectra
from .train import DEFAULT_EPOCHS, DEFAULT_FINETUNE_EPOCHS, TrainConfig, evaluate, run_protocol

log = logging.getLogger("ramannet")

PROTOCOLS = {"holdout-repeat": REPEATED_HOLDOUT, "kfold": KFOLD, "pretrain-finetune": PRETRAIN_FINETUNE}


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (RamanNetError, OSError, json.JSONDecodeError) as exc:
            click.echo(f"ramannet: error[{type(exc).__name__}]: {_one_line(exc)}", err=True)
            raise click.exceptions.Exit(1) from None

    return wrapper


def _csv_list(value, cast=str):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [cast(v) for v in value]
    return [cast(v.strip()) for v in str(value).split(",") if v.strip()]


def _meta_pairs(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--meta")
        k, v = item.split("=", 1)
        out[k.strip().removeprefix("meta_")] = v.strip()
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@click.group()
@click.version_option(__version__, prog_name="ramannet")
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose):
    """RamanNet spectra classification."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# ----------------------------------------------------------------------------
# preprocess


@main.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False), help="Aligned matrix-form CSV.")
@click.option("--report", type=click.Path(dir_okay=False), help="Preprocessing report (JSON).")
@click.option("--num-points", type=click.IntRange(min=2), help="Grid size; default: sparsest spectrum's sample count.")
@click.option("--min-shift", type=float, help="Grid start (within the common range).")
@click.option("--max-shift", type=float, help="Grid end (within the common range).")
@click.option("--min-class-size", type=click.IntRange(min=1), help="Drop classes with fewer spectra.")
@click.option("--meta", multiple=True, metavar="KEY=VALUE", help="Keep spectra whose meta_KEY equals VALUE.")
@click.option("--classes", help="Comma-separated class names to keep.")
@handle_errors
def preprocess(inputs, output, report, num_points, min_shift, max_shift, min_class_size, meta, classes):
    """Crop, spline-resample and min-max normalize raw spectra onto one grid."""
    records = []
    for path in inputs:
        records += load_spectra_csv(path)
    records = filter_records(records, meta=_meta_pairs(meta), classes=_csv_list(classes))
    if not records:
        raise EmptyDatasetError("no spectra left after filtering")
    matrix, rep = align_spectra([r.spectrum for r in records], num_points, min_shift, max_shift)
    names = sorted({r.label for r in records})
    index = {n: i for i, n in enumerate(names)}
    ds = LabeledDataset(matrix, [index[r.label] for r in records], names, rep.grid.points())
    if min_class_size:
        ds = filter_min_class_size(ds, min_class_size)

    write_matrix_csv(output, ds.shifts, ds.features, [ds.class_names[i] for i in ds.labels])
    summary = rep.to_dict()
    summary.update({
        "inputs": {str(p): _sha256(p) for p in inputs},
        "num_spectra": len(ds),
        "classes": {n: int(c) for n, c in zip(ds.class_names, ds.class_counts())},
        "dropped_classes": ds.dropped_classes,
        "min_class_size": min_class_size,
    })
    _write_json(report or f"{output}.report.json", summary)
    click.echo(
        f"wrote {len(ds)} spectra x {ds.input_len} points, {ds.num_classes} classes, "
        f"range [{rep.grid.min_shift:g}, {rep.grid.max_shift:g}] -> {output}"
    )
    if ds.dropped_classes:
        click.echo(f"dropped {len(ds.dropped_classes)} classes below {min_class_size} spectra")
    if rep.degenerate:
        click.echo(f"warning: {len(rep.degenerate)} constant spectra normalized to zeros", err=True)


# ----------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {
    "protocol": "kfold",
    "repeats": 50,
    "test_fraction": 0.3,
    "folds": 5,
    "val_fraction": 0.1,
    "finetune_val_fraction": 0.1,
    "epochs": None,  # per protocol
    "finetune_epochs": DEFAULT_FINETUNE_EPOCHS,
    "batch_size": 64,
    "lr": 1e-3,
    "seed": 0,
    "margin": 1.0,
    "ce_weight": 1.0,
    "triplet_weight": 1.0,
    "triplet_strategy": "batch_hard",
    "patience": None,
    "selection": "best",
    "freeze_bn_finetune": False,
    "unstratified": False,
    "window": 50,
    "step": 25,
    "block_units": 25,
    "summary_units": 512,
    "embed_units": 256,
    "dropout1": 0.5,
    "dropout2": 0.4,
    "dropout3": 0.25,
    "leaky_slope": 0.3,
    "classes": None,
    "positive_class": None,
    "top_k": None,
    "jobs": 1,
    "dtype": "float32",
    "finetune_data": None,
    "test_data": None,
}


def _resolve(ctx: click.Context, cli_values: dict, config_path) -> dict:
    """CLI flags over config-file values over built-in defaults."""
    file_values = {}
    if config_path:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise click.UsageError(f"config file {config_path} must hold a JSON object")
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in TRAIN_DEFAULTS:
                raise click.UsageError(f"unknown key {k!r} in config file {config_path}")
            file_values[key] = v
    resolved, explicit = {}, set()
    for key, default in TRAIN_DEFAULTS.items():
        src = ctx.get_parameter_source(key)
        if src is click.core.ParameterSource.COMMANDLINE and cli_values.get(key) is not None:
            resolved[key] = cli_values[key]
            explicit.add(key)
        elif key in file_values:
            resolved[key] = file_values[key]
            explicit.add(key)
        else:
            resolved[key] = default
    return resolved, explicit


def _check_conflicts(r: dict, explicit: set) -> None:
    proto = r["protocol"]
    if proto not in PROTOCOLS:
        raise click.UsageError(f"--protocol must be one of {sorted(PROTOCOLS)}, got {proto!r}")
    if proto != "holdout-repeat":
        bad = sorted(explicit & {"repeats", "test_fraction"})
        if bad:
            raise click.UsageError(f"{', '.join('--' + b.replace('_', '-') for b in bad)} only apply to holdout-repeat")
    if proto == "holdout-repeat" and "folds" in explicit:
        raise click.UsageError("--folds does not apply to holdout-repeat")
    ft_flags = {"finetune_data", "test_data", "finetune_epochs", "finetune_val_fraction", "freeze_bn_finetune"}
    if proto != "pretrain-finetune":
        bad = sorted(explicit & ft_flags)
        if bad:
            raise click.UsageError(f"{', '.join('--' + b.replace('_', '-') for b in bad)} only apply to pretrain-finetune")
    elif not (r["finetune_data"] and r["test_data"]):
        raise click.UsageError("pretrain-finetune needs --finetune-data and --test-data")


def _load_labeled(path, classes, class_names=None, meta=None) -> LabeledDataset:
    records = filter_records(load_spectra_csv(path), meta=meta, classes=classes)
    if not records:
        raise EmptyDatasetError(f"{path}: no spectra left after filtering")
    if class_names is None and classes:
        class_names = classes
    return dataset_from_records(records, class_names)


def _positive_index(name, class_names) -> int | None:
    if len(class_names) != 2:
        return None
    if name is None:
        return 1
    if name not in class_names:
        raise LabelError(f"positive class {name!r} not in {list(class_names)}")
    return list(class_names).index(name)


@main.command()
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON config mirroring the flags.")
@click.option("--protocol", type=click.Choice(sorted(PROTOCOLS)))
@click.option("--repeats", type=click.IntRange(min=1), help="holdout-repeat: number of random splits [50].")
@click.option("--test-fraction", type=click.FloatRange(0, 1, min_open=True, max_open=True), help="holdout-repeat test share [0.3].")
@click.option("--folds", type=click.IntRange(min=2), help="kfold / pretrain-finetune fold count [5].")
@click.option("--val-fraction", type=click.FloatRange(0, 1, max_open=True), help="Share of training rows held for validation [0.1].")
@click.option("--finetune-data", type=click.Path(exists=True, dir_okay=False))
@click.option("--test-data", type=click.Path(exists=True, dir_okay=False))
@click.option("--finetune-val-fraction", type=click.FloatRange(0, 1, min_open=True, max_open=True))
@click.option("--epochs", type=click.IntRange(min=1), help="Epochs [1000; 100 for pretraining].")
@click.option("--finetune-epochs", type=click.IntRange(min=1), help="Fine-tune epochs [250].")
@click.option("--batch-size", type=click.IntRange(min=2))
@click.option("--lr", type=float, help="Adam learning rate [1e-3].")
@click.option("--seed", type=int, help="Master seed for splits, init, shuffling and dropout [0].")
@click.option("--margin", type=click.FloatRange(min=0), help="Triplet margin [1.0].")
@click.option("--ce-weight", type=click.FloatRange(min=0))
@click.option("--triplet-weight", type=click.FloatRange(min=0))
@click.option("--triplet-strategy", type=click.Choice(["batch_hard", "random"]))
@click.option("--patience", type=click.IntRange(min=1), help="Stop after this many epochs without validation gain.")
@click.option("--selection", type=click.Choice(["best", "final"]), help="Keep best-validation or last-epoch weights.")
@click.option("--freeze-bn-finetune", is_flag=True, default=None, help="Freeze batchnorm statistics while fine-tuning.")
@click.option("--unstratified", is_flag=True, default=None, help="Plain random splits.")
@click.option("--window", type=click.IntRange(min=1), help="Window length w [50].")
@click.option("--step", type=click.IntRange(min=1), help="Window step dw [25].")
@click.option("--block-units", type=click.IntRange(min=1), help="n1 [25].")
@click.option("--summary-units", type=click.IntRange(min=1), help="n2 [512].")
@click.option("--embed-units", type=click.IntRange(min=1), help="nf [256].")
@click.option("--dropout1", type=click.FloatRange(0, 1, max_open=True))
@click.option("--dropout2", type=click.FloatRange(0, 1, max_open=True))
@click.option("--dropout3", type=click.FloatRange(0, 1, max_open=True))
@click.option("--leaky-slope", type=click.FloatRange(0, 1, max_open=True))
@click.option("--classes", help="Comma-separated classes to use, in label order.")
@click.option("--positive-class", help="Positive class name for sensitivity/specificity (2 classes).")
@click.option("--top-k", help="Comma-separated k values for top-k accuracy.")
@click.option("--jobs", type=click.IntRange(min=1), help="Splits trained in parallel.")
@click.option("--dtype", type=click.Choice(["float32", "float64"]))
@click.pass_context
@handle_errors
def train(ctx, data, out_dir, config_path, **cli_values):
    """Run an evaluation protocol and write checkpoints, run records and a report."""
    r, explicit = _resolve(ctx, cli_values, config_path)
    _check_conflicts(r, explicit)
    variant = PROTOCOLS[r["protocol"]]
    epochs = r["epochs"] or DEFAULT_EPOCHS[variant]
    classes = _csv_list(r["classes"])
    ks = _csv_list(r["top_k"], int) or []

    ds = _load_labeled(data, classes)
    finetune = test = None
    if variant == PRETRAIN_FINETUNE:
        finetune = _load_labeled(r["finetune_data"], classes, ds.class_names)
        test = _load_labeled(r["test_data"], classes, ds.class_names)

    model_cfg = ModelConfig(
        input_len=ds.input_len, num_classes=ds.num_classes, window_len=r["window"], window_step=r["step"],
        block_units=r["block_units"], summary_units=r["summary_units"], embed_units=r["embed_units"],
        dropout1=r["dropout1"], dropout2=r["dropout2"], dropout3=r["dropout3"], leaky_slope=r["leaky_slope"],
    )
    train_cfg = TrainConfig(
        epochs=epochs, batch_size=r["batch_size"], learning_rate=r["lr"], margin=r["margin"],
        ce_weight=r["ce_weight"], triplet_weight=r["triplet_weight"], triplet_strategy=r["triplet_strategy"],
        patience=r["patience"], selection=r["selection"], seed=r["seed"], finetune_epochs=r["finetune_epochs"],
        freeze_batchnorm_on_finetune=bool(r["freeze_bn_finetune"]), dtype=r["dtype"],
    )
    plan = SplitPlan(
        variant, repeats=r["repeats"], test_fraction=r["test_fraction"], folds=r["folds"],
        validation_fraction=r["val_fraction"], finetune_validation_fraction=r["finetune_val_fraction"],
        seed=r["seed"], stratified=not r["unstratified"],
    )
    positive = _positive_index(r["positive_class"], ds.class_names)

    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    inputs = [data] + [p for p in (r["finetune_data"], r["test_data"]) if p]
    _write_json(out / "manifest.json", {
        "command": "train",
        "tool_version": __version__,
        "argv": sys.argv[1:],
        "resolved": dict(r, epochs=epochs),
        "model_config": model_cfg.to_dict(),
        "master_seed": r["seed"],
        "inputs": {str(p): _sha256(p) for p in inputs},
        "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    })

    click.echo(
        f"windows: {model_cfg.num_windows} (w={model_cfg.window_len}, dw={model_cfg.window_step}); "
        f"trailing samples dropped: {model_cfg.dropped_tail}"
    )
    report = run_protocol(ds, plan, model_cfg, train_cfg, finetune=finetune, test=test, checkpoint_dir=ckpt_dir,
                          jobs=r["jobs"], positive_class=positive, ks=ks, epochs=epochs)
    click.echo(f"parameters: {report.parameter_count}")

    with (out / "records.jsonl").open("w", encoding="utf-8") as fh:
        for rec in report.records:
            if rec.checkpoint:
                rec.checkpoint = str(Path("checkpoints") / rec.checkpoint)
            fh.write(rec.to_json() + "\n")
    summary = report.to_dict()
    summary.update({"class_names": list(ds.class_names), "num_windows": model_cfg.num_windows,
                    "trailing_samples_dropped": model_cfg.dropped_tail})
    _write_json(out / "report.json", summary)

    for ev in report.test_evaluations:
        tag = f"split {ev['split_id']}" if "split_id" in ev else f"selected fold {ev['selected_fold']}"
        click.echo(f"{tag}: accuracy {ev['accuracy']:.4f}")
    for name, agg in report.aggregate.items():
        if agg["mean"] is not None:
            click.echo(f"{name}: {100 * agg['mean']:.2f} +/- {100 * agg['std']:.2f} (n={agg['n']})")
    for f in report.failures:
        click.echo(f"split {f['split_id']} failed: {f['error']}", err=True)
    if report.failures and not report.test_evaluations:
        raise click.exceptions.Exit(1)


# ----------------------------------------------------------------------------
# eval / embed


def _data_for_model(path, model):
    """Features and labels of ``path`` indexed by the checkpoint's class table."""
    records = load_spectra_csv(path)
    if not records:
        raise EmptyDatasetError(f"{path}: no spectra")
    class_names = model.metadata.get("class_names")
    present = sorted({r.label for r in records})
    if class_names is None:
        class_names = present
    if len(class_names) != model.config.num_classes:
        raise ShapeError(
            f"checkpoint has {model.config.num_classes} classes but data defines {len(class_names)}"
        )
    index = {n: i for i, n in enumerate(class_names)}
    unknown = [n for n in present if n not in index]
    if unknown:
        raise LabelError(f"{path}: labels {unknown} are unknown to the checkpoint (classes {list(class_names)})")
    x = np.vstack([r.spectrum.intensities for r in records])
    if x.shape[1] != model.config.input_len:
        raise ShapeError(
            f"{path}: spectra have {x.shape[1]} points but the checkpoint expects input_len={model.config.input_len}"
        )
    y = np.array([index[r.label] for r in records])
    return x, y, list(class_names), [r.label for r in records]


@main.command("eval")
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--top-k", help="Comma-separated k values.")
@click.option("--positive-class", help="Positive class name (2-class data).")
@click.option("--confusion-csv", default="confusion.csv", show_default=True, type=click.Path(dir_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Print the metrics as JSON.")
@handle_errors
def eval_cmd(data, checkpoint, top_k, positive_class, confusion_csv, as_json):
    """Evaluate a checkpoint on a preprocessed dataset."""
    model = load_checkpoint(checkpoint)
    x, y, class_names, _ = _data_for_model(data, model)
    ks = _csv_list(top_k, int) or []
    for k in ks:
        if not 1 <= k <= len(class_names):
            raise click.BadParameter(f"k={k} outside [1, {len(class_names)}]", param_hint="--top-k")
    metrics = evaluate(model, x, y, _positive_index(positive_class, class_names), ks)
    cm = confusion(y, model.predict_logits(x).argmax(axis=1), len(class_names))
    write_confusion_csv(cm, class_names, confusion_csv)
    if as_json:
        click.echo(json.dumps(metrics, sort_keys=True))
        return
    click.echo(f"samples: {metrics['n']}")
    click.echo(f"accuracy: {metrics['accuracy']:.4f}")
    for key in ("sensitivity", "specificity"):
        if key in metrics:
            v = metrics[key]
            click.echo(f"{key}: {'undefined' if v is None else f'{v:.4f}'}")
    for k, v in metrics.get("top_k", {}).items():
        click.echo(f"top-{k} accuracy: {v:.4f}")
    click.echo(f"confusion matrix -> {confusion_csv}")


@main.command()
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
@handle_errors
def embed(data, checkpoint, output):
    """Write infer-mode embedding-layer activations, one row per spectrum."""
    model = load_checkpoint(checkpoint)
    x, _, _, labels = _data_for_model(data, model)
    emb = model.embed(x)
    with Path(output).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"e{i}" for i in range(emb.shape[1])])
        for lab, row in zip(labels, emb):
            w.writerow([lab] + [repr(float(v)) for v in row])
    click.echo(f"wrote {emb.shape[0]} x {emb.shape[1]} embeddings -> {output}")


if __name__ == "__main__":
    main()
