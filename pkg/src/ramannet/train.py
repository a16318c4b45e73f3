"""Training loop and the evaluation protocols (repeated hold-out, k-fold, pretrain/fine-tune)."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import (
    KFOLD,
    PRETRAIN_FINETUNE,
    REPEATED_HOLDOUT,
    LabeledDataset,
    SplitPlan,
    make_finetune_split,
    make_splits,
    sample_triplets,
)
from .errors import ConfigError, RamanNetError, ShapeError, TrainingDivergedError
from .metrics import binary_metrics, confusion, topk_accuracy
from .model import ModelConfig, RamanNet, count_parameters, save_checkpoint

log = logging.getLogger(__name__)

# epochs used when none are given explicitly
DEFAULT_EPOCHS = {REPEATED_HOLDOUT: 1000, KFOLD: 1000, PRETRAIN_FINETUNE: 100}
DEFAULT_FINETUNE_EPOCHS = 250


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    margin: float = 1.0
    ce_weight: float = 1.0
    triplet_weight: float = 1.0
    triplet_strategy: str = "batch_hard"
    patience: int | None = None
    selection: str = "best"  # "best": restore best-validation weights; "final": keep last epoch
    seed: int = 0
    finetune_epochs: int = DEFAULT_FINETUNE_EPOCHS
    freeze_batchnorm_on_finetune: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.finetune_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batchnorm needs two rows)")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.ce_weight < 0 or self.triplet_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.selection not in ("best", "final"):
            raise ConfigError(f"selection must be 'best' or 'final', got {self.selection!r}")
        if self.triplet_strategy not in ("batch_hard", "random"):
            raise ConfigError(f"unknown triplet strategy {self.triplet_strategy!r}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 or None")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


@dataclass
class RunRecord:
    split_id: int
    seed: int
    phase: str = "train"
    epochs_run: int = 0
    best_epoch: int | None = None
    val_accuracy: float | None = None
    curve: list = field(default_factory=list)
    test_metrics: dict | None = None
    checkpoint: str | None = None
    wall_time_s: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _xy(data):
    if data is None:
        return None
    if isinstance(data, LabeledDataset):
        return data.features, data.labels
    x, y = data
    return np.asarray(x), np.asarray(y)


def _minibatches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        # a single leftover row cannot be batch-normalized
        out[-2] = np.concatenate(out[-2:])
        out.pop()
    return out


def _val_scores(model: RamanNet, x, y):
    logits = model.predict_logits(x)
    loss, _ = nx.softmax_cross_entropy(logits.astype(np.float64), y)
    return loss, float((logits.argmax(axis=1) == y).mean())


def train_one(model: RamanNet, train_data, val_data, cfg: TrainConfig, rng=None, epochs: int | None = None,
              freeze_bn: bool = False, split_id: int = 0, seed: int | None = None):
    """Fit ``model`` in place and return ``(model, RunRecord)``.

    Each epoch shuffles the training rows, then per minibatch: train-mode
    forward, triplet mining on the embeddings, combined loss, backward and an
    Adam step.  With validation data and ``cfg.selection == "best"`` the
    weights from the best validation-accuracy epoch are restored at the end;
    ties in accuracy go to the lower validation loss.
    """
    epochs = cfg.epochs if epochs is None else epochs
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if rng is None or isinstance(rng, (int, np.integer)):
        seed = cfg.seed if rng is None else int(rng)
        rng = np.random.default_rng(seed)
    x, y = _xy(train_data)
    val = _xy(val_data)
    if val is not None and len(val[1]) == 0:
        val = None
    if x.ndim != 2 or x.shape[1] != model.config.input_len:
        raise ShapeError(f"training data length {x.shape[-1]} != model input_len {model.config.input_len}")
    if len(y) < 2:
        raise ConfigError("need at least 2 training samples")
    if val is not None and val[0].shape[1] != model.config.input_len:
        raise ShapeError("validation data length does not match the model")

    x = x.astype(model.dtype, copy=False)
    opt = nx.AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon)
    params = model.params()
    record = RunRecord(split_id=split_id, seed=-1 if seed is None else int(seed))
    best_key, best_state, since_best = None, None, 0
    t0 = time.perf_counter()

    for epoch in range(epochs):
        loss_sum, correct, seen = 0.0, 0, 0
        for b, idx in enumerate(_minibatches(len(y), cfg.batch_size, rng)):
            xb, yb = x[idx], y[idx]
            logits, emb = model.forward(xb, nx.TRAIN, rng, freeze_bn=freeze_bn)
            triplets = None
            if cfg.triplet_weight > 0:
                triplets = sample_triplets(yb, rng, cfg.triplet_strategy, emb)
            losses, grads = model.backward(yb, triplets, cfg.ce_weight, cfg.triplet_weight, cfg.margin)
            if not np.isfinite(losses["total"]):
                raise TrainingDivergedError(epoch, b, losses)
            nx.adam_step(opt, params, grads)
            loss_sum += losses["total"] * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += len(idx)

        point = {"epoch": epoch + 1, "train_loss": loss_sum / seen, "train_accuracy": correct / seen,
                 "val_loss": None, "val_accuracy": None}
        stop = False
        if val is not None:
            vloss, vacc = _val_scores(model, *val)
            point["val_loss"], point["val_accuracy"] = vloss, vacc
            # accuracy first; equal accuracy counts as progress only with lower loss
            key = (vacc, -vloss)
            if best_key is None or key > best_key:
                best_key, since_best = key, 0
                record.best_epoch = epoch + 1
                if cfg.selection == "best":
                    best_state = model.state_copy()
            else:
                since_best += 1
                stop = cfg.patience is not None and since_best >= cfg.patience
        record.curve.append(point)
        if stop:
            log.debug("early stop at epoch %d (best %s)", epoch + 1, record.best_epoch)
            break

    record.epochs_run = len(record.curve)
    if best_state is not None:
        model.load_state(best_state)
    if val is not None:
        record.val_accuracy = _val_scores(model, *val)[1]
    record.wall_time_s = time.perf_counter() - t0
    return model, record


def evaluate(model: RamanNet, features, labels, positive_class: int | None = 1, ks=()) -> dict:
    """Infer-mode metrics on a labeled set."""
    labels = np.asarray(labels)
    logits = model.predict_logits(np.asanyarray(features))
    c = model.config.num_classes
    cm = confusion(labels, logits.argmax(axis=1), c)
    out = {"n": int(len(labels)), "accuracy": cm.accuracy(), "confusion": cm.counts.tolist()}
    if c == 2 and positive_class is not None:
        bm = binary_metrics(cm, positive_class)
        out["sensitivity"], out["specificity"] = bm.sensitivity, bm.specificity
    ks = [k for k in ks if k <= c]
    if ks:
        out["top_k"] = {str(k): v for k, v in topk_accuracy(logits, labels, ks).items()}
    return out


def scalar_metrics(metrics: dict) -> dict:
    """Flatten the scalar entries of an :func:`evaluate` result."""
    out = {k: metrics[k] for k in ("accuracy", "sensitivity", "specificity") if k in metrics}
    for k, v in metrics.get("top_k", {}).items():
        out[f"top_{k}"] = v
    return out


def aggregate(metric_dicts: list[dict]) -> dict:
    """Mean and population std per metric over the defined values."""
    keys = sorted({k for m in metric_dicts for k in m})
    out = {}
    for k in keys:
        vals = [m[k] for m in metric_dicts if m.get(k) is not None]
        out[k] = {
            "mean": float(np.mean(vals)) if vals else None,
            "std": float(np.std(vals)) if vals else None,
            "n": len(vals),
            "undefined": sum(1 for m in metric_dicts if m.get(k) is None),
        }
    return out


@dataclass
class ProtocolReport:
    variant: str
    records: list
    test_evaluations: list
    aggregate: dict
    failures: list = field(default_factory=list)
    parameter_count: int = 0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "parameter_count": self.parameter_count,
            "aggregate": self.aggregate,
            "test_evaluations": self.test_evaluations,
            "failures": self.failures,
        }


def _save(model, directory, name, metadata):
    if directory is None:
        return None
    model.metadata = dict(metadata)
    save_checkpoint(model, Path(directory) / name)
    return name


def _split_job(job: dict):
    """Train on one split, then (and only then) read its test rows."""
    ds, split, seed = job["dataset"], job["split"], job["seed"]
    cfg: TrainConfig = job["train_cfg"]
    model = RamanNet(job["model_cfg"], rng=np.random.default_rng([seed, 0]), dtype=cfg.dtype)
    rng = np.random.default_rng([seed, 1])
    train = (ds.features[split.train], ds.labels[split.train])
    val = (ds.features[split.val], ds.labels[split.val]) if len(split.val) else None
    model, rec = train_one(model, train, val, cfg, rng, epochs=job["epochs"], split_id=job["split_id"], seed=seed)
    rec.phase = job["phase"]
    rec.checkpoint = _save(model, job["checkpoint_dir"], f"split_{job['split_id']:03d}.ckpt", job["metadata"])
    test_x, test_y = ds.features[split.test], ds.labels[split.test]
    rec.test_metrics = evaluate(model, test_x, test_y, job["positive_class"], job["ks"])
    return rec


def _pretrain_finetune_job(job: dict):
    ref, split, seed = job["dataset"], job["split"], job["seed"]
    ft, ft_split = job["finetune"], job["finetune_split"]
    cfg: TrainConfig = job["train_cfg"]
    fold = job["split_id"]
    model = RamanNet(job["model_cfg"], rng=np.random.default_rng([seed, 0]), dtype=cfg.dtype)
    rng = np.random.default_rng([seed, 1])
    model, pre = train_one(
        model, (ref.features[split.train], ref.labels[split.train]),
        (ref.features[split.val], ref.labels[split.val]), cfg, rng, epochs=job["epochs"], split_id=fold, seed=seed,
    )
    pre.phase = "pretrain"
    pre.checkpoint = _save(model, job["checkpoint_dir"], f"fold_{fold:02d}_pretrain.ckpt", job["metadata"])
    model, fin = train_one(
        model, (ft.features[ft_split.train], ft.labels[ft_split.train]),
        (ft.features[ft_split.val], ft.labels[ft_split.val]), cfg, rng, epochs=cfg.finetune_epochs,
        freeze_bn=cfg.freeze_batchnorm_on_finetune, split_id=fold, seed=seed,
    )
    fin.phase = "finetune"
    fin.checkpoint = _save(model, job["checkpoint_dir"], f"fold_{fold:02d}_finetune.ckpt", job["metadata"])
    return pre, fin, model


def _run_jobs(fn, jobs: list, n_workers: int):
    """Run ``fn`` over ``jobs``; failures come back as the exception object."""
    if n_workers <= 1 or len(jobs) <= 1:
        out = []
        for job in jobs:
            try:
                out.append(fn(job))
            except (RamanNetError, FloatingPointError, ValueError) as exc:
                out.append(exc)
        return out
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(fn, job) for job in jobs]
        out = []
        for f in futures:
            try:
                out.append(f.result())
            except (RamanNetError, FloatingPointError, ValueError) as exc:
                out.append(exc)
        return out


def _check_compatible(ref: LabeledDataset, other: LabeledDataset, what: str):
    if other.input_len != ref.input_len:
        raise ShapeError(f"{what} spectra have length {other.input_len}, reference has {ref.input_len}")
    if tuple(other.class_names) != tuple(ref.class_names):
        raise ConfigError(f"{what} classes {list(other.class_names)} differ from reference {list(ref.class_names)}")


def run_protocol(dataset: LabeledDataset, plan: SplitPlan, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 finetune: LabeledDataset | None = None, test: LabeledDataset | None = None,
                 checkpoint_dir=None, jobs: int = 1, positive_class: int | None = 1, ks=(),
                 epochs: int | None = None) -> ProtocolReport:
    """Execute every split of ``plan`` and aggregate the test metrics.

    Split failures are recorded with their split id and the remaining splits
    still run.  For ``pretrain_finetune`` the fine-tuned fold model with the
    best fine-tune validation accuracy is evaluated once on ``test``.
    """
    if model_cfg.input_len != dataset.input_len:
        raise ShapeError(f"model input_len {model_cfg.input_len} != data length {dataset.input_len}")
    if model_cfg.num_classes != dataset.num_classes:
        raise ConfigError(f"model has {model_cfg.num_classes} classes, data has {dataset.num_classes}")
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    if epochs is None:
        epochs = train_cfg.epochs
    metadata = {"class_names": list(dataset.class_names),
                "axis": [float(dataset.shifts[0]), float(dataset.shifts[-1]), int(dataset.input_len)]}
    splits = make_splits(dataset, plan)
    seeds = [int(s) for s in np.random.SeedSequence(train_cfg.seed).generate_state(len(splits))]
    base = dict(dataset=dataset, model_cfg=model_cfg, train_cfg=train_cfg, epochs=epochs,
                checkpoint_dir=None if checkpoint_dir is None else str(checkpoint_dir),
                positive_class=positive_class, ks=tuple(ks), metadata=metadata)

    if plan.variant in (REPEATED_HOLDOUT, KFOLD):
        phase = "holdout" if plan.variant == REPEATED_HOLDOUT else "fold"
        job_list = [dict(base, split=s, split_id=i, seed=seeds[i], phase=phase) for i, s in enumerate(splits)]
        results = _run_jobs(_split_job, job_list, jobs)
        records, failures = [], []
        for job, res in zip(job_list, results):
            if isinstance(res, Exception):
                failures.append({"split_id": job["split_id"], "error": f"{type(res).__name__}: {res}"})
                records.append(RunRecord(job["split_id"], job["seed"], phase, error=failures[-1]["error"]))
            else:
                records.append(res)
        evals = [{"split_id": r.split_id, **r.test_metrics} for r in records if r.test_metrics is not None]
        agg = aggregate([scalar_metrics(e) for e in evals])
        return ProtocolReport(plan.variant, records, evals, agg, failures, count_parameters(model_cfg))

    if finetune is None or test is None:
        raise ConfigError("pretrain_finetune needs a fine-tune dataset and a test dataset")
    _check_compatible(dataset, finetune, "fine-tune")
    _check_compatible(dataset, test, "test")
    ft_split = make_finetune_split(finetune, plan)
    job_list = [dict(base, split=s, split_id=i, seed=seeds[i], finetune=finetune, finetune_split=ft_split)
                for i, s in enumerate(splits)]
    results = _run_jobs(_pretrain_finetune_job, job_list, jobs)
    records, failures, candidates = [], [], []
    for job, res in zip(job_list, results):
        if isinstance(res, Exception):
            failures.append({"split_id": job["split_id"], "error": f"{type(res).__name__}: {res}"})
            records.append(RunRecord(job["split_id"], job["seed"], "pretrain", error=failures[-1]["error"]))
            continue
        pre, fin, model = res
        records += [pre, fin]
        candidates.append((fin.val_accuracy, job["split_id"], model))
    evals = []
    if candidates:
        # highest fine-tune validation accuracy, lowest fold on ties
        _, fold, model = max(candidates, key=lambda c: (c[0], -c[1]))
        ckpt = _save(model, checkpoint_dir, "selected.ckpt", metadata)
        metrics = evaluate(model, test.features, test.labels, positive_class, ks)
        evals.append({"selected_fold": fold, "checkpoint": ckpt, **metrics})
    agg = aggregate([scalar_metrics(e) for e in evals])
    return ProtocolReport(plan.variant, records, evals, agg, failures, count_parameters(model_cfg))
