"""Spectra file ingestion, labeled datasets, split plans and triplet sampling.

File formats (UTF-8 CSV, comma separated, one header row):

matrix form
    ``label[,meta_*...],<shift_0>,<shift_1>,...``; every row is
    ``label[,meta values...],v0,v1,...``.  All rows share the header's axis.

pairs form
    long format with columns ``sample_id,label,shift,intensity`` in any
    order plus optional ``meta_*`` columns.  Rows of one sample are grouped
    by ``sample_id`` and must list shifts in strictly increasing order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    EmptyDatasetError,
    LabelError,
    ShapeError,
    SpectrumParseError,
    StratificationError,
)
from .preprocess import Spectrum

META_PREFIX = "meta_"
PAIRS_COLUMNS = ("sample_id", "label", "shift", "intensity")


@dataclass
class SpectrumRecord:
    spectrum: Spectrum
    label: str
    metadata: dict = field(default_factory=dict)


def _float(text: str, path, line: int, what: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise SpectrumParseError(f"non-numeric {what} {text!r}", path, line) from None
    if not math.isfinite(v):
        raise SpectrumParseError(f"non-finite {what} {text!r}", path, line)
    return v


def load_spectra_csv(path) -> list[SpectrumRecord]:
    """Parse a matrix-form or pairs-form spectra file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    # drop blank lines but keep their numbering
    numbered = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not numbered:
        raise EmptyDatasetError(f"{path}: empty file")
    _, header = numbered[0]
    header = [h.strip() for h in header]
    body = numbered[1:]
    if not body:
        raise EmptyDatasetError(f"{path}: header only, no spectra")
    if "shift" in header and "intensity" in header:
        return _load_pairs(path, header, body)
    return _load_matrix(path, header, body)


def _load_matrix(path, header, body):
    if header[0] != "label":
        raise SpectrumParseError("first header column must be 'label'", path, 1)
    meta_cols = []
    i = 1
    while i < len(header) and header[i].startswith(META_PREFIX):
        meta_cols.append(header[i][len(META_PREFIX):])
        i += 1
    shifts = np.array([_float(h, path, 1, "shift header") for h in header[i:]])
    if shifts.size < 2:
        raise SpectrumParseError("matrix-form header needs at least 2 shift columns", path, 1)
    if (np.diff(shifts) <= 0).any():
        raise SpectrumParseError("shift header must be strictly increasing", path, 1)
    n_meta = len(meta_cols)
    out = []
    for line, row in body:
        if len(row) != len(header):
            raise SpectrumParseError(
                f"expected {len(header)} columns, found {len(row)}", path, line
            )
        values = np.array([_float(v, path, line, "intensity") for v in row[1 + n_meta:]])
        meta = dict(zip(meta_cols, (v.strip() for v in row[1:1 + n_meta])))
        name = f"{path.name}:{line}"
        out.append(SpectrumRecord(Spectrum(shifts, values, name), row[0].strip(), meta))
    return out


def _load_pairs(path, header, body):
    missing = [c for c in PAIRS_COLUMNS if c not in header]
    if missing:
        raise SpectrumParseError(f"pairs-form header lacks columns {missing}", path, 1)
    col = {h: j for j, h in enumerate(header)}
    meta_cols = [h for h in header if h.startswith(META_PREFIX)]
    samples: dict[str, dict] = {}
    for line, row in body:
        if len(row) != len(header):
            raise SpectrumParseError(f"expected {len(header)} columns, found {len(row)}", path, line)
        sid = row[col["sample_id"]].strip()
        label = row[col["label"]].strip()
        x = _float(row[col["shift"]], path, line, "shift")
        y = _float(row[col["intensity"]], path, line, "intensity")
        s = samples.setdefault(sid, {"label": label, "x": [], "y": [], "line": line,
                                     "meta": {m[len(META_PREFIX):]: row[col[m]].strip() for m in meta_cols}})
        if s["label"] != label:
            raise SpectrumParseError(f"sample {sid!r} has conflicting labels", path, line)
        if s["x"] and x <= s["x"][-1]:
            raise SpectrumParseError(
                f"sample {sid!r}: shift {x} does not increase (previous {s['x'][-1]})", path, line
            )
        s["x"].append(x)
        s["y"].append(y)
    out = []
    for sid, s in samples.items():
        try:
            spec = Spectrum(np.array(s["x"]), np.array(s["y"]), sid)
        except SpectrumParseError as exc:
            raise SpectrumParseError(str(exc), path, s["line"]) from None
        out.append(SpectrumRecord(spec, s["label"], s["meta"]))
    return out


def filter_records(records, meta: dict | None = None, classes=None) -> list[SpectrumRecord]:
    """Keep records whose metadata matches every ``meta`` item and whose label is in ``classes``."""
    out = []
    for r in records:
        if meta and any(r.metadata.get(k) != str(v) for k, v in meta.items()):
            continue
        if classes is not None and r.label not in classes:
            continue
        out.append(r)
    return out


def write_matrix_csv(path, shifts, features, labels: list[str]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [repr(float(s)) for s in shifts])
        for lab, row in zip(labels, features):
            w.writerow([lab] + [repr(float(v)) for v in row])


# ----------------------------------------------------------------------------
# datasets


@dataclass
class LabeledDataset:
    features: np.ndarray  # [N x L], values in [0, 1]
    labels: np.ndarray  # int [N]
    class_names: tuple
    shifts: np.ndarray  # [L]
    dropped_classes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        n, c = len(self.labels), len(self.class_names)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeError(f"features {self.features.shape} do not match {n} labels")
        if len(self.shifts) != self.features.shape[1]:
            raise ShapeError(f"axis of length {len(self.shifts)} vs {self.features.shape[1]} feature columns")
        if n == 0:
            raise EmptyDatasetError("dataset has no samples")
        if self.labels.min() < 0 or self.labels.max() >= c:
            raise LabelError(f"labels must lie in [0, {c})")
        present = np.bincount(self.labels, minlength=c)
        if (present == 0).any():
            raise LabelError(f"classes without samples: {[self.class_names[i] for i in np.flatnonzero(present == 0)]}")
        x = self.features
        if not np.isfinite(x).all() or x.min() < -1e-6 or x.max() > 1 + 1e-6:
            raise ConfigError("features must be finite and lie in [0, 1]; run preprocessing first")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_len(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def dataset_from_records(records, class_names=None) -> LabeledDataset:
    """Stack records sharing one axis; classes are sorted by name unless given."""
    records = list(records)
    if not records:
        raise EmptyDatasetError("no spectra to assemble")
    shifts = records[0].spectrum.shifts
    for r in records[1:]:
        if r.spectrum.shifts.shape != shifts.shape or not np.array_equal(r.spectrum.shifts, shifts):
            raise ShapeError(
                f"spectrum {r.spectrum.name!r} is not on the shared axis; align it with preprocessing"
            )
    names = sorted({r.label for r in records}) if class_names is None else list(class_names)
    index = {n: i for i, n in enumerate(names)}
    unknown = {r.label for r in records} - set(index)
    if unknown:
        raise LabelError(f"labels not in class table: {sorted(unknown)}")
    return LabeledDataset(
        features=np.vstack([r.spectrum.intensities for r in records]),
        labels=np.array([index[r.label] for r in records]),
        class_names=tuple(names),
        shifts=shifts.copy(),
    )


def load_dataset(path, classes=None, meta: dict | None = None) -> LabeledDataset:
    records = filter_records(load_spectra_csv(path), meta=meta, classes=classes)
    if not records:
        raise EmptyDatasetError(f"{path}: no spectra left after filtering")
    return dataset_from_records(records)


def subset(ds: LabeledDataset, idx) -> LabeledDataset:
    """Rows ``idx`` with the class table unchanged (classes may go unrepresented)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = object.__new__(LabeledDataset)
    out.features = ds.features[idx]
    out.labels = ds.labels[idx]
    out.class_names = ds.class_names
    out.shifts = ds.shifts
    out.dropped_classes = dict(ds.dropped_classes)
    return out


def _relabel(ds: LabeledDataset, keep_classes) -> LabeledDataset:
    keep_classes = list(keep_classes)
    mapping = -np.ones(ds.num_classes, dtype=np.int64)
    mapping[keep_classes] = np.arange(len(keep_classes))
    rows = np.flatnonzero(mapping[ds.labels] >= 0)
    return LabeledDataset(
        features=ds.features[rows],
        labels=mapping[ds.labels[rows]],
        class_names=tuple(ds.class_names[c] for c in keep_classes),
        shifts=ds.shifts,
        dropped_classes=dict(ds.dropped_classes),
    )


def filter_min_class_size(ds: LabeledDataset, min_n: int) -> LabeledDataset:
    """Drop classes with fewer than ``min_n`` samples and relabel contiguously."""
    if min_n < 1:
        raise ConfigError(f"min_n must be >= 1, got {min_n}")
    counts = ds.class_counts()
    keep = [c for c in range(ds.num_classes) if counts[c] >= min_n]
    if not keep:
        raise EmptyDatasetError(f"no class has at least {min_n} samples")
    dropped = {ds.class_names[c]: int(counts[c]) for c in range(ds.num_classes) if counts[c] < min_n}
    out = _relabel(ds, keep)
    out.dropped_classes.update(dropped)
    return out


def select_classes(ds: LabeledDataset, names) -> LabeledDataset:
    """Restrict to the named classes, in the given order."""
    index = {n: i for i, n in enumerate(ds.class_names)}
    missing = [n for n in names if n not in index]
    if missing:
        raise LabelError(f"unknown classes {missing}; available: {list(ds.class_names)}")
    return _relabel(ds, [index[n] for n in names])


# ----------------------------------------------------------------------------
# split plans

REPEATED_HOLDOUT = "repeated_holdout"
KFOLD = "kfold"
PRETRAIN_FINETUNE = "pretrain_finetune"
VARIANTS = (REPEATED_HOLDOUT, KFOLD, PRETRAIN_FINETUNE)


@dataclass(frozen=True)
class SplitPlan:
    variant: str
    repeats: int = 50
    test_fraction: float = 0.3
    folds: int = 5
    validation_fraction: float = 0.1
    finetune_validation_fraction: float = 0.1
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown split variant {self.variant!r}; expected one of {VARIANTS}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if not 0 < self.finetune_validation_fraction < 1:
            raise ConfigError("finetune_validation_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _quotas(counts: np.ndarray, n_take: int) -> np.ndarray:
    """Per-class share of ``n_take`` proportional to ``counts`` (largest remainder, ties to lower class)."""
    exact = counts * (n_take / counts.sum())
    q = np.floor(exact).astype(np.int64)
    short = n_take - q.sum()
    order = np.lexsort((np.arange(len(counts)), -(exact - q)))
    q[order[:short]] += 1
    return q


def _take(pool: np.ndarray, labels: np.ndarray, frac: float, rng, stratified: bool):
    """Split ``pool`` into (taken, rest) with ``round(frac*len(pool))`` taken."""
    n_take = _round_half_up(frac * len(pool))
    if n_take == 0:
        return pool[:0], pool
    if not stratified:
        perm = rng.permutation(pool)
        return np.sort(perm[:n_take]), np.sort(perm[n_take:])
    classes, inverse = np.unique(labels[pool], return_inverse=True)
    counts = np.bincount(inverse)
    quotas = _quotas(counts, n_take)
    taken = []
    for k, cls in enumerate(classes):
        members = pool[inverse == k]
        taken.append(rng.permutation(members)[: quotas[k]])
    taken = np.sort(np.concatenate(taken))
    rest = np.setdiff1d(pool, taken)
    return taken, rest


def _check_trainable(labels, train_idx, all_idx, context):
    missing = set(np.unique(labels[all_idx])) - set(np.unique(labels[train_idx]))
    if missing:
        raise StratificationError(
            f"{context}: classes {sorted(int(m) for m in missing)} have too few samples to appear in training"
        )


def _kfold(labels: np.ndarray, folds: int, rng, stratified: bool) -> list[np.ndarray]:
    n = len(labels)
    if n < folds:
        raise StratificationError(f"{n} samples cannot fill {folds} folds")
    if stratified:
        counts = np.bincount(labels)
        small = [int(c) for c in np.flatnonzero((counts > 0) & (counts < 2))]
        if small:
            raise StratificationError(f"classes {small} have fewer than 2 samples; cannot stratify {folds} folds")
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.flatnonzero(counts)])
    else:
        order = rng.permutation(n)
    assign = np.empty(n, dtype=np.int64)
    assign[order] = np.arange(n) % folds
    return [np.flatnonzero(assign == f) for f in range(folds)]


def make_splits(ds: LabeledDataset, plan: SplitPlan) -> list[Split]:
    """Index splits for ``plan`` over ``ds``; deterministic given ``plan.seed``.

    For ``pretrain_finetune`` this gives the reference-set folds, with the
    held-out fold as validation and an empty test set; the fine-tune split
    comes from :func:`make_finetune_split`.
    """
    labels = ds.labels
    all_idx = np.arange(len(labels))
    seeds = np.random.SeedSequence(plan.seed)
    out = []
    if plan.variant == REPEATED_HOLDOUT:
        for r, child in enumerate(seeds.spawn(plan.repeats)):
            rng = np.random.default_rng(child)
            test, rest = _take(all_idx, labels, plan.test_fraction, rng, plan.stratified)
            val, train = _take(rest, labels, plan.validation_fraction, rng, plan.stratified)
            _check_trainable(labels, train, all_idx, f"repeat {r}")
            out.append(Split(train, val, test))
        return out
    rng = np.random.default_rng(seeds)
    folds = _kfold(labels, plan.folds, rng, plan.stratified)
    for f, held in enumerate(folds):
        rest = np.setdiff1d(all_idx, held)
        if plan.variant == KFOLD:
            val, train = _take(rest, labels, plan.validation_fraction, rng, plan.stratified)
            _check_trainable(labels, train, all_idx, f"fold {f}")
            out.append(Split(train, val, held))
        else:
            _check_trainable(labels, rest, all_idx, f"fold {f}")
            out.append(Split(rest, held, held[:0]))
    return out


def make_finetune_split(ds: LabeledDataset, plan: SplitPlan) -> Split:
    """Train/validation split of the fine-tune set (no test part)."""
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed, 1]))
    all_idx = np.arange(len(ds))
    val, train = _take(all_idx, ds.labels, plan.finetune_validation_fraction, rng, plan.stratified)
    _check_trainable(ds.labels, train, all_idx, "fine-tune split")
    return Split(train, val, all_idx[:0])


# ----------------------------------------------------------------------------
# triplets


@dataclass(frozen=True)
class TripletBatch:
    anchor_idx: np.ndarray
    positive_idx: np.ndarray
    negative_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor_idx)

    @classmethod
    def empty(cls) -> "TripletBatch":
        z = np.zeros(0, dtype=np.intp)
        return cls(z, z.copy(), z.copy())


def sample_triplets(labels, rng: np.random.Generator | None = None, strategy: str = "batch_hard",
                    embeddings: np.ndarray | None = None) -> TripletBatch:
    """One (anchor, positive, negative) per eligible anchor of a minibatch.

    ``random`` draws the positive and negative uniformly; ``batch_hard``
    takes the farthest positive and the nearest negative under squared
    Euclidean distance between ``embeddings``.
    """
    labels = np.asarray(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    eligible = np.flatnonzero(pos_mask.any(axis=1) & neg_mask.any(axis=1))
    if eligible.size == 0:
        return TripletBatch.empty()

    if strategy == "random":
        if rng is None:
            raise ConfigError("random triplet sampling needs a random generator")
        pos = np.empty(eligible.size, dtype=np.intp)
        neg = np.empty(eligible.size, dtype=np.intp)
        for j, a in enumerate(eligible):
            pos[j] = rng.choice(np.flatnonzero(pos_mask[a]))
            neg[j] = rng.choice(np.flatnonzero(neg_mask[a]))
    elif strategy == "batch_hard":
        if embeddings is None or len(embeddings) != n:
            raise ConfigError("batch_hard triplet mining needs one embedding per label")
        e = np.asarray(embeddings, dtype=np.float64)
        sq = (e * e).sum(axis=1)
        dist = np.maximum(sq[:, None] - 2.0 * (e @ e.T) + sq[None, :], 0.0)
        pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)[eligible]
        neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)[eligible]
    else:
        raise ConfigError(f"unknown triplet strategy {strategy!r}")
    return TripletBatch(eligible.astype(np.intp), pos.astype(np.intp), neg.astype(np.intp))
