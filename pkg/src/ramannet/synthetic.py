"""Toy Raman-like spectra for smoke tests and demos."""

from __future__ import annotations

import numpy as np

from .data import LabeledDataset


def gaussian_peak(axis: np.ndarray, center: float, width: float, height: float = 1.0) -> np.ndarray:
    return height * np.exp(-0.5 * ((axis - center) / width) ** 2)


def peak_dataset(n: int, length: int, centers, width: float = 4.0, noise: float = 0.05,
                 jitter: float = 1.0, rng=None, class_names=None) -> LabeledDataset:
    """One Gaussian peak per spectrum; class ``k`` puts its peak at ``centers[k]``.

    Peaks share height and width across classes, so only their position
    separates the classes.  Rows are min-max normalized.
    """
    rng = np.random.default_rng(rng)
    centers = list(centers)
    k = len(centers)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    axis = np.arange(length, dtype=np.float64)
    rows = np.empty((n, length))
    for i, c in enumerate(labels):
        center = centers[c] + rng.normal(0.0, jitter)
        rows[i] = gaussian_peak(axis, center, width) + noise * rng.standard_normal(length)
    lo = rows.min(axis=1, keepdims=True)
    hi = rows.max(axis=1, keepdims=True)
    rows = (rows - lo) / (hi - lo)
    names = tuple(class_names) if class_names is not None else tuple(f"class_{i}" for i in range(k))
    return LabeledDataset(rows, labels, names, 400.0 + axis)


def swapped_peaks_dataset(n: int, length: int = 300, positions=(100, 200), widths=(3.0, 12.0),
                          noise: float = 0.05, jitter: float = 1.0, rng=None) -> LabeledDataset:
    """Two peaks per spectrum, a narrow and a wide one, at fixed ``positions``.

    Class 0 has the narrow peak at ``positions[0]``, class 1 has it at
    ``positions[1]``.  Both classes contain the same two peak shapes, so any
    feature that ignores position (intensity histograms, pooled statistics)
    carries no class signal.
    """
    rng = np.random.default_rng(rng)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    axis = np.arange(length, dtype=np.float64)
    rows = np.empty((n, length))
    for i, c in enumerate(labels):
        w = widths if c == 0 else widths[::-1]
        rows[i] = noise * rng.standard_normal(length)
        for pos, width in zip(positions, w):
            rows[i] += gaussian_peak(axis, pos + rng.normal(0.0, jitter), width)
    lo = rows.min(axis=1, keepdims=True)
    hi = rows.max(axis=1, keepdims=True)
    rows = (rows - lo) / (hi - lo)
    return LabeledDataset(rows, labels, ("narrow_first", "wide_first"), 400.0 + axis)
