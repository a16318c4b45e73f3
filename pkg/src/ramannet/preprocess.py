"""Alignment of raw spectra onto a shared wavenumber grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError, ExtrapolationError, NoCommonRangeError, SpectrumParseError


@dataclass
class Spectrum:
    shifts: np.ndarray  # cm^-1, strictly increasing
    intensities: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.shifts = np.asarray(self.shifts, dtype=np.float64)
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        label = f"spectrum {self.name!r}" if self.name else "spectrum"
        if self.shifts.ndim != 1 or self.shifts.shape != self.intensities.shape:
            raise SpectrumParseError(
                f"{label}: shifts {self.shifts.shape} and intensities {self.intensities.shape} differ"
            )
        if self.shifts.size < 2:
            raise SpectrumParseError(f"{label}: needs at least 2 points")
        if not (np.isfinite(self.shifts).all() and np.isfinite(self.intensities).all()):
            raise SpectrumParseError(f"{label}: non-finite values")
        steps = np.diff(self.shifts)
        if (steps <= 0).any():
            bad = int(np.argmax(steps <= 0))
            raise SpectrumParseError(
                f"{label}: shifts must be strictly increasing "
                f"(x[{bad}]={self.shifts[bad]}, x[{bad + 1}]={self.shifts[bad + 1]})"
            )

    @property
    def lo(self) -> float:
        return float(self.shifts[0])

    @property
    def hi(self) -> float:
        return float(self.shifts[-1])


@dataclass(frozen=True)
class GridSpec:
    min_shift: float
    max_shift: float
    num_points: int

    def __post_init__(self):
        if not self.min_shift < self.max_shift:
            raise ConfigError(f"grid min_shift {self.min_shift} must be < max_shift {self.max_shift}")
        if self.num_points < 2:
            raise ConfigError(f"grid needs at least 2 points, got {self.num_points}")

    def points(self) -> np.ndarray:
        return np.linspace(self.min_shift, self.max_shift, self.num_points)


def common_range(spectra) -> tuple[float, float]:
    """Largest shift interval covered by every spectrum."""
    spectra = list(spectra)
    if not spectra:
        raise NoCommonRangeError("no spectra given")
    lo = max(s.lo for s in spectra)
    hi = min(s.hi for s in spectra)
    if not lo < hi:
        offenders = [
            s.name or f"#{i}" for i, s in enumerate(spectra) if s.hi <= lo or s.lo >= hi
        ]
        raise NoCommonRangeError(
            f"spectra share no common shift range (max start {lo}, min end {hi}); "
            f"offending spectra: {', '.join(offenders)}"
        )
    return lo, hi


def resample_cubic(spectrum: Spectrum, grid: GridSpec) -> np.ndarray:
    """Evaluate a natural cubic spline through the spectrum on ``grid``."""
    if grid.min_shift < spectrum.lo or grid.max_shift > spectrum.hi:
        raise ExtrapolationError(
            f"grid [{grid.min_shift}, {grid.max_shift}] exceeds spectrum "
            f"{spectrum.name or ''} range [{spectrum.lo}, {spectrum.hi}]".replace("  ", " ")
        )
    spline = CubicSpline(spectrum.shifts, spectrum.intensities, bc_type="natural")
    return spline(grid.points())


def minmax_normalize(intensities) -> tuple[np.ndarray, bool]:
    """Scale to [0, 1].

    Returns ``(values, degenerate)``; a constant input maps to zeros with
    ``degenerate`` set.
    """
    x = np.asarray(intensities, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("cannot normalize an empty vector")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x), True
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0), False


@dataclass
class AlignmentReport:
    grid: GridSpec
    common_lo: float
    common_hi: float
    degenerate: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "grid": {"min_shift": self.grid.min_shift, "max_shift": self.grid.max_shift,
                     "num_points": self.grid.num_points},
            "common_range": [self.common_lo, self.common_hi],
            "constant_spectra": list(self.degenerate),
        }


def default_num_points(spectra, lo: float, hi: float) -> int:
    # fewest native samples any spectrum has inside [lo, hi]: never upsample the sparsest one
    counts = [int(((s.shifts >= lo) & (s.shifts <= hi)).sum()) for s in spectra]
    return max(2, min(counts))


def align_spectra(spectra, num_points: int | None = None, min_shift: float | None = None,
                  max_shift: float | None = None):
    """Crop to the common range, resample on a uniform grid and min-max each row.

    Returns ``(matrix [N x num_points], report)``.
    """
    spectra = list(spectra)
    lo, hi = common_range(spectra)
    g_lo = lo if min_shift is None else float(min_shift)
    g_hi = hi if max_shift is None else float(max_shift)
    if g_lo < lo or g_hi > hi:
        raise ExtrapolationError(
            f"requested range [{g_lo}, {g_hi}] exceeds the common range [{lo}, {hi}]"
        )
    if num_points is None:
        num_points = default_num_points(spectra, g_lo, g_hi)
    grid = GridSpec(g_lo, g_hi, int(num_points))
    report = AlignmentReport(grid, lo, hi)
    rows = []
    for i, s in enumerate(spectra):
        row, degenerate = minmax_normalize(resample_cubic(s, grid))
        if degenerate:
            report.degenerate.append(s.name or f"#{i}")
        rows.append(row)
    return np.vstack(rows), report
