"""Map correlation and phase-error metrics.

Phase errors compare the Fourier coefficients of two maps reflection by
reflection.  Only one member of each Friedel pair is counted, the origin
term is skipped, and the mean is weighted by the true amplitude.  No origin
shift search is performed: the generated densities are centred in their
cells, which pins the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import UnitCell, d_spacings, fft3, grid_indices

PEARSON_EPS = 1e-8
DEFAULT_SHELLS: tuple[tuple[float, float], ...] = (
    (math.inf, 4.0),
    (4.0, 3.0),
    (3.0, 2.5),
    (2.5, 2.0),
    (2.0, 1.75),
    (1.75, 1.5),
)


def pearson(e: np.ndarray, e_pred: np.ndarray, eps: float = PEARSON_EPS) -> float:
    """Sample Pearson correlation over voxels, eps added under each root."""
    a = np.asarray(e, dtype=np.float64)
    b = np.asarray(e_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    r = (da * db).sum() / (math.sqrt((da * da).sum() + eps) * math.sqrt((db * db).sum() + eps))
    return float(np.clip(r, -1.0, 1.0))


@dataclass
class _Reflections:
    d: np.ndarray
    weight: np.ndarray
    error: np.ndarray  # degrees


def _friedel_half(hkl: np.ndarray) -> np.ndarray:
    h, k, l = hkl[..., 0], hkl[..., 1], hkl[..., 2]
    return (h > 0) | ((h == 0) & (k > 0)) | ((h == 0) & (k == 0) & (l > 0))


def _reflections(e_true, e_pred, cell: UnitCell, d_min: float) -> _Reflections:
    a = np.asarray(e_true, dtype=np.float64)
    b = np.asarray(e_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    hkl = grid_indices(a.shape)
    d = d_spacings(hkl, cell)
    # indices at or beyond Nyquist have no distinct Friedel mate on the grid
    nyq = np.zeros(a.shape, dtype=bool)
    for ax, n in enumerate(a.shape):
        if n % 2 == 0:
            nyq |= np.abs(hkl[..., ax]) == n // 2
    mask = _friedel_half(hkl) & (d >= d_min * (1 - 1e-12)) & ~nyq
    Ft = fft3(a)[mask]
    Fp = fft3(b)[mask]
    dphi = np.abs(np.angle(Fp) - np.angle(Ft))
    err = np.degrees(np.minimum(dphi, 2 * np.pi - dphi))
    # a vanishing prediction carries no phase information: score it as random
    err = np.where(np.abs(Fp) > 0, err, 90.0)
    return _Reflections(d=d[mask], weight=np.abs(Ft), error=err)


def mean_phase_error(e_true, e_pred, cell: UnitCell, d_min: float = 1.5, *, weighted: bool = True) -> float:
    """Amplitude-weighted mean phase difference in degrees, within [0, 180]."""
    refl = _reflections(e_true, e_pred, cell, d_min)
    if refl.d.size == 0:
        raise ValueError("no reflections within the resolution limit")
    if not weighted:
        return float(refl.error.mean())
    wsum = refl.weight.sum()
    if wsum == 0:
        return float(refl.error.mean())
    return float((refl.weight * refl.error).sum() / wsum)


@dataclass
class ShellStats:
    d_hi: float
    d_lo: float
    mean_error: float  # nan when the shell is empty
    count: int
    weight: float
    unweighted_error: float = math.nan


@dataclass
class PhaseErrorReport:
    overall: float
    shells: list[ShellStats] = field(default_factory=list)
    overall_unweighted: float = math.nan

    @property
    def layout(self) -> tuple[tuple[float, float], ...]:
        return tuple((s.d_hi, s.d_lo) for s in self.shells)

    @property
    def total_count(self) -> int:
        return sum(s.count for s in self.shells)

    def below(self, threshold: float = 60.0) -> list[float]:
        """1.0/0.0 per shell for this single example; nan for empty shells."""
        return [math.nan if s.count == 0 else float(s.mean_error < threshold) for s in self.shells]


def _check_shells(shells) -> None:
    prev_lo = None
    for hi, lo in shells:
        if not hi > lo > 0:
            raise ValueError(f"bad shell ({hi}, {lo})")
        if prev_lo is not None and hi != prev_lo:
            raise ValueError("shells must be contiguous and in descending d order")
        prev_lo = lo


def phase_error_by_shell(e_true, e_pred, cell: UnitCell, shells=DEFAULT_SHELLS) -> PhaseErrorReport:
    """Phase error per resolution shell; shell ``(hi, lo)`` holds lo < d <= hi.

    The last shell's lower edge acts as the resolution limit and is inclusive.
    """
    shells = tuple((float(hi), float(lo)) for hi, lo in shells)
    _check_shells(shells)
    d_min = shells[-1][1]
    refl = _reflections(e_true, e_pred, cell, d_min)
    stats = []
    for i, (hi, lo) in enumerate(shells):
        last = i == len(shells) - 1
        sel = (refl.d <= hi) & ((refl.d >= lo * (1 - 1e-12)) if last else (refl.d > lo))
        n = int(sel.sum())
        w = float(refl.weight[sel].sum())
        if n == 0:
            stats.append(ShellStats(hi, lo, math.nan, 0, 0.0))
            continue
        err = float((refl.weight[sel] * refl.error[sel]).sum() / w) if w > 0 else float(refl.error[sel].mean())
        stats.append(ShellStats(hi, lo, err, n, w, float(refl.error[sel].mean())))
    wsum = refl.weight.sum()
    overall = float((refl.weight * refl.error).sum() / wsum) if wsum > 0 else float(refl.error.mean())
    return PhaseErrorReport(overall=overall, shells=stats, overall_unweighted=float(refl.error.mean()))


def recombine(report: PhaseErrorReport) -> float:
    """Weighted mean of the shell errors; equals ``report.overall``."""
    num = sum(s.weight * s.mean_error for s in report.shells if s.count)
    den = sum(s.weight for s in report.shells if s.count)
    return num / den


def fraction_below(reports, threshold: float = 60.0) -> list[float]:
    """Per shell, the fraction of examples whose shell error is below ``threshold``.

    Examples with an empty shell do not count towards that shell.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    layout = reports[0].layout
    for r in reports[1:]:
        if r.layout != layout:
            raise ValueError("reports use different shell layouts")
    out = []
    for i in range(len(layout)):
        vals = [r.shells[i].mean_error for r in reports if r.shells[i].count]
        out.append(float(np.mean([v < threshold for v in vals])) if vals else math.nan)
    return out


def mean_shell_errors(reports) -> list[float]:
    """Per shell, the average over examples of the shell mean error."""
    reports = list(reports)
    out = []
    for i in range(len(reports[0].shells)):
        vals = [r.shells[i].mean_error for r in reports if r.shells[i].count]
        out.append(float(np.mean(vals)) if vals else math.nan)
    return out
