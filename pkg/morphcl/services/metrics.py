from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from morphcl.schemas import Polarity, SineTaskSpec
from morphcl.services.tasks import Dataset, gen_sine_task

logger = logging.getLogger(__name__)


class PerfMatrix:
    """R[j][i]: performance on task i after training task j (entries with i > j stay NaN)"""

    def __init__(self, n_tasks: int, polarity: Polarity = Polarity.ERROR):
        if n_tasks < 1:
            raise ValueError(f"n_tasks must be >= 1, got {n_tasks}")
        self.n_tasks = n_tasks
        self.polarity = polarity
        self.R = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows, polarity: Polarity = Polarity.ERROR) -> "PerfMatrix":
        rows = [list(r) for r in rows]
        pm = cls(len(rows), polarity)
        for j, row in enumerate(rows):
            for i, value in enumerate(row[: j + 1]):
                if value is not None:
                    pm.record(j, i, value)
        return pm

    def record(self, j: int, i: int, value: float) -> None:
        if not 0 <= i <= j < self.n_tasks:
            raise IndexError(f"R[{j}][{i}] lies outside the lower triangle of a {self.n_tasks}-task matrix")
        if not np.isfinite(value):
            raise ValueError(f"R[{j}][{i}] must be finite, got {value}")
        self.R[j, i] = float(value)

    def record_row(self, j: int, values) -> None:
        for i, value in enumerate(values):
            self.record(j, i, value)

    def final_row(self) -> np.ndarray:
        row = self.R[-1]
        if np.any(np.isnan(row)):
            raise ValueError("final row of the performance matrix is incomplete")
        return row

    def to_rows(self) -> list[list[Optional[float]]]:
        return [[None if np.isnan(v) else float(v) for v in row[: j + 1]] for j, row in enumerate(self.R)]


def avg_perf(pm: PerfMatrix) -> float:
    return float(np.mean(pm.final_row()))


def bwt(pm: PerfMatrix) -> Optional[float]:
    """Mean of R[i][i] - R[T-1][i] over the earlier tasks; positive means improvement for error metrics"""
    T = pm.n_tasks
    if T < 2:
        return None
    final = pm.final_row()
    diag = np.diag(pm.R)[: T - 1]
    return float(np.mean(diag - final[: T - 1]))


def forgetting(pm: PerfMatrix) -> Optional[float]:
    """Mean regression of every earlier task from its best value"""
    T = pm.n_tasks
    if T < 2:
        return None
    final = pm.final_row()
    drops = []
    for i in range(T - 1):
        column = pm.R[i:, i]
        if pm.polarity is Polarity.ERROR:
            drops.append(max(0.0, final[i] - np.nanmin(column)))
        else:
            drops.append(max(0.0, np.nanmax(column) - final[i]))
    return float(np.mean(drops))


def fwt(pm: PerfMatrix) -> Optional[float]:
    """Constant-zero forward-transfer column kept for table parity"""
    return None if pm.n_tasks < 2 else 0.0


# --- Task divergence ---
def _joint(ds: Dataset) -> np.ndarray:
    x = np.asarray(ds.x, dtype=np.float64).reshape(len(ds), -1)
    y = np.asarray(ds.y, dtype=np.float64).reshape(len(ds), -1)
    return np.hstack([x, y])


def task_divergence(ds_a: Dataset, ds_b: Dataset, n_bins: int | Sequence[int] = 16) -> float:
    """Total-variation estimate between the joint (x, y) histograms on shared bins, in [0, 1]

    n_bins is either one count for every column or one count per column (inputs first).
    """
    if len(ds_a) == 0 or len(ds_b) == 0:
        raise ValueError("task_divergence needs two non-empty datasets")
    a, b = _joint(ds_a), _joint(ds_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"datasets live in different spaces: {a.shape[1]} vs {b.shape[1]} columns")
    bins = np.asarray(n_bins, dtype=np.int64).reshape(-1)
    if bins.size == 1:
        bins = np.full(a.shape[1], bins[0])
    if bins.size != a.shape[1]:
        raise ValueError(f"{bins.size} bin counts for {a.shape[1]} columns")
    if np.any(bins < 1):
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")

    both = np.vstack([a, b])
    lo, hi = both.min(axis=0), both.max(axis=0)
    width = np.where(hi > lo, hi - lo, 1.0)

    def cells(m: np.ndarray) -> np.ndarray:
        return np.clip(np.floor((m - lo) / width * bins), 0, bins - 1).astype(np.int64)

    keys, inverse = np.unique(np.vstack([cells(a), cells(b)]), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    pa = np.bincount(inverse[: len(a)], minlength=len(keys)) / len(a)
    pb = np.bincount(inverse[len(a):], minlength=len(keys)) / len(b)
    return float(0.5 * np.abs(pa - pb).sum())


@dataclass(frozen=True)
class DivergenceGapResult:
    divergences: list[float]
    gaps: list[float]
    spearman: float
    pvalue: float


def divergence_gap_correlation(
    n_pairs: int = 20,
    seed: int = 0,
    *,
    n_samples: int = 20000,
    y_bins: int = 8,
    bins_per_period: int = 8,
    amplitude: float = 1.0,
    input_scale: float = 90.0,
) -> DivergenceGapResult:
    """Rank correlation between task divergence and the loss gap of a fixed predictor across sine task pairs

    Each pair shares amplitude and base phase and differs by a phase shift in [0, pi]. The predictor is
    the noise-free first task, so its gap is the loss it takes on the second. The input axis is binned
    finely enough to resolve one period in bins_per_period cells.
    """
    if n_pairs < 3:
        raise ValueError(f"need at least 3 pairs for a rank correlation, got {n_pairs}")
    rng = np.random.default_rng([seed, 0x1E])
    base = SineTaskSpec(amplitude=amplitude, n_samples=n_samples)
    lo, hi = base.domain
    period = 2.0 * np.pi / base.frequency
    x_bins = max(1, int(np.ceil((hi - lo) / period * bins_per_period)))
    divergences, gaps = [], []
    for k in range(n_pairs):
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        shift = float(rng.uniform(0.0, np.pi))
        spec_a = base.model_copy(update={"phase": phase})
        spec_b = base.model_copy(update={"phase": phase + shift})
        ds_a = gen_sine_task(spec_a, [seed, k, 0])
        ds_b = gen_sine_task(spec_b, [seed, k, 1])

        def predict(x):
            return spec_a.amplitude * np.sin(spec_a.frequency * x + spec_a.phase)

        loss_a = float(np.mean((predict(ds_a.x) - ds_a.y) ** 2))
        loss_b = float(np.mean((predict(ds_b.x) - ds_b.y) ** 2))
        scaled_a = Dataset(ds_a.x / input_scale, ds_a.y, 0)
        scaled_b = Dataset(ds_b.x / input_scale, ds_b.y, 1)
        divergences.append(task_divergence(scaled_a, scaled_b, (x_bins, y_bins)))
        gaps.append(abs(loss_b - loss_a))

    rho, pvalue = stats.spearmanr(divergences, gaps)
    logger.info("divergence/loss-gap spearman %.3f over %d pairs (%d input bins)", rho, n_pairs, x_bins)
    return DivergenceGapResult(divergences, gaps, float(rho), float(pvalue))
