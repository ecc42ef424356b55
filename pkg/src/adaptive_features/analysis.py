"""Cross-run statistics: energy distances, bootstrap bands and rate fits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

SCHEMA_ENERGY = "energy-distance/v1"
SCHEMA_AGGREGATE = "fem-aggregate/v1"


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class RunEnsemble:
    """Coefficient trajectories of many runs on one time grid and index set.

    ``values`` has shape (runs, snapshots, coefficients).
    """

    times: np.ndarray
    values: np.ndarray
    label: str = ""
    n: int | None = None
    d: int | None = None
    model: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        t = np.asarray(self.times, dtype=float)
        if v.ndim != 3 or v.shape[1] != len(t):
            raise ValueError("values must be (runs, snapshots, coefficients) on the shared time grid")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "times", t)

    @classmethod
    def from_runs(cls, times, runs, **kw) -> "RunEnsemble":
        shapes = {np.shape(r) for r in runs}
        if len(shapes) != 1:
            raise ValueError("runs do not share snapshot times and index sets")
        return cls(times, np.stack(runs), **kw)

    def at(self, k: int) -> np.ndarray:
        return self.values[:, k, :]


def _mean_pairwise(A, unbiased: bool) -> float:
    m = len(A)
    if m < 2:
        return 0.0
    total = float(np.sum(pdist(A)))
    return 2 * total / (m * (m - 1)) if unbiased else 2 * total / (m * m)


def energy_distance_sq(A, B, unbiased: bool = True) -> float:
    """2 E|a - b| - E|a - a'| - E|b - b'| with Euclidean norms over coefficients.

    The unbiased form averages the within-sample terms over distinct pairs;
    the biased (V-statistic) form includes the zero diagonal.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if len(A) == 0 or len(B) == 0:
        raise ValueError("samples must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ValueError("samples must share the coefficient index set")
    cross = float(np.mean(cdist(A, B)))
    return 2 * cross - _mean_pairwise(A, unbiased) - _mean_pairwise(B, unbiased)


def energy_distance(A, B, unbiased: bool = True) -> float:
    return math.sqrt(max(energy_distance_sq(A, B, unbiased), 0.0))


def energy_distance_to_zero(A) -> float:
    """Distance from the sample to the zero function (V-statistic form)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return energy_distance(A, np.zeros((1, A.shape[1])), unbiased=False)


def bootstrap_band(values, B: int = 1000, level: float = 0.68, seed: int = 0) -> tuple:
    """Central percentile band of ``B`` resampled means."""
    v = np.asarray(values, dtype=float).ravel()
    if len(v) < 10:
        raise ValueError("need at least 10 values")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    # sorting makes the band independent of input order
    v = np.sort(v)
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, len(v), size=(B, len(v)))].mean(axis=1)
    a = (1 - level) / 2
    lo, hi = np.quantile(means, [a, 1 - a])
    return float(lo), float(hi)


def energy_distance_se(A, B, n_boot: int = 200, seed: int = 0, unbiased: bool = True) -> float:
    """Bootstrap standard error of the energy distance, resampling both samples."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    rng = np.random.default_rng(seed)
    stats = [
        energy_distance(A[rng.integers(0, len(A), len(A))], B[rng.integers(0, len(B), len(B))], unbiased)
        for _ in range(n_boot)
    ]
    return float(np.std(stats, ddof=1))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float


def _linear_fit(x, y) -> RateFit:
    if len(x) < 3:
        raise DegenerateFitError("need at least 3 points")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2)


def rate_fit(x, y) -> RateFit:
    """Least-squares fit of log y on log x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("x and y must align")
    if len(x) < 3:
        raise DegenerateFitError("need at least 3 points")
    if np.any(x <= 0) or np.any(np.diff(x) <= 0):
        raise ValueError("x must be positive and strictly increasing")
    if np.any(y <= 0):
        raise ValueError("y must be positive")
    return _linear_fit(np.log(x), np.log(y))


def exp_decay_fit(t, gap) -> RateFit:
    """Fit log(gap) = slope * t + intercept; a negative slope is exponential decay."""
    t = np.asarray(t, dtype=float)
    gap = np.asarray(gap, dtype=float)
    if np.any(gap <= 0):
        raise ValueError("gaps must be positive")
    return _linear_fit(t, np.log(gap))


def aggregate_curves(times, curves, B: int = 500, level: float = 0.68, seed: int = 0) -> list:
    """Rows (t, median, mean, lo, hi) across runs; curves is (runs, snapshots)."""
    curves = np.asarray(curves, dtype=float)
    rows = []
    for k, t in enumerate(times):
        col = curves[:, k]
        lo, hi = bootstrap_band(col, B, level, seed) if len(col) >= 10 else (math.nan, math.nan)
        rows.append((float(t), float(np.median(col)), float(np.mean(col)), lo, hi))
    return rows


def energy_curves(seq: RunEnsemble, gd: RunEnsemble) -> list:
    """Per-snapshot rows (t, D(seq, gd), D(seq, 0), D(gd, 0))."""
    if seq.values.shape[1:] != gd.values.shape[1:] or not np.allclose(seq.times, gd.times):
        raise ValueError("ensembles must share times and index sets")
    rows = []
    for k, t in enumerate(seq.times):
        a, b = seq.at(k), gd.at(k)
        rows.append((float(t), energy_distance(a, b), energy_distance_to_zero(a), energy_distance_to_zero(b)))
    return rows


def write_rows_csv(rows, columns, schema: str, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={schema}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
