"""Deterministic and probabilistic forecast verification."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from .errors import DomainError

BIN_COUNT = 100
MIN_QUANTILE_SAMPLES = 20


@dataclass(frozen=True)
class ErrorSummary:
    rmse: float
    mae: float
    q95: float
    n: int


@dataclass(frozen=True)
class BinnedDistribution:
    """Probability mass over ``len(probs)`` equal-width bins spanning [lo, hi].

    The CDF is a step function with each bin's mass placed at the bin centre.
    """

    lo: float
    hi: float
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or probs.size < 1:
            raise DomainError("probs must be a non-empty vector")
        if not self.hi > self.lo:
            raise DomainError(f"need hi > lo, got [{self.lo}, {self.hi}]")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise DomainError("probs must be finite and non-negative")
        if abs(probs.sum() - 1.0) > 1e-6:
            raise DomainError(f"probs sum to {probs.sum()}, expected 1")

    @property
    def bin_count(self) -> int:
        return self.probs.size

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bin_count

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.bin_count) + 0.5) * self.width

    def mean(self) -> float:
        return float(np.dot(self.probs, self.centers))

    @classmethod
    def one_hot(cls, lo: float, hi: float, index: int, bins: int = BIN_COUNT) -> "BinnedDistribution":
        p = np.zeros(bins)
        p[index] = 1.0
        return cls(lo, hi, p)


def bin_index(value, lo: float, hi: float, bins: int = BIN_COUNT):
    """floor((value - lo) / width), clamped to [0, bins - 1]."""
    width = (hi - lo) / bins
    idx = np.floor((np.asarray(value, dtype=float) - lo) / width).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    return int(idx) if np.ndim(value) == 0 else idx


def _paired(pred, target):
    pred = np.asarray(pred, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    if pred.shape != target.shape:
        raise DomainError(f"length mismatch: {pred.size} predictions vs {target.size} targets")
    if pred.size == 0:
        raise DomainError("need at least one sample")
    return pred, target


def rmse(pred, target) -> float:
    pred, target = _paired(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def mae(pred, target) -> float:
    pred, target = _paired(pred, target)
    return float(np.mean(np.abs(pred - target)))


def forecast_skill(err_model: float, err_baseline: float) -> float:
    """Improvement over a baseline in percent; 0 means no better, 100 perfect."""
    if not err_baseline > 0:
        raise DomainError("baseline error must be positive")
    if err_model == err_baseline:
        return 0.0
    return (1.0 - err_model / err_baseline) * 100.0


def quantile95(abs_errors) -> float:
    """Nearest-rank 95th percentile: element ceil(0.95 n) of the sorted errors."""
    errs = np.sort(np.abs(np.asarray(abs_errors, dtype=float).ravel()))
    n = errs.size
    if n < MIN_QUANTILE_SAMPLES:
        raise DomainError(f"quantile95 needs at least {MIN_QUANTILE_SAMPLES} errors, got {n}")
    rank = math.ceil(0.95 * n)
    return float(errs[rank - 1])


def summarize(pred, target) -> ErrorSummary:
    pred, target = _paired(pred, target)
    return ErrorSummary(rmse(pred, target), mae(pred, target), quantile95(pred - target), pred.size)


def crps(dist: BinnedDistribution, target: float) -> float:
    """Exact integral of the squared step-CDF difference.

    The observation step sits at ``target`` clamped into [lo, hi], so mass the
    forecast cannot represent is not charged beyond the distribution range.
    """
    if not isinstance(dist, BinnedDistribution):
        raise DomainError("crps expects a BinnedDistribution")
    if not np.isfinite(target):
        raise DomainError("target must be finite")
    y = min(max(float(target), dist.lo), dist.hi)
    centers = dist.centers
    cdf = np.cumsum(dist.probs)
    cdf[-1] = 1.0
    # both CDFs are 0 left of every breakpoint and 1 right of all of them
    points = np.sort(np.append(centers, y))
    left = points[:-1]
    gaps = np.diff(points)
    idx = np.searchsorted(centers, left, side="right") - 1
    f_model = np.where(idx >= 0, cdf[np.maximum(idx, 0)], 0.0)
    f_obs = (left >= y).astype(float)
    return float(np.sum((f_model - f_obs) ** 2 * gaps))


def crps_point(pred, target) -> np.ndarray:
    """CRPS of deterministic forecasts: the absolute error."""
    pred, target = _paired(pred, target)
    return np.abs(pred - target)


def mean_crps(dists: Sequence[BinnedDistribution], targets) -> float:
    targets = np.asarray(targets, dtype=float).ravel()
    if len(dists) != targets.size or targets.size == 0:
        raise DomainError("need one target per distribution")
    return float(np.mean([crps(d, y) for d, y in zip(dists, targets)]))


REPORT_COLUMNS = ("horizon_s", "n", "rmse", "fs_rmse_pct", "mae", "q95", "crps", "fs_crps_pct")


@dataclass
class HorizonReport:
    horizon_s: int
    n: int
    rmse: float
    fs_rmse_pct: float
    mae: float
    q95: float
    crps: float
    fs_crps_pct: float

    def row(self) -> List[str]:
        return [str(self.horizon_s), str(self.n)] + [
            repr(round(float(v), 6)) for v in
            (self.rmse, self.fs_rmse_pct, self.mae, self.q95, self.crps, self.fs_crps_pct)
        ]


def horizon_report(horizon_s: int, pred, target, base_pred, crps_values=None,
                   base_crps_values=None) -> HorizonReport:
    """Metrics for one horizon with skill relative to a baseline forecast.

    ``crps_values`` defaults to the absolute errors (deterministic forecast).
    """
    pred, target = _paired(pred, target)
    base_pred, _ = _paired(base_pred, target)
    model_rmse = rmse(pred, target)
    base_rmse = rmse(base_pred, target)
    if crps_values is None:
        crps_values = crps_point(pred, target)
    if base_crps_values is None:
        base_crps_values = crps_point(base_pred, target)
    model_crps = float(np.mean(crps_values))
    base_crps = float(np.mean(base_crps_values))
    fs_rmse = forecast_skill(model_rmse, base_rmse) if base_rmse > 0 else 0.0
    fs_crps = forecast_skill(model_crps, base_crps) if base_crps > 0 else 0.0
    q95 = quantile95(pred - target) if pred.size >= MIN_QUANTILE_SAMPLES else float("nan")
    return HorizonReport(int(horizon_s), int(pred.size), model_rmse, fs_rmse, mae(pred, target),
                         q95, model_crps, fs_crps)


def write_report_csv(path, reports: Iterable[HorizonReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for rep in reports:
            writer.writerow(rep.row())


def read_report_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("horizon_s", "n") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
