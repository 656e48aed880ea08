"""Accuracy and calibration metrics for reconciled forecasts.

Point accuracy (MAPE, MASE), interval calibration (MIS), distributional
accuracy (per-coordinate 2-Wasserstein, energy score) and the symmetric
skill score used to compare two methods.

Quantiles follow the linear-interpolation convention (numpy's default) and
the point forecast is the sample median with the lower-median rule for even
counts, so every reported number is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import (
    DegenerateDenominatorError,
    DimensionError,
    FlatTrainSeriesError,
    InvalidIntervalError,
    OddSampleCountWarning,
    ZeroReferenceError,
)


def mape(estimate, reference) -> float:
    """Mean absolute percentage error, in percent.

    ``(1/n) * sum |est_i - ref_i| / ref_i * 100``; any zero reference entry
    raises :class:`~probreconc.errors.ZeroReferenceError`.
    """
    est = np.asarray(estimate, dtype=float).reshape(-1)
    ref = np.asarray(reference, dtype=float).reshape(-1)
    if est.shape != ref.shape:
        raise DimensionError("estimate and reference must have equal length")
    if np.any(ref == 0):
        raise ZeroReferenceError("reference contains zero entries")
    return float(np.mean(np.abs(est - ref) / ref) * 100.0)


def wasserstein2(samples, reference) -> float:
    """Average the per-coordinate W2 distances to a reconciled Gaussian.

    For each bottom coordinate, the 1-D squared distance is the quantile
    integral ``int (Femp^-1(q) - Fref^-1(q))^2 dq`` evaluated at the
    midpoint grid q_i = (i - 1/2)/N with the sorted samples as empirical
    quantiles.  The m coordinate distances are averaged arithmetically.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, m = x.shape
    if n < 2:
        raise DimensionError("need at least two sample rows")
    mean = np.asarray(reference.mean, dtype=float)
    sd = reference.marginal_sd()
    if mean.shape[0] != m:
        raise DimensionError("reference dimension does not match the samples")
    q = (np.arange(1, n + 1) - 0.5) / n
    total = 0.0
    for j in range(m):
        emp = np.sort(x[:, j])
        ref_q = norm.ppf(q, loc=mean[j], scale=max(sd[j], 1e-300))
        total += np.sqrt(np.mean((emp - ref_q) ** 2))
    return float(total / m)


def sample_median(x) -> float:
    """Sample median with the lower-median convention for even counts."""
    s = np.sort(np.asarray(x).reshape(-1))
    if s.size == 0:
        raise DimensionError("median of an empty sample")
    return float(s[(s.size - 1) // 2])


def mase(point_forecasts, actuals, train_series) -> float:
    """Mean absolute error scaled by the in-sample naive error.

    ``MAE / Q`` with ``MAE = (1/h) sum |y_{t+j} - yhat_{t+j}|`` and
    ``Q = (1/(T-1)) sum_{t>=2} |y_t - y_{t-1}|`` over the training series.
    A constant training series makes Q zero and raises
    :class:`~probreconc.errors.FlatTrainSeriesError`.
    """
    f = np.asarray(point_forecasts, dtype=float).reshape(-1)
    y = np.asarray(actuals, dtype=float).reshape(-1)
    train = np.asarray(train_series, dtype=float).reshape(-1)
    if f.shape != y.shape:
        raise DimensionError("forecasts and actuals must have equal length")
    if train.size < 2:
        raise DimensionError("training series needs at least two points")
    q = float(np.mean(np.abs(np.diff(train))))
    if q == 0:
        raise FlatTrainSeriesError("training series is constant; Q = 0")
    return float(np.mean(np.abs(y - f)) / q)


def mis(lower: float, upper: float, actual: float, alpha: float = 0.1) -> float:
    """Interval score for a central (1 - alpha) interval.

    ``(u - l) + (2/alpha)(l - y) if y < l + (2/alpha)(y - u) if y > u``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if lower > upper:
        raise InvalidIntervalError(f"lower {lower} exceeds upper {upper}")
    width = upper - lower
    penalty = 0.0
    if actual < lower:
        penalty = (2.0 / alpha) * (lower - actual)
    elif actual > upper:
        penalty = (2.0 / alpha) * (actual - upper)
    return float(width + penalty)


def interval_from_samples(samples, alpha: float = 0.1) -> tuple[float, float]:
    """Central interval bounds: the alpha/2 and 1 - alpha/2 sample quantiles."""
    s = np.asarray(samples, dtype=float).reshape(-1)
    lo, hi = np.quantile(s, [alpha / 2.0, 1.0 - alpha / 2.0], method="linear")
    return float(lo), float(hi)


def mis_from_samples(samples, actual: float, alpha: float = 0.1) -> float:
    lo, hi = interval_from_samples(samples, alpha)
    return mis(lo, hi, actual, alpha)


def energy_score(forecast_samples, actual) -> float:
    """Energy score with exponent 2, estimated from paired samples.

    ``mean ||y - s_i||^2 - 0.5 * mean ||s_i - s_{i + N/2}||^2`` where the
    second average pairs the first half of the sample with the second half.
    An odd sample count drops the last row (with a warning).
    """
    s = np.asarray(forecast_samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    y = np.asarray(actual, dtype=float).reshape(-1)
    if s.shape[1] != y.shape[0]:
        raise DimensionError("sample columns must match the actual vector")
    if s.shape[0] < 2:
        raise DimensionError("need at least two forecast samples")
    if s.shape[0] % 2 == 1:
        warnings.warn("odd sample count; dropping the last particle",
                      OddSampleCountWarning)
        s = s[:-1]
    half = s.shape[0] // 2
    term1 = float(np.mean(np.sum((s - y) ** 2, axis=1)))
    term2 = float(np.mean(np.sum((s[:half] - s[half:]) ** 2, axis=1)))
    return term1 - 0.5 * term2


def skill_score(metric_new: float, metric_base: float) -> float:
    """Symmetric, scale-free improvement of ``new`` over ``base``.

    ``(base - new) / ((base + new) / 2)``; raises
    :class:`~probreconc.errors.DegenerateDenominatorError` when both are 0.
    """
    denom = (metric_base + metric_new) / 2.0
    if denom == 0:
        raise DegenerateDenominatorError("both metric values are zero")
    return float((metric_base - metric_new) / denom)


# --------------------------------------------------------------------------
# score reports


@dataclass
class ScoreRow:
    series: str
    level: str
    horizon: int
    metric: str
    value: float


@dataclass
class ScoreReport:
    """Flat (series, level, horizon, metric, value) rows plus aggregation."""

    rows: list[ScoreRow] = field(default_factory=list)

    def add(self, series, level, horizon, metric, value) -> None:
        self.rows.append(ScoreRow(str(series), str(level), int(horizon),
                                  str(metric), float(value)))

    def aggregate(self) -> dict[tuple[str, str], float]:
        """Mean value per (metric, level), averaging over series and horizons."""
        sums: dict[tuple[str, str], list[float]] = {}
        for r in self.rows:
            sums.setdefault((r.metric, r.level), []).append(r.value)
        return {k: float(np.mean(v)) for k, v in sums.items()}

    def metric_values(self, metric: str) -> dict[tuple[str, str, int], float]:
        return {(r.series, r.level, r.horizon): r.value
                for r in self.rows if r.metric == metric}

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["series", "level", "horizon", "metric", "value"])
            for r in self.rows:
                writer.writerow([r.series, r.level, r.horizon, r.metric,
                                 repr(r.value)])

    @classmethod
    def from_csv(cls, path) -> "ScoreReport":
        report = cls()
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                report.add(row["series"], row["level"], int(row["horizon"]),
                           row["metric"], float(row["value"]))
        return report


def score_samples(forecast_samples, actuals, train, *, alpha: float = 0.1,
                  series_labels=None, level_labels=None,
                  horizon: int = 1) -> ScoreReport:
    """Score one forecast distribution against observed values.

    ``forecast_samples`` is N x n (any set of series, e.g. a full hierarchy
    obtained by lifting bottom particles), ``actuals`` length n, ``train``
    T x n with each column the training history of the matching series.
    Emits MASE and MIS per series plus one joint energy-score row.
    """
    s = np.asarray(forecast_samples, dtype=float)
    y = np.asarray(actuals, dtype=float).reshape(-1)
    tr = np.asarray(train, dtype=float)
    if tr.ndim == 1:
        tr = tr[:, None]
    n = y.shape[0]
    if s.shape[1] != n or tr.shape[1] != n:
        raise DimensionError("samples, actuals and train must align by column")
    labels = list(series_labels) if series_labels is not None else \
        [f"s{j}" for j in range(n)]
    levels = list(level_labels) if level_labels is not None else [""] * n
    report = ScoreReport()
    for j in range(n):
        med = sample_median(s[:, j])
        report.add(labels[j], levels[j], horizon, "mase",
                   mase([med], [y[j]], tr[:, j]))
        report.add(labels[j], levels[j], horizon, "mis",
                   mis_from_samples(s[:, j], y[j], alpha))
    report.add("__all__", "", horizon, "energy_score", energy_score(s, y))
    return report


def skill_report(new: ScoreReport, base: ScoreReport) -> ScoreReport:
    """Per-row skill of ``new`` against ``base`` for every shared row key."""
    out = ScoreReport()
    base_by_key = {(r.series, r.level, r.horizon, r.metric): r.value
                   for r in base.rows}
    for r in new.rows:
        key = (r.series, r.level, r.horizon, r.metric)
        if key in base_by_key:
            out.add(r.series, r.level, r.horizon, f"skill_{r.metric}",
                    skill_score(r.value, base_by_key[key]))
    return out
