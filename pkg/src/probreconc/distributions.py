"""Base forecast marginals and sample-based density estimators.

A forecast marginal is one of: Gaussian, Poisson, negative binomial, or an
empirical distribution backed by stored samples.  All families expose
``log_density`` (vectorised, natural log, -inf outside support), ``draw``
and ``mean``.  Marginals are immutable and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DegenerateSampleError, UnderdispersedError

_LOG_2PI = float(np.log(2.0 * np.pi))

# beyond this many samples a KDE/pmf is evaluated through a binned basis
_KDE_EXACT_MAX = 2048
_KDE_BINS = 2048


def _discrete_logpmf_mask(x):
    """(values as float array, mask of nonnegative-integer entries)."""
    x = np.asarray(x, dtype=float)
    ok = (x >= 0) & (x == np.floor(x)) & np.isfinite(x)
    return x, ok


class ForecastDistribution:
    """Shared surface of all forecast marginals."""

    is_discrete: bool = False

    def log_density(self, x):
        raise NotImplementedError

    def density(self, x):
        return np.exp(self.log_density(x))

    def draw(self, n: int, rng: np.random.Generator):
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Gaussian(ForecastDistribution):
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def log_density(self, x):
        z = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        return -0.5 * z * z - np.log(self.sigma) - 0.5 * _LOG_2PI

    def draw(self, n, rng):
        return rng.normal(self.mu, self.sigma, size=n)

    def mean(self):
        return float(self.mu)


@dataclass(frozen=True, eq=False)
class Poisson(ForecastDistribution):
    rate: float
    is_discrete = True

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")

    def log_density(self, x):
        x, ok = _discrete_logpmf_mask(x)
        k = np.where(ok, x, 0.0)
        lp = k * np.log(self.rate) - self.rate - gammaln(k + 1.0)
        return np.where(ok, lp, -np.inf)

    def draw(self, n, rng):
        return rng.poisson(self.rate, size=n)

    def mean(self):
        return float(self.rate)


@dataclass(frozen=True, eq=False)
class NegativeBinomial(ForecastDistribution):
    """Mean/dispersion parameterisation: variance = mean + mean^2 / dispersion."""

    mu: float
    dispersion: float
    is_discrete = True

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mean must be positive, got {self.mu}")
        if not self.dispersion > 0:
            raise ValueError(f"dispersion must be positive, got {self.dispersion}")

    def log_density(self, x):
        r, mu = self.dispersion, self.mu
        x, ok = _discrete_logpmf_mask(x)
        k = np.where(ok, x, 0.0)
        lp = (gammaln(k + r) - gammaln(r) - gammaln(k + 1.0)
              + r * np.log(r / (r + mu)) + k * np.log(mu / (r + mu)))
        return np.where(ok, lp, -np.inf)

    def draw(self, n, rng):
        p = self.dispersion / (self.dispersion + self.mu)
        return rng.negative_binomial(self.dispersion, p, size=n)

    def mean(self):
        return float(self.mu)

    def variance(self):
        return float(self.mu + self.mu ** 2 / self.dispersion)


@dataclass(frozen=True, eq=False)
class EmpiricalDiscrete(ForecastDistribution):
    """Count forecast given as samples; pmf is the empirical frequency."""

    samples: np.ndarray
    is_discrete = True

    def __post_init__(self):
        arr = np.asarray(self.samples)
        if arr.size == 0:
            raise DegenerateSampleError("empirical distribution needs samples")
        if np.any(arr < 0) or not np.all(arr == np.floor(arr)):
            raise ValueError("discrete samples must be nonnegative integers")
        object.__setattr__(self, "samples", arr.astype(np.int64))

    @cached_property
    def _pmf(self) -> "EmpiricalPmf":
        return empirical_pmf(self.samples, floor=0.0)

    def log_density(self, x):
        return self._pmf.log_evaluate(x)

    def draw(self, n, rng):
        return rng.choice(self.samples, size=n, replace=True)

    def mean(self):
        return float(self.samples.mean())


@dataclass(frozen=True, eq=False)
class EmpiricalContinuous(ForecastDistribution):
    """Real-valued forecast given as samples; density is a Gaussian KDE."""

    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.size == 0:
            raise DegenerateSampleError("empirical distribution needs samples")
        object.__setattr__(self, "samples", arr)

    @cached_property
    def _kde(self) -> "KernelDensity":
        return kde_fit(self.samples)

    def log_density(self, x):
        return self._kde.log_evaluate(x)

    def draw(self, n, rng):
        return rng.choice(self.samples, size=n, replace=True)

    def mean(self):
        return float(self.samples.mean())


# --------------------------------------------------------------------------
# density estimators used by the sample-based weighting step


@dataclass(frozen=True, eq=False)
class KernelDensity:
    """Gaussian-kernel density built from samples.

    Evaluation is exact (one kernel per sample) up to 2048 samples; larger
    samples are binned onto 2048 equal-width cells and the kernels are
    placed at the cell centres with the cell frequencies as weights, which
    keeps evaluation cost bounded.  ``log_evaluate`` stays finite far into
    the tails, so downstream log-space weighting never sees hard zeros.
    """

    centers: np.ndarray
    log_weights: np.ndarray
    bandwidth: float

    def log_evaluate(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty(x.shape[0], dtype=float)
        const = -np.log(self.bandwidth) - 0.5 * _LOG_2PI
        chunk = max(1, (1 << 22) // max(1, self.centers.size))
        for start in range(0, x.shape[0], chunk):
            xs = x[start:start + chunk, None]
            z = (xs - self.centers[None, :]) / self.bandwidth
            out[start:start + chunk] = logsumexp(
                -0.5 * z * z + self.log_weights[None, :], axis=1)
        return out + const

    def evaluate(self, x):
        scalar = np.isscalar(x)
        val = np.exp(self.log_evaluate(x))
        return float(val[0]) if scalar else val


@dataclass(frozen=True, eq=False)
class EmpiricalPmf:
    """Empirical pmf over 0..support_max with a floor on unseen values.

    Observed values get their sample frequency; unobserved nonnegative
    integers up to twice the sample maximum get ``floor``; everything else
    has probability zero.
    """

    table: np.ndarray
    floor: float

    @property
    def support_max(self) -> int:
        return self.table.shape[0] - 1

    def evaluate(self, x):
        scalar = np.isscalar(x)
        x, ok = _discrete_logpmf_mask(np.atleast_1d(x))
        ok &= x <= self.support_max
        idx = np.where(ok, x, 0.0).astype(np.int64)
        val = np.where(ok, self.table[idx], 0.0)
        return float(val[0]) if scalar else val

    def log_evaluate(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.evaluate(x))


def kde_fit(samples) -> KernelDensity:
    """Gaussian KDE with the usual rule-of-thumb bandwidth.

    Bandwidth is ``0.9 * min(sd, IQR/1.34) * N^(-1/5)``; when the IQR is
    zero the spread term falls back to the sd alone.  Needs at least two
    distinct values, otherwise :class:`DegenerateSampleError`.
    """
    s = np.asarray(samples, dtype=float).reshape(-1)
    if s.size < 2 or np.all(s == s[0]):
        raise DegenerateSampleError("need at least two distinct sample values")
    sd = float(np.std(s, ddof=1))
    q75, q25 = np.quantile(s, [0.75, 0.25])
    iqr = float(q75 - q25)
    scale = min(sd, iqr / 1.34) if iqr > 0 else sd
    bw = 0.9 * scale * s.size ** (-0.2)
    if s.size <= _KDE_EXACT_MAX:
        centers = s
        log_w = np.full(s.size, -np.log(s.size))
    else:
        counts, edges = np.histogram(s, bins=_KDE_BINS)
        keep = counts > 0
        centers = (0.5 * (edges[:-1] + edges[1:]))[keep]
        log_w = np.log(counts[keep]) - np.log(s.size)
    return KernelDensity(centers=centers, log_weights=log_w, bandwidth=float(bw))


def empirical_pmf(samples, floor: float = 0.0) -> EmpiricalPmf:
    """Frequency table over 0..2*max(samples), with ``floor`` at unseen values."""
    s = np.asarray(samples)
    if s.size == 0:
        raise DegenerateSampleError("need at least one sample")
    if np.any(s < 0) or not np.all(s == np.floor(s)):
        raise ValueError("samples must be nonnegative integers")
    if floor < 0:
        raise ValueError("floor must be nonnegative")
    s = s.astype(np.int64)
    support_max = 2 * int(s.max())
    table = np.bincount(s, minlength=support_max + 1).astype(float) / s.size
    if floor > 0:
        table = np.where(table == 0.0, floor, table)
    return EmpiricalPmf(table=table, floor=float(floor))


# --------------------------------------------------------------------------
# fitting distributions to reconciled samples


def fit_gaussian(samples) -> Gaussian:
    """Moment fit: sample mean and sd (denominator N-1)."""
    s = np.asarray(samples, dtype=float).reshape(-1)
    if s.size < 2:
        raise DegenerateSampleError("need at least two samples")
    sd = float(np.std(s, ddof=1))
    if sd == 0:
        raise DegenerateSampleError("all samples equal; sd is zero")
    return Gaussian(mu=float(np.mean(s)), sigma=sd)


def fit_negbin(samples) -> NegativeBinomial:
    """Method-of-moments fit; requires variance > mean > 0.

    dispersion = mean^2 / (variance - mean).  Raises
    :class:`UnderdispersedError` when variance <= mean, in which case a
    Poisson with the sample mean is the usual fallback.
    """
    s = np.asarray(samples, dtype=float).reshape(-1)
    if s.size < 2:
        raise DegenerateSampleError("need at least two samples")
    mean = float(np.mean(s))
    var = float(np.var(s, ddof=1))
    if mean <= 0:
        raise UnderdispersedError(f"sample mean must be positive, got {mean}")
    if var <= mean:
        raise UnderdispersedError(
            f"variance {var:.4g} <= mean {mean:.4g}: no negative binomial fits"
        )
    return NegativeBinomial(mu=mean, dispersion=mean ** 2 / (var - mean))


# --------------------------------------------------------------------------
# JSON (de)serialisation of forecast sets

_FAMILY_TAGS = {
    "gaussian": Gaussian,
    "poisson": Poisson,
    "negbin": NegativeBinomial,
    "samples_discrete": EmpiricalDiscrete,
    "samples_continuous": EmpiricalContinuous,
}


def distribution_to_json(d: ForecastDistribution) -> dict:
    if isinstance(d, Gaussian):
        return {"family": "gaussian", "params": {"mean": d.mu, "sd": d.sigma}}
    if isinstance(d, Poisson):
        return {"family": "poisson", "params": {"rate": d.rate}}
    if isinstance(d, NegativeBinomial):
        return {"family": "negbin",
                "params": {"mean": d.mu, "dispersion": d.dispersion}}
    if isinstance(d, EmpiricalDiscrete):
        return {"family": "samples_discrete",
                "params": {"samples": d.samples.tolist()}}
    if isinstance(d, EmpiricalContinuous):
        return {"family": "samples_continuous",
                "params": {"samples": d.samples.tolist()}}
    raise TypeError(f"unknown distribution type: {type(d).__name__}")


def distribution_from_json(entry: dict, base_dir=None) -> ForecastDistribution:
    """Parse one forecast entry.

    Sample-based entries hold either an inline ``samples`` array or a
    ``{"csv": path, "column": name}`` reference resolved against
    ``base_dir``.
    """
    family = entry.get("family")
    params = entry.get("params", {})
    if family == "gaussian":
        return Gaussian(mu=float(params["mean"]), sigma=float(params["sd"]))
    if family == "poisson":
        return Poisson(rate=float(params["rate"]))
    if family == "negbin":
        return NegativeBinomial(mu=float(params["mean"]),
                                dispersion=float(params["dispersion"]))
    if family in ("samples_discrete", "samples_continuous"):
        if "samples" in params:
            samples = np.asarray(params["samples"])
        elif "csv" in params:
            samples = _read_csv_column(params["csv"], params.get("column"),
                                       base_dir)
        else:
            raise ValueError(f"{family} entry needs 'samples' or 'csv'")
        cls = _FAMILY_TAGS[family]
        return cls(samples=samples)
    raise ValueError(f"unknown forecast family: {family!r}")


def _read_csv_column(path, column, base_dir):
    import csv
    from pathlib import Path

    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = Path(base_dir) / p
    with open(p, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if column is None:
            col = 0
        else:
            try:
                col = header.index(str(column))
            except ValueError as exc:
                raise ValueError(f"column {column!r} not in {p}") from exc
        values = [float(row[col]) for row in reader if row]
    return np.asarray(values)
