"""Reconciliation of base forecasts by conditioning on summing constraints.

The reconciled bottom distribution is proportional to the base joint
density restricted to the coherent subspace: with independent marginals,
``target(b) = prod_j bottom_j(b_j) * prod_c upper_c((A b)_c)``.  This
module offers several ways to work with that target:

* an exact Gaussian closed form,
* self-normalised importance sampling with the bottom forecasts as proposal,
* a bottom-up weight-and-resample pass over tree levels that factors the
  problem into one-dimensional steps,
* the grouped variant (tree pass as proposal, residual constraints as
  importance weights),
* a random-walk Metropolis-Hastings baseline,
* a brute-force enumerator for small discrete instances, and
* classic point reconciliation (bottom-up, trace-minimising projection).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .distributions import (
    EmpiricalDiscrete,
    ForecastDistribution,
    Gaussian,
    NegativeBinomial,
    Poisson,
    empirical_pmf,
)
from .errors import (
    AllZeroWeightsError,
    DimensionError,
    SingularMatrixError,
    SupportTooLargeError,
    ZeroDensityStartError,
)
from .hierarchy import (
    GroupedStructure,
    Hierarchy,
    Structure,
    structure_digest,
    tree_of,
)
from .rng import substreams

__all__ = [
    "BaseForecasts",
    "WeightedSample",
    "ReconciledSamples",
    "GaussianReconciled",
    "DiscretePosterior",
    "reconcile_gaussian",
    "plain_is",
    "resample",
    "buis",
    "buis_sample_based",
    "buis_grouped",
    "mh_reconcile",
    "bruteforce_discrete",
    "point_reconcile",
    "effective_sample_size",
]


@dataclass(frozen=True, eq=False)
class BaseForecasts:
    """Independent base marginals: one per bottom series, one per constraint.

    ``upper`` is aligned with the structure's constraint row order.
    """

    bottom: tuple
    upper: tuple

    def __post_init__(self):
        object.__setattr__(self, "bottom", tuple(self.bottom))
        object.__setattr__(self, "upper", tuple(self.upper))

    def validate(self, structure: Structure) -> None:
        if len(self.bottom) != structure.n_bottom:
            raise DimensionError(
                f"expected {structure.n_bottom} bottom forecasts, "
                f"got {len(self.bottom)}"
            )
        if len(self.upper) != structure.n_upper:
            raise DimensionError(
                f"expected {structure.n_upper} upper forecasts, "
                f"got {len(self.upper)}"
            )


@dataclass(eq=False)
class WeightedSample:
    """Bottom-vector particles with normalised importance weights."""

    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.particles = np.asarray(self.particles)
        w = np.asarray(self.weights, dtype=float)
        if self.particles.ndim != 2 or self.particles.shape[0] < 1:
            raise DimensionError("particles must be a nonempty N x m matrix")
        if w.shape != (self.particles.shape[0],):
            raise DimensionError("one weight per particle required")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise AllZeroWeightsError("weights sum to zero")
        self.weights = w / total

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles


@dataclass(eq=False)
class ReconciledSamples:
    """Unweighted bottom-vector particles plus provenance."""

    particles: np.ndarray
    method: str
    seed: int | None = None
    structure_digest: str | None = None
    ess: float | None = None
    acceptance_rate: float | None = None

    def mean(self) -> np.ndarray:
        return self.particles.mean(axis=0)


@dataclass(eq=False)
class GaussianReconciled:
    """Exact reconciled Gaussian: mean vector and covariance of the bottoms."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (self.mean.size, self.mean.size):
            raise DimensionError("covariance shape must match the mean")
        if np.max(np.abs(cov - cov.T)) > 1e-10:
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.min(np.linalg.eigvalsh(cov)) < -1e-8:
            raise ValueError("covariance has a significantly negative eigenvalue")
        self.covariance = cov

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


# --------------------------------------------------------------------------
# weights


def _normalize_log_weights(log_w: np.ndarray, node: str | None = None) -> np.ndarray:
    """Exp-normalise with max subtraction; error if every weight is zero."""
    log_w = np.asarray(log_w, dtype=float)
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    m = np.max(log_w)
    if m == -np.inf:
        where = f" at node {node}" if node else ""
        raise AllZeroWeightsError(
            f"all particles have zero weight{where}; the upper forecast does "
            "not overlap the particle sums", node=node)
    w = np.exp(log_w - m)
    return w / w.sum()


def effective_sample_size(weights) -> float:
    """Kish effective sample size, 1 / sum(w^2) for normalised weights."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must have positive sum")
    return float(total ** 2 / np.sum(w ** 2))


def resample(particles, weights, n_out: int, rng,
             scheme: str = "multinomial") -> np.ndarray:
    """Draw ``n_out`` particles with replacement, proportionally to weight.

    ``multinomial`` (the default) draws i.i.d. indices; ``systematic`` uses
    a single uniform offset with evenly spaced positions.
    """
    particles = np.asarray(particles)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    gen = substreams(rng, 1)[0]
    idx = _resample_indices(w, int(n_out), gen, scheme)
    return particles[idx]


def _resample_indices(w: np.ndarray, n_out: int, rng: np.random.Generator,
                      scheme: str) -> np.ndarray:
    if scheme == "multinomial":
        return rng.choice(w.shape[0], size=n_out, replace=True, p=w)
    if scheme == "systematic":
        positions = (rng.random() + np.arange(n_out)) / n_out
        return np.searchsorted(np.cumsum(w), positions).clip(0, w.shape[0] - 1)
    raise ValueError(f"unknown resampling scheme: {scheme!r}")


# --------------------------------------------------------------------------
# analytical Gaussian reconciliation


def _gaussian_params(dists, kind: str):
    mus, sds = [], []
    for d in dists:
        if not isinstance(d, Gaussian):
            raise ValueError(
                f"analytical reconciliation needs Gaussian {kind} forecasts, "
                f"got {type(d).__name__}"
            )
        mus.append(d.mu)
        sds.append(d.sigma)
    return np.asarray(mus, dtype=float), np.asarray(sds, dtype=float)


def reconcile_gaussian(structure: Structure, base: BaseForecasts) -> GaussianReconciled:
    """Condition independent Gaussian marginals on the summing constraints.

    With bottom moments (m_b, S_b) and upper moments (m_u, S_u), the
    reconciled bottom distribution is Gaussian with

        mean = m_b + S_b A' K^-1 (m_u - A m_b),   K = S_u + A S_b A'
        cov  = S_b - S_b A' K^-1 A S_b
    """
    base.validate(structure)
    m_b, sd_b = _gaussian_params(base.bottom, "bottom")
    m_u, sd_u = _gaussian_params(base.upper, "upper")
    if structure.n_upper == 0:
        return GaussianReconciled(mean=m_b, covariance=np.diag(sd_b ** 2))
    a = structure.aggregating_matrix()
    sigma_b = np.diag(sd_b ** 2)
    k = np.diag(sd_u ** 2) + a @ sigma_b @ a.T
    try:
        gain = np.linalg.solve(k, np.eye(k.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"upper-sum covariance is singular: {exc}") from exc
    if not np.all(np.isfinite(gain)):
        raise SingularMatrixError("upper-sum covariance is numerically singular")
    cross = sigma_b @ a.T
    mean = m_b + cross @ gain @ (m_u - a @ m_b)
    cov = sigma_b - cross @ gain @ cross.T
    cov = 0.5 * (cov + cov.T)
    return GaussianReconciled(mean=mean, covariance=cov)


# --------------------------------------------------------------------------
# importance sampling


def _draw_bottom_particles(base: BaseForecasts, n: int, streams, offset: int):
    cols = [np.asarray(base.bottom[j].draw(n, streams[offset + j]))
            for j in range(len(base.bottom))]
    return np.column_stack(cols) if cols else np.empty((n, 0))


def plain_is(structure: Structure, base: BaseForecasts, n_particles: int,
             rng) -> WeightedSample:
    """Importance sampling with the bottom forecasts as proposal.

    Particles come from the bottom marginals; the unnormalised log weight
    of a particle is the summed upper log density at its aggregates.
    This degrades quickly with many constraints or large incoherence.
    """
    base.validate(structure)
    n = int(n_particles)
    if n < 1:
        raise ValueError("n_particles must be >= 1")
    n_upper = structure.n_upper
    streams = substreams(rng, n_upper + structure.n_bottom)
    particles = _draw_bottom_particles(base, n, streams, n_upper)
    log_w = np.zeros(n)
    if n_upper:
        sums = particles @ structure.aggregating_matrix().T
        for c in range(n_upper):
            log_w += base.upper[c].log_density(sums[:, c])
    weights = _normalize_log_weights(log_w)
    return WeightedSample(particles=particles, weights=weights)


def _upper_rows(h: Hierarchy):
    """(level, position, leaf tuple, canonical row index) in bottom-up order."""
    rows = {}
    r = 0
    for li in reversed(range(len(h.levels))):
        for ni in range(len(h.levels[li])):
            rows[(li, ni)] = r
            r += 1
    for li in range(len(h.levels)):
        for ni, leaves in enumerate(h.levels[li]):
            yield li, ni, leaves, rows[(li, ni)]


def _node_log_weight_fn(dist: ForecastDistribution, pmf_floor: float):
    if pmf_floor > 0 and isinstance(dist, EmpiricalDiscrete):
        return empirical_pmf(dist.samples, floor=pmf_floor).log_evaluate
    return dist.log_density


def buis(structure, base: BaseForecasts, n_particles: int, rng, *,
         pmf_floor: float = 0.0, resampling: str = "multinomial",
         _method_tag: str = "buis") -> ReconciledSamples:
    """Bottom-up weight-and-resample pass over the tree levels.

    Particles start as draws from the bottom marginals.  For each level,
    from the bottom up, every node weights the particles by its upper
    density evaluated at the node's leaf sums, then resamples its whole
    leaf block jointly (never per coordinate).  After the top level the
    particles approximate the reconciled distribution.

    The structure must be a tree (:class:`~probreconc.errors.NotATreeError`
    otherwise).  A node whose weights all vanish raises
    :class:`~probreconc.errors.AllZeroWeightsError` naming the node.
    """
    h, upper_map = tree_of(structure)
    base.validate(structure)
    n = int(n_particles)
    if n < 1:
        raise ValueError("n_particles must be >= 1")
    streams = substreams(rng, h.n_upper + h.n_bottom)
    particles = _draw_bottom_particles(base, n, streams, h.n_upper)
    for level, pos, leaves, row in _upper_rows(h):
        dist = base.upper[upper_map[row]]
        log_w = _node_log_weight_fn(dist, pmf_floor)(
            particles[:, leaves].sum(axis=1))
        node_name = f"u[level={level + 1},node={pos}]"
        weights = _normalize_log_weights(log_w, node=node_name)
        idx = _resample_indices(weights, n, streams[row], resampling)
        cols = np.asarray(leaves)
        particles[np.ix_(np.arange(n), cols)] = particles[np.ix_(idx, cols)]
    return ReconciledSamples(
        particles=particles,
        method=_method_tag,
        seed=rng if isinstance(rng, int) else None,
        structure_digest=structure_digest(structure),
    )


def buis_sample_based(structure, base: BaseForecasts, n_particles: int, rng, *,
                      pmf_floor: float = 0.0,
                      resampling: str = "multinomial") -> ReconciledSamples:
    """Bottom-up pass with sample-backed upper forecasts.

    Identical to :func:`buis` except the weight function of an empirical
    upper node is a density estimate built from that node's stored samples:
    an empirical pmf for counts (optionally floored via ``pmf_floor``), a
    Gaussian KDE for real-valued samples.  Both estimators are what the
    empirical families already use for ``log_density``, so analytic and
    empirical uppers can be mixed freely.
    """
    return buis(structure, base, n_particles, rng, pmf_floor=pmf_floor,
                resampling=resampling, _method_tag="buis_samples")


def buis_grouped(structure, base: BaseForecasts, n_particles: int, rng, *,
                 pmf_floor: float = 0.0,
                 resampling: str = "multinomial") -> WeightedSample:
    """Grouped-structure reconciliation: tree pass plus residual weighting.

    Runs the bottom-up pass on the structure's tree part, then weights the
    resulting particles by the residual constraints' upper densities, which
    is plain importance sampling with the tree output as proposal.  The
    importance-sampling dimension is only the residual constraint count.
    With no residual constraints the weights are uniform.
    """
    if isinstance(structure, Hierarchy):
        rs = buis(structure, base, n_particles, rng,
                  pmf_floor=pmf_floor, resampling=resampling)
        n = rs.particles.shape[0]
        return WeightedSample(particles=rs.particles, weights=np.full(n, 1.0 / n))
    if not isinstance(structure, GroupedStructure):
        raise TypeError(f"not a structure: {type(structure).__name__}")
    base.validate(structure)
    sub_base = BaseForecasts(
        bottom=base.bottom,
        upper=tuple(base.upper[i] for i in structure.sub_index),
    )
    tree_rng, = substreams(rng, 1)
    rs = buis(structure.subhierarchy, sub_base, n_particles, tree_rng,
              pmf_floor=pmf_floor, resampling=resampling)
    particles = rs.particles
    n = particles.shape[0]
    if not structure.extra_constraints:
        return WeightedSample(particles=particles, weights=np.full(n, 1.0 / n))
    log_w = np.zeros(n)
    for leaves, c in zip(structure.extra_constraints, structure.extra_index):
        log_w += _node_log_weight_fn(base.upper[c], pmf_floor)(
            particles[:, leaves].sum(axis=1))
    weights = _normalize_log_weights(log_w, node="residual constraints")
    return WeightedSample(particles=particles, weights=weights)


# --------------------------------------------------------------------------
# Metropolis-Hastings baseline


class _JointLogDensity:
    """Vectorised log target over chain states, grouped by marginal family."""

    def __init__(self, structure: Structure, base: BaseForecasts):
        base.validate(structure)
        self.a = structure.aggregating_matrix()
        self.bottom_groups = self._group(base.bottom)
        self.upper_groups = self._group(base.upper)

    @staticmethod
    def _group(dists):
        gauss_idx, gauss_mu, gauss_sd = [], [], []
        pois_idx, pois_rate = [], []
        nb_idx, nb_mu, nb_r = [], [], []
        other = []
        for i, d in enumerate(dists):
            if isinstance(d, Gaussian):
                gauss_idx.append(i); gauss_mu.append(d.mu); gauss_sd.append(d.sigma)
            elif isinstance(d, Poisson):
                pois_idx.append(i); pois_rate.append(d.rate)
            elif isinstance(d, NegativeBinomial):
                nb_idx.append(i); nb_mu.append(d.mu); nb_r.append(d.dispersion)
            else:
                other.append((i, d))
        groups = []
        if gauss_idx:
            groups.append(("gaussian", np.asarray(gauss_idx),
                           (np.asarray(gauss_mu), np.asarray(gauss_sd))))
        if pois_idx:
            groups.append(("poisson", np.asarray(pois_idx),
                           (np.asarray(pois_rate),)))
        if nb_idx:
            groups.append(("negbin", np.asarray(nb_idx),
                           (np.asarray(nb_mu), np.asarray(nb_r))))
        for i, d in other:
            groups.append(("other", np.asarray([i]), (d,)))
        return groups

    @staticmethod
    def _eval_group(kind, params, x):
        from scipy.special import gammaln

        if kind == "gaussian":
            mu, sd = params
            z = (x - mu) / sd
            return (-0.5 * z * z - np.log(sd) - 0.5 * np.log(2 * np.pi)).sum(axis=-1)
        ok = (x >= 0) & (x == np.floor(x))
        k = np.where(ok, x, 0.0)
        if kind == "poisson":
            rate, = params
            lp = k * np.log(rate) - rate - gammaln(k + 1.0)
        else:
            mu, r = params
            lp = (gammaln(k + r) - gammaln(r) - gammaln(k + 1.0)
                  + r * np.log(r / (r + mu)) + k * np.log(mu / (r + mu)))
        return np.where(ok, lp, -np.inf).sum(axis=-1)

    def _sum_groups(self, groups, x):
        total = np.zeros(x.shape[0])
        for kind, idx, params in groups:
            if kind == "other":
                total += params[0].log_density(x[:, idx[0]])
            else:
                total += self._eval_group(kind, params, x[:, idx])
        return total

    def __call__(self, b: np.ndarray) -> np.ndarray:
        total = self._sum_groups(self.bottom_groups, b)
        if self.a.shape[0]:
            total += self._sum_groups(self.upper_groups, b @ self.a.T)
        return total


def mh_reconcile(structure: Structure, base: BaseForecasts, n_samples: int,
                 burn_in: int | None = None, tau: float = 1.0, rng=None, *,
                 thin: int = 1, chains: int = 1) -> ReconciledSamples:
    """Random-walk Metropolis-Hastings targeting the reconciled density.

    Proposals are Gaussian steps with variance ``tau`` per coordinate for
    real-valued bottoms, and uniform {-1, 0, +1} integer steps for count
    bottoms.  Chains start at the bottom means; a zero-density start raises
    :class:`~probreconc.errors.ZeroDensityStartError`.  ``burn_in`` steps
    (default ``n_samples // 4``) are discarded per chain, after which every
    ``thin``-th state is recorded; ``chains`` chains run side by side and
    their draws are concatenated.  The returned provenance includes the
    overall acceptance rate.
    """
    n_samples = int(n_samples)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if burn_in is None:
        burn_in = n_samples // 4
    burn_in = max(int(burn_in), 1)
    thin = max(int(thin), 1)
    chains = max(int(chains), 1)
    if tau <= 0:
        raise ValueError("tau must be positive")

    target = _JointLogDensity(structure, base)
    m = structure.n_bottom
    discrete = np.array([d.is_discrete for d in base.bottom], dtype=bool)
    cont_idx = np.flatnonzero(~discrete)
    disc_idx = np.flatnonzero(discrete)

    init = np.array([d.mean() for d in base.bottom], dtype=float)
    init[disc_idx] = np.round(init[disc_idx])
    state = np.tile(init, (chains, 1))
    cur_lp = target(state)
    if not np.all(np.isfinite(cur_lp)):
        raise ZeroDensityStartError(
            "initial point has zero target density; supply coherent-support "
            "base forecasts or a different start"
        )

    per_chain = -(-n_samples // chains)  # ceil
    total_steps = burn_in + (per_chain - 1) * thin + 1
    out = np.empty((chains, per_chain, m))
    gen = substreams(rng if rng is not None else 0, 1)[0]
    sd = float(np.sqrt(tau))

    accepted = 0
    chunk_size = 4096
    step = 0
    while step < total_steps:
        todo = min(chunk_size, total_steps - step)
        eps = (gen.normal(0.0, sd, size=(todo, chains, cont_idx.size))
               if cont_idx.size else None)
        jumps = (gen.integers(-1, 2, size=(todo, chains, disc_idx.size))
                 if disc_idx.size else None)
        log_u = np.log(gen.random(size=(todo, chains)))
        for t in range(todo):
            prop = state.copy()
            if eps is not None:
                prop[:, cont_idx] += eps[t]
            if jumps is not None:
                prop[:, disc_idx] += jumps[t]
            lp = target(prop)
            accept = log_u[t] < (lp - cur_lp)
            state[accept] = prop[accept]
            cur_lp[accept] = lp[accept]
            accepted += int(accept.sum())
            k = step + t
            if k >= burn_in and (k - burn_in) % thin == 0:
                out[:, (k - burn_in) // thin, :] = state
        step += todo

    particles = out.reshape(chains * per_chain, m)[:n_samples]
    if disc_idx.size == m:
        particles = particles.astype(np.int64)
    return ReconciledSamples(
        particles=particles,
        method="mh",
        seed=rng if isinstance(rng, int) else None,
        structure_digest=structure_digest(structure),
        acceptance_rate=accepted / (total_steps * chains),
    )


# --------------------------------------------------------------------------
# brute-force oracle for small discrete instances


@dataclass(eq=False)
class DiscretePosterior:
    """Exact reconciled pmf over the truncated bottom grid [0, cap]^m."""

    values: np.ndarray
    log_pmf: np.ndarray
    pmf: np.ndarray
    support_cap: int

    def marginal(self, j: int) -> np.ndarray:
        """pmf of bottom coordinate ``j`` over 0..support_cap."""
        return np.bincount(self.values[:, j], weights=self.pmf,
                           minlength=self.support_cap + 1)

    def mean(self) -> np.ndarray:
        return self.pmf @ self.values


def bruteforce_discrete(structure: Structure, base: BaseForecasts,
                        support_cap: int) -> DiscretePosterior:
    """Enumerate every bottom vector in [0, cap]^m and normalise exactly.

    The unnormalised weight of a grid point b is the product of the bottom
    pmfs at b and the upper pmfs at A b.  Serves as the reference for
    sampling-based results on small count hierarchies.
    """
    base.validate(structure)
    m = structure.n_bottom
    cap = int(support_cap)
    if cap < 0:
        raise ValueError("support_cap must be nonnegative")
    size = (cap + 1) ** m
    if size > 10 ** 7:
        raise SupportTooLargeError(
            f"grid of {(cap + 1)}^{m} = {size} points exceeds 1e7"
        )
    for d in list(base.bottom) + list(base.upper):
        if not d.is_discrete:
            raise ValueError("brute-force enumeration needs discrete forecasts")
    grid = np.indices((cap + 1,) * m).reshape(m, -1).T.astype(np.int64)
    log_p = np.zeros(grid.shape[0])
    for j in range(m):
        log_p += base.bottom[j].log_density(grid[:, j])
    if structure.n_upper:
        sums = grid @ structure.aggregating_matrix().T
        for c in range(structure.n_upper):
            log_p += base.upper[c].log_density(sums[:, c])
    norm = logsumexp(log_p)
    if norm == -np.inf:
        raise AllZeroWeightsError("the truncated grid carries no mass")
    log_pmf = log_p - norm
    return DiscretePosterior(values=grid, log_pmf=log_pmf,
                             pmf=np.exp(log_pmf), support_cap=cap)


# --------------------------------------------------------------------------
# point reconciliation


def point_reconcile(y_hat, structure: Structure, method: str = "bottom_up",
                    W=None) -> np.ndarray:
    """Project incoherent point forecasts onto the coherent subspace.

    ``bottom_up`` keeps the bottom entries and re-derives the uppers.
    ``mint`` uses the trace-minimising combination
    ``b = (S' W^-1 S)^-1 S' W^-1 y_hat`` for a symmetric positive-definite
    error covariance ``W``.  Returns the full coherent vector ``S b``.
    """
    y = np.asarray(y_hat, dtype=float).reshape(-1)
    n = structure.n_total
    if y.shape[0] != n:
        raise DimensionError(f"expected vector of length {n}, got {y.shape[0]}")
    s = structure.summing_matrix()
    if method == "bottom_up":
        b = y[structure.n_upper:]
    elif method == "mint":
        if W is None:
            raise ValueError("mint requires the error covariance W")
        w = np.asarray(W, dtype=float)
        if w.shape != (n, n):
            raise DimensionError(f"W must be {n} x {n}")
        try:
            winv_s = np.linalg.solve(w, s)
            winv_y = np.linalg.solve(w, y)
            b = np.linalg.solve(s.T @ winv_s, s.T @ winv_y)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError(str(exc)) from exc
        if not np.all(np.isfinite(b)):
            raise SingularMatrixError("mint combination is numerically singular")
    else:
        raise ValueError(f"unknown method: {method!r}")
    return s @ b
