"""Tests for forecast marginals, estimators and fitting."""

import numpy as np
import pytest
from scipy.stats import nbinom as scipy_nbinom
from scipy.stats import norm

from probreconc import (
    EmpiricalContinuous,
    EmpiricalDiscrete,
    Gaussian,
    NegativeBinomial,
    Poisson,
    empirical_pmf,
    fit_gaussian,
    fit_negbin,
    kde_fit,
)
from probreconc.errors import DegenerateSampleError, UnderdispersedError


def rng(seed=0):
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# log densities


def test_gaussian_logpdf_at_mode():
    assert Gaussian(0, 1).log_density(0.0) == pytest.approx(
        -0.5 * np.log(2 * np.pi))


def test_poisson_logpmf_at_zero():
    assert Poisson(4).log_density(0) == pytest.approx(-4.0)


def test_poisson_logpmf_outside_support():
    d = Poisson(4)
    assert d.log_density(-1) == -np.inf
    assert d.log_density(2.5) == -np.inf


def test_negbin_logpmf_matches_independent_implementation():
    d = NegativeBinomial(5.0, 2.0)
    r, mu = 2.0, 5.0
    ref = scipy_nbinom.logpmf(3, r, r / (r + mu))
    assert d.log_density(3) == pytest.approx(ref, abs=1e-12)


def test_negbin_pmf_sums_to_one():
    d = NegativeBinomial(5.0, 2.0)
    ks = np.arange(0, 400)  # tail mass beyond is < 1e-12
    total = np.exp(d.log_density(ks)).sum()
    assert total == pytest.approx(1.0, abs=1e-9)


def test_poisson_pmf_sums_to_one():
    total = np.exp(Poisson(7.0).log_density(np.arange(0, 200))).sum()
    assert total == pytest.approx(1.0, abs=1e-9)


def test_gaussian_density_integrates_to_one():
    d = Gaussian(3.0, 2.0)
    x = np.linspace(3 - 20, 3 + 20, 40001)
    assert np.trapezoid(d.density(x), x) == pytest.approx(1.0, abs=1e-6)


def test_negbin_variance_parameterisation():
    d = NegativeBinomial(5.0, 2.0)
    assert d.variance() == pytest.approx(5.0 + 25.0 / 2.0)


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        Gaussian(0, 0)
    with pytest.raises(ValueError):
        Poisson(0)
    with pytest.raises(ValueError):
        NegativeBinomial(5, 0)


# --------------------------------------------------------------------------
# sampling


def test_poisson_draw_mean_clt_bound():
    x = Poisson(7.0).draw(100_000, rng(1))
    assert abs(x.mean() - 7.0) <= 4 * np.sqrt(7.0 / 100_000)


def test_gaussian_draw_sd_clt_bound():
    x = Gaussian(5.0, 2.0).draw(100_000, rng(2))
    assert abs(np.std(x, ddof=1) - 2.0) <= 0.03


def test_negbin_draw_moments():
    d = NegativeBinomial(5.0, 2.0)
    x = d.draw(200_000, rng(3))
    assert x.mean() == pytest.approx(5.0, rel=0.02)
    assert np.var(x, ddof=1) == pytest.approx(d.variance(), rel=0.05)


def test_empirical_single_atom_draw():
    d = EmpiricalDiscrete(np.array([3]))
    assert np.array_equal(d.draw(5, rng(0)), [3, 3, 3, 3, 3])


def test_empirical_continuous_resamples_stored_values():
    values = np.array([0.5, 1.5, 2.5])
    d = EmpiricalContinuous(values)
    draws = d.draw(1000, rng(4))
    assert set(np.unique(draws)) <= set(values)


# --------------------------------------------------------------------------
# kernel density estimation


def test_kde_mode_consistency():
    x = rng(5).normal(0, 1, 100_000)
    kde = kde_fit(x)
    assert kde.evaluate(0.0) == pytest.approx(norm.pdf(0.0), rel=0.15)


def test_kde_symmetry_two_points():
    kde = kde_fit(np.array([-1.0, 1.0]))
    for x in (0.3, 1.7, 4.0):
        assert kde.evaluate(-x) == pytest.approx(kde.evaluate(x), rel=1e-12)


def test_kde_degenerate_sample():
    with pytest.raises(DegenerateSampleError):
        kde_fit(np.array([2.0, 2.0, 2.0]))


def test_kde_log_density_finite_far_out():
    kde = kde_fit(rng(6).normal(0, 1, 5000))
    val = kde.log_evaluate(np.array([150.0]))[0]
    assert np.isfinite(val) and val < -1000


def test_kde_integrates_to_one():
    x = rng(7).normal(0, 1, 2000)
    kde = kde_fit(x)
    grid = np.linspace(-10, 10, 4001)
    assert np.trapezoid(kde.evaluate(grid), grid) == pytest.approx(1.0, abs=1e-6)


def test_kde_binned_matches_exact_closely():
    x = rng(8).normal(3, 2, 50_000)  # binned path
    kde = kde_fit(x)
    exact = kde_fit(x[:2000])  # exact path on a subsample, same scale
    q = np.array([1.0, 3.0, 5.0])
    dense = np.exp(kde.log_evaluate(q))
    assert np.all(dense > 0)
    # binned estimate close to the true density at interior points
    assert np.allclose(dense, norm.pdf(q, 3, 2), rtol=0.1)
    assert exact.bandwidth > kde.bandwidth  # smaller N, wider bandwidth


# --------------------------------------------------------------------------
# empirical pmf


def test_empirical_pmf_counts():
    pmf = empirical_pmf([2, 2, 3], floor=0.0)
    assert pmf.evaluate(2) == pytest.approx(2 / 3)
    assert pmf.evaluate(3) == pytest.approx(1 / 3)
    assert pmf.evaluate(4) == 0.0


def test_empirical_pmf_all_zero_sample():
    pmf = empirical_pmf([0, 0, 0, 0], floor=0.0)
    assert pmf.evaluate(0) == pytest.approx(1.0)
    assert pmf.evaluate(1) == 0.0


def test_empirical_pmf_floor_applies_within_window():
    pmf = empirical_pmf([2, 2, 3], floor=1e-4)
    assert pmf.evaluate(5) == pytest.approx(1e-4)  # within [0, 6]
    assert pmf.evaluate(7) == 0.0                  # beyond the window


def test_empirical_pmf_dkw_bound():
    x = rng(9).poisson(4.0, 100_000)
    pmf = empirical_pmf(x, floor=0.0)
    ks = np.arange(0, pmf.support_max + 1)
    true = np.exp(Poisson(4.0).log_density(ks))
    assert np.max(np.abs(pmf.evaluate(ks) - true)) <= 0.01


def test_empirical_pmf_sums_to_one_before_flooring():
    x = rng(10).poisson(6.0, 5000)
    pmf = empirical_pmf(x, floor=0.0)
    assert pmf.table.sum() == pytest.approx(1.0, abs=1e-9)


# --------------------------------------------------------------------------
# fitting


def test_fit_gaussian_two_points():
    d = fit_gaussian([1.0, 3.0])
    assert d.mu == pytest.approx(2.0)
    assert d.sigma == pytest.approx(np.sqrt(2.0))


def test_fit_gaussian_consistency():
    x = Gaussian(5.0, 2.0).draw(100_000, rng(11))
    d = fit_gaussian(x)
    assert d.mu == pytest.approx(5.0, rel=0.01)
    assert d.sigma == pytest.approx(2.0, rel=0.01)


def test_fit_gaussian_degenerate():
    with pytest.raises(DegenerateSampleError):
        fit_gaussian([4.0, 4.0, 4.0])


def test_fit_negbin_moment_equations():
    sample = [3, 7, 5, 5, 1, 9]  # mean 5
    d = fit_negbin(sample)
    var = np.var(sample, ddof=1)
    assert d.mu == pytest.approx(5.0)
    assert d.dispersion == pytest.approx(25.0 / (var - 5.0))
    # the spec anchor: moments (5, 10) give dispersion 5
    assert NegativeBinomial(5.0, 5.0).variance() == pytest.approx(10.0)


def test_fit_negbin_recovery():
    true = NegativeBinomial(5.0, 2.0)
    x = true.draw(200_000, rng(12))
    d = fit_negbin(x)
    assert d.mu == pytest.approx(5.0, rel=0.05)
    assert d.dispersion == pytest.approx(2.0, rel=0.05)


def test_fit_negbin_underdispersed():
    x = rng(13).poisson(5.0, 2_000)
    x = np.minimum(x, int(np.ceil(x.mean())))  # force variance below mean
    with pytest.raises(UnderdispersedError):
        fit_negbin(x)


# --------------------------------------------------------------------------
# draw / log-density coherence


@pytest.mark.parametrize("dist,grid", [
    (Gaussian(5.0, 2.0), [(m, 2.0) for m in np.linspace(3, 7, 17)]),
    (Poisson(6.0), [(r,) for r in np.linspace(3, 9, 25)]),
    (NegativeBinomial(6.0, 3.0),
     [(m, 3.0) for m in np.linspace(3, 9, 25)]),
])
def test_loglikelihood_peaks_near_truth(dist, grid):
    x = dist.draw(20_000, rng(14))
    lls = []
    for params in grid:
        trial = type(dist)(*params)
        lls.append(trial.log_density(x).sum())
    best = grid[int(np.argmax(lls))][0]
    truth = dist.mean()
    spacing = grid[1][0] - grid[0][0]
    assert abs(best - truth) <= 2 * spacing
