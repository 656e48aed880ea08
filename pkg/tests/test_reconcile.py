"""Tests for the reconciliation algorithms against independent oracles."""

import numpy as np
import pytest
from scipy.stats import kstest, norm

from probreconc import (
    BaseForecasts,
    EmpiricalDiscrete,
    Gaussian,
    GaussianReconciled,
    NegativeBinomial,
    Poisson,
    bruteforce_discrete,
    build_hierarchy,
    buis,
    buis_grouped,
    buis_sample_based,
    effective_sample_size,
    extract_max_subhierarchy,
    plain_is,
    point_reconcile,
    reconcile_gaussian,
    resample,
)
from probreconc.errors import (
    AllZeroWeightsError,
    SupportTooLargeError,
)
from probreconc.reconcile import _normalize_log_weights
from probreconc.rng import substreams


@pytest.fixture
def pair():
    """Two bottoms, one constraint b1 + b2 = u."""
    return build_hierarchy([[(0, 1)]], n_bottom=2)


@pytest.fixture
def fig1():
    return build_hierarchy([[(0, 1), (2, 3)], [(0, 1, 2, 3)]], n_bottom=4)


@pytest.fixture
def gauss_pair_base():
    return BaseForecasts(bottom=[Gaussian(1, 1), Gaussian(1, 1)],
                         upper=[Gaussian(4, 1)])


@pytest.fixture
def poisson_pair_base():
    return BaseForecasts(bottom=[Poisson(1), Poisson(1)], upper=[Poisson(4)])


def grid_conditioned_moments(base, lo=-8.0, hi=11.0, step=0.01):
    """Oracle: 2-d quadrature of the conditioned density for b1 + b2 = u."""
    x = np.arange(lo, hi + step, step)
    f1 = base.bottom[0].density(x)
    f2 = base.bottom[1].density(x)
    fu = base.upper[0].density(np.add.outer(x, x))
    w = np.outer(f1, f2) * fu
    total = w.sum()
    m1 = (w.sum(axis=1) @ x) / total
    m2 = (w.sum(axis=0) @ x) / total
    d1, d2 = x - m1, x - m2
    v1 = (w.sum(axis=1) @ d1 ** 2) / total
    v2 = (w.sum(axis=0) @ d2 ** 2) / total
    c12 = (d1 @ w @ d2) / total
    return np.array([m1, m2]), np.array([[v1, c12], [c12, v2]])


# --------------------------------------------------------------------------
# analytical Gaussian reconciliation


def test_gaussian_closed_form_two_bottom(pair, gauss_pair_base):
    g = reconcile_gaussian(pair, gauss_pair_base)
    assert np.allclose(g.mean, [5 / 3, 5 / 3], atol=1e-12)
    assert np.allclose(g.covariance, [[2 / 3, -1 / 3], [-1 / 3, 2 / 3]],
                       atol=1e-12)


def test_gaussian_closed_form_matches_grid_oracle(pair, gauss_pair_base):
    mean, cov = grid_conditioned_moments(gauss_pair_base)
    g = reconcile_gaussian(pair, gauss_pair_base)
    assert np.allclose(g.mean, mean, atol=1e-4)
    assert np.allclose(g.covariance, cov, atol=1e-4)


def test_gaussian_grid_oracle_nontrivial_instance(pair):
    base = BaseForecasts(bottom=[Gaussian(2.0, 0.8), Gaussian(1.0, 1.5)],
                         upper=[Gaussian(5.5, 0.7)])
    mean, cov = grid_conditioned_moments(base, lo=-10, hi=14, step=0.01)
    g = reconcile_gaussian(pair, base)
    assert np.allclose(g.mean, mean, atol=1e-4)
    assert np.allclose(g.covariance, cov, atol=1e-4)


def test_gaussian_coherent_means_are_fixed_point(fig1):
    m_b = np.array([2.0, 3.0, 4.0, 5.0])
    a = fig1.aggregating_matrix()
    base = BaseForecasts(
        bottom=[Gaussian(m, 2.0) for m in m_b],
        upper=[Gaussian(m, 3.0) for m in a @ m_b],
    )
    g = reconcile_gaussian(fig1, base)
    assert np.allclose(g.mean, m_b, atol=1e-10)


def test_gaussian_uninformative_upper_limit(fig1):
    m_b = np.array([2.0, 3.0, 4.0, 5.0])
    base = BaseForecasts(
        bottom=[Gaussian(m, 2.0) for m in m_b],
        upper=[Gaussian(50.0, 1e6) for _ in range(3)],
    )
    g = reconcile_gaussian(fig1, base)
    assert np.allclose(g.mean, m_b, rtol=1e-6)
    assert np.allclose(g.covariance, np.diag([4.0] * 4), rtol=1e-6, atol=1e-6)


def test_gaussian_trivial_structure():
    h = build_hierarchy([], n_bottom=1)
    base = BaseForecasts(bottom=[Gaussian(3, 2)], upper=[])
    g = reconcile_gaussian(h, base)
    assert g.mean[0] == 3.0 and g.covariance[0, 0] == 4.0


def test_gaussian_reconciled_validates_shape():
    from probreconc.errors import DimensionError

    with pytest.raises(DimensionError):
        GaussianReconciled(mean=[0.0, 0.0], covariance=np.eye(3))


# --------------------------------------------------------------------------
# weights, resampling, ESS


def test_normalize_log_weights_shift_invariance():
    rng = np.random.default_rng(0)
    log_w = rng.normal(size=1000)
    w1 = _normalize_log_weights(log_w)
    w2 = _normalize_log_weights(log_w + 100.0)
    assert np.allclose(w1, w2, rtol=1e-12)
    assert w1.sum() == pytest.approx(1.0, abs=1e-12)


def test_normalize_log_weights_all_zero():
    with pytest.raises(AllZeroWeightsError):
        _normalize_log_weights(np.full(10, -np.inf))


def test_effective_sample_size_examples():
    assert effective_sample_size(np.full(100, 0.01)) == pytest.approx(100.0)
    one_hot = np.zeros(50)
    one_hot[3] = 1.0
    assert effective_sample_size(one_hot) == pytest.approx(1.0)
    assert effective_sample_size([0.5, 0.25, 0.25]) == pytest.approx(1 / 0.375)


def test_resample_degenerate_weights():
    particles = np.array([[1.0], [2.0], [3.0]])
    out = resample(particles, [1.0, 0.0, 0.0], 17, 0)
    assert np.all(out == 1.0)


def test_resample_uniform_frequencies():
    particles = np.array([[0.0], [1.0]])
    out = resample(particles, [0.5, 0.5], 100_000, 1)
    assert abs(out.mean() - 0.5) <= 0.005


def test_resample_weighted_frequencies():
    particles = np.array([[0.0], [1.0]])
    out = resample(particles, [0.75, 0.25], 100_000, 2)
    assert abs(out.mean() - 0.25) <= 0.005


def test_resample_systematic_frequencies():
    particles = np.array([[0.0], [1.0]])
    out = resample(particles, [0.75, 0.25], 100_000, 3, scheme="systematic")
    assert abs(out.mean() - 0.25) <= 0.005


def test_weighted_bootstrap_property():
    """Resampling draws from p with weights w(x) yields draws from p*w."""
    rng = np.random.default_rng(4)
    draws = rng.poisson(3.0, 100_000)
    w = draws + 1.0
    out = resample(draws[:, None], w / w.sum(), 100_000, 5)
    ks = np.arange(0, 60)
    target = np.exp(Poisson(3.0).log_density(ks)) * (ks + 1.0)
    target /= target.sum()
    emp = np.bincount(out[:, 0].astype(int), minlength=60)[:60] / out.shape[0]
    assert 0.5 * np.abs(emp - target).sum() <= 0.01


# --------------------------------------------------------------------------
# plain importance sampling


def test_plain_is_matches_bruteforce_posterior_mean(pair, poisson_pair_base):
    post = bruteforce_discrete(pair, poisson_pair_base, 30)
    oracle_sum_mean = float(post.mean().sum())
    # average three seeded runs; the single-run linearised standard error
    # then over-covers the averaged estimate by a factor sqrt(3)
    estimates, ses = [], []
    for seed in (0, 1, 2):
        ws = plain_is(pair, poisson_pair_base, 100_000, seed)
        sums = ws.particles.sum(axis=1)
        est = float(ws.weights @ sums)
        estimates.append(est)
        ses.append(np.sqrt(np.sum(ws.weights ** 2 * (sums - est) ** 2)))
    assert abs(np.mean(estimates) - oracle_sum_mean) <= 3 * max(ses) / np.sqrt(3)


def test_plain_is_uninformative_upper_uniform_weights(pair):
    base = BaseForecasts(bottom=[Gaussian(1, 1), Gaussian(1, 1)],
                         upper=[Gaussian(0, 1e9)])
    ws = plain_is(pair, base, 1000, 7)
    assert np.allclose(ws.weights, 1.0 / 1000, rtol=1e-6)


def test_plain_is_support_mismatch_raises(pair):
    base = BaseForecasts(
        bottom=[EmpiricalDiscrete(np.array([0])),
                EmpiricalDiscrete(np.array([0]))],
        upper=[EmpiricalDiscrete(np.array([5]))],
    )
    with pytest.raises(AllZeroWeightsError):
        plain_is(pair, base, 100, 8)


# --------------------------------------------------------------------------
# bottom-up importance sampling


def manual_fig1_walkthrough(base, n, seed):
    """The explicit seven-step procedure for the four-bottom tree.

    Mirrors the generic implementation's stream allocation (rows are
    top-first: total=0, left pair=1, right pair=2; bottoms follow) so the
    trace can be compared node for node.
    """
    streams = substreams(seed, 3 + 4)
    cols = [base.bottom[j].draw(n, streams[3 + j]) for j in range(4)]
    particles = np.column_stack(cols)

    def weight_resample(dist, leaf_cols, stream):
        log_w = dist.log_density(particles[:, leaf_cols].sum(axis=1))
        w = np.exp(log_w - log_w.max())
        w /= w.sum()
        idx = stream.choice(n, size=n, replace=True, p=w)
        particles[:, leaf_cols] = particles[np.ix_(idx, leaf_cols)]

    weight_resample(base.upper[1], [0, 1], streams[1])   # left pair
    weight_resample(base.upper[2], [2, 3], streams[2])   # right pair
    weight_resample(base.upper[0], [0, 1, 2, 3], streams[0])  # total
    return particles


def test_buis_matches_manual_walkthrough(fig1):
    base = BaseForecasts(
        bottom=[Poisson(r) for r in (1.0, 2.0, 1.5, 3.0)],
        upper=[Poisson(11.0), Poisson(4.5), Poisson(6.5)],
    )
    seed = 123
    manual = manual_fig1_walkthrough(base, 5000, seed)
    rs = buis(fig1, base, 5000, seed)
    assert np.array_equal(rs.particles, manual)


def test_buis_gaussian_matches_analytical(fig1):
    rng = np.random.default_rng(9)
    m_b = rng.uniform(5, 10, 4)
    a = fig1.aggregating_matrix()
    base = BaseForecasts(
        bottom=[Gaussian(m, 2.0) for m in m_b],
        upper=[Gaussian(1.5 * m, 3.0) for m in a @ m_b],
    )
    exact = reconcile_gaussian(fig1, base)
    rs = buis(fig1, base, 100_000, 10)
    se = exact.marginal_sd() / np.sqrt(100_000)
    assert np.all(np.abs(rs.particles.mean(axis=0) - exact.mean) <= 5 * se)


def test_buis_uninformative_uppers_keep_bottom_marginals(fig1):
    base = BaseForecasts(
        bottom=[Gaussian(5.0, 2.0)] * 4,
        upper=[Gaussian(0.0, 1e8)] * 3,
    )
    rs = buis(fig1, base, 100_000, 11)
    stat = kstest(rs.particles[:, 0], norm(5.0, 2.0).cdf).statistic
    assert stat <= 0.01


def test_buis_matches_bruteforce_on_poisson(fig1):
    base = BaseForecasts(
        bottom=[Poisson(r) for r in (1.0, 3.0, 2.0, 1.5)],
        upper=[Poisson(11.0), Poisson(6.0), Poisson(5.0)],
    )
    post = bruteforce_discrete(fig1, base, 25)
    rs = buis(fig1, base, 100_000, 12)
    est = rs.particles.mean(axis=0)
    oracle_mean = post.mean()
    var = post.pmf @ (post.values - oracle_mean) ** 2
    se = np.sqrt(var / rs.particles.shape[0])
    assert np.all(np.abs(est - oracle_mean) <= 4 * se)


def test_buis_zero_weights_names_the_node(fig1):
    base = BaseForecasts(
        bottom=[EmpiricalDiscrete(np.array([0]))] * 4,
        upper=[Poisson(4.0), EmpiricalDiscrete(np.array([9])), Poisson(1.0)],
    )
    with pytest.raises(AllZeroWeightsError) as err:
        buis(fig1, base, 100, 13)
    assert err.value.node is not None


def test_buis_requires_tree():
    from probreconc import temporal_structure
    from probreconc.errors import NotATreeError

    g = temporal_structure(12, [2, 3, 4, 6, 12])
    base = BaseForecasts(bottom=[Poisson(5)] * 12,
                         upper=[Poisson(10)] * g.n_upper)
    with pytest.raises(NotATreeError):
        buis(g, base, 100, 14)


def test_buis_sample_based_single_atom_conditions_exactly(pair):
    base = BaseForecasts(
        bottom=[Poisson(2.0), Poisson(2.0)],
        upper=[EmpiricalDiscrete(np.array([4]))],
    )
    rs = buis_sample_based(pair, base, 20_000, 15)
    assert np.all(rs.particles.sum(axis=1) == 4)


def test_buis_sample_based_gaussian_close_to_analytical(fig1):
    rng = np.random.default_rng(16)
    m_b = rng.uniform(5, 10, 4)
    a = fig1.aggregating_matrix()
    upper_means = 1.1 * (a @ m_b)
    exact_base = BaseForecasts(
        bottom=[Gaussian(m, 2.0) for m in m_b],
        upper=[Gaussian(m, 3.0) for m in upper_means],
    )
    exact = reconcile_gaussian(fig1, exact_base)
    from probreconc import EmpiricalContinuous
    sample_base = BaseForecasts(
        bottom=exact_base.bottom,
        upper=[EmpiricalContinuous(Gaussian(m, 3.0).draw(100_000, rng))
               for m in upper_means],
    )
    rs = buis_sample_based(fig1, sample_base, 100_000, 17)
    rel = np.abs(rs.particles.mean(axis=0) - exact.mean) / exact.mean
    assert np.all(rel <= 0.01)


# --------------------------------------------------------------------------
# grouped structures


def test_buis_grouped_no_extras_equals_tree_pass():
    g = extract_max_subhierarchy([(0, 1, 2, 3), (0, 1), (2, 3)], 4)
    base = BaseForecasts(
        bottom=[Poisson(2.0)] * 4,
        upper=[Poisson(9.0), Poisson(4.5), Poisson(4.5)],
    )
    ws = buis_grouped(g, base, 5000, 18)
    assert np.allclose(ws.weights, 1.0 / 5000)
    sub_base = BaseForecasts(
        bottom=base.bottom,
        upper=tuple(base.upper[i] for i in g.sub_index),
    )
    rs = buis(g.subhierarchy, sub_base, 5000, substreams(18, 1)[0])
    assert np.array_equal(ws.particles, rs.particles)


def test_buis_grouped_matches_bruteforce():
    # 4 bottoms; tree part {pairs, total} plus one crossing constraint
    constraints = [(0, 1, 2, 3), (0, 1), (2, 3), (1, 2)]
    g = extract_max_subhierarchy(constraints, 4)
    assert g.extra_constraints == ((1, 2),)
    base = BaseForecasts(
        bottom=[Poisson(r) for r in (1.0, 2.0, 2.0, 1.0)],
        upper=[Poisson(8.0), Poisson(4.0), Poisson(4.0), Poisson(5.5)],
    )
    post = bruteforce_discrete(g, base, 25)
    ws = buis_grouped(g, base, 100_000, 19)
    est = ws.mean()
    oracle_mean = post.mean()
    se = np.sqrt(np.sum(ws.weights[:, None] ** 2
                        * (ws.particles - est) ** 2, axis=0))
    assert np.all(np.abs(est - oracle_mean) <= 4 * se)


def test_buis_grouped_invariant_to_subhierarchy_choice():
    """Two different tree parts of one structure give the same distribution."""
    from probreconc.hierarchy import GroupedStructure, Hierarchy

    constraints = ((0, 1), (2, 3), (0, 1, 2), (0, 1, 2, 3))
    base = BaseForecasts(
        bottom=[Poisson(r) for r in (2.0, 1.0, 2.0, 1.5)],
        upper=[Poisson(4.0), Poisson(4.5), Poisson(6.5), Poisson(9.0)],
    )

    def grouped_with(sub_rows):
        members = [constraints[i] for i in sub_rows]
        order = sorted(range(len(members)), key=lambda k: len(members[k]))
        levels = []
        for k in order:
            levels.append((members[k],))
        # stack nodes into levels by size (sizes here are unique per level)
        by_size = {}
        for k in sub_rows:
            by_size.setdefault(len(constraints[k]), []).append(constraints[k])
        lvls = tuple(tuple(by_size[s]) for s in sorted(by_size))
        sub = Hierarchy(n_bottom=4, levels=lvls)
        sub_index = tuple(constraints.index(c) for c in sub.constraints)
        extra_index = tuple(i for i in range(len(constraints))
                            if i not in sub_rows)
        return GroupedStructure(
            n_bottom=4, constraints=constraints, subhierarchy=sub,
            extra_constraints=tuple(constraints[i] for i in extra_index),
            sub_index=sub_index, extra_index=extra_index)

    g1 = grouped_with([0, 1, 3])   # pairs + total, extra {0,1,2}
    g2 = grouped_with([0, 2, 3])   # nested chain, extras {2,3}
    post = bruteforce_discrete(g1, base, 25)
    oracle_mean = post.mean()
    for g in (g1, g2):
        ws = buis_grouped(g, base, 100_000, 20)
        est = ws.mean()
        se = np.sqrt(np.sum(ws.weights[:, None] ** 2
                            * (ws.particles - est) ** 2, axis=0))
        assert np.all(np.abs(est - oracle_mean) <= 4 * se)


# --------------------------------------------------------------------------
# brute-force enumeration


def test_bruteforce_symmetric_bottoms(pair, poisson_pair_base):
    post = bruteforce_discrete(pair, poisson_pair_base, 30)
    mean = post.mean()
    assert mean[0] == pytest.approx(mean[1], abs=1e-12)
    assert post.pmf.sum() == pytest.approx(1.0, abs=1e-12)


def test_bruteforce_odds_ratio_preserved(pair, poisson_pair_base):
    post = bruteforce_discrete(pair, poisson_pair_base, 30)
    a = pair.aggregating_matrix()
    sums = post.values @ a.T
    log_base = (poisson_pair_base.bottom[0].log_density(post.values[:, 0])
                + poisson_pair_base.bottom[1].log_density(post.values[:, 1])
                + poisson_pair_base.upper[0].log_density(sums[:, 0]))
    keep = np.isfinite(log_base)
    diff = post.log_pmf[keep] - log_base[keep]
    assert np.max(diff) - np.min(diff) <= 1e-10


def test_bruteforce_support_cap_guard(fig1):
    base = BaseForecasts(bottom=[Poisson(1)] * 4, upper=[Poisson(4)] * 3)
    with pytest.raises(SupportTooLargeError):
        bruteforce_discrete(fig1, base, 100)


def test_bruteforce_rejects_continuous(pair, gauss_pair_base):
    with pytest.raises(ValueError):
        bruteforce_discrete(pair, gauss_pair_base, 10)


def test_bruteforce_marginals_sum_to_one(fig1):
    base = BaseForecasts(
        bottom=[Poisson(r) for r in (1.0, 3.0, 2.0, 1.5)],
        upper=[Poisson(11.0), Poisson(6.0), Poisson(5.0)],
    )
    post = bruteforce_discrete(fig1, base, 25)
    for j in range(4):
        assert post.marginal(j).sum() == pytest.approx(1.0, abs=1e-12)


# --------------------------------------------------------------------------
# point reconciliation


def test_point_reconcile_bottom_up(fig1):
    y_hat = np.array([100.0, 40.0, 40.0, 10.0, 10.0, 20.0, 20.0])
    out = point_reconcile(y_hat, fig1, method="bottom_up")
    assert np.allclose(out, [60, 20, 40, 10, 10, 20, 20])


def test_point_reconcile_mint_fixes_coherent_points(fig1):
    b = np.array([1.0, 2.0, 3.0, 4.0])
    y = fig1.summing_matrix() @ b
    out = point_reconcile(y, fig1, method="mint", W=np.eye(7))
    assert np.allclose(out, y, atol=1e-10)


def test_point_reconcile_mint_equals_gaussian_conditioning(fig1):
    rng = np.random.default_rng(21)
    for _ in range(5):
        m_b = rng.uniform(5, 10, 4)
        sd_b = rng.uniform(0.5, 3.0, 4)
        sd_u = rng.uniform(0.5, 3.0, 3)
        m_u = 1.4 * (fig1.aggregating_matrix() @ m_b)
        base = BaseForecasts(
            bottom=[Gaussian(m, s) for m, s in zip(m_b, sd_b)],
            upper=[Gaussian(m, s) for m, s in zip(m_u, sd_u)],
        )
        exact = reconcile_gaussian(fig1, base)
        w = np.diag(np.concatenate([sd_u ** 2, sd_b ** 2]))
        y_hat = np.concatenate([m_u, m_b])
        out = point_reconcile(y_hat, fig1, method="mint", W=w)
        assert np.allclose(out[3:], exact.mean, atol=1e-8)


def test_point_reconcile_errors(fig1):
    from probreconc.errors import DimensionError, SingularMatrixError

    with pytest.raises(DimensionError):
        point_reconcile([1.0, 2.0], fig1)
    with pytest.raises(ValueError):
        point_reconcile(np.zeros(7), fig1, method="mint")
    with pytest.raises(SingularMatrixError):
        point_reconcile(np.zeros(7), fig1, method="mint", W=np.zeros((7, 7)))


# --------------------------------------------------------------------------
# outputs are coherent by construction


def test_output_particles_lift_coherently(fig1):
    from probreconc import coherence_check, summing_matrix

    base = BaseForecasts(
        bottom=[Poisson(r) for r in (1.0, 3.0, 2.0, 1.5)],
        upper=[Poisson(11.0), Poisson(6.0), Poisson(5.0)],
    )
    rs = buis(fig1, base, 500, 22)
    s = summing_matrix(fig1)
    for row in rs.particles[:10]:
        assert coherence_check(s @ row, fig1, 0.0)
