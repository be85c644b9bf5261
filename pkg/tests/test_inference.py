import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtr

from tailtree.errors import ResampleEstimationFailure
from tailtree.estimate import pareto_rank_transform
from tailtree.hr_model import HRTreeModel, bivariate_extremal_coefficient, pickands
from tailtree.inference import (
    RankResampler,
    basic_bootstrap_ci,
    basic_interval,
    beta_copula_pickands,
    beta_copula_sample,
    bootstrap_replicates,
    ece_asymptotic_ci,
    ece_ci_from_data,
    ece_jacobian,
    pickands_bootstrap_band,
    replicate_rng,
    sigma_l_bootstrap,
    sigma_l_model,
    z_quantile,
)
from tailtree.simulate import sample_markov_tree
from tailtree.tree_core import all_pairs, build_tree

from _helpers import STUDY_EDGES, STUDY_THETA, random_tree

STUDY_OBSERVED = [2, 4, 5, 6, 7]


@pytest.fixture(scope="module")
def study_tree_m():
    return build_tree(7, STUDY_EDGES)


@pytest.fixture(scope="module")
def study_data(study_tree_m):
    model = HRTreeModel(study_tree_m, STUDY_THETA)
    x = sample_markov_tree(model, 2000, seed=61)
    return x[:, [v - 1 for v in STUDY_OBSERVED]]


class TestJacobian:
    def test_off_path_zero(self, study_tree_m):
        model = HRTreeModel(study_tree_m, STUDY_THETA)
        jac = ece_jacobian(model, [(6, 7)])
        assert np.count_nonzero(jac) == 2 and jac[0, 0] == 0

    def test_two_nodes(self):
        m = HRTreeModel(build_tree(2, [(1, 2)]), [0.8])
        assert ece_jacobian(m, [(1, 2)])[0, 0] == pytest.approx(stats.norm.pdf(0.4), rel=1e-14)

    def test_finite_differences(self, rng):
        for _ in range(10):
            t = random_tree(rng, 7)
            theta = rng.uniform(0.1, 2, t.n_edges)
            pairs = all_pairs(t.nodes)
            jac = ece_jacobian(HRTreeModel(t, theta), pairs)
            h = 1e-6
            for e in range(t.n_edges):
                up, dn = theta.copy(), theta.copy()
                up[e] += h
                dn[e] -= h
                mu, md = HRTreeModel(t, up), HRTreeModel(t, dn)
                fd = [(bivariate_extremal_coefficient(mu.path_sum(a, b))
                       - bivariate_extremal_coefficient(md.path_sum(a, b))) / (2 * h) for a, b in pairs]
                np.testing.assert_allclose(jac[:, e], fd, atol=1e-6)


class TestAsymptoticCI:
    def test_identity_sandwich_collapses(self, study_tree_m):
        model = HRTreeModel(study_tree_m, STUDY_THETA)
        pairs = all_pairs(STUDY_OBSERVED)
        ci = ece_asymptotic_ci(model, pairs, 100, sigma_l=np.eye(len(pairs)))
        jac = ece_jacobian(model, pairs)
        np.testing.assert_allclose(np.array(ci.extra["M"]), np.linalg.inv(jac.T @ jac), rtol=1e-8)

    def test_width_scales(self, study_tree_m):
        model = HRTreeModel(study_tree_m, STUDY_THETA)
        pairs = all_pairs(STUDY_OBSERVED)
        sl = sigma_l_model(model, pairs)
        w1 = ece_asymptotic_ci(model, pairs, 100, sigma_l=sl)
        w4 = ece_asymptotic_ci(model, pairs, 400, sigma_l=sl)
        np.testing.assert_allclose((w1.upper - w1.lower) / (w4.upper - w4.lower), 2.0, rtol=1e-12)

    def test_z(self):
        assert z_quantile(0.95) == pytest.approx(1.959963984540054, abs=1e-12)
        assert round(z_quantile(0.95), 2) == 1.96

    def test_partials(self, study_tree_m):
        model = HRTreeModel(study_tree_m, STUDY_THETA)
        ci = ece_asymptotic_ci(model, [(2, 4), (4, 5), (6, 7), (2, 6), (5, 7), (2, 5)], 100)
        p = model.path_sum(2, 4)
        assert ci.extra["stdf_partials"][0] == pytest.approx(ndtr(math.sqrt(p) / 2))

    def test_model_sigma_matches_bootstrap(self):
        # closed-form and resampled covariances agree on a large sample
        t = build_tree(3, [(1, 2), (2, 3)])
        model = HRTreeModel(t, [0.6, 0.9])
        x = sample_markov_tree(model, 50_000, seed=2)
        pairs = all_pairs([1, 2, 3])
        boot = sigma_l_bootstrap(x, [1, 2, 3], pairs, 500, B=300, seed=1)
        closed = sigma_l_model(model, pairs)
        np.testing.assert_allclose(boot, closed, atol=0.08)

    def test_from_data(self, study_data, study_tree_m):
        ci = ece_ci_from_data(study_data, study_tree_m, STUDY_OBSERVED, 100, B=200, seed=3)
        assert np.all(ci.lower <= ci.point) and np.all(ci.point <= ci.upper)
        again = ece_ci_from_data(study_data, study_tree_m, STUDY_OBSERVED, 100, B=200, seed=3)
        assert np.array_equal(ci.lower, again.lower)


class TestResampling:
    def test_fast_ranks_match_rankdata(self, rng):
        x = rng.normal(size=(200, 3))
        xh = pareto_rank_transform(x, [1, 2, 3])
        rs = RankResampler(xh)
        assert rs.fast
        for _ in range(5):
            counts = rng.multinomial(200, np.full(200, 1 / 200))
            got = rs.resample(counts).ranks
            rows = np.repeat(np.arange(200), counts)
            np.testing.assert_array_equal(got, stats.rankdata(x[rows], axis=0))

    def test_tied_input_falls_back(self):
        x = np.array([[1.0, 2], [1, 3], [2, 1], [3, 5]])
        rs = RankResampler(pareto_rank_transform(x, [1, 2]))
        assert not rs.fast
        counts = np.array([2, 0, 1, 1])
        rows = np.repeat(np.arange(4), counts)
        np.testing.assert_array_equal(rs.resample(counts).ranks, stats.rankdata(x[rows], axis=0))

    def test_streams_independent_of_order(self):
        a = replicate_rng(5, 7).random(3)
        _ = replicate_rng(5, 6).random(100)
        assert np.array_equal(a, replicate_rng(5, 7).random(3))
        assert not np.array_equal(a, replicate_rng(5, 8).random(3))


class TestBasicBootstrap:
    def test_reproducible_and_nested(self, study_data, study_tree_m):
        point, reps, fails = bootstrap_replicates("mme", study_data, study_tree_m, STUDY_OBSERVED, 100, 200, 4)
        again = bootstrap_replicates("mme", study_data, study_tree_m, STUDY_OBSERVED, 100, 200, 4)
        assert np.array_equal(reps, again[1]) and fails == 0
        lo90, hi90 = basic_interval(point, reps, 0.90)
        lo99, hi99 = basic_interval(point, reps, 0.99)
        assert np.all(lo99 <= lo90) and np.all(hi90 <= hi99)

    def test_basic_formula(self):
        point = np.array([1.0])
        reps = np.linspace(0.5, 1.5, 1001)[:, None]
        lo, hi = basic_interval(point, reps, 0.9)
        assert lo[0] == pytest.approx(2 - np.quantile(reps, 0.95))
        assert hi[0] == pytest.approx(2 - np.quantile(reps, 0.05))

    def test_degenerate_zero_width(self):
        point = np.array([0.4, 0.7])
        reps = np.tile(point, (300, 1))
        lo, hi = basic_interval(point, reps, 0.95)
        np.testing.assert_array_equal(lo, point)
        np.testing.assert_array_equal(hi, point)

    def test_ci_wrapper(self, study_data, study_tree_m):
        ci = basic_bootstrap_ci("mme", study_data, study_tree_m, STUDY_OBSERVED, 100, B=200, seed=1)
        assert ci.method == "mme-basic-bootstrap" and ci.B == 200
        assert np.all(ci.lower <= ci.upper)
        with pytest.raises(ValueError):
            basic_bootstrap_ci("mme", study_data, study_tree_m, STUDY_OBSERVED, 100, B=100)

    def test_too_many_failures(self, study_tree_m):
        # a few distinct rows make most resamples lose exceedances at some node
        rng = np.random.default_rng(0)
        x = rng.normal(size=(12, 5))
        with pytest.raises(ResampleEstimationFailure):
            basic_bootstrap_ci("cle", x, study_tree_m, STUDY_OBSERVED, 2, B=200, seed=0)

    @pytest.mark.slow
    def test_width_shrinks_with_n(self, study_tree_m):
        model = HRTreeModel(study_tree_m, STUDY_THETA)
        ratios = []
        for r in range(20):
            widths = []
            for n in (500, 4000):
                x = sample_markov_tree(model, n, seed=300 + r)[:, [v - 1 for v in STUDY_OBSERVED]]
                ci = basic_bootstrap_ci("mme", x, study_tree_m, STUDY_OBSERVED, n // 20, B=200, seed=r)
                widths.append(np.median(ci.upper - ci.lower))
            ratios.append(widths[1] / widths[0])
        assert np.median(ratios) < 1


class TestBetaCopula:
    def test_single_row_uniform(self):
        u = beta_copula_sample(np.array([[1, 1]]), 20_000, seed=1)
        assert stats.kstest(u[:, 0], "uniform").pvalue > 0.01

    def test_uniform_margins(self, rng):
        ranks = np.column_stack([rng.permutation(50) + 1 for _ in range(2)])
        u = beta_copula_sample(ranks, 100_000, seed=2)
        for c in range(2):
            assert stats.kstest(u[:, c], "uniform").pvalue > 0.01

    def test_comonotone_dependence(self):
        ranks = np.tile(np.arange(1, 51)[:, None], (1, 2))
        u = beta_copula_sample(ranks, 5000, seed=3)
        assert stats.kendalltau(u[:, 0], u[:, 1]).statistic > 0.5

    def test_exact_functional_vs_sampling(self, rng):
        n, k = 60, 12
        ranks = np.column_stack([rng.permutation(n) + 1, rng.permutation(n) + 1])
        w = np.array([0.25, 0.5, 0.9])
        exact = beta_copula_pickands(ranks[:, 0], ranks[:, 1], w, k)
        m = 400_000
        u = beta_copula_sample(ranks, m, seed=4)
        hits = [(u[:, 0] > 1 - k * (1 - x) / n) | (u[:, 1] > 1 - k * x / n) for x in w]
        mc = np.array([h.mean() for h in hits]) * n / k
        se = np.sqrt(np.array([h.mean() for h in hits]) / m) * n / k
        assert np.all(np.abs(exact - mc) <= 4 * se)


class TestPickandsBand:
    def test_shape_and_endpoints(self, study_data):
        w = np.linspace(0, 1, 11)
        band = pickands_bootstrap_band(study_data, 2, 4, 100, w, B=200, seed=1, nodes=STUDY_OBSERVED)
        assert band.lower.shape == (11,) and band.B == 200
        assert band.upper[0] - band.lower[0] <= 0.05
        assert np.all(band.lower <= band.upper)

    def test_reproducible(self, study_data):
        w = np.array([0.3, 0.5])
        a = pickands_bootstrap_band(study_data, 2, 4, 100, w, B=100, seed=9, nodes=STUDY_OBSERVED)
        b = pickands_bootstrap_band(study_data, 2, 4, 100, w, B=100, seed=9, nodes=STUDY_OBSERVED)
        assert np.array_equal(a.lower, b.lower) and np.array_equal(a.upper, b.upper)

    @pytest.mark.slow
    def test_coverage_at_half(self):
        m = HRTreeModel(build_tree(2, [(1, 2)]), [0.8])
        truth = pickands(m, 1, 2, 0.5)
        hits = 0
        for r in range(100):
            x = sample_markov_tree(m, 2000, seed=700 + r)
            band = pickands_bootstrap_band(x, 1, 2, 100, [0.5], B=1000, seed=r)
            hits += band.lower[0] <= truth <= band.upper[0]
        assert hits >= 90
