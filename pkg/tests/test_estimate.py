import math

import numpy as np
import pytest
from scipy.stats import norm

from tailtree.errors import DegenerateColumn, EmptyExceedanceSet, NotIdentifiable, RankDeficientPairs, TooFewRows
from tailtree.estimate import (
    MomentStats,
    _cle_objective,
    _cle_parts,
    _mme_system,
    cle,
    cle_from_moments,
    default_neighborhoods,
    ece,
    ece_from_coefficients,
    empirical_extremal_coefficient,
    empirical_mu_sigma,
    empirical_pickands,
    fit_over_k,
    log_differences,
    mme,
    mme_from_moments,
    moment_stats,
    neighborhood_plan,
    pareto_rank_transform,
    pooled,
)
from tailtree.hr_model import HRTreeModel, bivariate_extremal_coefficient, mu_sigma
from tailtree.simulate import add_noise, sample_markov_tree
from tailtree.tree_core import all_pairs, build_tree

from _helpers import STUDY_EDGES, STUDY_THETA, random_tree

STUDY_OBSERVED = [2, 4, 5, 6, 7]
STAR_EDGES = [(1, 2), (2, 3), (3, 4), (2, 5)]


@pytest.fixture(scope="module")
def study_sample():
    tree = build_tree(7, STUDY_EDGES)
    model = HRTreeModel(tree, STUDY_THETA)
    x = add_noise(sample_markov_tree(model, 4000, seed=77), 1.0, seed=78)
    return tree, x[:, [v - 1 for v in STUDY_OBSERVED]]


def oracle_stats(model, plan, count=1000):
    """Exact Gaussian limit moments fed in place of data."""
    out = []
    for u, W in sorted(plan.sets.items()):
        ms = mu_sigma(model, W, u)
        out.append(MomentStats(u, ms.nodes, count, ms.mu, ms.sigma))
    return out


class TestRanks:
    def test_small(self):
        xh = pareto_rank_transform(np.array([[3.0], [1.0], [2.0]]))
        np.testing.assert_array_equal(xh.ranks[:, 0], [3, 1, 2])
        np.testing.assert_allclose(xh.xhat[:, 0], [4, 4 / 3, 2], rtol=1e-15)

    def test_monotone_invariance(self, rng):
        x = rng.normal(size=(50, 3))
        a = pareto_rank_transform(x)
        b = pareto_rank_transform(np.exp(x))
        assert np.array_equal(a.xhat, b.xhat)

    def test_ties_average(self):
        xh = pareto_rank_transform(np.array([[1.0], [1.0], [2.0]]))
        np.testing.assert_array_equal(xh.ranks[:, 0], [1.5, 1.5, 3])

    def test_errors(self):
        with pytest.raises(DegenerateColumn):
            pareto_rank_transform(np.array([[1.0, 2.0], [1.0, 3.0]]))
        with pytest.raises(TooFewRows):
            pareto_rank_transform(np.array([[1.0, 2.0]]))


class TestLogDifferences:
    def test_all_rows_at_k_equal_n(self, rng):
        xh = pareto_rank_transform(rng.normal(size=(20, 3)), [1, 2, 3])
        d = log_differences(xh, 2, 20)
        assert d.shape == (20, 2)
        np.testing.assert_allclose(d[:, 0], np.log(xh.xhat[:, 0]) - np.log(xh.xhat[:, 1]))

    def test_exceedance_count(self, rng):
        xh = pareto_rank_transform(rng.normal(size=(1000, 2)), [1, 2])
        assert log_differences(xh, 1, 50).shape[0] == 50

    def test_invalid_k(self, rng):
        xh = pareto_rank_transform(rng.normal(size=(10, 2)), [1, 2])
        with pytest.raises(ValueError):
            log_differences(xh, 1, 0)

    def test_empty_exceedances(self, rng):
        xh = pareto_rank_transform(rng.normal(size=(10, 2)), [1, 2])
        # threshold n/k = 10 at k=1 can only be exceeded by X = 11 > 10
        assert log_differences(xh, 1, 1).shape[0] == 1
        xh_tied = pareto_rank_transform(np.array([[1.0, 1], [1, 2], [2, 3], [2, 4]]), [1, 2])
        with pytest.raises(EmptyExceedanceSet):
            log_differences(xh_tied, 1, 1)

    def test_limit_moments(self):
        tree = build_tree(7, STUDY_EDGES)
        model = HRTreeModel(tree, STUDY_THETA)
        n = 100_000
        k = int(math.sqrt(n))
        x = sample_markov_tree(model, n, seed=5)
        xh = pareto_rank_transform(x, list(tree.nodes))
        for u in (2, 3):
            d = log_differences(xh, u, k)
            mean, cov = empirical_mu_sigma(d)
            ms = mu_sigma(model, tree.nodes, u)
            se = np.sqrt(np.diag(cov) / d.shape[0])
            assert np.all(np.abs(mean - ms.mu) <= 3 * se)


class TestEmpiricalMuSigma:
    def test_two_rows(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, -1.0])
        mean, cov = empirical_mu_sigma(np.vstack([a, b]))
        np.testing.assert_allclose(mean, (a + b) / 2)
        np.testing.assert_allclose(cov, np.outer(a - b, a - b) / 4)

    def test_repeated_row(self):
        _, cov = empirical_mu_sigma(np.tile([1.0, 2.0, 3.0], (5, 1)))
        assert np.all(cov == 0)

    def test_too_few(self):
        with pytest.raises(TooFewRows):
            empirical_mu_sigma(np.ones((1, 2)))


class TestNeighborhoods:
    def test_study_default(self, study_tree):
        plan = default_neighborhoods(study_tree, STUDY_OBSERVED)
        assert plan.radius == 2
        assert plan.sets[2] == (2, 4, 5, 6, 7)
        assert plan.sets[4] == plan.sets[5] == (2, 4, 5)
        assert plan.sets[6] == plan.sets[7] == (2, 6, 7)

    def test_star_choices(self):
        t = build_tree(5, STAR_EDGES)
        obs = [1, 3, 4, 5]
        with pytest.raises(NotIdentifiable):
            neighborhood_plan(t, obs, {1: [1, 5], 3: [3, 4], 4: [3, 4], 5: [1, 5]})
        plan = neighborhood_plan(t, obs, {1: [1, 5, 3], 3: [1, 3, 4, 5], 4: [3, 4], 5: [1, 5]})
        assert plan.sets[3] == (1, 3, 4, 5)

    def test_grows_until_identifiable(self, river_tree):
        plan = default_neighborhoods(river_tree, [1, 3, 4, 6, 7], radius=1)
        assert plan.radius >= 2

    def test_full_radius(self, rng):
        for _ in range(10):
            t = random_tree(rng, 8)
            obs = [v for v in t.nodes if t.degree(v) < 3 or rng.random() < 0.5]
            plan = default_neighborhoods(t, obs, radius=int(t.distances.max()))
            assert all(W == tuple(sorted(obs)) for W in plan.sets.values())

    def test_not_identifiable(self, chain3):
        with pytest.raises(NotIdentifiable):
            default_neighborhoods(chain3, [1, 3])


class TestMME:
    def test_oracle_moments(self, rng):
        for _ in range(20):
            t = random_tree(rng, 9)
            obs = [v for v in t.nodes if t.degree(v) < 3 or rng.random() < 0.5]
            theta = rng.uniform(0.05, 2, t.n_edges)
            model = HRTreeModel(t, theta)
            plan = default_neighborhoods(t, obs)
            res = mme_from_moments(t, oracle_stats(model, plan))
            np.testing.assert_allclose(res.theta_hat, theta, rtol=1e-8)

    def test_star_closed_form(self, rng, river_tree):
        # adjacent neighbourhoods give a diagonal system: theta_e^2 = average of both ends
        obs = list(river_tree.nodes)
        x = rng.normal(size=(3000, 7)) + rng.normal(size=(3000, 1))
        plan = neighborhood_plan(river_tree, obs, {u: [u, *river_tree.adjacency[u - 1]] for u in obs})
        xh = pareto_rank_transform(x, obs)
        stats = moment_stats(xh, plan, 150)
        by_base = {s.base: s for s in stats}
        expect = []
        for a, b in river_tree.edges:
            sa, sb = by_base[a], by_base[b]
            va = sa.cov[sa.nodes.index(b), sa.nodes.index(b)]
            vb = sb.cov[sb.nodes.index(a), sb.nodes.index(a)]
            expect.append(max(math.sqrt(max((va + vb) / 2, 0)), 1e-4))
        res = mme_from_moments(river_tree, stats)
        np.testing.assert_allclose(res.theta_hat, expect, rtol=1e-10)

    def test_objective_at_truth(self, study_sample, study_tree):
        tree, x = study_sample
        plan = default_neighborhoods(tree, STUDY_OBSERVED)
        xh = pareto_rank_transform(x, STUDY_OBSERVED)
        stats = moment_stats(xh, plan, 100)
        res = mme_from_moments(tree, stats)
        a, b = _mme_system(tree, stats)
        assert res.objective_value <= np.sum((a @ np.square(STUDY_THETA) - b) ** 2) + 1e-12

    def test_relabel_equivariance(self, study_sample):
        tree, x = study_sample
        perm = {1: 3, 2: 7, 3: 1, 4: 2, 5: 6, 6: 5, 7: 4}
        t2 = tree.relabel(perm)
        obs2 = [perm[v] for v in STUDY_OBSERVED]
        order = np.argsort(obs2)
        r1 = mme(x, tree, STUDY_OBSERVED, 100)
        r2 = mme(x[:, order], t2, sorted(obs2), 100)
        np.testing.assert_allclose(r1.theta_hat, r2.theta_hat, rtol=1e-12)

    def test_monotone_invariance(self, study_sample):
        tree, x = study_sample
        z = np.arcsinh(x) * 3 + 1
        for fit in (mme, cle, ece):
            assert np.array_equal(fit(x, tree, STUDY_OBSERVED, 100).theta_hat,
                                  fit(z, tree, STUDY_OBSERVED, 100).theta_hat)


def _grid_oracle_single_edge(deltas):
    """Grid search of the 1-d Gaussian likelihood N(-t^2/2, t^2)."""
    n = len(deltas)

    def nll(t):
        s2 = t * t
        return 0.5 * n * math.log(s2) + np.sum((deltas + s2 / 2) ** 2) / (2 * s2)

    grid = np.linspace(0.01, 3, 3001)
    best = grid[np.argmin([nll(t) for t in grid])]
    fine = np.linspace(best - 1e-3, best + 1e-3, 2001)
    return fine[np.argmin([nll(t) for t in fine])]


class TestCLE:
    def test_single_edge_grid(self):
        m = HRTreeModel(build_tree(2, [(1, 2)]), [0.7])
        x = sample_markov_tree(m, 5000, seed=3)
        t = m.tree
        res = cle(x, t, [1, 2], 200)
        xh = pareto_rank_transform(x, [1, 2])
        # both bases contribute; pool their log-differences as the objective does
        d = np.concatenate([log_differences(xh, 1, 200)[:, 0], log_differences(xh, 2, 200)[:, 0]])
        assert abs(res.theta_hat[0] - _grid_oracle_single_edge(d)) <= 1e-4

    def test_gradient_matches_finite_differences(self, rng, study_tree):
        model = HRTreeModel(study_tree, STUDY_THETA)
        plan = default_neighborhoods(study_tree, STUDY_OBSERVED)
        stats = [MomentStats(s.base, s.nodes, s.count, s.mean + 0.05 * rng.normal(size=s.mean.shape), s.cov)
                 for s in oracle_stats(model, plan, 250)]
        parts = _cle_parts(study_tree, stats)
        phi = np.log(rng.uniform(0.2, 1.5, 6))
        _, g = _cle_objective(phi, parts)
        h = 1e-6
        num = np.array([(_cle_objective(phi + h * e, parts)[0] - _cle_objective(phi - h * e, parts)[0]) / (2 * h)
                        for e in np.eye(6)])
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-6)

    def test_gaussian_consistency(self, study_tree):
        model = HRTreeModel(study_tree, STUDY_THETA)
        plan = default_neighborhoods(study_tree, STUDY_OBSERVED)
        rng = np.random.default_rng(17)
        n = 100_000
        stats = []
        for s in oracle_stats(model, plan):
            draws = rng.multivariate_normal(s.mean, s.cov, size=n)
            mean, cov = empirical_mu_sigma(draws)
            stats.append(MomentStats(s.base, s.nodes, n, mean, cov))
        res = cle_from_moments(study_tree, stats, np.full(6, 0.5))
        assert res.diagnostics["converged"]
        # observed-information standard errors in log theta via the analytic gradient
        parts = _cle_parts(study_tree, stats)
        phi = np.log(res.theta_hat)
        h = 1e-5
        hess = np.array([(_cle_objective(phi + h * e, parts)[1] - _cle_objective(phi - h * e, parts)[1]) / (2 * h)
                         for e in np.eye(6)])
        se = res.theta_hat * np.sqrt(np.diag(np.linalg.inv((hess + hess.T) / 2)))
        assert np.all(np.abs(res.theta_hat - STUDY_THETA) <= 3 * se)

    def test_oracle_moments_exact(self, study_tree):
        model = HRTreeModel(study_tree, STUDY_THETA)
        plan = default_neighborhoods(study_tree, STUDY_OBSERVED)
        res = cle_from_moments(study_tree, oracle_stats(model, plan), np.full(6, 0.5))
        np.testing.assert_allclose(res.theta_hat, STUDY_THETA, rtol=1e-5)


class TestECE:
    def test_exact_inputs(self, rng):
        for _ in range(20):
            t = random_tree(rng, 8)
            obs = [v for v in t.nodes if t.degree(v) < 3 or rng.random() < 0.5]
            theta = rng.uniform(0.05, 2, t.n_edges)
            pairs = all_pairs(obs)
            model = HRTreeModel(t, theta)
            lhat = [bivariate_extremal_coefficient(model.path_sum(a, b)) for a, b in pairs]
            res = ece_from_coefficients(t, pairs, lhat)
            np.testing.assert_allclose(res.theta_hat, theta, rtol=1e-6)
            assert res.diagnostics["init_residual"] <= 1e-8

    def test_rank_deficient(self, chain3):
        with pytest.raises(RankDeficientPairs):
            ece_from_coefficients(chain3, [(1, 3)], [1.3])

    def test_unobserved_pair(self, study_sample):
        tree, x = study_sample
        with pytest.raises(ValueError):
            ece(x, tree, STUDY_OBSERVED, 100, pairs=[(1, 2)])


class TestEmpiricalCoefficients:
    def test_comonotone(self, rng):
        x = rng.normal(size=500)
        data = np.column_stack([x, 2 * x + 1])
        for k in (10, 37, 100):
            assert empirical_extremal_coefficient(data, [1, 2], k) == 1.0

    def test_independent(self):
        rng = np.random.default_rng(8)
        n, k = 200_000, 2000
        data = rng.random((n, 2))
        val = empirical_extremal_coefficient(data, [1, 2], k)
        assert abs(val - 2) <= 3 * math.sqrt(2 * k) / k

    def test_hr_pair(self):
        m = HRTreeModel(build_tree(2, [(1, 2)]), [0.9])
        n = 100_000
        k = int(math.sqrt(n))
        x = sample_markov_tree(m, n, seed=44)
        val = empirical_extremal_coefficient(x, [1, 2], k)
        assert abs(val - 2 * norm.cdf(0.45)) <= 3 * math.sqrt(val * k) / k

    def test_pickands_comonotone(self, rng):
        x = rng.normal(size=1000)
        data = np.column_stack([x, x**3])
        w = np.linspace(0, 1, 21)
        a = empirical_pickands(data, 1, 2, w, 100)
        assert np.all(np.abs(a - np.maximum(w, 1 - w)) <= 1 / 100 + 1e-12)

    def test_pickands_independent(self):
        rng = np.random.default_rng(9)
        data = rng.random((200_000, 2))
        a = empirical_pickands(data, 1, 2, np.array([0.2, 0.5, 0.8]), 2000)
        assert np.all(np.abs(a - 1) <= 3 * math.sqrt(2000) / 2000)

    def test_pickands_half(self, rng):
        data = rng.normal(size=(1000, 2))
        data[:, 1] += data[:, 0]
        k = 100
        half = empirical_pickands(data, 1, 2, 0.5, k)
        # both thresholds equal n - k/2 + 1/2, so the count matches the k/2 coefficient
        assert half == pytest.approx(0.5 * empirical_extremal_coefficient(data, [1, 2], k / 2), abs=1e-12)


class TestDispatch:
    def test_pooled_is_average(self, study_sample):
        tree, x = study_sample
        a = mme(x, tree, STUDY_OBSERVED, 100).theta_hat
        b = cle(x, tree, STUDY_OBSERVED, 100).theta_hat
        np.testing.assert_allclose(pooled(x, tree, STUDY_OBSERVED, 100).theta_hat, (a + b) / 2)

    def test_fit_over_k(self, study_sample):
        tree, x = study_sample
        results, mean = fit_over_k("mme", x, tree, STUDY_OBSERVED, [50, 100, 150])
        assert [r.k for r in results] == [50, 100, 150]
        np.testing.assert_allclose(mean, np.mean([r.theta_hat for r in results], axis=0))

    def test_recovery_at_moderate_n(self):
        tree = build_tree(7, STUDY_EDGES)
        model = HRTreeModel(tree, STUDY_THETA)
        x = sample_markov_tree(model, 10_000, seed=101)[:, [v - 1 for v in STUDY_OBSERVED]]
        # pairwise coefficients pin small parameters poorly, hence the wider ECE bound
        for fit, tol in ((mme, 0.15), (cle, 0.15), (ece, 0.35)):
            res = fit(x, tree, STUDY_OBSERVED, 100)
            assert np.all(np.abs(res.theta_hat - STUDY_THETA) < tol), (fit.__name__, res.theta_hat)
