"""Confidence intervals for edge parameters and Pickands bands.

Bootstrap replicate ``b`` draws from Philox keyed ``(seed, 3)`` with its
counter offset by ``b``, so replicates can run in any order or in parallel
and still merge to the same result.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import binom, rankdata

from .errors import EstimationError, NotIdentifiable, ResampleEstimationFailure, SingularJacobian
from .estimate import (
    RankTransformed,
    default_pairs,
    ece,
    empirical_extremal_coefficient,
    empirical_pickands,
    estimate,
    pareto_rank_transform,
    ranks_to_pareto,
)
from .hr_model import HRTreeModel, extremal_coefficient, pairwise_ec_jacobian
from .tree_core import Tree

STREAM_BOOTSTRAP = 3
DEFAULT_B = 500
MAX_FAILURE_SHARE = 0.1


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    bg = np.random.Philox(key=np.array([seed, STREAM_BOOTSTRAP], dtype=np.uint64),
                          counter=np.array([0, 0, b, 0], dtype=np.uint64))
    return np.random.Generator(bg)


def z_quantile(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return float(ndtri(0.5 + level / 2))


@dataclass
class CIResult:
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    method: str
    k: int
    B: int | None = None
    seed: int | None = None
    failures: int = 0
    extra: dict = field(default_factory=dict)

    def records(self, edges=None) -> list[dict]:
        out = []
        for e in range(len(self.point)):
            out.append({
                "edge": list(edges[e]) if edges is not None else e,
                "point": float(self.point[e]),
                "lower": float(self.lower[e]),
                "upper": float(self.upper[e]),
                "method": self.method,
                "level": self.level,
                "k": self.k,
                "B": self.B,
                "seed": self.seed,
            })
        return out


# ---------------------------------------------------------------------------
# resampling ranks without re-sorting


def _is_permutation_ranks(ranks: np.ndarray) -> bool:
    n = ranks.shape[0]
    return bool(np.all(np.sort(ranks, axis=0) == np.arange(1, n + 1)[:, None]))


class RankResampler:
    """Average ranks of a with-replacement resample, from multiplicity counts.

    When every original column is a permutation of 1..n the new ranks follow
    from cumulative counts along each column's order; otherwise the resample
    is ranked directly.
    """

    def __init__(self, xh: RankTransformed):
        self.xh = xh
        self.fast = _is_permutation_ranks(xh.ranks)
        self.order = np.argsort(xh.ranks, axis=0, kind="stable")

    def resample(self, counts: np.ndarray) -> RankTransformed:
        ranks = self.xh.ranks
        n, m = ranks.shape
        rows = np.repeat(np.arange(n), counts)
        if self.fast:
            new = np.empty((n, m))
            for c in range(m):
                o = self.order[:, c]
                cnt = counts[o]
                new[o, c] = np.cumsum(cnt) - (cnt - 1) / 2.0
            out = new[rows]
        else:
            out = rankdata(ranks[rows], axis=0)
        return ranks_to_pareto(out, self.xh.nodes)


# ---------------------------------------------------------------------------
# asymptotic intervals for the pairwise coefficient estimator


def ece_jacobian(model: HRTreeModel, pairs) -> np.ndarray:
    return pairwise_ec_jacobian(model, pairs)


def stdf_partials(model: HRTreeModel, pairs) -> np.ndarray:
    """d l_J / d x_u at (1, 1); equal for both members of J."""
    return np.array([ndtr(math.sqrt(model.path_sum(a, b)) / 2) for a, b in pairs])


def sigma_l_model(model: HRTreeModel, pairs) -> np.ndarray:
    """Model-based limit covariance of sqrt(k)(l_hat_J - l_J) over pairs.

    Uses B_J = W(1_J) - phi_J (W(e_a) + W(e_b)) with
    Cov(W(1_A), W(1_B)) = l(1_A) + l(1_B) - l(1_{A u B}).
    """
    pairs = [tuple(p) for p in pairs]
    cache: dict[frozenset, float] = {}

    def ell(nodes: frozenset) -> float:
        if nodes not in cache:
            cache[nodes] = 1.0 if len(nodes) == 1 else extremal_coefficient(model, sorted(nodes))
        return cache[nodes]

    def cov_w(a: frozenset, b: frozenset) -> float:
        return ell(a) + ell(b) - ell(a | b)

    partial = stdf_partials(model, pairs)
    out = np.zeros((len(pairs), len(pairs)))
    for i, j in itertools.combinations_with_replacement(range(len(pairs)), 2):
        terms_i = [(frozenset(pairs[i]), 1.0)] + [(frozenset([v]), -partial[i]) for v in pairs[i]]
        terms_j = [(frozenset(pairs[j]), 1.0)] + [(frozenset([v]), -partial[j]) for v in pairs[j]]
        val = sum(ci * cj * cov_w(a, b) for a, ci in terms_i for b, cj in terms_j)
        out[i, j] = out[j, i] = val
    return out


def sigma_l_bootstrap(data, nodes, pairs, k: int, B: int = DEFAULT_B, seed: int = 0) -> np.ndarray:
    """k times the bootstrap covariance of the empirical pairwise coefficients."""
    xh = data if isinstance(data, RankTransformed) else pareto_rank_transform(data, nodes)
    sampler = RankResampler(xh)
    n = xh.n
    reps = np.empty((B, len(pairs)))
    for b in range(B):
        counts = replicate_rng(seed, b).multinomial(n, np.full(n, 1.0 / n))
        rx = sampler.resample(counts)
        reps[b] = [empirical_extremal_coefficient(rx, p, k) for p in pairs]
    return k * np.cov(reps.T, ddof=1).reshape(len(pairs), len(pairs))


def ece_asymptotic_ci(model: HRTreeModel, pairs, k: int, level: float = 0.95,
                      sigma_l: np.ndarray | None = None) -> CIResult:
    """theta_hat +/- z sqrt(M_ee / k) with the sandwich M.

    ``model`` carries the point estimate. ``sigma_l`` defaults to the
    model-based covariance.
    """
    pairs = [tuple(p) for p in pairs]
    jac = ece_jacobian(model, pairs)
    gram = jac.T @ jac
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise SingularJacobian("Jacobian of the pairwise coefficients is rank deficient")
    if sigma_l is None:
        sigma_l = sigma_l_model(model, pairs)
    ginv = np.linalg.inv(gram)
    M = ginv @ jac.T @ sigma_l @ jac @ ginv
    half = z_quantile(level) * np.sqrt(np.maximum(np.diag(M), 0.0) / k)
    theta = np.asarray(model.theta)
    return CIResult(theta.copy(), theta - half, theta + half, level, "ece-asymptotic", k,
                    extra={"M": M.tolist(), "stdf_partials": stdf_partials(model, pairs).tolist()})


# ---------------------------------------------------------------------------
# basic bootstrap


def bootstrap_replicates(estimator: str, data, tree: Tree, observed, k: int, B: int = DEFAULT_B,
                         seed: int = 0, plan=None, pairs=None):
    """Point estimate, replicate estimates (NaN rows for failures) and failure count."""
    nodes = sorted(int(v) for v in observed)
    xh = data if isinstance(data, RankTransformed) else pareto_rank_transform(data, nodes)
    point = estimate(estimator, xh, tree, nodes, k, plan, pairs).theta_hat
    sampler = RankResampler(xh)
    n = xh.n
    reps = np.full((B, tree.n_edges), np.nan)
    failures = 0
    for b in range(B):
        counts = replicate_rng(seed, b).multinomial(n, np.full(n, 1.0 / n))
        try:
            reps[b] = estimate(estimator, sampler.resample(counts), tree, nodes, k, plan, pairs).theta_hat
        except (EstimationError, NotIdentifiable, np.linalg.LinAlgError):
            failures += 1
    return point, reps, failures


def basic_interval(point: np.ndarray, reps: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    alpha = 1 - level
    good = reps[~np.isnan(reps).any(axis=1)]
    lo_q = np.quantile(good, alpha / 2, axis=0)
    hi_q = np.quantile(good, 1 - alpha / 2, axis=0)
    return 2 * point - hi_q, 2 * point - lo_q


def basic_bootstrap_ci(estimator: str, data, tree: Tree, observed, k: int, B: int = DEFAULT_B,
                       level: float = 0.95, seed: int = 0, plan=None, pairs=None) -> CIResult:
    """[2 theta_hat - q_(1 - a/2), 2 theta_hat - q_(a/2)] from row resamples."""
    if B < 200:
        raise ValueError("basic bootstrap needs B >= 200")
    point, reps, failures = bootstrap_replicates(estimator, data, tree, observed, k, B, seed, plan, pairs)
    if failures > MAX_FAILURE_SHARE * B:
        raise ResampleEstimationFailure(f"{failures} of {B} bootstrap fits failed", failures)
    if failures:
        warnings.warn(f"{failures} of {B} bootstrap fits failed and were dropped", RuntimeWarning)
    lower, upper = basic_interval(point, reps, level)
    return CIResult(point, lower, upper, level, f"{estimator}-basic-bootstrap", k, B, seed, failures)


# ---------------------------------------------------------------------------
# beta copula and Pickands bands


def beta_copula_sample(ranks: np.ndarray, m: int, seed: int = 0) -> np.ndarray:
    """``m`` draws from the empirical beta copula of the given rank matrix."""
    ranks = np.asarray(ranks, dtype=float)
    n = ranks.shape[0]
    rng = replicate_rng(seed, 0)
    rows = rng.integers(0, n, size=m)
    r = ranks[rows]
    return rng.beta(r, n + 1 - r)


def beta_copula_pickands(ranks_u: np.ndarray, ranks_v: np.ndarray, w, k: int):
    """Pickands functional of the empirical beta copula, computed exactly.

    (n/k) * (1 - C(1 - k(1-w)/n, 1 - k w/n)) where C averages products of
    Beta(r, n+1-r) CDFs, each a binomial upper tail.
    """
    n = len(ranks_u)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    s = 1 - k * (1 - w) / n
    t = 1 - k * w / n
    # P(Beta(r, n+1-r) <= s) = P(Binomial(n, s) >= r)
    fu = binom.sf(np.asarray(ranks_u)[:, None] - 1, n, np.clip(s, 0, 1)[None, :])
    fv = binom.sf(np.asarray(ranks_v)[:, None] - 1, n, np.clip(t, 0, 1)[None, :])
    return (n / k) * (1 - np.mean(fu * fv, axis=0))


@dataclass
class PickandsBand:
    w: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    B: int
    level: float


def pickands_bootstrap_band(data, u: int, v: int, k: int, w_grid, B: int = 1000, level: float = 0.95,
                            seed: int = 0, nodes: Sequence[int] | None = None) -> PickandsBand:
    """[A_hat - b*, A_hat - a*] with a*, b* quantiles of A* - A_beta."""
    if B < 1:
        raise ValueError("B must be positive")
    xh = data if isinstance(data, RankTransformed) else pareto_rank_transform(data, nodes)
    w = np.asarray(w_grid, dtype=float)
    ru = xh.ranks[:, xh.column(u)]
    rv = xh.ranks[:, xh.column(v)]
    est = empirical_pickands(xh, u, v, w, k)
    centre = beta_copula_pickands(ru, rv, w, k)
    pair_ranks = np.column_stack([ru, rv])
    n = xh.n
    diffs = np.empty((B, len(w)))
    for b in range(B):
        rng = replicate_rng(seed, b)
        rows = rng.integers(0, n, size=n)
        r = pair_ranks[rows]
        sample = rng.beta(r, n + 1 - r)
        sx = ranks_to_pareto(rankdata(sample, axis=0), (1, 2))
        diffs[b] = empirical_pickands(sx, 1, 2, w, k) - centre
    alpha = 1 - level
    a_star = np.quantile(diffs, alpha / 2, axis=0)
    b_star = np.quantile(diffs, 1 - alpha / 2, axis=0)
    return PickandsBand(w, est, est - b_star, est - a_star, B, level)


def ece_ci_from_data(data, tree: Tree, observed, k: int, pairs=None, level: float = 0.95,
                     sigma: str = "bootstrap", B: int = DEFAULT_B, seed: int = 0) -> CIResult:
    """Fit the pairwise coefficient estimator and attach asymptotic intervals.

    ``sigma`` picks the covariance of the empirical coefficients:
    ``"bootstrap"`` (default) or ``"model"`` (closed form at the estimate).
    """
    nodes = sorted(int(v) for v in observed)
    pairs = default_pairs(nodes) if pairs is None else [tuple(p) for p in pairs]
    xh = data if isinstance(data, RankTransformed) else pareto_rank_transform(data, nodes)
    fit = ece(xh, tree, nodes, k, pairs)
    model = HRTreeModel(tree, fit.theta_hat)
    if sigma == "bootstrap":
        sl = sigma_l_bootstrap(xh, nodes, pairs, k, B, seed)
    elif sigma == "model":
        sl = sigma_l_model(model, pairs)
    else:
        raise ValueError("sigma must be 'bootstrap' or 'model'")
    ci = ece_asymptotic_ci(model, pairs, k, level, sl)
    ci.B = B if sigma == "bootstrap" else None
    ci.seed = seed
    return ci
