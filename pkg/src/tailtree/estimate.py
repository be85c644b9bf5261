"""Estimators of the edge parameters from observed-node data.

Data arrays have one column per observed node, in ascending node order.
Every estimator works from the column ranks only, so any strictly
increasing transformation of a column leaves the output unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize, nnls
from scipy.special import ndtri
from scipy.stats import rankdata

from .errors import (
    DegenerateColumn,
    EmptyExceedanceSet,
    NotIdentifiable,
    OptimizerDivergence,
    RankDeficientPairs,
    SolverFailure,
    TooFewRows,
)
from .hr_model import bivariate_extremal_coefficient
from .tree_core import Tree, all_pairs, check_identifiability_rank, exact_rank, path_sum_matrix

THETA_FLOOR = 1e-4
THETA_CEILING = 50.0
DEFAULT_K_GRID = (25, 50, 100, 150, 200, 300)
ESTIMATORS = ("mme", "cle", "ece", "pooled")
_EC_CLAMP = 1e-3


# ---------------------------------------------------------------------------
# ranks and tail statistics


@dataclass(frozen=True)
class RankTransformed:
    nodes: tuple[int, ...]
    ranks: np.ndarray  # n x m average ranks
    xhat: np.ndarray  # (n + 1) / (n + 1 - rank)

    @property
    def n(self) -> int:
        return self.ranks.shape[0]

    def column(self, node: int) -> int:
        return self.nodes.index(node)


def ranks_to_pareto(ranks: np.ndarray, nodes: Sequence[int]) -> RankTransformed:
    ranks = np.asarray(ranks, dtype=float)
    n = ranks.shape[0]
    return RankTransformed(tuple(int(v) for v in nodes), ranks, (n + 1) / (n + 1 - ranks))


def pareto_rank_transform(data, nodes: Sequence[int] | None = None) -> RankTransformed:
    """Empirical standard Pareto margins from average ranks."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise ValueError("data must be a 2-d array")
    n, m = data.shape
    if n < 2:
        raise TooFewRows(f"need at least 2 rows, got {n}")
    if np.isnan(data).any():
        raise ValueError("data contains missing values; drop incomplete rows first")
    nodes = tuple(range(1, m + 1)) if nodes is None else tuple(nodes)
    if len(nodes) != m:
        raise ValueError(f"{m} columns but {len(nodes)} nodes")
    for c in range(m):
        if np.all(data[:, c] == data[0, c]):
            raise DegenerateColumn(f"column for node {nodes[c]} is constant")
    return ranks_to_pareto(rankdata(data, axis=0), nodes)


def _as_ranks(data, nodes) -> RankTransformed:
    if isinstance(data, RankTransformed):
        if tuple(data.nodes) != tuple(nodes):
            raise ValueError("rank matrix nodes do not match the observed set")
        return data
    return pareto_rank_transform(data, nodes)


def exceedance_rows(xh: RankTransformed, u: int, k: int) -> np.ndarray:
    n = xh.n
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in 1..{n}, got {k}")
    rows = np.flatnonzero(xh.xhat[:, xh.column(u)] > n / k)
    if rows.size == 0:
        raise EmptyExceedanceSet(f"no exceedances at node {u} for k={k}")
    return rows


def log_differences(xh: RankTransformed, u: int, k: int, nodes: Sequence[int] | None = None) -> np.ndarray:
    """Rows ln X_v - ln X_u over the exceedances at ``u``; columns follow ``nodes``.

    ``nodes`` defaults to every other observed node in ascending order.
    """
    rows = exceedance_rows(xh, u, k)
    if nodes is None:
        nodes = [v for v in xh.nodes if v != u]
    cols = [xh.column(v) for v in nodes]
    logx = np.log(xh.xhat[rows])
    return logx[:, cols] - logx[:, [xh.column(u)]]


def empirical_mu_sigma(deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and covariance with divisor equal to the row count."""
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim != 2 or deltas.shape[0] < 2:
        raise TooFewRows("need at least two rows of log-differences")
    mean = deltas.mean(axis=0)
    centered = deltas - mean
    return mean, centered.T @ centered / deltas.shape[0]


def _ranks_of(data, nodes) -> RankTransformed:
    return data if isinstance(data, RankTransformed) else pareto_rank_transform(data, nodes)


def empirical_extremal_coefficient(data, J: Sequence[int], k: int, nodes: Sequence[int] | None = None) -> float:
    """Share of rows where some node in J has rank above n - k + 1/2, scaled by 1/k."""
    xh = _ranks_of(data, nodes)
    n = xh.n
    cols = [xh.column(v) for v in J]
    top = xh.ranks[:, cols].max(axis=1)
    return float(np.count_nonzero(top > n - k + 0.5)) / k


def empirical_pickands(data, u: int, v: int, w, k: int, nodes: Sequence[int] | None = None):
    """Nonparametric Pickands function with per-margin thresholds."""
    xh = _ranks_of(data, nodes)
    n = xh.n
    w = np.asarray(w, dtype=float)
    if np.any((w < 0) | (w > 1)):
        raise ValueError("w must lie in [0, 1]")
    ru = xh.ranks[:, xh.column(u)]
    rv = xh.ranks[:, xh.column(v)]
    flat = w.ravel()
    tu = n - k * (1 - flat) + 0.5
    tv = n - k * flat + 0.5
    both = np.array([np.count_nonzero((ru > a) | (rv > b)) for a, b in zip(tu, tv)], dtype=float)
    out = (both / k).reshape(w.shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# neighbourhoods


@dataclass(frozen=True)
class NeighborhoodPlan:
    sets: Mapping[int, tuple[int, ...]]  # u -> W_u (ascending, contains u)
    radius: int | None = None

    def pairs(self) -> list[tuple[int, int]]:
        seen = set()
        for W in self.sets.values():
            seen.update(all_pairs(W))
        return sorted(seen)


def _plan_rank(tree: Tree, sets) -> int:
    pairs = set()
    for W in sets.values():
        pairs.update(all_pairs(W))
    if not pairs:
        return 0
    return exact_rank(path_sum_matrix(tree, sorted(pairs)).matrix)


def neighborhood_plan(tree: Tree, observed, sets: Mapping[int, Sequence[int]]) -> NeighborhoodPlan:
    """Validate user-chosen neighbourhoods."""
    obs = frozenset(int(v) for v in observed)
    clean = {}
    for u, W in sets.items():
        W = tuple(sorted({int(v) for v in W} | {int(u)}))
        if not set(W) <= obs:
            raise ValueError(f"neighbourhood of {u} contains unobserved nodes")
        clean[int(u)] = W
    if _plan_rank(tree, clean) < tree.n_edges:
        raise NotIdentifiable("neighbourhoods do not identify every edge parameter")
    return NeighborhoodPlan(clean)


def default_neighborhoods(tree: Tree, observed, radius: int = 2) -> NeighborhoodPlan:
    """Observed nodes within ``radius`` of each u, widened until identifiable."""
    obs = sorted(int(v) for v in observed)
    if not check_identifiability_rank(tree, obs):
        raise NotIdentifiable("edge parameters are not identifiable from the observed nodes")
    if radius < 1:
        raise ValueError("radius must be at least 1")
    diameter = int(tree.distances.max())
    r = radius
    while True:
        sets = {u: tuple(v for v in obs if tree.distances[u - 1, v - 1] <= r) for u in obs}
        if r >= diameter or _plan_rank(tree, sets) == tree.n_edges:
            return NeighborhoodPlan(sets, r)
        r += 1


# ---------------------------------------------------------------------------
# results


@dataclass
class EstimateResult:
    theta_hat: np.ndarray
    estimator: str
    k: int
    objective_value: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "k": self.k,
            "theta_hat": [float(t) for t in self.theta_hat],
            "objective_value": float(self.objective_value),
            "diagnostics": self.diagnostics,
        }


def _floor(x2: np.ndarray) -> np.ndarray:
    return np.maximum(np.sqrt(np.maximum(x2, 0.0)), THETA_FLOOR)


# ---------------------------------------------------------------------------
# moment statistics per neighbourhood


@dataclass(frozen=True)
class MomentStats:
    base: int
    nodes: tuple[int, ...]  # W_u without u
    count: int
    mean: np.ndarray
    cov: np.ndarray


def moment_stats(xh: RankTransformed, plan: NeighborhoodPlan, k: int) -> list[MomentStats]:
    out = []
    for u, W in sorted(plan.sets.items()):
        rest = tuple(v for v in W if v != u)
        if not rest:
            continue
        deltas = log_differences(xh, u, k, rest)
        mean, cov = empirical_mu_sigma(deltas)
        out.append(MomentStats(u, rest, deltas.shape[0], mean, cov))
    return out


def _design(tree: Tree, u: int, nodes: Sequence[int]) -> np.ndarray:
    """0/1 matrix C with Sigma_{W,u}(theta) = C diag(theta^2) C^T."""
    return tree.incidence[u - 1][[v - 1 for v in nodes]].astype(float)


def _mme_system(tree: Tree, stats: Sequence[MomentStats]):
    blocks, targets = [], []
    for s in stats:
        c = _design(tree, s.base, s.nodes)
        # vec(C diag(x) C^T) = (C * C) stacked over entry pairs
        blocks.append(np.einsum("ie,je->ije", c, c).reshape(-1, tree.n_edges))
        targets.append(s.cov.ravel())
    return np.vstack(blocks), np.concatenate(targets)


def mme_from_moments(tree: Tree, stats: Sequence[MomentStats], k: int = 0) -> EstimateResult:
    a, b = _mme_system(tree, stats)
    if exact_rank(a != 0) < tree.n_edges:
        raise NotIdentifiable("moment system does not identify every edge parameter")
    try:
        x2, _ = nnls(a, b, maxiter=50 * a.shape[1])
    except RuntimeError as exc:
        raise SolverFailure(f"nonnegative least squares failed: {exc}") from None
    theta = _floor(x2)
    obj = float(np.sum((a @ theta**2 - b) ** 2))
    return EstimateResult(theta, "mme", k, obj, {"exceedances": {str(s.base): s.count for s in stats}})


def mme(data, tree: Tree, observed, k: int, plan: NeighborhoodPlan | None = None) -> EstimateResult:
    """Method of moments: least squares in theta^2 over all neighbourhood covariances."""
    nodes = sorted(int(v) for v in observed)
    plan = plan or default_neighborhoods(tree, nodes)
    xh = _as_ranks(data, nodes)
    return mme_from_moments(tree, moment_stats(xh, plan, k), k)


def _cle_parts(tree: Tree, stats: Sequence[MomentStats]):
    return [(s, _design(tree, s.base, s.nodes)) for s in stats]


def _cle_objective(phi: np.ndarray, parts) -> tuple[float, np.ndarray]:
    """Negative composite log-likelihood and its gradient in log theta."""
    x = np.exp(2 * phi)
    total = 0.0
    grad_x = np.zeros_like(x)
    for s, c in parts:
        m = len(s.nodes)
        sigma = (c * x) @ c.T
        mu = -0.5 * (c @ x)
        chol = np.linalg.cholesky(sigma)
        inv = np.linalg.inv(sigma)
        r = s.mean - mu
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        quad = np.trace(inv @ s.cov) + r @ inv @ r
        total += 0.5 * s.count * (m * math.log(2 * math.pi) + logdet + quad)
        # d/dSigma and d/dmu of the block
        inv_r = inv @ r
        g_sigma = 0.5 * s.count * (inv - inv @ (s.cov + np.outer(r, r)) @ inv)
        g_mu = -s.count * inv_r
        grad_x += np.einsum("ie,ij,je->e", c, g_sigma, c) - 0.5 * (c.T @ g_mu)
    return total, grad_x * 2 * x


def _cle_objective_sq(x: np.ndarray, parts) -> tuple[float, np.ndarray]:
    value, grad_phi = _cle_objective(0.5 * np.log(x), parts)
    return value, grad_phi / (2 * x)


def cle_from_moments(tree: Tree, stats: Sequence[MomentStats], init, k: int = 0) -> EstimateResult:
    """Minimise in theta^2 first, then refine in log theta; keep the lower objective.

    In log coordinates the gradient of a small parameter vanishes, so a
    start with one edge near the floor can stall far from the optimum.
    """
    parts = _cle_parts(tree, stats)
    init = np.clip(np.asarray(init, dtype=float), THETA_FLOOR, THETA_CEILING)
    opts = {"maxiter": 500, "gtol": 1e-6, "ftol": 1e-13}
    try:
        sq = minimize(_cle_objective_sq, init**2, args=(parts,), jac=True, method="L-BFGS-B",
                      bounds=[(THETA_FLOOR**2, THETA_CEILING**2)] * tree.n_edges, options=opts)
        start = np.clip(np.sqrt(sq.x), THETA_FLOOR, THETA_CEILING)
        res = minimize(_cle_objective, np.log(start), args=(parts,), jac=True, method="L-BFGS-B",
                       bounds=[(math.log(THETA_FLOOR), math.log(THETA_CEILING))] * tree.n_edges, options=opts)
    except np.linalg.LinAlgError:
        raise OptimizerDivergence("covariance lost positive definiteness during optimisation") from None
    theta, fun = np.exp(res.x), res.fun
    if not res.fun <= sq.fun:
        theta, fun = start, sq.fun
    if not (np.all(np.isfinite(theta)) and np.isfinite(fun)):
        raise OptimizerDivergence(f"composite likelihood optimisation diverged: {res.message}")
    diag = {
        "exceedances": {str(s.base): s.count for s in stats},
        "converged": bool(res.success or sq.success),
        "iterations": int(sq.nit + res.nit),
        "message": str(res.message),
    }
    return EstimateResult(theta, "cle", k, float(fun), diag)


def cle(data, tree: Tree, observed, k: int, plan: NeighborhoodPlan | None = None, init=None) -> EstimateResult:
    """Composite likelihood over the Gaussian log-difference limits; starts from MME."""
    nodes = sorted(int(v) for v in observed)
    plan = plan or default_neighborhoods(tree, nodes)
    xh = _as_ranks(data, nodes)
    stats = moment_stats(xh, plan, k)
    if init is None:
        init = mme_from_moments(tree, stats, k).theta_hat
    return cle_from_moments(tree, stats, init, k)


def default_pairs(observed) -> list[tuple[int, int]]:
    return all_pairs(observed)


def ece_from_coefficients(tree: Tree, pairs: Sequence[tuple[int, int]], lhat, k: int = 0) -> EstimateResult:
    """Least squares fit of 2 Phi(sqrt(p_J)/2) to pairwise coefficients."""
    pairs = [tuple(int(v) for v in p) for p in pairs]
    coef = path_sum_matrix(tree, pairs)
    if coef.rank() < tree.n_edges:
        raise RankDeficientPairs("pairs do not identify every edge parameter")
    lhat = np.asarray(lhat, dtype=float)
    clamped = np.clip(lhat, 1.0, 2.0 - _EC_CLAMP)
    phat = (2.0 * ndtri(clamped / 2.0)) ** 2
    a = coef.matrix.astype(float)
    try:
        x2, init_resid = nnls(a, phat, maxiter=50 * a.shape[1])
    except RuntimeError as exc:
        raise SolverFailure(f"nonnegative least squares failed: {exc}") from None
    # polish in x = theta^2: in theta the gradient vanishes at 0, which traps
    # small parameters on the floor
    lo, hi = THETA_FLOOR**2, THETA_CEILING**2
    start = np.clip(x2, lo, hi)

    def resid(x):
        return bivariate_extremal_coefficient(a @ x) - lhat

    def jac(x):
        p = a @ x
        s = np.sqrt(p)
        return (np.exp(-p / 8) / math.sqrt(2 * math.pi) / (2 * s))[:, None] * a

    res = least_squares(resid, start, jac=jac, bounds=(lo, hi), method="trf",
                        xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=2000)
    theta = np.sqrt(res.x)
    if not np.all(np.isfinite(theta)):
        raise OptimizerDivergence("pairwise coefficient fit diverged")
    diag = {"converged": bool(res.success), "message": str(res.message), "init_residual": float(init_resid)}
    return EstimateResult(theta, "ece", k, float(2 * res.cost), diag)


def ece(data, tree: Tree, observed, k: int, pairs: Sequence[tuple[int, int]] | None = None) -> EstimateResult:
    """Pairwise extremal coefficient estimator with identity weights."""
    nodes = sorted(int(v) for v in observed)
    pairs = default_pairs(nodes) if pairs is None else [tuple(p) for p in pairs]
    for a, b in pairs:
        if a not in nodes or b not in nodes:
            raise ValueError(f"pair ({a}, {b}) involves an unobserved node")
    xh = _as_ranks(data, nodes)
    lhat = [empirical_extremal_coefficient(xh, p, k) for p in pairs]
    return ece_from_coefficients(tree, pairs, lhat, k)


def pooled(data, tree: Tree, observed, k: int, plan: NeighborhoodPlan | None = None) -> EstimateResult:
    """Average of the MME and CLE estimates."""
    nodes = sorted(int(v) for v in observed)
    plan = plan or default_neighborhoods(tree, nodes)
    xh = _as_ranks(data, nodes)
    stats = moment_stats(xh, plan, k)
    a = mme_from_moments(tree, stats, k)
    b = cle_from_moments(tree, stats, a.theta_hat, k)
    diag = {"exceedances": a.diagnostics["exceedances"], "converged": b.diagnostics["converged"]}
    return EstimateResult((a.theta_hat + b.theta_hat) / 2, "pooled", k, float("nan"), diag)


def estimate(name: str, data, tree: Tree, observed, k: int, plan=None, pairs=None) -> EstimateResult:
    """Dispatch by estimator name."""
    if name == "mme":
        return mme(data, tree, observed, k, plan)
    if name == "cle":
        return cle(data, tree, observed, k, plan)
    if name == "ece":
        return ece(data, tree, observed, k, pairs)
    if name == "pooled":
        return pooled(data, tree, observed, k, plan)
    raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}")


def fit_over_k(name: str, data, tree: Tree, observed, ks: Sequence[int], plan=None, pairs=None):
    """Estimates at every k plus their average (the reported point estimate)."""
    nodes = sorted(int(v) for v in observed)
    if name != "ece" and plan is None:
        plan = default_neighborhoods(tree, nodes)
    xh = _as_ranks(data, nodes)
    results = [estimate(name, xh, tree, nodes, int(k), plan, pairs) for k in ks]
    if not results:
        raise ValueError("k range is empty")
    return results, np.mean([r.theta_hat for r in results], axis=0)
