"""Monte Carlo harness: simulate, fit every estimator over a k-grid, summarize errors."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, NotIdentifiable, ResampleEstimationFailure
from .estimate import DEFAULT_K_GRID, default_neighborhoods, estimate, pareto_rank_transform
from .hr_model import HRTreeModel
from .simulate import DEFAULT_ROOT, add_noise, sample_markov_tree
from .tree_core import build_tree

STUDY_EDGES = ((1, 2), (2, 3), (3, 4), (3, 5), (1, 6), (1, 7))
STUDY_THETA = (0.1, 0.3, 0.8, 0.5, 0.2, 1.2)
STUDY_LATENT = (1, 3)
THREADS_ENV = "TAILTREE_THREADS"


@dataclass
class StudyConfig:
    edges: tuple = STUDY_EDGES
    node_count: int = 7
    theta: tuple = STUDY_THETA
    latent: tuple = STUDY_LATENT
    reps: int = 200
    n: int = 1000
    k_grid: tuple = DEFAULT_K_GRID
    estimators: tuple = ("mme", "cle", "ece")
    noise_sigma: float = 1.0
    root: int = DEFAULT_ROOT
    seed: int = 0
    max_failure_share: float = 0.1


@dataclass
class StudyResult:
    config: StudyConfig
    # estimator -> array reps x len(k_grid) x edges, NaN where the fit failed
    estimates: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def summary_rows(self) -> list[dict]:
        truth = np.asarray(self.config.theta)
        rows = []
        for name in self.config.estimators:
            est = self.estimates[name]
            for e, edge in enumerate(self.config.edges):
                for j, k in enumerate(self.config.k_grid):
                    vals = est[:, j, e]
                    vals = vals[~np.isnan(vals)]
                    err = vals - truth[e]
                    rows.append({
                        "estimator": name,
                        "edge": f"{edge[0]}-{edge[1]}",
                        "k": int(k),
                        "bias": float(err.mean()),
                        "sd": float(vals.std()),
                        "rmse": float(np.sqrt(np.mean(err**2))),
                    })
        return rows


def replicate_seed(seed: int, rep: int) -> int:
    """Seed for replicate ``rep``; distinct (seed, rep) pairs never collide."""
    return int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        count = int(raw)
        if count < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer")
        return count
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_replicate(cfg: StudyConfig, rep: int) -> np.ndarray:
    """Estimates (estimators x k_grid x edges) for one simulated data set."""
    tree = build_tree(cfg.node_count, cfg.edges)
    model = HRTreeModel(tree, cfg.theta)
    s = replicate_seed(cfg.seed, rep)
    x = sample_markov_tree(model, cfg.n, seed=s, root=cfg.root)
    if cfg.noise_sigma > 0:
        x = add_noise(x, cfg.noise_sigma, seed=s)
    observed = [v for v in tree.nodes if v not in cfg.latent]
    x = x[:, [v - 1 for v in observed]]
    xh = pareto_rank_transform(x, observed)
    plan = default_neighborhoods(tree, observed)
    out = np.full((len(cfg.estimators), len(cfg.k_grid), tree.n_edges), np.nan)
    for i, name in enumerate(cfg.estimators):
        for j, k in enumerate(cfg.k_grid):
            try:
                out[i, j] = estimate(name, xh, tree, observed, int(k), plan).theta_hat
            except (EstimationError, NotIdentifiable, np.linalg.LinAlgError):
                pass
    return out


def _job(args):
    return run_replicate(*args)


def run_study(cfg: StudyConfig, threads: int | None = None) -> StudyResult:
    """Replicates run in parallel when ``threads`` > 1; results are merged in replicate order."""
    if cfg.reps < 1 or cfg.n < 1:
        raise ValueError("reps and n must be positive")
    if not cfg.k_grid or min(cfg.k_grid) < 1 or max(cfg.k_grid) > cfg.n:
        raise ValueError("k grid must be nonempty and within [1, n]")
    threads = thread_count() if threads is None else threads
    jobs = [(cfg, r) for r in range(cfg.reps)]
    if threads > 1 and cfg.reps > 1:
        with ProcessPoolExecutor(max_workers=min(threads, cfg.reps)) as pool:
            reps = list(pool.map(_job, jobs))
    else:
        reps = [_job(j) for j in jobs]
    stacked = np.stack(reps)  # reps x estimators x k x edges
    result = StudyResult(cfg)
    for i, name in enumerate(cfg.estimators):
        est = stacked[:, i]
        # a replicate fails for an estimator when any k on the grid failed
        failed = int(np.isnan(est).any(axis=(1, 2)).sum())
        result.estimates[name] = est
        result.failures[name] = failed
        if failed > cfg.max_failure_share * cfg.reps:
            raise ResampleEstimationFailure(f"{name}: {failed} of {cfg.reps} replicates failed", failed)
    return result


def format_study_csv(result: StudyResult) -> str:
    lines = ["estimator,edge,k,bias,sd,rmse"]
    for row in result.summary_rows():
        lines.append(",".join([row["estimator"], row["edge"], str(row["k"]),
                               repr(row["bias"]), repr(row["sd"]), repr(row["rmse"])]))
    return "\n".join(lines) + "\n"
