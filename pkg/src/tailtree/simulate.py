"""Exact sampling of the Huesler-Reiss Markov tree and its tail trees.

Random streams: every generator is Philox keyed by ``(seed, tag)`` where the
tag separates uses (0 = Markov tree, 1 = noise, 2 = tail tree). In the
Markov tree sampler, row ``i`` consumes a fixed block of ``stride`` raw
64-bit words starting at word ``i * stride``; column ``c`` of that block
drives node ``c + 1``. Any row range can therefore be generated on its own
and matches the serial output bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr, ndtr

from .errors import BracketFailure, NonPositiveInput
from .hr_model import HRTreeModel

DEFAULT_ROOT = 2
STREAM_TREE, STREAM_NOISE, STREAM_TAIL = 0, 1, 2
_BRACKET_HALFWIDTH = 10.0  # in units of theta, on the log scale
_MAX_EXPANSIONS = 60


def _generator(seed: int, tag: int) -> np.random.Philox:
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    return np.random.Philox(key=np.array([seed, tag], dtype=np.uint64))


def _open_uniform(raw: np.ndarray) -> np.ndarray:
    """Map raw 64-bit words to the open interval (0, 1) on the 2^-53 grid."""
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def _log_cdf_t(t, log_xv, inv_xv, theta):
    """log F(x_j | x_v) with t = log x_j."""
    r = (t - log_xv) / theta
    a = theta / 2 + r
    b = theta / 2 - r
    return log_ndtr(a) + ndtr(-a) * inv_xv - ndtr(b) * np.exp(-t)


def hr_pair_conditional_cdf(x_j, x_v, theta):
    """Conditional CDF of node j given its neighbour v across an edge ``theta``."""
    x_j = np.asarray(x_j, dtype=float)
    x_v = np.asarray(x_v, dtype=float)
    if np.any(x_j <= 0) or np.any(x_v <= 0) or theta <= 0:
        raise NonPositiveInput("conditional CDF arguments must be positive")
    out = np.exp(_log_cdf_t(np.log(x_j), np.log(x_v), 1.0 / x_v, float(theta)))
    return float(out) if out.ndim == 0 else out


def sample_conditional(x_v, theta: float, u01):
    """Invert the conditional CDF: returns x_j with F(x_j | x_v) = u01.

    Vectorized over ``x_v`` and ``u01``. Bisection on log x_j from the
    bracket x_v * exp(+/-10 theta), widened by doubling, finished by one
    secant step between the final bracket ends.
    """
    x_v = np.asarray(x_v, dtype=float)
    u01 = np.asarray(u01, dtype=float)
    scalar = x_v.ndim == 0 and u01.ndim == 0
    x_v, u01 = np.broadcast_arrays(np.atleast_1d(x_v), np.atleast_1d(u01))
    if np.any(x_v <= 0) or theta <= 0:
        raise NonPositiveInput("conditioning value and theta must be positive")
    if np.any((u01 <= 0) | (u01 >= 1)):
        raise ValueError("u01 must lie strictly inside (0, 1)")
    theta = float(theta)
    log_xv = np.log(x_v)
    inv_xv = 1.0 / x_v
    target = np.log(u01)

    def g(t):
        return _log_cdf_t(t, log_xv, inv_xv, theta) - target

    width = np.full(x_v.shape, _BRACKET_HALFWIDTH * theta)
    lo = log_xv - width
    hi = log_xv + width
    glo, ghi = g(lo), g(hi)
    for _ in range(_MAX_EXPANSIONS):
        bad_lo = glo > 0
        bad_hi = ghi < 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        width = np.where(bad_lo | bad_hi, 2 * width, width)
        lo = np.where(bad_lo, log_xv - width, lo)
        hi = np.where(bad_hi, log_xv + width, hi)
        glo = np.where(bad_lo, g(lo), glo)
        ghi = np.where(bad_hi, g(hi), ghi)
    else:
        if np.any(glo > 0) or np.any(ghi < 0):
            raise BracketFailure("could not bracket the conditional quantile")

    tol = 1e-12 * min(1.0, theta)
    while True:
        active = hi - lo > tol
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        up = gm < 0
        lo = np.where(active & up, mid, lo)
        glo = np.where(active & up, gm, glo)
        hi = np.where(active & ~up, mid, hi)
        ghi = np.where(active & ~up, gm, ghi)
    denom = ghi - glo
    frac = np.where(denom > 0, -glo / np.where(denom > 0, denom, 1.0), 0.5)
    t = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
    out = np.exp(t)
    return float(out[0]) if scalar else out


def _stride(d: int) -> int:
    return 4 * math.ceil(d / 4)


def markov_tree_uniforms(d: int, seed: int, start: int, stop: int) -> np.ndarray:
    """Uniform block for rows ``start..stop-1`` (columns = nodes)."""
    stride = _stride(d)
    bg = _generator(seed, STREAM_TREE)
    bg.advance(start * stride // 4)
    raw = bg.random_raw((stop - start) * stride).reshape(stop - start, stride)
    return _open_uniform(raw[:, :d])


def _traversal(model: HRTreeModel, root: int) -> list[tuple[int, int, int]]:
    """(parent, child, edge position) in BFS order away from ``root``."""
    tree = model.tree
    order = []
    seen = {root}
    frontier = [root]
    while frontier:
        nxt = []
        for v in frontier:
            for j in tree.adjacency[v - 1]:
                if j not in seen:
                    seen.add(j)
                    order.append((v, j, tree.edge_index[(min(v, j), max(v, j))]))
                    nxt.append(j)
        frontier = nxt
    return order


def sample_markov_tree(model: HRTreeModel, n: int, seed: int, root: int = DEFAULT_ROOT,
                       rows: tuple[int, int] | None = None) -> np.ndarray:
    """``n`` iid rows from the Markov tree with unit Frechet margins.

    ``rows=(start, stop)`` generates only that slice of the n-row sample.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    d = model.d
    root = model.tree.check_node(root)
    start, stop = rows if rows is not None else (0, n)
    if not 0 <= start <= stop <= n:
        raise ValueError(f"row range {rows} outside 0..{n}")
    out = np.empty((stop - start, d))
    if stop == start:
        return out
    u = markov_tree_uniforms(d, seed, start, stop)
    out[:, root - 1] = -1.0 / np.log(u[:, root - 1])
    for v, j, e in _traversal(model, root):
        out[:, j - 1] = sample_conditional(out[:, v - 1], model.theta[e], u[:, j - 1])
    return out


def add_noise(samples: np.ndarray, sigma: float = 1.0, seed: int = 0) -> np.ndarray:
    """Add iid Normal(0, sigma^2) noise to every cell."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    samples = np.asarray(samples, dtype=float)
    if sigma == 0:
        return samples.copy()
    rng = np.random.Generator(_generator(seed, STREAM_NOISE))
    return samples + sigma * rng.standard_normal(samples.shape)


@dataclass(frozen=True)
class TailTreeSample:
    base: int
    nodes: tuple[int, ...]  # every node except the base, ascending
    values: np.ndarray  # n x (d - 1), columns follow ``nodes``


def sample_tail_tree(model: HRTreeModel, u: int, n: int, seed: int) -> TailTreeSample:
    """Products of lognormal edge increments along the paths from ``u``."""
    tree = model.tree
    u = tree.check_node(u)
    rng = np.random.Generator(_generator(seed, STREAM_TAIL))
    th = model.theta
    log_m = rng.standard_normal((n, tree.n_edges)) * th - th**2 / 2
    nodes = tuple(v for v in tree.nodes if v != u)
    inc = tree.incidence[u - 1][[v - 1 for v in nodes]].astype(float)
    return TailTreeSample(u, nodes, np.exp(log_m @ inc.T))


def format_samples_csv(samples: np.ndarray, labels) -> str:
    lines = [",".join(labels)]
    lines += [",".join(repr(float(x)) for x in row) for row in np.asarray(samples)]
    return "\n".join(lines) + "\n"


def write_samples_csv(path, samples: np.ndarray, labels) -> None:
    Path(path).write_text(format_samples_csv(samples, labels))
