"""Multivariate normal CDF and log-density.

The CDF uses Genz's separation-of-variables transform with Genz-Bretz
variable reordering, integrated by a randomly shifted rank-1 (Richtmyer)
lattice with the baker's periodization. Shifts come from a fixed seed so
repeated calls are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DimensionMismatch, NotPositiveDefinite

MAX_DIM = 16
DEFAULT_TOL = 1e-5
DEFAULT_MAX_POINTS = 1_000_000
_N_SHIFTS = 12
_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53)
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CdfResult:
    value: float
    error_estimate: float  # three standard errors over the random shifts
    evaluations: int

    def __float__(self):
        return self.value


def _as_cov(cov) -> np.ndarray:
    a = np.atleast_2d(np.asarray(cov, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"covariance must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-12 * scale:
        raise NotPositiveDefinite("covariance matrix is not symmetric")
    return a


def cholesky(cov) -> np.ndarray:
    """Lower Cholesky factor with a single diagonal jitter retry."""
    a = _as_cov(cov)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    p = a.shape[0]
    jitter = 1e-12 * np.trace(a) / p
    try:
        return np.linalg.cholesky(a + jitter * np.eye(p))
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("covariance matrix is not positive definite") from None


def mvn_logpdf(x, mean, cov):
    """Gaussian log-density. ``x`` may be a vector or an (n, p) batch."""
    a = _as_cov(cov)
    p = a.shape[0]
    x = np.asarray(x, dtype=float)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (p,))
    if x.shape[-1] != p:
        raise DimensionMismatch(f"x has {x.shape[-1]} coordinates, covariance is {p}x{p}")
    chol = cholesky(a)
    z = np.linalg.solve(chol, (x - mean).reshape(-1, p).T)
    out = -0.5 * (p * _LOG_2PI + np.sum(z * z, axis=0)) - np.sum(np.log(np.diag(chol)))
    return float(out[0]) if x.ndim == 1 else out


def _reorder(b: np.ndarray, cov: np.ndarray):
    """Genz-Bretz ordering: integrate the least likely variable first.

    Returns the permutation and the Cholesky factor of the permuted matrix.
    """
    p = len(b)
    c = cov.copy()
    b = b.copy()
    perm = np.arange(p)
    chol = np.zeros((p, p))
    y = np.zeros(p)
    for i in range(p):
        best, best_prob = i, np.inf
        for j in range(i, p):
            var = c[j, j] - chol[j, :i] @ chol[j, :i]
            if var <= 0:
                raise NotPositiveDefinite("covariance matrix is not positive definite")
            lim = (b[j] - chol[j, :i] @ y[:i]) / math.sqrt(var)
            prob = ndtr(lim)
            if prob < best_prob:
                best, best_prob = j, prob
        if best != i:
            for arr in (b, perm):
                arr[[i, best]] = arr[[best, i]]
            c[[i, best], :] = c[[best, i], :]
            c[:, [i, best]] = c[:, [best, i]]
            chol[[i, best], :i] = chol[[best, i], :i]
        diag = math.sqrt(c[i, i] - chol[i, :i] @ chol[i, :i])
        chol[i, i] = diag
        for j in range(i + 1, p):
            chol[j, i] = (c[j, i] - chol[j, :i] @ chol[i, :i]) / diag
        lim = (b[i] - chol[i, :i] @ y[:i]) / diag
        prob = ndtr(lim)
        # conditional mean of a standard normal truncated above at lim
        y[i] = -math.exp(-0.5 * lim * lim) / math.sqrt(2 * math.pi) / prob if prob > 1e-300 else lim
    return perm, b, chol


def _sov_integrand(w: np.ndarray, b: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Separation-of-variables integrand on points ``w`` of shape (m, p-1)."""
    p = len(b)
    m = w.shape[0]
    y = np.empty((m, p - 1))
    e = np.full(m, ndtr(b[0] / chol[0, 0]))
    f = e.copy()
    for i in range(1, p):
        u = np.clip(w[:, i - 1] * e, 1e-300, 1.0 - 1e-16)
        y[:, i - 1] = ndtri(u)
        e = ndtr((b[i] - y[:, :i] @ chol[i, :i]) / chol[i, i])
        f *= e
    return f


def mvn_cdf(upper, mean=None, cov=None, tol: float = DEFAULT_TOL,
            max_points: int = DEFAULT_MAX_POINTS, seed: int = 0) -> CdfResult:
    """P(N(mean, cov) <= upper), coordinatewise.

    Entries of ``upper`` may be +/-inf. The error estimate is three standard
    errors of the mean over independent lattice shifts.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    p = upper.shape[0]
    cov = np.eye(p) if cov is None else _as_cov(cov)
    if cov.shape[0] != p:
        raise DimensionMismatch(f"upper has length {p}, covariance is {cov.shape[0]}x{cov.shape[0]}")
    if p > MAX_DIM:
        raise DimensionMismatch(f"dimension {p} exceeds the supported maximum {MAX_DIM}")
    mean = np.zeros(p) if mean is None else np.broadcast_to(np.asarray(mean, dtype=float), (p,))
    b = upper - mean
    cholesky(cov)  # validates positive definiteness under the jitter policy

    if np.any(b == -np.inf):
        return CdfResult(0.0, 0.0, 0)
    finite = np.isfinite(b)
    if not finite.any():
        return CdfResult(1.0, 0.0, 0)
    if not finite.all():
        # +inf limits integrate out exactly
        idx = np.flatnonzero(finite)
        return mvn_cdf(b[idx], None, cov[np.ix_(idx, idx)], tol, max_points, seed)
    if p == 1:
        return CdfResult(float(ndtr(b[0] / math.sqrt(cov[0, 0]))), 0.0, 1)

    _, bb, chol = _reorder(b, cov)
    rng = np.random.default_rng(seed)
    z = np.sqrt(np.asarray(_PRIMES[: p - 1], dtype=float)) % 1.0
    n = 1 << 9
    evaluations = 0
    while True:
        shifts = rng.random((_N_SHIFTS, p - 1))
        k = np.arange(1, n + 1)[:, None] * z[None, :]
        means = np.empty(_N_SHIFTS)
        for s in range(_N_SHIFTS):
            w = np.abs(2.0 * ((k + shifts[s]) % 1.0) - 1.0)
            means[s] = _sov_integrand(w, bb, chol).mean()
        evaluations += n * _N_SHIFTS
        value = float(means.mean())
        err = 3.0 * float(means.std(ddof=1)) / math.sqrt(_N_SHIFTS)
        if err <= tol or evaluations + 2 * n * _N_SHIFTS > max_points:
            return CdfResult(min(max(value, 0.0), 1.0), err, evaluations)
        n *= 2
