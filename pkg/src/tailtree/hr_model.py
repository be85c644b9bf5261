"""Tree-structured Huesler-Reiss model.

For edge parameters theta, every pair (i, j) has ``lambda_ij^2 = p_ij / 4``
where ``p_ij`` is the sum of squared edge parameters along the tree path.
The log tail tree seen from a node ``u`` is Gaussian with mean
``-p_uv / 2`` and covariance given by shared path segments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import AllZeroInput, DimensionMismatch, NodeOutOfRange, TailTreeError, TreeError
from .mvn import DEFAULT_TOL, mvn_cdf
from .tree_core import Tree, TreeFile, build_tree, parse_tree_text


class HRTreeModel:
    """Immutable (tree, theta) pair; ``theta[e]`` belongs to ``tree.edges[e]``."""

    def __init__(self, tree: Tree, theta: Sequence[float]):
        theta = np.array(theta, dtype=float).ravel()
        if theta.shape[0] != tree.n_edges:
            raise DimensionMismatch(f"tree has {tree.n_edges} edges but {theta.shape[0]} parameters given")
        if not np.all(np.isfinite(theta)) or np.any(theta <= 0):
            raise ValueError("edge parameters must be finite and strictly positive")
        theta.setflags(write=False)
        self.tree = tree
        self.theta = theta
        psum = tree.incidence.astype(float) @ (theta * theta)
        psum.setflags(write=False)
        self._psum = psum

    @property
    def d(self) -> int:
        return self.tree.node_count

    def path_sum(self, a: int, b: int) -> float:
        self.tree.check_node(a)
        self.tree.check_node(b)
        return float(self._psum[a - 1, b - 1])

    def path_sum_matrix(self) -> np.ndarray:
        """d x d matrix of path sums (read-only)."""
        return self._psum

    def __repr__(self):
        return f"HRTreeModel({self.tree!r}, theta={self.theta.tolist()})"


def _nodes(tree: Tree, nodes) -> list[int]:
    out = sorted({int(v) for v in nodes})
    for v in out:
        tree.check_node(v)
    return out


def lambda_matrix(model: HRTreeModel) -> np.ndarray:
    return model.path_sum_matrix() / 4.0


@dataclass(frozen=True)
class MuSigma:
    base: int
    nodes: tuple[int, ...]  # W without the base node, ascending
    mu: np.ndarray
    sigma: np.ndarray


def mu_sigma(model: HRTreeModel, W, u: int) -> MuSigma:
    """Mean and covariance of the log tail tree at ``u`` restricted to ``W``."""
    tree = model.tree
    u = tree.check_node(int(u))
    W = _nodes(tree, W)
    if u not in W:
        raise NodeOutOfRange(f"base node {u} not in the node set")
    if len(W) < 2:
        raise ValueError("node set needs at least two nodes")
    rest = [v for v in W if v != u]
    inc = tree.incidence[u - 1][[v - 1 for v in rest]].astype(float)
    sq = model.theta**2
    sigma = (inc * sq) @ inc.T
    mu = -0.5 * model.path_sum_matrix()[u - 1, [v - 1 for v in rest]]
    return MuSigma(u, tuple(rest), mu, sigma)


def gamma_matrix(lam: np.ndarray, W, u: int) -> np.ndarray:
    """Entries 2(lambda_iu^2 + lambda_ju^2 - lambda_ij^2) over W without u.

    ``lam`` is any d x d matrix of squared lambda values, not necessarily
    tree structured.
    """
    lam = np.asarray(lam, dtype=float)
    W = sorted({int(v) for v in W})
    if u not in W:
        raise NodeOutOfRange(f"base node {u} not in the node set")
    idx = np.array([v - 1 for v in W if v != u])
    sub = lam[np.ix_(idx, idx)]
    col = lam[idx, u - 1]
    return 2.0 * (col[:, None] + col[None, :] - sub)


def stdf_lambda(lam: np.ndarray, U: Sequence[int], x: Sequence[float], tol: float = DEFAULT_TOL) -> float:
    """Huesler-Reiss stdf for an arbitrary matrix of squared lambdas.

    ``x`` is aligned with ``U``. Terms whose coordinate is zero vanish, and a
    zero coordinate in the conditioning vector sends that limit to +inf.
    """
    lam = np.asarray(lam, dtype=float)
    U = [int(v) for v in U]
    x = np.asarray(x, dtype=float)
    if x.shape != (len(U),):
        raise DimensionMismatch(f"x has shape {x.shape}, node set has {len(U)} nodes")
    if len(set(U)) != len(U):
        raise ValueError("node set has repeated nodes")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("stdf arguments must be finite and nonnegative")
    if not np.any(x > 0):
        raise AllZeroInput("stdf needs at least one positive coordinate")
    if len(U) == 1:
        return float(x[0])
    total = 0.0
    with np.errstate(divide="ignore"):
        logx = np.log(x)
    for a, u in enumerate(U):
        if x[a] == 0:
            continue
        others = [b for b in range(len(U)) if b != a]
        upper = np.array([logx[a] - logx[b] + 2.0 * lam[u - 1, U[b] - 1] for b in others])
        cov = gamma_matrix(lam, U, u)
        # gamma_matrix orders by ascending node id; align the limits with it
        order = np.argsort([U[b] for b in others], kind="stable")
        total += x[a] * mvn_cdf(upper[order], None, cov, tol=tol).value
    return float(total)


def stdf(model: HRTreeModel, U: Sequence[int], x: Sequence[float], tol: float = DEFAULT_TOL) -> float:
    U = [model.tree.check_node(int(v)) for v in U]
    return stdf_lambda(lambda_matrix(model), U, x, tol)


def bivariate_extremal_coefficient(path_sum) -> np.ndarray | float:
    """2 Phi(sqrt(p)/2) for path sum ``p``."""
    return 2.0 * ndtr(np.sqrt(path_sum) / 2.0)


def extremal_coefficient(model: HRTreeModel, J, tol: float = DEFAULT_TOL) -> float:
    J = _nodes(model.tree, J)
    if len(J) < 2:
        raise ValueError("extremal coefficient needs at least two nodes")
    if len(J) == 2:
        return float(bivariate_extremal_coefficient(model.path_sum(*J)))
    return stdf(model, J, np.ones(len(J)), tol)


def pickands_from_path_sum(path_sum: float, w):
    w = np.asarray(w, dtype=float)
    if np.any((w < 0) | (w > 1)):
        raise ValueError("w must lie in [0, 1]")
    s = math.sqrt(path_sum)
    inner = (w > 0) & (w < 1)
    wi = np.where(inner, w, 0.5)
    lr = np.log((1 - wi) / wi)
    a = (1 - wi) * ndtr((lr + path_sum / 2) / s) + wi * ndtr((-lr + path_sum / 2) / s)
    out = np.where(inner, a, 1.0)
    return float(out) if out.ndim == 0 else out


def pickands(model: HRTreeModel, u: int, v: int, w):
    """Bivariate Pickands dependence function A(w) for the pair (u, v)."""
    if u == v:
        raise ValueError("Pickands function needs two distinct nodes")
    return pickands_from_path_sum(model.path_sum(u, v), w)


def tail_dep_coefficient(model: HRTreeModel, u: int, v: int) -> float:
    """chi_uv = 2 - l_uv(1, 1) = 2(1 - Phi(sqrt(p_uv)/2)), in [0, 1]."""
    if u == v:
        raise ValueError("tail dependence needs two distinct nodes")
    return float(2.0 * (1.0 - ndtr(math.sqrt(model.path_sum(u, v)) / 2.0)))


# ---------------------------------------------------------------------------
# model files


def model_from_tree_file(tf: TreeFile) -> HRTreeModel:
    if tf.theta is None:
        raise TreeError("model file has no 'theta:' line")
    return HRTreeModel(tf.tree, tf.theta)


def tree_file_to_dict(tf: TreeFile) -> dict:
    return {
        "nodes": tf.tree.node_count,
        "edges": [list(e) for e in tf.tree.edges],
        "latent": list(tf.latent),
        "labels": list(tf.labels) if tf.labels else None,
        "theta": list(tf.theta) if tf.theta is not None else None,
    }


def tree_file_from_dict(obj: dict) -> TreeFile:
    try:
        tree = build_tree(int(obj["nodes"]), [tuple(e) for e in obj["edges"]])
        latent = tuple(sorted(int(v) for v in obj.get("latent") or ()))
        labels = tuple(str(s) for s in obj["labels"]) if obj.get("labels") else None
        theta = tuple(float(t) for t in obj["theta"]) if obj.get("theta") is not None else None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, TailTreeError):
            raise
        raise TreeError(f"malformed model JSON: {exc}") from None
    for v in latent:
        tree.check_node(v)
    if labels and len(labels) != tree.node_count:
        raise TreeError("label count does not match node count")
    if theta is not None and len(theta) != tree.n_edges:
        raise TreeError("theta length does not match edge count")
    return TreeFile(tree, latent, labels, theta)


def read_model_file(path) -> TreeFile:
    """Read a tree file with a ``theta:`` line, or a JSON fit/model document.

    JSON documents carry the model under a top-level ``"model"`` key or at
    the top level itself.
    """
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TreeError(f"malformed model JSON: {exc}") from None
        return tree_file_from_dict(obj.get("model", obj))
    return parse_tree_text(text)


def lambda_to_json(model: HRTreeModel) -> str:
    lam = lambda_matrix(model)
    return json.dumps({"nodes": list(model.tree.nodes), "lambda_squared": lam.tolist()}, indent=2)


def pairwise_ec_jacobian(model: HRTreeModel, pairs) -> np.ndarray:
    """Derivatives of 2 Phi(sqrt(p_J)/2) with respect to each theta_e.

    Entry (J, e) is phi(sqrt(p_J)/2) / sqrt(p_J) * theta_e when e lies on the
    path of J, else 0.
    """
    tree = model.tree
    out = np.zeros((len(pairs), tree.n_edges))
    for r, (a, b) in enumerate(pairs):
        p = model.path_sum(a, b)
        s = math.sqrt(p)
        scale = math.exp(-p / 8.0) / math.sqrt(2.0 * math.pi) / s
        mask = tree.incidence[a - 1, b - 1]
        out[r, mask] = scale * model.theta[mask]
    return out
