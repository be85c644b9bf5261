"""Undirected trees, path-sum algebra and latent-node identifiability.

Nodes are 1-based in every public function; arrays indexed by node use
position ``node - 1``. Edges keep the order in which they were supplied and
are referred to by that position (0 .. d-2).
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    CycleOrDisconnected,
    DuplicateEdge,
    NodeOutOfRange,
    NotIdentifiable,
    SelfLoop,
    TreeError,
)

Pair = tuple[int, int]


def _key(a: int, b: int) -> Pair:
    return (a, b) if a < b else (b, a)


class Tree:
    """Validated undirected tree on nodes ``1..node_count``.

    The all-pairs edge incidence is computed once at construction, so path
    queries are table lookups. Instances are never mutated afterwards.
    """

    def __init__(self, node_count: int, edges: Sequence[Pair]):
        d = int(node_count)
        if d < 2:
            raise TreeError(f"a tree needs at least 2 nodes, got {d}")
        edges = [(int(a), int(b)) for a, b in edges]
        seen = set()
        for a, b in edges:
            for x in (a, b):
                if not 1 <= x <= d:
                    raise NodeOutOfRange(f"node {x} outside 1..{d}")
            if a == b:
                raise SelfLoop(f"self-loop at node {a}")
            if _key(a, b) in seen:
                raise DuplicateEdge(f"edge {a}-{b} listed twice")
            seen.add(_key(a, b))
        if len(edges) != d - 1:
            raise CycleOrDisconnected(f"{d} nodes need {d - 1} edges, got {len(edges)}")

        adjacency: list[list[int]] = [[] for _ in range(d)]
        for a, b in edges:
            adjacency[a - 1].append(b)
            adjacency[b - 1].append(a)

        # BFS from node 1 doubles as the connectivity check
        reached = {1}
        queue = deque([1])
        while queue:
            x = queue.popleft()
            for y in adjacency[x - 1]:
                if y not in reached:
                    reached.add(y)
                    queue.append(y)
        if len(reached) != d:
            raise CycleOrDisconnected("edge list does not connect all nodes")

        self.node_count = d
        self.edges: tuple[Pair, ...] = tuple(edges)
        self.adjacency: tuple[tuple[int, ...], ...] = tuple(tuple(sorted(n)) for n in adjacency)
        self.edge_index: dict[Pair, int] = {_key(a, b): i for i, (a, b) in enumerate(edges)}
        self._parents = [self._bfs_parents(r) for r in range(1, d + 1)]
        inc = np.zeros((d, d, d - 1), dtype=bool)
        dist = np.zeros((d, d), dtype=int)
        for u in range(1, d + 1):
            for v in range(1, d + 1):
                if u != v:
                    idx = self.path_edges(u, v)
                    inc[u - 1, v - 1, idx] = True
                    dist[u - 1, v - 1] = len(idx)
        inc.setflags(write=False)
        dist.setflags(write=False)
        self.incidence = inc
        self.distances = dist

    def _bfs_parents(self, root: int) -> list[int]:
        parent = [0] * (self.node_count + 1)
        parent[root] = -1
        queue = deque([root])
        while queue:
            x = queue.popleft()
            for y in self.adjacency[x - 1]:
                if parent[y] == 0:
                    parent[y] = x
                    queue.append(y)
        return parent

    @property
    def n_edges(self) -> int:
        return self.node_count - 1

    @property
    def nodes(self) -> range:
        return range(1, self.node_count + 1)

    def check_node(self, v: int) -> int:
        if not 1 <= v <= self.node_count:
            raise NodeOutOfRange(f"node {v} outside 1..{self.node_count}")
        return v

    def degree(self, v: int) -> int:
        return len(self.adjacency[self.check_node(v) - 1])

    def path_nodes(self, u: int, v: int) -> list[int]:
        """Node sequence u, ..., v along the unique path."""
        self.check_node(u)
        self.check_node(v)
        parent = self._parents[v - 1]  # rooted at v, so walk up from u
        out = [u]
        while out[-1] != v:
            out.append(parent[out[-1]])
        return out

    def path(self, u: int, v: int) -> list[Pair]:
        """Oriented edges traversed from ``u`` to ``v``."""
        if u == v:
            raise TreeError("path needs two distinct nodes")
        nodes = self.path_nodes(u, v)
        return list(zip(nodes[:-1], nodes[1:]))

    def path_edges(self, u: int, v: int) -> list[int]:
        """Edge positions traversed from ``u`` to ``v`` (empty when u == v)."""
        nodes = self.path_nodes(u, v)
        return [self.edge_index[_key(a, b)] for a, b in zip(nodes[:-1], nodes[1:])]

    def branch(self, center: int, neighbor: int) -> list[int]:
        """Nodes reachable from ``neighbor`` without passing ``center``, in BFS order.

        Neighbors are visited in increasing id, so the order is deterministic.
        """
        out = [neighbor]
        seen = {center, neighbor}
        queue = deque([neighbor])
        while queue:
            x = queue.popleft()
            for y in self.adjacency[x - 1]:
                if y not in seen:
                    seen.add(y)
                    out.append(y)
                    queue.append(y)
        return out

    def relabel(self, perm: Mapping[int, int]) -> "Tree":
        return Tree(self.node_count, [(perm[a], perm[b]) for a, b in self.edges])

    def __eq__(self, other):
        return (
            isinstance(other, Tree)
            and self.node_count == other.node_count
            and self.edges == other.edges
        )

    def __hash__(self):
        return hash((self.node_count, self.edges))

    def __repr__(self):
        return f"Tree(node_count={self.node_count}, edges={list(self.edges)})"


def build_tree(node_count: int, edges: Sequence[Pair]) -> Tree:
    return Tree(node_count, edges)


def node_set(tree: Tree, nodes: Iterable[int]) -> frozenset[int]:
    return frozenset(tree.check_node(int(v)) for v in nodes)


def all_pairs(nodes: Iterable[int]) -> list[Pair]:
    return list(itertools.combinations(sorted(nodes), 2))


# ---------------------------------------------------------------------------
# path sums


@dataclass(frozen=True)
class PathSumCoefficients:
    rows: tuple[Pair, ...]
    matrix: np.ndarray  # int8, shape (len(rows), d - 1)

    def rank(self) -> int:
        return exact_rank(self.matrix)

    def apply(self, squared_theta) -> np.ndarray:
        return self.matrix @ np.asarray(squared_theta, dtype=float)


def path_sum_matrix(tree: Tree, pairs: Sequence[Pair]) -> PathSumCoefficients:
    rows = []
    for a, b in pairs:
        tree.check_node(a)
        tree.check_node(b)
        if a == b:
            raise TreeError(f"degenerate pair ({a}, {b})")
        rows.append((int(a), int(b)))
    if len(set(_key(a, b) for a, b in rows)) != len(rows):
        raise TreeError("pairs must be distinct")
    mat = np.zeros((len(rows), tree.n_edges), dtype=np.int8)
    for i, (a, b) in enumerate(rows):
        mat[i] = tree.incidence[a - 1, b - 1]
    return PathSumCoefficients(tuple(rows), mat)


def path_sums(tree: Tree, squared_theta: Sequence) -> dict[Pair, object]:
    """Map every unordered pair (a < b) to its path sum.

    Works with floats or ``Fraction`` entries; the arithmetic type of the
    input is preserved.
    """
    out = {}
    for a, b in itertools.combinations(tree.nodes, 2):
        total = 0
        for e in tree.path_edges(a, b):
            total = total + squared_theta[e]
        out[(a, b)] = total
    return out


def exact_rank(matrix) -> int:
    """Rank of an integer matrix by fraction-free (Bareiss) elimination."""
    m = [[int(x) for x in row] for row in np.asarray(matrix)]
    if not m:
        return 0
    n_rows, n_cols = len(m), len(m[0])
    rank = 0
    prev = 1
    for col in range(n_cols):
        pivot = next((r for r in range(rank, n_rows) if m[r][col] != 0), None)
        if pivot is None:
            continue
        m[rank], m[pivot] = m[pivot], m[rank]
        p = m[rank][col]
        for r in range(rank + 1, n_rows):
            for c in range(col + 1, n_cols):
                # exact division is guaranteed by Sylvester's identity
                m[r][c] = (p * m[r][c] - m[r][col] * m[rank][c]) // prev
            m[r][col] = 0
        prev = p
        rank += 1
        if rank == n_rows:
            break
    return rank


# ---------------------------------------------------------------------------
# identifiability


class DegreeCheck(NamedTuple):
    identifiable: bool
    violators: tuple[tuple[int, int], ...]  # (latent node, degree)


def _observed(tree: Tree, observed) -> frozenset[int]:
    obs = node_set(tree, observed)
    if not obs:
        raise TreeError("observed node set must be non-empty")
    return obs


def check_identifiability_degree(tree: Tree, observed) -> DegreeCheck:
    obs = _observed(tree, observed)
    bad = tuple((v, tree.degree(v)) for v in tree.nodes if v not in obs and tree.degree(v) < 3)
    return DegreeCheck(not bad, bad)


def check_identifiability_rank(tree: Tree, observed) -> bool:
    obs = _observed(tree, observed)
    pairs = all_pairs(obs)
    if not pairs:
        return False
    return path_sum_matrix(tree, pairs).rank() == tree.n_edges


# ---------------------------------------------------------------------------
# extraction plans


@dataclass(frozen=True)
class ExtractionPlan:
    """Per edge, a sparse rational combination of observable path sums equal to theta_e^2."""

    terms: tuple[dict[Pair, Fraction], ...] = field(default_factory=tuple)

    def evaluate(self, sums: Mapping[Pair, object]) -> list:
        out = []
        for combo in self.terms:
            total = 0
            for (a, b), c in combo.items():
                value = sums[_key(a, b)]
                total = total + (c * value if isinstance(value, Fraction) else float(c) * value)
            out.append(total)
        return out

    def describe(self, tree: Tree) -> list[str]:
        lines = []
        for e, combo in enumerate(self.terms):
            a, b = tree.edges[e]
            parts = [f"{'-' if c < 0 else '+'}{abs(c)} p({x},{y})" for (x, y), c in sorted(combo.items())]
            lines.append(f"theta[{a}-{b}]^2 = " + " ".join(parts))
        return lines


def _nearest_observed(tree: Tree, center: int, neighbor: int, obs) -> int:
    for x in tree.branch(center, neighbor):
        if x in obs:
            return x
    # unreachable when every leaf is observed
    raise NotIdentifiable(f"no observed node behind {neighbor} as seen from {center}")


def _hub_distance(tree: Tree, hub: int, toward: int, obs, target: int | None = None) -> dict[Pair, Fraction]:
    """Combination of observable path sums equal to p(hub, target).

    ``target`` must lie behind ``toward``; it defaults to the first observed
    node found there. The two reference nodes come from the other branches.
    """
    if target is None:
        target = _nearest_observed(tree, hub, toward, obs)
    others = sorted(_nearest_observed(tree, hub, y, obs) for y in tree.adjacency[hub - 1] if y != toward)
    w_hat, x_hat = others[0], others[1]
    half = Fraction(1, 2)
    combo: dict[Pair, Fraction] = {}
    for pair, c in ((_key(target, w_hat), half), (_key(target, x_hat), half), (_key(w_hat, x_hat), -half)):
        combo[pair] = combo.get(pair, Fraction(0)) + c
    return combo


def extraction_plan(tree: Tree, observed) -> ExtractionPlan:
    obs = _observed(tree, observed)
    check = check_identifiability_degree(tree, obs)
    if not check.identifiable:
        raise NotIdentifiable(
            "latent nodes with degree < 3: " + ", ".join(f"{v} (degree {g})" for v, g in check.violators),
            violators=[v for v, _ in check.violators],
        )
    terms = []
    for a, b in tree.edges:
        if a in obs and b in obs:
            terms.append({_key(a, b): Fraction(1)})
            continue
        u, v = (a, b) if a not in obs else (b, a)
        combo = _hub_distance(tree, u, v, obs)
        if v not in obs:
            # theta_e^2 = p(u, v_hat) - p(v, v_hat), v_hat seen from u through v
            v_hat = _nearest_observed(tree, u, v, obs)
            branch_of = next(y for y in tree.adjacency[v - 1] if y != u and v_hat in tree.branch(v, y))
            for pair, c in _hub_distance(tree, v, branch_of, obs, target=v_hat).items():
                combo[pair] = combo.get(pair, Fraction(0)) - c
        terms.append({p: c for p, c in combo.items() if c != 0})
    return ExtractionPlan(tuple(terms))


# ---------------------------------------------------------------------------
# text format


@dataclass
class TreeFile:
    tree: Tree
    latent: tuple[int, ...] = ()
    labels: tuple[str, ...] | None = None
    theta: tuple[float, ...] | None = None

    @property
    def observed(self) -> frozenset[int]:
        return frozenset(v for v in self.tree.nodes if v not in self.latent)

    def label(self, v: int) -> str:
        return self.labels[v - 1] if self.labels else str(v)


def parse_tree_text(text: str) -> TreeFile:
    """Parse the tree text format.

    First non-comment line is ``d``; then ``d-1`` lines ``a b``. Optional
    ``# latent: ...`` and ``# labels: ...`` comments and a ``theta: ...`` line
    may appear anywhere. Other ``#`` lines are ignored.
    """
    latent: tuple[int, ...] = ()
    labels = None
    theta = None
    body = []
    try:
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                content = line[1:].strip()
                if content.startswith("latent:"):
                    latent = tuple(int(t) for t in content[len("latent:"):].split())
                elif content.startswith("labels:"):
                    labels = tuple(content[len("labels:"):].split())
                continue
            if line.startswith("theta:"):
                theta = tuple(float(t) for t in line[len("theta:"):].split())
                continue
            body.append(line)
        if not body:
            raise TreeError("empty tree file")
        d = int(body[0])
        edges = []
        for line in body[1:]:
            a, b = line.split()
            edges.append((int(a), int(b)))
    except ValueError as exc:
        raise TreeError(f"malformed tree file: {exc}") from None
    tree = Tree(d, edges)
    for v in latent:
        tree.check_node(v)
    if labels is not None and len(labels) != d:
        raise TreeError(f"expected {d} labels, got {len(labels)}")
    if theta is not None and len(theta) != d - 1:
        raise TreeError(f"expected {d - 1} theta values, got {len(theta)}")
    return TreeFile(tree, tuple(sorted(set(latent))), labels, theta)


def format_tree_text(tf: TreeFile) -> str:
    lines = [str(tf.tree.node_count)]
    lines += [f"{a} {b}" for a, b in tf.tree.edges]
    if tf.latent:
        lines.append("# latent: " + " ".join(str(v) for v in tf.latent))
    if tf.labels:
        lines.append("# labels: " + " ".join(tf.labels))
    if tf.theta is not None:
        lines.append("theta: " + " ".join(repr(float(t)) for t in tf.theta))
    return "\n".join(lines) + "\n"


def read_tree_file(path) -> TreeFile:
    return parse_tree_text(Path(path).read_text())


def write_tree_file(path, tf: TreeFile) -> None:
    Path(path).write_text(format_tree_text(tf))
